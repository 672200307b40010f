#pragma once

// Minimal reverse-mode differentiation tape.
//
// Nodes are appended in evaluation order, so the node index is a topological
// order and the reverse sweep is a single backwards pass over the tape.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "pbi/common.hpp"

namespace pbi::ad {

struct EvaluationError : NumericalError {
  using NumericalError::NumericalError;
};

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t index) : tape_(tape), index_(index) {}

  double value() const;
  Tape* tape() const { return tape_; }
  std::size_t index() const { return index_; }

 private:
  Tape* tape_ = nullptr;
  std::size_t index_ = 0;
};

class Gradients {
 public:
  explicit Gradients(std::vector<double> adjoints) : adjoints_(std::move(adjoints)) {}
  double operator[](const Var& v) const { return v.index() < adjoints_.size() ? adjoints_[v.index()] : 0.0; }
  std::size_t size() const { return adjoints_.size(); }

 private:
  std::vector<double> adjoints_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var variable(double value) { return push_leaf(value, true); }
  Var constant(double value) { return push_leaf(value, false); }

  double value(std::size_t i) const { return nodes_[i].value; }
  bool requires_grad(std::size_t i) const { return nodes_[i].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  struct Edge {
    std::size_t parent;
    double partial;
  };

  /// Records a node whose local partials are given per parent.
  Var push(double value, std::span<const Edge> edges) {
    if (!std::isfinite(value)) throw EvaluationError("autodiff: non-finite value produced");
    Node node;
    node.value = value;
    node.edge_begin = edges_.size();
    for (const Edge& e : edges) {
      if (!nodes_[e.parent].requires_grad) continue;
      edges_.push_back(e);
      node.requires_grad = true;
    }
    node.edge_count = edges_.size() - node.edge_begin;
    nodes_.push_back(node);
    return {this, nodes_.size() - 1};
  }

  Gradients backward(const Var& output) {
    if (output.tape() != this) throw InvalidArgument("backward: output belongs to another tape");
    if (used_) throw InvalidArgument("backward: tape already consumed; create a new tape");
    used_ = true;
    std::vector<double> adj(nodes_.size(), 0.0);
    adj[output.index()] = 1.0;
    for (std::size_t i = output.index() + 1; i-- > 0;) {
      const Node& n = nodes_[i];
      if (adj[i] == 0.0) continue;
      for (std::size_t e = n.edge_begin; e < n.edge_begin + n.edge_count; ++e)
        adj[edges_[e].parent] += adj[i] * edges_[e].partial;
    }
    return Gradients(std::move(adj));
  }

  Gradients backward(std::span<const Var> outputs) {
    if (outputs.size() != 1) throw InvalidArgument("backward: output must be a scalar");
    return backward(outputs[0]);
  }

 private:
  struct Node {
    double value = 0.0;
    std::size_t edge_begin = 0;
    std::size_t edge_count = 0;
    bool requires_grad = false;
  };

  Var push_leaf(double value, bool grad) {
    if (!std::isfinite(value)) throw EvaluationError("autodiff: non-finite leaf value");
    Node node;
    node.value = value;
    node.edge_begin = edges_.size();
    node.requires_grad = grad;
    nodes_.push_back(node);
    return {this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::vector<Edge> edges_;
  bool used_ = false;
};

inline double Var::value() const { return tape_->value(index_); }

namespace detail {

inline Tape* common_tape(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw InvalidArgument("autodiff: operands recorded on different tapes");
  return a.tape();
}

inline Var unary(const Var& a, double value, double partial) {
  const Tape::Edge e[] = {{a.index(), partial}};
  return a.tape()->push(value, e);
}

inline Var binary(const Var& a, const Var& b, double value, double da, double db) {
  Tape* t = common_tape(a, b);
  const Tape::Edge e[] = {{a.index(), da}, {b.index(), db}};
  return t->push(value, e);
}

}  // namespace detail

inline Var operator+(const Var& a, const Var& b) { return detail::binary(a, b, a.value() + b.value(), 1.0, 1.0); }
inline Var operator-(const Var& a, const Var& b) { return detail::binary(a, b, a.value() - b.value(), 1.0, -1.0); }
inline Var operator*(const Var& a, const Var& b) {
  return detail::binary(a, b, a.value() * b.value(), b.value(), a.value());
}
inline Var operator/(const Var& a, const Var& b) {
  const double bv = b.value();
  if (bv == 0.0) throw EvaluationError("autodiff: division by zero");
  return detail::binary(a, b, a.value() / bv, 1.0 / bv, -a.value() / (bv * bv));
}
inline Var operator-(const Var& a) { return detail::unary(a, -a.value(), -1.0); }

inline Var operator+(const Var& a, double b) { return detail::unary(a, a.value() + b, 1.0); }
inline Var operator+(double a, const Var& b) { return detail::unary(b, a + b.value(), 1.0); }
inline Var operator-(const Var& a, double b) { return detail::unary(a, a.value() - b, 1.0); }
inline Var operator-(double a, const Var& b) { return detail::unary(b, a - b.value(), -1.0); }
inline Var operator*(const Var& a, double b) { return detail::unary(a, a.value() * b, b); }
inline Var operator*(double a, const Var& b) { return detail::unary(b, a * b.value(), a); }
inline Var operator/(const Var& a, double b) {
  if (b == 0.0) throw EvaluationError("autodiff: division by zero");
  return detail::unary(a, a.value() / b, 1.0 / b);
}
inline Var operator/(double a, const Var& b) {
  const double bv = b.value();
  if (bv == 0.0) throw EvaluationError("autodiff: division by zero");
  return detail::unary(b, a / bv, -a / (bv * bv));
}

inline Var& operator+=(Var& a, const Var& b) { return a = a + b; }
inline Var& operator-=(Var& a, const Var& b) { return a = a - b; }
inline Var& operator*=(Var& a, const Var& b) { return a = a * b; }

inline Var exp(const Var& a) {
  const double v = std::exp(a.value());
  return detail::unary(a, v, v);
}
inline Var log(const Var& a) {
  if (!(a.value() > 0.0)) throw EvaluationError("autodiff: log of non-positive value");
  return detail::unary(a, std::log(a.value()), 1.0 / a.value());
}
inline Var sqrt(const Var& a) {
  if (!(a.value() >= 0.0)) throw EvaluationError("autodiff: sqrt of negative value");
  const double v = std::sqrt(a.value());
  return detail::unary(a, v, 0.5 / v);
}
inline Var tanh(const Var& a) {
  const double v = std::tanh(a.value());
  return detail::unary(a, v, 1.0 - v * v);
}
inline Var square(const Var& a) { return detail::unary(a, a.value() * a.value(), 2.0 * a.value()); }
inline Var relu(const Var& a) { return detail::unary(a, a.value() > 0.0 ? a.value() : 0.0, a.value() > 0.0 ? 1.0 : 0.0); }

/// Identity in the forward pass, constant in the reverse pass.
inline Var stop_gradient(const Var& a) { return a.tape()->constant(a.value()); }

/// log N(x; mean, std^2) as a single fused node.
inline Var gaussian_log_pdf(const Var& x, const Var& mean, const Var& std) {
  const double s = std.value();
  if (!(s > 0.0)) throw EvaluationError("autodiff: gaussian_log_pdf needs std > 0");
  const double r = (x.value() - mean.value()) / s;
  const double v = -0.5 * r * r - std::log(s) - 0.5 * std::log(2.0 * std::numbers::pi);
  Tape* t = detail::common_tape(x, mean);
  detail::common_tape(x, std);
  const Tape::Edge e[] = {{x.index(), -r / s}, {mean.index(), r / s}, {std.index(), (r * r - 1.0) / s}};
  return t->push(v, e);
}

inline Var reduce_sum(std::span<const Var> xs) {
  if (xs.empty()) throw InvalidArgument("reduce_sum: empty input");
  Tape* t = xs[0].tape();
  std::vector<Tape::Edge> edges;
  edges.reserve(xs.size());
  double v = 0.0;
  for (const Var& x : xs) {
    if (x.tape() != t) throw InvalidArgument("autodiff: operands recorded on different tapes");
    v += x.value();
    edges.push_back({x.index(), 1.0});
  }
  return t->push(v, edges);
}

inline Var dot(std::span<const Var> a, std::span<const Var> b) {
  if (a.size() != b.size() || a.empty()) throw InvalidArgument("dot: size mismatch or empty");
  Tape* t = a[0].tape();
  std::vector<Tape::Edge> edges;
  edges.reserve(2 * a.size());
  double v = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].tape() != t || b[i].tape() != t) throw InvalidArgument("autodiff: operands recorded on different tapes");
    v += a[i].value() * b[i].value();
    edges.push_back({a[i].index(), b[i].value()});
    edges.push_back({b[i].index(), a[i].value()});
  }
  return t->push(v, edges);
}

// Plain-double counterparts so the same templated model code runs with or
// without a tape.
inline double value_of(double x) { return x; }
inline double value_of(const Var& x) { return x.value(); }
inline double stop_gradient(double x) { return x; }
inline double square(double x) { return x * x; }
inline double relu(double x) { return x > 0.0 ? x : 0.0; }
inline double gaussian_log_pdf(double x, double mean, double std) {
  const double r = (x - mean) / std;
  return -0.5 * r * r - std::log(std) - 0.5 * std::log(2.0 * std::numbers::pi);
}
inline double reduce_sum(std::span<const double> xs) {
  double v = 0.0;
  for (double x : xs) v += x;
  return v;
}

/// Lifts a double into scalar type S (a constant when S is Var).
template <class S>
S lift(double x, Tape* tape) {
  if constexpr (std::is_same_v<S, Var>) {
    return tape->constant(x);
  } else {
    (void)tape;
    return x;
  }
}

}  // namespace pbi::ad
