#pragma once

// Finite-difference checks for the tape, shared by the unit tests and the
// acceptance binary.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "pbi/autodiff.hpp"

namespace gradcheck {

using pbi::ad::Tape;
using pbi::ad::Var;

/// |a - b| / max(|a|, |b|), with a 1e-8 floor so exact zeros compare absolutely.
inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8}); }

template <class S>
using Fn = std::function<S(const std::vector<S>&)>;

/// Worst relative error between reverse-mode and central differences (step h).
inline double check(const Fn<Var>& f_var, const Fn<double>& f_dbl, const std::vector<double>& x, double h = 1e-5) {
  Tape tape;
  std::vector<Var> leaves;
  for (double v : x) leaves.push_back(tape.variable(v));
  const Var out = f_var(leaves);
  const auto g = tape.backward(out);
  double worst = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::vector<double> xp = x, xm = x;
    xp[i] += h;
    xm[i] -= h;
    const double fd = (f_dbl(xp) - f_dbl(xm)) / (2.0 * h);
    worst = std::max(worst, rel_err(g[leaves[i]], fd));
  }
  return worst;
}

struct Primitive {
  std::string name;
  Fn<Var> f_var;
  Fn<double> f_dbl;
  int arity;
  bool positive;  // inputs must be > 0
};

inline std::vector<Primitive> primitives() {
  using namespace pbi::ad;
  std::vector<Primitive> p;
  p.push_back({"add", [](auto& v) { return v[0] + v[1]; }, [](auto& v) { return v[0] + v[1]; }, 2, false});
  p.push_back({"sub", [](auto& v) { return v[0] - v[1]; }, [](auto& v) { return v[0] - v[1]; }, 2, false});
  p.push_back({"mul", [](auto& v) { return v[0] * v[1]; }, [](auto& v) { return v[0] * v[1]; }, 2, false});
  p.push_back({"div", [](auto& v) { return v[0] / v[1]; }, [](auto& v) { return v[0] / v[1]; }, 2, true});
  p.push_back({"neg", [](auto& v) { return -v[0]; }, [](auto& v) { return -v[0]; }, 1, false});
  p.push_back({"scalar_ops", [](auto& v) { return 2.0 * v[0] - 1.5 + 3.0 / v[0]; },
               [](auto& v) { return 2.0 * v[0] - 1.5 + 3.0 / v[0]; }, 1, true});
  p.push_back({"exp", [](auto& v) { return exp(v[0]); }, [](auto& v) { return std::exp(v[0]); }, 1, false});
  p.push_back({"log", [](auto& v) { return log(v[0]); }, [](auto& v) { return std::log(v[0]); }, 1, true});
  p.push_back({"sqrt", [](auto& v) { return sqrt(v[0]); }, [](auto& v) { return std::sqrt(v[0]); }, 1, true});
  p.push_back({"tanh", [](auto& v) { return tanh(v[0]); }, [](auto& v) { return std::tanh(v[0]); }, 1, false});
  p.push_back({"square", [](auto& v) { return square(v[0]); }, [](auto& v) { return v[0] * v[0]; }, 1, false});
  p.push_back({"relu", [](auto& v) { return relu(v[0]); }, [](auto& v) { return std::max(v[0], 0.0); }, 1, false});
  p.push_back({"gaussian_log_pdf", [](auto& v) { return gaussian_log_pdf(v[0], v[1], v[2]); },
               [](auto& v) { return gaussian_log_pdf(v[0], v[1], v[2]); }, 3, true});
  p.push_back({"reduce_sum", [](auto& v) { return reduce_sum(std::span<const Var>(v)); },
               [](auto& v) { return v[0] + v[1] + v[2] + v[3]; }, 4, false});
  p.push_back({"dot",
               [](auto& v) {
                 return dot(std::span<const Var>(v.data(), 2), std::span<const Var>(v.data() + 2, 2));
               },
               [](auto& v) { return v[0] * v[2] + v[1] * v[3]; }, 4, false});
  return p;
}

/// Worst error over `trials` random inputs per primitive; relu inputs keep
/// clear of the kink.
inline double check_primitive(const Primitive& p, int trials, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.2, 2.0);
  std::bernoulli_distribution sign(0.5);
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    std::vector<double> x(static_cast<std::size_t>(p.arity));
    for (double& v : x) v = p.positive ? u(rng) : (sign(rng) ? u(rng) : -u(rng));
    worst = std::max(worst, check(p.f_var, p.f_dbl, x));
  }
  return worst;
}

/// Random expression graph: each op reads earlier values and appends one.
/// Inputs to exp/log/sqrt/div are squashed into safe ranges by tanh so every
/// node stays finite and smooth.
struct Composite {
  struct Op {
    int kind;
    std::size_t a, b;
    double c;
  };
  std::size_t inputs = 3;
  std::vector<Op> ops;

  template <class S>
  S eval(const std::vector<S>& x) const {
    using std::exp;
    using std::log;
    using std::sqrt;
    using std::tanh;
    using pbi::ad::exp;
    using pbi::ad::log;
    using pbi::ad::sqrt;
    using pbi::ad::tanh;
    std::vector<S> v = x;
    for (const Op& op : ops) {
      const S& a = v[op.a];
      const S& b = v[op.b];
      switch (op.kind) {
        case 0: v.push_back(a + b); break;
        case 1: v.push_back(a - b); break;
        case 2: v.push_back(a * tanh(b)); break;
        case 3: v.push_back(a / (2.0 + tanh(b))); break;
        case 4: v.push_back(exp(tanh(a))); break;
        case 5: v.push_back(log(1.5 + tanh(a))); break;
        case 6: v.push_back(sqrt(1.2 + tanh(a))); break;
        case 7: v.push_back(tanh(a) * op.c); break;
        case 8: v.push_back(-a + op.c); break;
        default: v.push_back(a * a * 0.5); break;
      }
    }
    return v.back();
  }

  /// Number of tape nodes one evaluation records (leaves excluded).
  std::size_t tape_nodes(const std::vector<double>& x) const {
    Tape tape;
    std::vector<Var> leaves;
    for (double v : x) leaves.push_back(tape.variable(v));
    eval(leaves);
    return tape.size() - x.size();
  }
};

/// Ops are appended until the tape holds at least `min_nodes` nodes.
inline Composite random_composite(std::size_t min_nodes, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> kind(0, 9);
  std::uniform_real_distribution<double> c(-1.5, 1.5);
  Composite comp;
  const std::vector<double> probe(comp.inputs, 0.3);
  while (comp.tape_nodes(probe) < min_nodes) {
    const std::size_t n = comp.inputs + comp.ops.size();
    // favour recent values so the graph is deep rather than wide
    std::uniform_int_distribution<std::size_t> pick(n > 6 ? n - 6 : 0, n - 1);
    comp.ops.push_back({kind(rng), pick(rng), pick(rng), c(rng)});
  }
  return comp;
}

inline double check_composite(const Composite& comp, const std::vector<double>& x) {
  return check([&](const std::vector<Var>& v) { return comp.eval(v); },
               [&](const std::vector<double>& v) { return comp.eval(v); }, x);
}

}  // namespace gradcheck
