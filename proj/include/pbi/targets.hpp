#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "pbi/autodiff.hpp"
#include "pbi/common.hpp"

namespace pbi {

/// E[x_coordinate^power] in the original (untransformed) space.
struct ReferenceMoment {
  std::string name;
  int coordinate = 0;
  int power = 1;
  double exact = 0.0;
};

/// Gradient of log pi for every row of a particle matrix.
using GradientField = std::function<Matrix(const Matrix&)>;

/// Type-erased differentiable unnormalized log-density over R^dim.
struct TargetModel {
  std::string name;
  int dim = 0;
  std::function<double(const Vector&)> log_density;
  std::function<Vector(const Vector&)> grad_log_density;
  std::vector<ReferenceMoment> reference_moments;
  /// Maps sampler-space coordinates back to the space moments refer to.
  std::function<Vector(const Vector&)> to_original = [](const Vector& z) { return z; };

  Matrix grad_rows(const Matrix& z) const {
    Matrix g(z.rows(), z.cols());
    for (Eigen::Index i = 0; i < z.rows(); ++i) g.row(i) = grad_log_density(z.row(i).transpose()).transpose();
    return g;
  }

  GradientField field() const {
    return [self = *this](const Matrix& z) { return self.grad_rows(z); };
  }
};

namespace detail {

template <class S>
S log_sum_exp(std::span<const S> terms) {
  using std::exp;
  using std::log;
  using ad::value_of;
  double m = value_of(terms[0]);
  for (const S& t : terms) m = std::max(m, value_of(t));
  S acc = exp(terms[0] - m);
  for (std::size_t k = 1; k < terms.size(); ++k) acc = acc + exp(terms[k] - m);
  return log(acc) + m;
}

inline constexpr double half_log_two_pi = 0.91893853320467274178;

}  // namespace detail

struct StdGaussian {
  int dim = 2;

  template <class S>
  S log_density(std::span<const S> z) const {
    S acc = -0.5 * (z[0] * z[0]);
    for (std::size_t i = 1; i < z.size(); ++i) acc = acc - 0.5 * (z[i] * z[i]);
    return acc;
  }

  template <class S>
  std::vector<S> grad_log_density(std::span<const S> z) const {
    std::vector<S> g;
    g.reserve(z.size());
    for (const S& zi : z) g.push_back(-zi);
    return g;
  }
};

/// Two-component exponential mixture, sampled in y = log z.
struct MixtureOfExponentials {
  std::array<double, 2> rates{1.5, 0.5};
  std::array<double, 2> weights{1.0 / 3.0, 2.0 / 3.0};
  int dim = 1;

  /// log p(y) = y + log sum_i w_i lambda_i exp(-lambda_i e^y)
  template <class S>
  S log_density(std::span<const S> y) const {
    using std::exp;
    const S z = exp(y[0]);
    std::array<S, 2> terms{std::log(weights[0] * rates[0]) - rates[0] * z,
                           std::log(weights[1] * rates[1]) - rates[1] * z};
    return y[0] + detail::log_sum_exp<S>(terms);
  }

  template <class S>
  std::vector<S> grad_log_density(std::span<const S> y) const {
    using std::exp;
    using ad::value_of;
    const S z = exp(y[0]);
    std::array<S, 2> terms{std::log(weights[0] * rates[0]) - rates[0] * z,
                           std::log(weights[1] * rates[1]) - rates[1] * z};
    const S lse = detail::log_sum_exp<S>(terms);
    S mean_rate = exp(terms[0] - lse) * rates[0] + exp(terms[1] - lse) * rates[1];
    return {1.0 - mean_rate * z};
  }

  /// E[z^n] = sum_i w_i n! / lambda_i^n
  double moment(int n) const {
    double fact = 1.0;
    for (int k = 2; k <= n; ++k) fact *= k;
    double m = 0.0;
    for (std::size_t i = 0; i < 2; ++i) m += weights[i] * fact / std::pow(rates[i], n);
    return m;
  }
};

/// Equal-weight 3x3 grid of isotropic 2D Gaussians at {-2,0,2}^2.
struct MogGrid {
  double variance = 0.1;
  int dim = 2;

  static constexpr std::array<double, 3> offsets{-2.0, 0.0, 2.0};

  template <class S>
  std::array<S, 9> component_terms(std::span<const S> z) const {
    std::array<S, 9> t;
    std::size_t k = 0;
    for (double cx : offsets)
      for (double cy : offsets) {
        const S dx = z[0] - cx;
        const S dy = z[1] - cy;
        t[k++] = -(dx * dx + dy * dy) / (2.0 * variance);
      }
    return t;
  }

  template <class S>
  S log_density(std::span<const S> z) const {
    const auto t = component_terms(z);
    return detail::log_sum_exp<S>(t);
  }

  template <class S>
  std::vector<S> grad_log_density(std::span<const S> z) const {
    using std::exp;
    const auto t = component_terms(z);
    const S lse = detail::log_sum_exp<S>(t);
    S gx = 0.0 * z[0];
    S gy = 0.0 * z[1];
    std::size_t k = 0;
    for (double cx : offsets)
      for (double cy : offsets) {
        const S w = exp(t[k++] - lse);
        gx = gx + w * (cx - z[0]);
        gy = gy + w * (cy - z[1]);
      }
    return {gx / variance, gy / variance};
  }

  double second_moment() const {
    double s = 0.0;
    for (double c : offsets) s += c * c;
    return variance + s / 3.0;
  }
};

enum class ScaleConvention { standard_deviation, variance };

/// z1 ~ N(0, top_scale), z2 | z1 ~ N(0, exp(z1)); scales are standard
/// deviations by default.
struct Funnel {
  double top_scale = 1.35;
  ScaleConvention convention = ScaleConvention::standard_deviation;
  int dim = 2;

  double top_std() const {
    return convention == ScaleConvention::standard_deviation ? top_scale : std::sqrt(top_scale);
  }
  /// log std of z2 is log_std_rate * z1.
  double log_std_rate() const { return convention == ScaleConvention::standard_deviation ? 1.0 : 0.5; }

  template <class S>
  S log_density(std::span<const S> z) const {
    using std::exp;
    const double s1 = top_std();
    const double c = log_std_rate();
    return -0.5 * (z[0] * z[0]) / (s1 * s1) - std::log(s1) - 0.5 * (z[1] * z[1]) * exp(-2.0 * c * z[0]) -
           c * z[0] - 2.0 * detail::half_log_two_pi;
  }

  template <class S>
  std::vector<S> grad_log_density(std::span<const S> z) const {
    using std::exp;
    const double s1 = top_std();
    const double c = log_std_rate();
    const S prec2 = exp(-2.0 * c * z[0]);
    return {-z[0] / (s1 * s1) + c * (z[1] * z[1]) * prec2 - c, -z[1] * prec2};
  }
};

/// Max relative error between the analytic gradient and central differences
/// (step h) at a point; relative to max(1, |fd|).
inline double gradient_audit_error(const TargetModel& t, const Vector& z, double h = 1e-5) {
  const Vector g = t.grad_log_density(z);
  double worst = 0.0;
  for (Eigen::Index i = 0; i < z.size(); ++i) {
    Vector zp = z, zm = z;
    zp[i] += h;
    zm[i] -= h;
    const double fd = (t.log_density(zp) - t.log_density(zm)) / (2.0 * h);
    worst = std::max(worst, std::abs(g[i] - fd) / std::max(1.0, std::abs(fd)));
  }
  return worst;
}

/// Wraps a templated target and audits its gradient against finite differences.
template <class T>
TargetModel make_target(T model, std::string name, std::vector<ReferenceMoment> moments = {},
                        std::function<Vector(const Vector&)> to_original = {}) {
  TargetModel tm;
  tm.name = std::move(name);
  tm.dim = model.dim;
  tm.log_density = [model](const Vector& z) {
    return model.template log_density<double>(std::span<const double>(z.data(), static_cast<std::size_t>(z.size())));
  };
  tm.grad_log_density = [model](const Vector& z) {
    auto g = model.template grad_log_density<double>(std::span<const double>(z.data(), static_cast<std::size_t>(z.size())));
    return Vector(Eigen::Map<const Vector>(g.data(), static_cast<Eigen::Index>(g.size())));
  };
  tm.reference_moments = std::move(moments);
  if (to_original) tm.to_original = std::move(to_original);

  NormalStream probe(0x5eed, 0, 7);
  for (int k = 0; k < 8; ++k) {
    Vector z(tm.dim);
    for (int i = 0; i < tm.dim; ++i) z[i] = probe.normal();
    const double err = gradient_audit_error(tm, z);
    if (!(err < 1e-5)) {
      std::ostringstream msg;
      msg << "make_target(" << tm.name << "): gradient audit failed, relative error " << err;
      throw NumericalError(msg.str());
    }
  }
  return tm;
}

inline TargetModel std_gaussian(int d) {
  if (d < 1) throw InvalidArgument("std_gaussian: dimension must be >= 1");
  std::vector<ReferenceMoment> m;
  for (int i = 0; i < d; ++i) {
    m.push_back({"mean_" + std::to_string(i), i, 1, 0.0});
    m.push_back({"second_" + std::to_string(i), i, 2, 1.0});
  }
  return make_target(StdGaussian{d}, "gaussian", std::move(m));
}

inline TargetModel mixture_of_exponentials() {
  MixtureOfExponentials moe;
  return make_target(moe, "moe", {{"mean_0", 0, 1, moe.moment(1)}, {"second_0", 0, 2, moe.moment(2)}},
                     [](const Vector& y) { return Vector(y.array().exp()); });
}

inline TargetModel mog_grid() {
  MogGrid mog;
  const double m2 = mog.second_moment();
  return make_target(mog, "mog",
                     {{"mean_0", 0, 1, 0.0}, {"mean_1", 1, 1, 0.0}, {"second_0", 0, 2, m2}, {"second_1", 1, 2, m2}});
}

inline TargetModel funnel(ScaleConvention convention = ScaleConvention::standard_deviation) {
  return make_target(Funnel{1.35, convention}, "funnel", {{"mean_0", 0, 1, 0.0}, {"mean_1", 1, 1, 0.0}});
}

/// Prior plus per-datum log-likelihood gradients; minibatches are rescaled by
/// N / |batch| so the estimate is unbiased.
struct MinibatchPotential {
  std::size_t dataset_size = 0;
  std::function<Vector(const Vector&)> prior_grad;
  std::function<Vector(const Vector&, std::size_t)> per_point_grad;
};

inline Vector minibatch_grad(const MinibatchPotential& pot, const Vector& params, std::span<const std::size_t> batch) {
  Vector g = pot.prior_grad(params);
  if (pot.dataset_size == 0) return g;
  if (batch.empty()) throw InvalidArgument("minibatch_grad: empty batch");
  Vector data = Vector::Zero(params.size());
  for (std::size_t i : batch) {
    if (i >= pot.dataset_size) throw InvalidArgument("minibatch_grad: batch index outside dataset");
    data += pot.per_point_grad(params, i);
  }
  return g + (static_cast<double>(pot.dataset_size) / static_cast<double>(batch.size())) * data;
}

}  // namespace pbi
