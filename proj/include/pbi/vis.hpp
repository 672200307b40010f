#pragma once

// Variationally inferred sampler: a diagonal Gaussian guide whose draws are
// pushed through T steps of an inner sampler, trained by ascending a
// Monte-Carlo ELBO that is differentiated through the refinement.
//
// Everything that touches the objective is written once over a scalar type S
// (double or ad::Var) and instantiated for plain evaluation and for the tape.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "pbi/autodiff.hpp"
#include "pbi/common.hpp"
#include "pbi/kernel.hpp"
#include "pbi/targets.hpp"

namespace pbi {

enum class InnerSampler { sgd, sgld, svgd, fp_flow };
enum class EntropyMode { vis_p, vis_mc, vis_g, vis_fp };
enum class AdMode { full, fast };

inline std::string_view to_string(InnerSampler s) {
  switch (s) {
    case InnerSampler::sgd: return "sgd";
    case InnerSampler::sgld: return "sgld";
    case InnerSampler::svgd: return "svgd";
    case InnerSampler::fp_flow: return "fp_flow";
  }
  return "unknown";
}

inline std::string_view to_string(EntropyMode e) {
  switch (e) {
    case EntropyMode::vis_p: return "vis_p";
    case EntropyMode::vis_mc: return "vis_mc";
    case EntropyMode::vis_g: return "vis_g";
    case EntropyMode::vis_fp: return "vis_fp";
  }
  return "unknown";
}

inline std::string_view to_string(AdMode a) { return a == AdMode::full ? "full" : "fast"; }

inline std::optional<InnerSampler> parse_inner_sampler(std::string_view s) {
  for (auto k : {InnerSampler::sgd, InnerSampler::sgld, InnerSampler::svgd, InnerSampler::fp_flow})
    if (to_string(k) == s) return k;
  return std::nullopt;
}

inline std::optional<EntropyMode> parse_entropy_mode(std::string_view s) {
  for (auto k : {EntropyMode::vis_p, EntropyMode::vis_mc, EntropyMode::vis_g, EntropyMode::vis_fp})
    if (to_string(k) == s) return k;
  return std::nullopt;
}

inline std::optional<AdMode> parse_ad_mode(std::string_view s) {
  if (s == "full") return AdMode::full;
  if (s == "fast") return AdMode::fast;
  return std::nullopt;
}

struct DiagonalGaussianGuide {
  Vector mean;
  Vector log_scale;

  static DiagonalGaussianGuide standard(int dim) { return {Vector::Zero(dim), Vector::Zero(dim)}; }

  Eigen::Index dim() const { return mean.size(); }
  Vector scale() const { return log_scale.array().exp(); }

  /// Closed-form differential entropy.
  double entropy() const {
    return log_scale.sum() + 0.5 * static_cast<double>(dim()) * std::log(2.0 * std::numbers::pi * std::numbers::e);
  }

  void validate() const {
    if (mean.size() == 0 || mean.size() != log_scale.size())
      throw ConfigError("guide: mean and log_scale must be non-empty and equally sized");
    if (!mean.allFinite() || !log_scale.allFinite()) throw ConfigError("guide: non-finite parameters");
  }
};

struct RefinedGuide {
  DiagonalGaussianGuide guide;
  InnerSampler inner = InnerSampler::sgld;
  double eta = 0.1;
  std::size_t t_refine = 1;
  std::size_t t_infer = 0;
  EntropyMode entropy = EntropyMode::vis_p;
  AdMode ad = AdMode::full;
  KernelConfig kernel;  // svgd and fp_flow only

  void validate() const {
    guide.validate();
    if (!(eta > 0.0) || !std::isfinite(eta)) throw ConfigError("refined guide: eta must be positive");
    if (entropy == EntropyMode::vis_fp && inner != InnerSampler::fp_flow)
      throw ConfigError("refined guide: vis_fp entropy needs the deterministic fp_flow inner sampler");
    if (entropy == EntropyMode::vis_mc && inner != InnerSampler::sgld && t_refine > 0)
      throw ConfigError("refined guide: vis_mc entropy needs a Gaussian (sgld) transition");
    try {
      kernel.validate();
    } catch (const InvalidArgument& e) {
      throw ConfigError(std::string("refined guide: ") + e.what());
    }
  }
};

/// Standard-normal draws behind one ELBO estimate: `base` reparameterizes
/// z0 = mean + scale * base, `steps[t]` feeds the SGLD noise of step t.
/// Holding them fixed gives common random numbers across evaluations.
struct RefinementNoise {
  Matrix base;
  std::vector<Matrix> steps;

  std::size_t samples() const { return static_cast<std::size_t>(base.rows()); }
};

inline RefinementNoise draw_refinement_noise(std::size_t samples, Eigen::Index dim, std::size_t steps,
                                             std::uint64_t seed, std::uint64_t purpose = 16) {
  if (samples < 1) throw InvalidArgument("draw_refinement_noise: need at least one sample");
  ParticleStreams s(seed, samples, purpose);
  RefinementNoise n;
  n.base = s.standard_normal(static_cast<Eigen::Index>(samples), dim);
  for (std::size_t t = 0; t < steps; ++t) n.steps.push_back(s.standard_normal(static_cast<Eigen::Index>(samples), dim));
  return n;
}

template <class S>
using Particles = std::vector<std::vector<S>>;

/// -grad log q at every particle for the kernel-smoothed empirical density:
/// row m = -(sum_n grad_{z_m} K(z_m, z_n)) / (sum_n K(z_m, z_n))
///         - sum_l grad_{z_m} K(z_m, z_l) / (sum_n K(z_n, z_l)).
/// For the RBF kernel this is (2/h) sum_n (z_m - z_n) K_mn (1/S_m + 1/S_n).
template <class S>
Particles<S> kde_entropy_grad(const Particles<S>& z, double h) {
  using std::exp;
  if (!(h > 0.0)) throw InvalidArgument("kde_entropy_grad: bandwidth must be positive");
  const std::size_t n = z.size();
  const std::size_t d = n == 0 ? 0 : z[0].size();
  std::vector<std::vector<S>> k(n, std::vector<S>(n));
  std::vector<S> row_sum(n);
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = a; b < n; ++b) {
      if (a == b) {
        k[a][b] = 0.0 * z[a][0] + 1.0;
        continue;
      }
      S sq = ad::square(z[a][0] - z[b][0]);
      for (std::size_t j = 1; j < d; ++j) sq = sq + ad::square(z[a][j] - z[b][j]);
      k[a][b] = exp(-sq / h);
      k[b][a] = k[a][b];
    }
  }
  for (std::size_t a = 0; a < n; ++a) {
    S s = k[a][0];
    for (std::size_t b = 1; b < n; ++b) s = s + k[a][b];
    row_sum[a] = s;
  }
  Particles<S> out(n, std::vector<S>(d));
  for (std::size_t m = 0; m < n; ++m) {
    for (std::size_t j = 0; j < d; ++j) out[m][j] = 0.0 * z[m][j];
    for (std::size_t b = 0; b < n; ++b) {
      if (b == m) continue;
      const S w = k[m][b] * (1.0 / row_sum[m] + 1.0 / row_sum[b]) * (2.0 / h);
      for (std::size_t j = 0; j < d; ++j) out[m][j] = out[m][j] + w * (z[m][j] - z[b][j]);
    }
  }
  return out;
}

namespace detail {

inline Particles<double> to_particles(const Matrix& m) {
  Particles<double> p(static_cast<std::size_t>(m.rows()), std::vector<double>(static_cast<std::size_t>(m.cols())));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) p[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = m(i, j);
  return p;
}

template <class S>
Matrix to_matrix(const Particles<S>& p) {
  const auto n = static_cast<Eigen::Index>(p.size());
  const auto d = static_cast<Eigen::Index>(p.empty() ? 0 : p[0].size());
  Matrix m(n, d);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < d; ++j) m(i, j) = ad::value_of(p[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)]);
  return m;
}

}  // namespace detail

inline Matrix kde_entropy_grad(const Matrix& particles, const KernelConfig& kcfg) {
  kcfg.validate();
  const double h = resolve_bandwidth(particles, kcfg).value;
  return detail::to_matrix(kde_entropy_grad(detail::to_particles(particles), h));
}

/// Deterministic flow z <- z + eta (grad log p(z) - grad log q(z)) with the
/// density gradient taken from the kernel-smoothed particle distribution.
inline Matrix vis_fp_step(const Matrix& particles, const GradientField& grad_log_pi, const KernelConfig& kcfg,
                          double eta) {
  if (!(eta > 0.0) || !std::isfinite(eta)) throw InvalidArgument("vis_fp_step: eta must be positive");
  Matrix next = particles + eta * (grad_log_pi(particles) + kde_entropy_grad(particles, kcfg));
  const Eigen::Index bad = first_nonfinite_row(next);
  if (bad < next.rows())
    throw DivergenceError("vis_fp_step: non-finite particle " + std::to_string(bad), static_cast<std::size_t>(bad), 0,
                          particles);
  return next;
}

namespace detail {

/// The guide and sampler parameters in scalar type S.
template <class S>
struct GuideParams {
  std::vector<S> mean;
  std::vector<S> log_scale;
  S eta;
};

template <class S, class Model>
std::vector<S> grad_log_p(const Model& model, const std::vector<S>& z) {
  return model.template grad_log_density<S>(std::span<const S>(z.data(), z.size()));
}

template <class S, class Model>
S log_p(const Model& model, const std::vector<S>& z) {
  return model.template log_density<S>(std::span<const S>(z.data(), z.size()));
}

inline double median_bandwidth_of(const Matrix& values, const KernelConfig& kcfg) {
  return resolve_bandwidth(values, kcfg).value;
}

/// Displacement of one inner step for every particle. `xi` is the step's
/// standard-normal draw (SGLD only).
template <class S, class Model>
Particles<S> inner_displacement(const Model& model, InnerSampler inner, const Particles<S>& z, const S& eta,
                                const Matrix* xi, const KernelConfig& kcfg) {
  using std::sqrt;
  using std::exp;
  const std::size_t n = z.size();
  const std::size_t d = z[0].size();
  Particles<S> grads(n);
  for (std::size_t i = 0; i < n; ++i) grads[i] = grad_log_p<S>(model, z[i]);

  Particles<S> delta(n, std::vector<S>(d));
  switch (inner) {
    case InnerSampler::sgd:
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) delta[i][j] = eta * grads[i][j];
      break;
    case InnerSampler::sgld: {
      const S amp = sqrt(2.0 * eta);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j)
          delta[i][j] = eta * grads[i][j] + amp * (*xi)(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
      break;
    }
    case InnerSampler::svgd: {
      const double h = median_bandwidth_of(to_matrix(z), kcfg);
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<S> acc = grads[i];  // k(z_i, z_i) = 1, no self repulsion
        for (std::size_t l = 0; l < n; ++l) {
          if (l == i) continue;
          S sq = ad::square(z[i][0] - z[l][0]);
          for (std::size_t j = 1; j < d; ++j) sq = sq + ad::square(z[i][j] - z[l][j]);
          const S k = exp(-sq / h);
          for (std::size_t j = 0; j < d; ++j) acc[j] = acc[j] + k * grads[l][j] + (2.0 / h) * k * (z[i][j] - z[l][j]);
        }
        for (std::size_t j = 0; j < d; ++j) delta[i][j] = (eta * inv_n) * acc[j];
      }
      break;
    }
    case InnerSampler::fp_flow: {
      const double h = median_bandwidth_of(to_matrix(z), kcfg);
      const Particles<S> ent = kde_entropy_grad(z, h);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) delta[i][j] = eta * (grads[i][j] + ent[i][j]);
      break;
    }
  }
  return delta;
}

template <class S>
S maybe_stop(const S& x, AdMode ad) {
  return ad == AdMode::fast ? ad::stop_gradient(x) : x;
}

template <class S>
struct Trajectory {
  std::vector<Particles<S>> states;  // states[0] = z0, states.back() = zT
};

template <class S, class Model>
Trajectory<S> refine(const Model& model, const RefinedGuide& rg, const GuideParams<S>& p, const RefinementNoise& noise,
                     std::size_t steps, ad::Tape* tape) {
  using std::exp;
  const std::size_t n = noise.samples();
  const std::size_t d = static_cast<std::size_t>(noise.base.cols());
  if (d != p.mean.size()) throw InvalidArgument("refine: noise dimension does not match the guide");
  if (rg.inner == InnerSampler::sgld && noise.steps.size() < steps)
    throw InvalidArgument("refine: not enough noise draws for the requested steps");

  Particles<S> z(n, std::vector<S>(d));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j)
      z[i][j] = p.mean[j] + exp(p.log_scale[j]) * ad::lift<S>(noise.base(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)), tape);

  Trajectory<S> tr;
  tr.states.push_back(z);
  for (std::size_t t = 0; t < steps; ++t) {
    const Matrix* xi = rg.inner == InnerSampler::sgld ? &noise.steps[t] : nullptr;
    Particles<S> delta;
    try {
      delta = inner_displacement<S>(model, rg.inner, z, p.eta, xi, rg.kernel);
    } catch (const NumericalError& e) {
      throw DivergenceError(std::string("refinement diverged: ") + e.what(), 0, t);
    }
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        z[i][j] = z[i][j] + maybe_stop(delta[i][j], rg.ad);
        if (!std::isfinite(ad::value_of(z[i][j])))
          throw DivergenceError("refinement diverged: non-finite particle " + std::to_string(i), i, t);
      }
    tr.states.push_back(z);
  }
  return tr;
}

/// Monte-Carlo refined ELBO over the draws in `noise`.
template <class S, class Model>
S elbo_expr(const Model& model, const RefinedGuide& rg, const GuideParams<S>& p, const RefinementNoise& noise,
            ad::Tape* tape) {
  using std::exp;
  using std::log;
  const std::size_t n = noise.samples();
  const std::size_t d = p.mean.size();
  const std::size_t steps = rg.t_refine;
  const Trajectory<S> tr = refine<S>(model, rg, p, noise, steps, tape);
  const Particles<S>& z0 = tr.states.front();
  const Particles<S>& zt = tr.states.back();

  std::vector<S> scale(d);
  for (std::size_t j = 0; j < d; ++j) scale[j] = exp(p.log_scale[j]);

  // VIS-G: Gaussian with the guide's scale around the guide mean carried
  // through the noiseless sampler dynamics (a lone particle).
  std::vector<S> centre = p.mean;
  if (rg.entropy == EntropyMode::vis_g) {
    Particles<S> c{p.mean};
    for (std::size_t t = 0; t < steps; ++t) {
      const auto delta = inner_displacement<S>(model, InnerSampler::sgd, c, p.eta, nullptr, rg.kernel);
      for (std::size_t j = 0; j < d; ++j) c[0][j] = c[0][j] + maybe_stop(delta[0][j], rg.ad);
    }
    centre = c[0];
  }

  std::vector<S> terms;
  terms.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    S entropy = 0.0 * p.mean[0];
    if (rg.entropy == EntropyMode::vis_g) {
      for (std::size_t j = 0; j < d; ++j) entropy = entropy - ad::gaussian_log_pdf(zt[i][j], centre[j], scale[j]);
    } else {
      for (std::size_t j = 0; j < d; ++j) entropy = entropy - ad::gaussian_log_pdf(z0[i][j], p.mean[j], scale[j]);
    }
    terms.push_back(log_p<S>(model, zt[i]) + entropy);
  }
  S total = ad::reduce_sum(std::span<const S>(terms.data(), terms.size())) / static_cast<double>(n);
  if (rg.entropy == EntropyMode::vis_mc && steps > 0) {
    // Gaussian transition N(., 2 eta I) has entropy (d/2) log(4 pi e eta).
    const S eta = maybe_stop(p.eta, rg.ad);
    total = total + (static_cast<double>(steps) * 0.5 * static_cast<double>(d)) *
                        (log(eta) + std::log(4.0 * std::numbers::pi * std::numbers::e));
  }
  return total;
}

}  // namespace detail

struct RefinedSample {
  Matrix z0;
  Matrix zt;
  std::vector<Matrix> trajectory;  // z0, z1, ..., zT
};

/// Reparameterized guide draws pushed through `steps` inner steps (the
/// guide's t_refine by default).
template <class Model>
RefinedSample sample_refined(const RefinedGuide& rg, const Model& model, const RefinementNoise& noise,
                             std::optional<std::size_t> steps = std::nullopt) {
  rg.validate();
  detail::GuideParams<double> p{{rg.guide.mean.data(), rg.guide.mean.data() + rg.guide.mean.size()},
                                {rg.guide.log_scale.data(), rg.guide.log_scale.data() + rg.guide.log_scale.size()},
                                rg.eta};
  const auto tr = detail::refine<double>(model, rg, p, noise, steps.value_or(rg.t_refine), nullptr);
  RefinedSample out;
  for (const auto& s : tr.states) out.trajectory.push_back(detail::to_matrix(s));
  out.z0 = out.trajectory.front();
  out.zt = out.trajectory.back();
  return out;
}

/// Refined ELBO estimate (plain evaluation).
template <class Model>
double elbo(const RefinedGuide& rg, const Model& model, const RefinementNoise& noise) {
  rg.validate();
  detail::GuideParams<double> p{{rg.guide.mean.data(), rg.guide.mean.data() + rg.guide.mean.size()},
                                {rg.guide.log_scale.data(), rg.guide.log_scale.data() + rg.guide.log_scale.size()},
                                rg.eta};
  return detail::elbo_expr<double>(model, rg, p, noise, nullptr);
}

/// Standard ELBO mean[log p(z0) - log q0(z0)] of the unrefined guide.
template <class Model>
double plain_elbo(const DiagonalGaussianGuide& g, const Model& model, const RefinementNoise& noise) {
  RefinedGuide rg;
  rg.guide = g;
  rg.t_refine = 0;
  rg.inner = InnerSampler::sgd;
  return elbo(rg, model, noise);
}

struct ElboGradient {
  double value = 0.0;
  Vector mean;
  Vector log_scale;
  double eta = 0.0;
  double log_eta = 0.0;  // eta * d/d eta
};

/// Reverse-mode gradient of the refined ELBO. In fast mode every sampler
/// displacement is wrapped in stop_gradient, so the eta gradient is 0.
template <class Model>
ElboGradient elbo_grad(const RefinedGuide& rg, const Model& model, const RefinementNoise& noise) {
  rg.validate();
  ad::Tape tape;
  const auto d = static_cast<std::size_t>(rg.guide.dim());
  detail::GuideParams<ad::Var> p;
  for (std::size_t j = 0; j < d; ++j) p.mean.push_back(tape.variable(rg.guide.mean[static_cast<Eigen::Index>(j)]));
  for (std::size_t j = 0; j < d; ++j)
    p.log_scale.push_back(tape.variable(rg.guide.log_scale[static_cast<Eigen::Index>(j)]));
  p.eta = tape.variable(rg.eta);

  const ad::Var out = detail::elbo_expr<ad::Var>(model, rg, p, noise, &tape);
  const ad::Gradients g = tape.backward(out);
  ElboGradient r;
  r.value = out.value();
  r.mean.resize(static_cast<Eigen::Index>(d));
  r.log_scale.resize(static_cast<Eigen::Index>(d));
  for (std::size_t j = 0; j < d; ++j) {
    r.mean[static_cast<Eigen::Index>(j)] = g[p.mean[j]];
    r.log_scale[static_cast<Eigen::Index>(j)] = g[p.log_scale[j]];
  }
  r.eta = g[p.eta];
  r.log_eta = rg.eta * r.eta;
  return r;
}

struct OuterOptimizer {
  std::size_t iterations = 50;
  std::size_t samples = 16;  // M draws per ELBO estimate
  double learning_rate = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t infer_particles = 100;

  void validate() const {
    if (iterations < 1) throw ConfigError("optimize: need at least one outer iteration");
    if (samples < 1) throw ConfigError("optimize: need at least one sample per estimate");
    if (!(learning_rate > 0.0)) throw ConfigError("optimize: learning rate must be positive");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
      throw ConfigError("optimize: beta1 and beta2 must lie in [0, 1)");
  }
};

struct OptimizationError : NumericalError {
  OptimizationError(const std::string& what, std::vector<double> trace)
      : NumericalError(what), trace(std::move(trace)) {}
  std::vector<double> trace;
};

struct VisResult {
  RefinedGuide trained;
  std::vector<double> loss_trace;  // negative ELBO estimate per outer iteration
  Matrix inference_samples;
};

/// Refinement phase: Adam ascent on the ELBO over (mean, log_scale) and, in
/// full mode with T > 0, log eta. Inference phase: t_infer steps of the tuned
/// sampler from the learned guide.
template <class Model>
VisResult optimize(RefinedGuide rg, const Model& model, const OuterOptimizer& opt, std::uint64_t seed) {
  rg.validate();
  opt.validate();
  const Eigen::Index d = rg.guide.dim();
  const bool learn_eta = rg.ad == AdMode::full && rg.t_refine > 0;
  const Eigen::Index np = 2 * d + (learn_eta ? 1 : 0);
  Vector m = Vector::Zero(np), v = Vector::Zero(np);

  VisResult res;
  res.loss_trace.reserve(opt.iterations);
  for (std::size_t it = 0; it < opt.iterations; ++it) {
    const RefinementNoise noise = draw_refinement_noise(opt.samples, d, rg.t_refine, seed, 16 + it);
    ElboGradient g;
    try {
      g = elbo_grad(rg, model, noise);
    } catch (const NumericalError& e) {
      throw OptimizationError(std::string("optimize: ") + e.what(), res.loss_trace);
    } catch (const DivergenceError& e) {
      throw OptimizationError(std::string("optimize: ") + e.what(), res.loss_trace);
    }
    if (!std::isfinite(g.value)) throw OptimizationError("optimize: non-finite loss", res.loss_trace);
    res.loss_trace.push_back(-g.value);

    Vector grad(np);
    grad.head(d) = g.mean;
    grad.segment(d, d) = g.log_scale;
    if (learn_eta) grad[np - 1] = g.log_eta;
    m = opt.beta1 * m + (1.0 - opt.beta1) * grad;
    v = opt.beta2 * v + (1.0 - opt.beta2) * grad.cwiseProduct(grad);
    const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(it + 1));
    const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(it + 1));
    const Vector step = opt.learning_rate * (m / c1).cwiseQuotient(((v / c2).array().sqrt() + opt.epsilon).matrix());
    rg.guide.mean += step.head(d);
    rg.guide.log_scale += step.segment(d, d);
    if (learn_eta) rg.eta = std::exp(std::log(rg.eta) + step[np - 1]);
  }

  if (opt.infer_particles > 0) {
    const RefinementNoise noise = draw_refinement_noise(opt.infer_particles, d, rg.t_infer, seed, 15);
    res.inference_samples = sample_refined(rg, model, noise, rg.t_infer).zt;
  }
  res.trained = std::move(rg);
  return res;
}

}  // namespace pbi
