#pragma once

// Particle update rules. Targets hand out grad log pi; every update below is
// written in terms of grad H = -grad log pi and the conversion happens in
// potential_gradient().

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pbi/common.hpp"
#include "pbi/kernel.hpp"
#include "pbi/targets.hpp"

namespace pbi {

struct ParticleEnsemble {
  Matrix positions;
  std::size_t step_index = 0;

  Eigen::Index count() const { return positions.rows(); }
  Eigen::Index dim() const { return positions.cols(); }
};

enum class ScheduleKind { constant, robbins_monro };

struct StepSchedule {
  ScheduleKind kind = ScheduleKind::constant;
  double eps0 = 1e-2;
  double gamma = 0.55;

  void validate() const {
    if (!(eps0 > 0.0) || !std::isfinite(eps0)) throw InvalidArgument("StepSchedule: eps0 must be positive");
    if (kind == ScheduleKind::robbins_monro && !(gamma > 0.5 && gamma <= 1.0))
      throw InvalidArgument("StepSchedule: robbins-monro decay must lie in (0.5, 1]");
  }

  /// eps_t = eps0 * (1 + t)^-gamma for robbins-monro.
  double at(std::size_t t) const {
    if (kind == ScheduleKind::constant) return eps0;
    return eps0 * std::pow(1.0 + static_cast<double>(t), -gamma);
  }
};

struct MomentumState {
  Matrix momenta;
  Matrix second_moments;  // Adam+NR only
  double beta1 = 0.9;
  double beta2 = 0.999;
  double stabilizer = 1e-8;

  void validate(const ParticleEnsemble& e) const {
    if (momenta.rows() != e.count() || momenta.cols() != e.dim())
      throw InvalidArgument("MomentumState: momenta shape does not match the ensemble");
    if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0))
      throw InvalidArgument("MomentumState: beta1 and beta2 must lie in (0, 1)");
    if (!(stabilizer >= 0.0)) throw InvalidArgument("MomentumState: stabilizer must be >= 0");
  }

  /// Per-chain diagonal mass matrix diag(sqrt(v_l)).
  Vector mass_diagonal(Eigen::Index chain) const { return second_moments.row(chain).transpose().array().sqrt(); }
};

struct CollectionPolicy {
  std::size_t burn_in = 0;
  std::size_t thin = 1;

  void validate() const {
    if (thin < 1) throw InvalidArgument("CollectionPolicy: thin must be >= 1");
  }
  /// `completed` counts finished iterations (1-based).
  bool collects(std::size_t completed) const { return completed > burn_in && (completed - burn_in) % thin == 0; }
};

/// grad H for every particle; non-finite rows abort with the particle index.
inline Matrix potential_gradient(const GradientField& grad_log_pi, const Matrix& z, std::size_t step = 0) {
  Matrix g = grad_log_pi(z);
  const Eigen::Index bad = first_nonfinite_row(g);
  if (bad < g.rows())
    throw DivergenceError("non-finite gradient at particle " + std::to_string(bad), static_cast<std::size_t>(bad),
                          step, z);
  return -g;
}

namespace detail {

inline void require_step(double eps) {
  if (!(eps >= 0.0) || !std::isfinite(eps)) throw InvalidArgument("step size must be finite and >= 0");
}

inline void check_positions(const Matrix& next, const Matrix& previous, std::size_t step) {
  const Eigen::Index bad = first_nonfinite_row(next);
  if (bad < next.rows())
    throw DivergenceError("non-finite position at particle " + std::to_string(bad), static_cast<std::size_t>(bad),
                          step, previous);
}

/// Kernel with interactions switched off: K = I, no gradient terms.
inline KernelMatrix isolated_kernel(Eigen::Index n, Eigen::Index d) {
  KernelMatrix km;
  km.entries.setIdentity(n, n);
  km.grad_terms.setZero(n, d);
  return km;
}

}  // namespace detail

/// Row i = (1/L) sum_l [k(z_l, z_i) grad H(z_l) + grad_{z_i} k(z_l, z_i)].
/// The second term equals -grad_terms, i.e. it pushes particle i away from
/// its neighbours once the update subtracts this direction.
inline Matrix svgd_direction(const KernelMatrix& km, const Matrix& grad_h) {
  const double inv_l = 1.0 / static_cast<double>(grad_h.rows());
  return (km.entries * grad_h - km.grad_terms) * inv_l;
}

inline Matrix svgd_direction(const ParticleEnsemble& e, const GradientField& target, const KernelConfig& kcfg) {
  return svgd_direction(kernel_matrix(e.positions, kcfg), potential_gradient(target, e.positions, e.step_index));
}

/// (1/L) sum_l [k(z_l, z_i) u_l + grad_{z_i} k(z_l, z_i)]: the kernel-smoothed
/// position drift shared by SGDM+R and Adam+NR.
inline Matrix kernel_momentum_drift(const KernelMatrix& km, const Matrix& u) {
  const double inv_l = 1.0 / static_cast<double>(u.rows());
  return (km.entries * u - km.grad_terms) * inv_l;
}

/// Skew-symmetric curl matrix [[0, -K], [K, 0]] over (z_1..z_L, m_1..m_L).
inline Matrix momentum_curl_matrix(const Matrix& k) {
  const Eigen::Index n = k.rows();
  Matrix q = Matrix::Zero(2 * n, 2 * n);
  q.topRightCorner(n, n) = -k;
  q.bottomLeftCorner(n, n) = k;
  return q;
}

/// z <- z + eps grad log pi(z) + N(0, 2 eps I), particles independent.
inline ParticleEnsemble sgld_step(const ParticleEnsemble& e, const GradientField& target, double eps,
                                  ParticleStreams& streams) {
  detail::require_step(eps);
  const Matrix grad_h = potential_gradient(target, e.positions, e.step_index);
  const Matrix grad = -grad_h;
  const Matrix xi = streams.standard_normal(e.count(), e.dim());
  ParticleEnsemble out{e.positions + eps * grad + std::sqrt(2.0 * eps) * xi, e.step_index + 1};
  detail::check_positions(out.positions, e.positions, e.step_index);
  return out;
}

/// Deterministic SVGD update z <- z - eps * svgd_direction.
inline ParticleEnsemble svgd_step(const ParticleEnsemble& e, const GradientField& target, const KernelConfig& kcfg,
                                  double eps) {
  detail::require_step(eps);
  ParticleEnsemble out{e.positions - eps * svgd_direction(e, target, kcfg), e.step_index + 1};
  detail::check_positions(out.positions, e.positions, e.step_index);
  return out;
}

/// SGLD+R: SVGD drift plus noise with covariance (2 eps / L) K (x) I_d.
inline ParticleEnsemble sgld_r_step(const ParticleEnsemble& e, const GradientField& target, const KernelConfig& kcfg,
                                    double eps, ParticleStreams& streams, bool repulsion = true) {
  detail::require_step(eps);
  const Matrix grad_h = potential_gradient(target, e.positions, e.step_index);
  const KernelMatrix km = repulsion ? kernel_matrix(e.positions, kcfg) : detail::isolated_kernel(e.count(), e.dim());
  const Matrix noise = sample_repulsive_noise(factor_kernel(km.entries, kcfg.jitter), eps, streams, e.dim());
  ParticleEnsemble out{e.positions - eps * svgd_direction(km, grad_h) + noise, e.step_index + 1};
  detail::check_positions(out.positions, e.positions, e.step_index);
  return out;
}

struct MomentumStep {
  ParticleEnsemble ensemble;
  MomentumState momentum;
};

/// SGDM+R. Positions follow the kernel-smoothed momenta; momenta follow the
/// SVGD drift with the sign of SGD-with-momentum (m <- m - eps grad log p).
/// Optional position noise N(0, 2 eps K / L) is off by default.
inline MomentumStep sgdm_r_step(const ParticleEnsemble& e, const MomentumState& mom, const GradientField& target,
                                const KernelConfig& kcfg, double eps, ParticleStreams* position_noise = nullptr,
                                bool repulsion = true) {
  detail::require_step(eps);
  mom.validate(e);
  const Matrix grad_h = potential_gradient(target, e.positions, e.step_index);
  const KernelMatrix km = repulsion ? kernel_matrix(e.positions, kcfg) : detail::isolated_kernel(e.count(), e.dim());

  MomentumStep out{{e.positions - eps * kernel_momentum_drift(km, mom.momenta), e.step_index + 1}, mom};
  out.momentum.momenta = mom.momenta + eps * svgd_direction(km, grad_h);
  if (position_noise != nullptr)
    out.ensemble.positions += sample_repulsive_noise(factor_kernel(km.entries, kcfg.jitter), eps, *position_noise, e.dim());
  detail::check_positions(out.ensemble.positions, e.positions, e.step_index);
  detail::check_positions(out.momentum.momenta, e.positions, e.step_index);
  return out;
}

/// Adam+NR: Adam moment tracking per chain (no bias correction), positions
/// driven by m / sqrt(v + stabilizer) through the SGDM+R kernel form, plus
/// SGLD+R noise.
inline MomentumStep adam_nr_step(const ParticleEnsemble& e, const MomentumState& mom, const GradientField& target,
                                 const KernelConfig& kcfg, double eps, ParticleStreams& streams,
                                 bool repulsion = true) {
  detail::require_step(eps);
  mom.validate(e);
  if (mom.second_moments.rows() != e.count() || mom.second_moments.cols() != e.dim())
    throw InvalidArgument("adam_nr_step: second-moment shape does not match the ensemble");
  const Matrix grad_h = potential_gradient(target, e.positions, e.step_index);
  const KernelMatrix km = repulsion ? kernel_matrix(e.positions, kcfg) : detail::isolated_kernel(e.count(), e.dim());

  MomentumStep out{e, mom};
  out.momentum.momenta = mom.beta1 * mom.momenta + (1.0 - mom.beta1) * grad_h;
  out.momentum.second_moments =
      mom.beta2 * mom.second_moments + (1.0 - mom.beta2) * grad_h.cwiseProduct(grad_h);
  const Matrix scaled =
      out.momentum.momenta.cwiseQuotient((out.momentum.second_moments.array() + mom.stabilizer).sqrt().matrix());
  const Matrix noise = sample_repulsive_noise(factor_kernel(km.entries, kcfg.jitter), eps, streams, e.dim());
  out.ensemble.positions = e.positions - eps * kernel_momentum_drift(km, scaled) + noise;
  out.ensemble.step_index = e.step_index + 1;
  detail::check_positions(out.ensemble.positions, e.positions, e.step_index);
  return out;
}

enum class SamplerKind { sgld, sgld_r, svgd, sgdm_r, adam_nr };

inline std::string_view to_string(SamplerKind k) {
  switch (k) {
    case SamplerKind::sgld: return "sgld";
    case SamplerKind::sgld_r: return "sgld_r";
    case SamplerKind::svgd: return "svgd";
    case SamplerKind::sgdm_r: return "sgdm_r";
    case SamplerKind::adam_nr: return "adam_nr";
  }
  return "unknown";
}

inline std::optional<SamplerKind> parse_sampler(std::string_view s) {
  for (SamplerKind k : {SamplerKind::sgld, SamplerKind::sgld_r, SamplerKind::svgd, SamplerKind::sgdm_r,
                        SamplerKind::adam_nr})
    if (to_string(k) == s) return k;
  return std::nullopt;
}

/// Independent Gaussian initialization per coordinate.
struct InitDistribution {
  Vector mean;
  Vector std;
};

struct RunConfig {
  SamplerKind kind = SamplerKind::sgld_r;
  std::size_t particles = 10;
  StepSchedule schedule;
  KernelConfig kernel;
  CollectionPolicy collection;
  std::size_t iterations = 1000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double stabilizer = 1e-8;
  /// Iteration from which repulsive samplers drop particle interactions.
  std::optional<std::size_t> repulsion_cutoff;
  bool position_noise = false;  // SGDM+R only
  InitDistribution init;
};

struct RunResult {
  /// Collected particles, one row each, in collection order (time-major).
  Matrix samples;
  std::vector<std::size_t> sample_iteration;
  std::vector<std::size_t> sample_particle;
  std::size_t particles = 0;
  double wall_clock = 0.0;
  ParticleEnsemble final_state;

  std::size_t collected_count() const { return static_cast<std::size_t>(samples.rows()); }
  std::size_t draws_per_particle() const { return particles == 0 ? 0 : collected_count() / particles; }

  /// Collected trajectory of one particle for coordinate `dim`.
  std::vector<double> chain(std::size_t particle, Eigen::Index dim) const {
    std::vector<double> out;
    for (Eigen::Index r = 0; r < samples.rows(); ++r)
      if (sample_particle[static_cast<std::size_t>(r)] == particle) out.push_back(samples(r, dim));
    return out;
  }
};

namespace stream_purpose {
inline constexpr std::uint64_t noise = 1;
inline constexpr std::uint64_t init = 2;
inline constexpr std::uint64_t momentum = 3;
}  // namespace stream_purpose

/// Evolves an ensemble and collects particles after burn-in every `thin`
/// iterations. Deterministic given the seed.
inline RunResult run(const RunConfig& cfg, const GradientField& target, Eigen::Index dim, std::uint64_t seed) {
  cfg.schedule.validate();
  cfg.collection.validate();
  cfg.kernel.validate();
  if (cfg.particles < 1) throw ConfigError("run: need at least one particle");
  if (cfg.iterations <= cfg.collection.burn_in)
    throw ConfigError("run: iterations must exceed burn_in, nothing would be collected");
  if (cfg.init.mean.size() != dim || cfg.init.std.size() != dim)
    throw ConfigError("run: init distribution dimension does not match the target");

  const auto n = static_cast<Eigen::Index>(cfg.particles);
  ParticleStreams init_streams(seed, cfg.particles, stream_purpose::init);
  ParticleStreams noise(seed, cfg.particles, stream_purpose::noise);

  ParticleEnsemble ens{init_streams.standard_normal(n, dim), 0};
  for (Eigen::Index i = 0; i < n; ++i)
    ens.positions.row(i) = (cfg.init.mean.array() + cfg.init.std.array() * ens.positions.row(i).transpose().array())
                               .matrix()
                               .transpose();

  MomentumState mom;
  mom.beta1 = cfg.beta1;
  mom.beta2 = cfg.beta2;
  mom.stabilizer = cfg.stabilizer;
  if (cfg.kind == SamplerKind::sgdm_r) {
    ParticleStreams mstreams(seed, cfg.particles, stream_purpose::momentum);
    mom.momenta = mstreams.standard_normal(n, dim);
  } else if (cfg.kind == SamplerKind::adam_nr) {
    mom.momenta = Matrix::Zero(n, dim);
    mom.second_moments = Matrix::Zero(n, dim);
  }

  const std::size_t per_collect = cfg.particles;
  const std::size_t n_collect = (cfg.iterations - cfg.collection.burn_in) / cfg.collection.thin;
  RunResult res;
  res.particles = cfg.particles;
  res.samples.resize(static_cast<Eigen::Index>(n_collect * per_collect), dim);
  res.sample_iteration.reserve(n_collect * per_collect);
  res.sample_particle.reserve(n_collect * per_collect);

  const auto start = std::chrono::steady_clock::now();
  Eigen::Index row = 0;
  for (std::size_t t = 0; t < cfg.iterations; ++t) {
    const double eps = cfg.schedule.at(t);
    const bool repulsion = !cfg.repulsion_cutoff || t < *cfg.repulsion_cutoff;
    switch (cfg.kind) {
      case SamplerKind::sgld: ens = sgld_step(ens, target, eps, noise); break;
      case SamplerKind::sgld_r: ens = sgld_r_step(ens, target, cfg.kernel, eps, noise, repulsion); break;
      case SamplerKind::svgd: {
        KernelConfig k = cfg.kernel;
        ens = repulsion ? svgd_step(ens, target, k, eps)
                        : ParticleEnsemble{ens.positions + eps * target(ens.positions), ens.step_index + 1};
        detail::check_positions(ens.positions, ens.positions, t);
        break;
      }
      case SamplerKind::sgdm_r: {
        auto s = sgdm_r_step(ens, mom, target, cfg.kernel, eps, cfg.position_noise ? &noise : nullptr, repulsion);
        ens = std::move(s.ensemble);
        mom = std::move(s.momentum);
        break;
      }
      case SamplerKind::adam_nr: {
        auto s = adam_nr_step(ens, mom, target, cfg.kernel, eps, noise, repulsion);
        ens = std::move(s.ensemble);
        mom = std::move(s.momentum);
        break;
      }
    }
    if (cfg.collection.collects(t + 1) && row < res.samples.rows()) {
      for (Eigen::Index i = 0; i < n; ++i) {
        res.samples.row(row++) = ens.positions.row(i);
        res.sample_iteration.push_back(t + 1);
        res.sample_particle.push_back(static_cast<std::size_t>(i));
      }
    }
  }
  res.wall_clock = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  res.final_state = std::move(ens);
  return res;
}

inline RunResult run(const RunConfig& cfg, const TargetModel& target, std::uint64_t seed) {
  return run(cfg, target.field(), target.dim, seed);
}

}  // namespace pbi
