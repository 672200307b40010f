#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "pbi/common.hpp"
#include "pbi/samplers.hpp"
#include "pbi/targets.hpp"

namespace pbi {

struct DegenerateChain : NumericalError {
  using NumericalError::NumericalError;
};

/// Effective sample size N / (1 + 2 sum_k rho_k), summing autocorrelations
/// until the first non-positive estimate. Clamped to [1, N].
inline double ess(std::span<const double> chain) {
  const std::size_t n = chain.size();
  if (n < 10) throw InvalidArgument("ess: chain needs at least 10 draws");
  const double mean = std::accumulate(chain.begin(), chain.end(), 0.0) / static_cast<double>(n);
  std::vector<double> c(chain.begin(), chain.end());
  for (double& x : c) x -= mean;
  auto autocov = [&](std::size_t lag) {
    double s = 0.0;
    for (std::size_t t = 0; t + lag < n; ++t) s += c[t] * c[t + lag];
    return s / static_cast<double>(n);
  };
  const double c0 = autocov(0);
  if (!(c0 > 0.0)) throw DegenerateChain("ess: chain has zero variance");
  double rho_sum = 0.0;
  for (std::size_t lag = 1; lag < n; ++lag) {
    const double rho = autocov(lag) / c0;
    if (!(rho > 0.0)) break;
    rho_sum += rho;
  }
  const double value = static_cast<double>(n) / (1.0 + 2.0 * rho_sum);
  return std::clamp(value, 1.0, static_cast<double>(n));
}

/// Potential scale reduction from between- and within-chain variances.
inline double gelman_rubin(const std::vector<std::vector<double>>& chains) {
  const std::size_t m = chains.size();
  if (m < 2) throw InvalidArgument("gelman_rubin: need at least two chains");
  const std::size_t n = chains.front().size();
  for (const auto& c : chains)
    if (c.size() != n) throw InvalidArgument("gelman_rubin: chains have unequal lengths");
  if (n < 10) throw InvalidArgument("gelman_rubin: chains need at least 10 draws");

  std::vector<double> means(m);
  double within = 0.0;
  for (std::size_t j = 0; j < m; ++j) {
    means[j] = std::accumulate(chains[j].begin(), chains[j].end(), 0.0) / static_cast<double>(n);
    double ss = 0.0;
    for (double x : chains[j]) ss += (x - means[j]) * (x - means[j]);
    within += ss / static_cast<double>(n - 1);
  }
  within /= static_cast<double>(m);
  const double grand = std::accumulate(means.begin(), means.end(), 0.0) / static_cast<double>(m);
  double between = 0.0;
  for (double mu : means) between += (mu - grand) * (mu - grand);
  between *= static_cast<double>(n) / static_cast<double>(m - 1);
  if (!(within > 0.0)) throw DegenerateChain("gelman_rubin: zero within-chain variance");
  const double nn = static_cast<double>(n);
  const double pooled = (nn - 1.0) / nn * within + between / nn;
  return std::sqrt(pooled / within);
}

/// |mean(x_c^p) - exact| over sample rows.
inline double moment_error(const Matrix& samples, const ReferenceMoment& m) {
  if (samples.rows() == 0) throw InvalidArgument("moment_error: no samples");
  const double est = samples.col(m.coordinate).array().pow(m.power).mean();
  return std::abs(est - m.exact);
}

inline double sample_moment(const Matrix& samples, int coordinate, int power) {
  if (samples.rows() == 0) throw InvalidArgument("sample_moment: no samples");
  return samples.col(coordinate).array().pow(power).mean();
}

/// Maximum absolute Fokker-Planck residual -d/dz[drift pi] + d2/dz2[D pi] of
/// the normalized 1D target on a uniform grid, by central differences at the
/// interior nodes. Zero (up to O(dz^2)) certifies pi as stationary.
inline double fp_residual(const std::function<double(double)>& log_target, const std::function<double(double)>& drift,
                          double diffusion, double a, double b, std::size_t n) {
  if (!(diffusion >= 0.0)) throw InvalidArgument("fp_residual: diffusion must be >= 0");
  if (n < 100) throw InvalidArgument("fp_residual: need at least 100 grid points");
  if (!(b > a)) throw InvalidArgument("fp_residual: empty grid interval");

  const double dz = (b - a) / static_cast<double>(n - 1);
  std::vector<double> z(n), pi(n), flux(n);
  double peak = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) {
    z[i] = a + dz * static_cast<double>(i);
    pi[i] = log_target(z[i]);
    peak = std::max(peak, pi[i]);
  }
  double mass = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    pi[i] = std::exp(pi[i] - peak);
    mass += (i == 0 || i + 1 == n ? 0.5 : 1.0) * pi[i];
  }
  mass *= dz;
  for (std::size_t i = 0; i < n; ++i) {
    pi[i] /= mass;
    flux[i] = drift(z[i]) * pi[i];
  }
  double worst = 0.0;
  for (std::size_t i = 1; i + 1 < n; ++i) {
    const double advect = -(flux[i + 1] - flux[i - 1]) / (2.0 * dz);
    const double diffuse = diffusion * (pi[i + 1] - 2.0 * pi[i] + pi[i - 1]) / (dz * dz);
    worst = std::max(worst, std::abs(advect + diffuse));
  }
  return worst;
}

struct MomentEstimate {
  std::string name;
  double estimate = 0.0;
  double exact = 0.0;
  double error = 0.0;
};

struct RunReport {
  std::string sampler;
  std::string target;
  std::uint64_t seed = 0;
  double ess = 0.0;
  double ess_per_second = 0.0;
  std::vector<MomentEstimate> moment_errors;
  std::vector<double> rhat;  // per dimension; empty when fewer than 2 chains or 10 draws
  double wall_clock = 0.0;
  std::size_t collected_count = 0;
};

/// Collected samples mapped back to the space the reference moments refer to.
inline Matrix original_space(const RunResult& r, const TargetModel& target) {
  if (r.samples.rows() == 0) return r.samples;
  const Vector first = target.to_original(r.samples.row(0).transpose());
  Matrix out(r.samples.rows(), first.size());
  for (Eigen::Index i = 0; i < r.samples.rows(); ++i) out.row(i) = target.to_original(r.samples.row(i).transpose()).transpose();
  return out;
}

/// Pooled ESS: every particle's collected trajectory concatenated
/// (particle-major) into one sequence per coordinate; the minimum over
/// coordinates is reported.
inline double pooled_ess(const RunResult& r, const Matrix& values) {
  double best = std::numeric_limits<double>::infinity();
  for (Eigen::Index d = 0; d < values.cols(); ++d) {
    std::vector<double> seq;
    seq.reserve(static_cast<std::size_t>(values.rows()));
    for (std::size_t p = 0; p < r.particles; ++p)
      for (Eigen::Index row = 0; row < values.rows(); ++row)
        if (r.sample_particle[static_cast<std::size_t>(row)] == p) seq.push_back(values(row, d));
    double e = 1.0;  // a frozen chain carries one effective draw
    try {
      e = ess(seq);
    } catch (const DegenerateChain&) {
    }
    best = std::min(best, e);
  }
  return best;
}

inline RunReport summarize(const RunResult& r, const TargetModel& target, std::string sampler, std::uint64_t seed) {
  RunReport rep;
  rep.sampler = std::move(sampler);
  rep.target = target.name;
  rep.seed = seed;
  rep.wall_clock = r.wall_clock;
  rep.collected_count = r.collected_count();
  const Matrix values = original_space(r, target);
  rep.ess = pooled_ess(r, values);
  rep.ess_per_second = r.wall_clock > 0.0 ? rep.ess / r.wall_clock : 0.0;
  for (const auto& m : target.reference_moments) {
    const double est = sample_moment(values, m.coordinate, m.power);
    rep.moment_errors.push_back({m.name, est, m.exact, std::abs(est - m.exact)});
  }
  if (r.particles >= 2 && r.draws_per_particle() >= 10) {
    for (Eigen::Index d = 0; d < values.cols(); ++d) {
      std::vector<std::vector<double>> chains(r.particles);
      for (Eigen::Index row = 0; row < values.rows(); ++row)
        chains[r.sample_particle[static_cast<std::size_t>(row)]].push_back(values(row, d));
      try {
        rep.rhat.push_back(gelman_rubin(chains));
      } catch (const DegenerateChain&) {
        rep.rhat.push_back(std::numeric_limits<double>::quiet_NaN());
      }
    }
  }
  return rep;
}

}  // namespace pbi
