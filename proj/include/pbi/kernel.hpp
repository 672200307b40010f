#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "pbi/common.hpp"

namespace pbi {

enum class BandwidthMode { fixed, median };

struct KernelConfig {
  double bandwidth = 1.0;
  BandwidthMode mode = BandwidthMode::median;
  double jitter = 0.0;

  void validate() const {
    if (mode == BandwidthMode::fixed && !(bandwidth > 0.0 && std::isfinite(bandwidth)))
      throw InvalidArgument("KernelConfig: fixed bandwidth must be positive and finite");
    if (!(jitter >= 0.0) || !std::isfinite(jitter))
      throw InvalidArgument("KernelConfig: jitter must be non-negative");
  }
};

/// K_ij = k(z_i, z_j) plus the summed kernel gradients used by the repulsive
/// samplers. grad_terms row i is sum_l grad_{z_l} k(z_l, z_i).
struct KernelMatrix {
  Matrix entries;
  Matrix grad_terms;
  double bandwidth = 1.0;
  bool bandwidth_fallback = false;  // set when the median heuristic degenerated
};

/// exp(-||a - b||^2 / h)
template <class VecA, class VecB>
double rbf(const VecA& a, const VecB& b, double h) {
  if (!(h > 0.0) || !std::isfinite(h)) throw InvalidArgument("rbf: bandwidth must be positive");
  if (!a.allFinite() || !b.allFinite()) throw InvalidArgument("rbf: non-finite input");
  if (a.size() != b.size()) throw InvalidArgument("rbf: dimension mismatch");
  return std::exp(-(a - b).squaredNorm() / h);
}

/// Gradient of k(a, b) with respect to its first argument.
template <class VecA, class VecB>
Vector rbf_grad_first(const VecA& a, const VecB& b, double h) {
  const double k = std::exp(-(a - b).squaredNorm() / h);
  return (-2.0 / h) * k * (a - b);
}

namespace detail {

inline double median_of(std::vector<double> v) {
  const std::size_t n = v.size();
  auto mid = v.begin() + static_cast<std::ptrdiff_t>(n / 2);
  std::nth_element(v.begin(), mid, v.end());
  double upper = *mid;
  if (n % 2 == 1) return upper;
  double lower = *std::max_element(v.begin(), mid);
  return 0.5 * (lower + upper);
}

}  // namespace detail

struct Bandwidth {
  double value = 1.0;
  bool fallback = false;
};

/// Median heuristic h = med^2 / log(L + 1) over pairwise squared distances.
/// Falls back to 1 when every particle coincides.
inline Bandwidth median_bandwidth(const Matrix& particles) {
  const Eigen::Index n = particles.rows();
  if (n < 2) return {1.0, false};
  std::vector<double> sq;
  sq.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) sq.push_back((particles.row(i) - particles.row(j)).squaredNorm());
  const double med = detail::median_of(std::move(sq));
  if (!(med > 0.0)) return {1.0, true};
  return {med / std::log(static_cast<double>(n) + 1.0), false};
}

inline Bandwidth resolve_bandwidth(const Matrix& particles, const KernelConfig& cfg) {
  if (cfg.mode == BandwidthMode::fixed) return {cfg.bandwidth, false};
  return median_bandwidth(particles);
}

inline KernelMatrix kernel_matrix(const Matrix& particles, const KernelConfig& cfg) {
  cfg.validate();
  const Eigen::Index n = particles.rows();
  const Eigen::Index d = particles.cols();
  if (n < 1) throw InvalidArgument("kernel_matrix: need at least one particle");
  if (!particles.allFinite()) throw InvalidArgument("kernel_matrix: non-finite particle coordinates");

  const Bandwidth bw = resolve_bandwidth(particles, cfg);
  const double h = bw.value;

  KernelMatrix km;
  km.bandwidth = h;
  km.bandwidth_fallback = bw.fallback;
  km.entries.setIdentity(n, n);
  km.grad_terms.setZero(n, d);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double k = std::exp(-(particles.row(i) - particles.row(j)).squaredNorm() / h);
      km.entries(i, j) = k;
      km.entries(j, i) = k;
    }
  }
  const double scale = 2.0 / h;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index l = 0; l < n; ++l)
      if (l != i) km.grad_terms.row(i) += (scale * km.entries(l, i)) * (particles.row(i) - particles.row(l));
  return km;
}

/// Lower Cholesky factor of K + jitter*I, escalating the jitter on failure.
struct KernelFactor {
  Matrix lower;
  double jitter = 0.0;
};

inline KernelFactor factor_kernel(const Matrix& k, double base_jitter = 0.0) {
  std::vector<double> ladder{base_jitter};
  for (double j = 1e-10; j <= 1e-4 * (1 + 1e-9); j *= 10.0)
    if (j > base_jitter) ladder.push_back(j);

  const Eigen::Index n = k.rows();
  for (double jitter : ladder) {
    Matrix shifted = k;
    shifted.diagonal().array() += jitter;
    Eigen::LLT<Matrix> llt(shifted);
    if (llt.info() == Eigen::Success) {
      Matrix lower = llt.matrixL();
      if (lower.allFinite()) return {lower, jitter};
    }
  }
  std::ostringstream msg;
  msg << "factor_kernel: Cholesky failed for " << n << "x" << n << " kernel matrix; tried jitter";
  for (double j : ladder) msg << ' ' << j;
  throw NumericalError(msg.str());
}

/// Correlated noise with covariance (2 eps / L) K across particles, independent
/// across coordinates: column j is sqrt(2 eps / L) * chol(K) * xi_j.
inline Matrix sample_repulsive_noise(const KernelFactor& factor, double eps, ParticleStreams& streams,
                                     Eigen::Index dim) {
  if (!(eps >= 0.0) || !std::isfinite(eps)) throw InvalidArgument("sample_repulsive_noise: eps must be >= 0");
  const Eigen::Index n = factor.lower.rows();
  Matrix xi = streams.standard_normal(n, dim);
  return std::sqrt(2.0 * eps / static_cast<double>(n)) * (factor.lower * xi);
}

inline Matrix sample_repulsive_noise(const KernelMatrix& km, double eps, ParticleStreams& streams,
                                     double jitter = 0.0) {
  return sample_repulsive_noise(factor_kernel(km.entries, jitter), eps, streams, km.grad_terms.cols());
}

}  // namespace pbi
