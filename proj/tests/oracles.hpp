#pragma once

// Independent reference computations shared by the unit tests and the
// acceptance binary.

#include <cmath>
#include <cstdint>

#include "pbi/targets.hpp"
#include "pbi/vis.hpp"

namespace oracle {

using pbi::Matrix;
using pbi::Vector;

/// -grad log qhat(z_m) - (1/L) sum_l grad_z K(z_m, z_l) / qhat(z_l) for the
/// Gaussian KDE qhat(z) = (1/L) sum_n exp(-||z - z_n||^2 / h), written out
/// density-first rather than through the kernel matrix.
inline Matrix kde_entropy_grad(const Matrix& z, double h) {
  const Eigen::Index n = z.rows(), d = z.cols();
  auto kernel = [&](const Vector& a, const Vector& b) { return std::exp(-(a - b).squaredNorm() / h); };
  auto grad_kernel = [&](const Vector& a, const Vector& b) -> Vector { return (-2.0 / h) * kernel(a, b) * (a - b); };
  auto density = [&](const Vector& x) {
    double s = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) s += kernel(x, z.row(i).transpose());
    return s / static_cast<double>(n);
  };
  auto density_grad = [&](const Vector& x) {
    Vector g = Vector::Zero(d);
    for (Eigen::Index i = 0; i < n; ++i) g += grad_kernel(x, z.row(i).transpose());
    return Vector(g / static_cast<double>(n));
  };
  Matrix out(n, d);
  for (Eigen::Index m = 0; m < n; ++m) {
    const Vector zm = z.row(m).transpose();
    Vector r = -density_grad(zm) / density(zm);
    for (Eigen::Index l = 0; l < n; ++l) {
      const Vector zl = z.row(l).transpose();
      r -= grad_kernel(zm, zl) / (static_cast<double>(n) * density(zl));
    }
    out.row(m) = r.transpose();
  }
  return out;
}

struct BoundCount {
  int tighter = 0;
  int total = 0;
};

/// Seeds on which the one-step SGD-refined VIS-P ELBO is at least the plain
/// ELBO of the same guide, with both estimates built from the same draws.
template <class Model>
BoundCount tighter_bound(const Model& model, int dim, double eta, int seeds, std::size_t samples = 16) {
  BoundCount c;
  pbi::RefinedGuide rg;
  rg.guide = pbi::DiagonalGaussianGuide::standard(dim);
  rg.inner = pbi::InnerSampler::sgd;
  rg.entropy = pbi::EntropyMode::vis_p;
  rg.t_refine = 1;
  rg.eta = eta;
  for (int s = 1; s <= seeds; ++s) {
    const auto noise = pbi::draw_refinement_noise(samples, dim, 1, static_cast<std::uint64_t>(s));
    if (pbi::elbo(rg, model, noise) >= pbi::plain_elbo(rg.guide, model, noise)) ++c.tighter;
    ++c.total;
  }
  return c;
}

}  // namespace oracle
