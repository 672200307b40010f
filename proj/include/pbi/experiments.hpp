#pragma once

// Fixed experiment protocols shared by the command-line tool and the tests.

#include <algorithm>
#include <cstdint>
#include <exception>
#include <functional>
#include <string>
#include <thread>
#include <vector>

#include "pbi/bnn.hpp"
#include "pbi/diagnostics.hpp"
#include "pbi/samplers.hpp"
#include "pbi/targets.hpp"
#include "pbi/vis.hpp"

namespace pbi {

/// Runs job(0..n-1) on up to `threads` workers. Jobs must be independent;
/// the first failing job (lowest index) is rethrown after all workers join.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& job) {
  threads = std::max<std::size_t>(1, std::min(threads, n));
  std::vector<std::exception_ptr> errors(n);
  auto worker = [&](std::size_t w) {
    for (std::size_t i = w; i < n; i += threads) {
      try {
        job(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  if (threads == 1) {
    worker(0);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < threads; ++w) pool.emplace_back(worker, w);
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw InvalidArgument("median: empty input");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------------------
// Synthetic benchmark: mixture of exponentials and the 3x3 Gaussian grid.

enum class SyntheticTarget { moe, mog };

inline std::string to_string(SyntheticTarget t) { return t == SyntheticTarget::moe ? "moe" : "mog"; }

struct SyntheticProtocol {
  std::size_t moe_particles = 10;
  std::size_t mog_particles = 20;
  double moe_eps = 1.0;
  double mog_eps = 0.05;
  std::size_t iterations = 1000;
  std::size_t burn_in = 500;
  std::size_t thin = 10;
  double init_std = 1.0;  // N(0, init_std^2) per coordinate
};

struct BenchRow {
  std::string distribution;
  std::string sampler;
  std::uint64_t seed = 0;
  double ess = 0.0;
  double ess_per_s = 0.0;
  double err_ex = 0.0;   // moe: |E z - 14/9|; mog: |E z1| + |E z2|
  double err_ex2 = 0.0;  // moe: |E z^2 - 50/9|; mog: sum over coordinates of |E zi^2 - m2|
};

inline RunConfig synthetic_config(SyntheticTarget t, SamplerKind kind, const SyntheticProtocol& p) {
  RunConfig c;
  c.kind = kind;
  c.particles = t == SyntheticTarget::moe ? p.moe_particles : p.mog_particles;
  c.schedule.eps0 = t == SyntheticTarget::moe ? p.moe_eps : p.mog_eps;
  c.iterations = p.iterations;
  c.collection = {p.burn_in, p.thin};
  const int dim = t == SyntheticTarget::moe ? 1 : 2;
  c.init = {Vector::Zero(dim), Vector::Constant(dim, p.init_std)};
  return c;
}

inline BenchRow bench_one(SyntheticTarget t, SamplerKind kind, std::uint64_t seed, const SyntheticProtocol& p) {
  const TargetModel target = t == SyntheticTarget::moe ? mixture_of_exponentials() : mog_grid();
  const RunResult r = run(synthetic_config(t, kind, p), target, seed);
  const RunReport rep = summarize(r, target, std::string(to_string(kind)), seed);
  BenchRow row{to_string(t), std::string(to_string(kind)), seed, rep.ess, rep.ess_per_second, 0.0, 0.0};
  for (const auto& m : rep.moment_errors) {
    if (m.name.rfind("mean_", 0) == 0) row.err_ex += m.error;
    if (m.name.rfind("second_", 0) == 0) row.err_ex2 += m.error;
  }
  return row;
}

/// Rows ordered by distribution (moe, mog), sampler (sgld, sgld_r), seed.
inline std::vector<BenchRow> bench_synthetic(const SyntheticProtocol& p, const std::vector<std::uint64_t>& seeds,
                                             std::size_t threads = 1) {
  struct Job {
    SyntheticTarget t;
    SamplerKind k;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (auto t : {SyntheticTarget::moe, SyntheticTarget::mog})
    for (auto k : {SamplerKind::sgld, SamplerKind::sgld_r})
      for (auto s : seeds) jobs.push_back({t, k, s});
  std::vector<BenchRow> rows(jobs.size());
  parallel_for(jobs.size(), threads, [&](std::size_t i) { rows[i] = bench_one(jobs[i].t, jobs[i].k, jobs[i].seed, p); });
  return rows;
}

// ---------------------------------------------------------------------------
// Refined variational inference on the funnel.

struct FunnelProtocol {
  std::size_t iterations = 50;
  std::size_t samples = 16;
  double learning_rate = 0.05;
  double eta = 0.1;
  InnerSampler inner = InnerSampler::sgld;
  EntropyMode entropy = EntropyMode::vis_p;
  AdMode ad = AdMode::full;
  std::size_t infer_particles = 0;
};

inline VisResult vis_funnel_run(const FunnelProtocol& p, std::size_t steps, std::uint64_t seed) {
  RefinedGuide rg;
  rg.guide = DiagonalGaussianGuide::standard(2);
  rg.inner = p.inner;
  rg.eta = p.eta;
  rg.t_refine = steps;
  rg.t_infer = steps;
  rg.entropy = p.entropy;
  rg.ad = p.ad;
  OuterOptimizer opt;
  opt.iterations = p.iterations;
  opt.samples = p.samples;
  opt.learning_rate = p.learning_rate;
  opt.infer_particles = p.infer_particles;
  return optimize(rg, Funnel{}, opt, seed);
}

// ---------------------------------------------------------------------------
// Bayesian neural network regression.

struct BnnProtocol {
  std::size_t particles = 20;
  std::size_t iterations = 2000;
  std::size_t batch_size = 100;
  double eps = 1e-4;
  Eigen::Index hidden = 50;
  double prior_std = 1.0;
  double noise_std = 0.5;
};

struct BnnOutcome {
  PredictiveScore score;
  double wall_clock = 0.0;
};

/// Predictions use the final particle set.
inline BnnOutcome bnn_run(const RegressionDataset& ds, SamplerKind kind, const BnnProtocol& p, std::uint64_t seed) {
  const BnnPotential bnn = make_bnn(ds, p.hidden, p.prior_std, p.noise_std);
  RunConfig c;
  c.kind = kind;
  c.particles = p.particles;
  c.iterations = p.iterations;
  c.schedule.eps0 = p.eps;
  c.collection = {p.iterations - 1, 1};
  c.init = {Vector::Zero(bnn.parameter_count()), bnn_init_std(bnn)};
  const RunResult r = run(c, minibatch_field(bnn, p.batch_size, seed), bnn.parameter_count(), seed);
  return {evaluate(bnn, r.final_state.positions, ds), r.wall_clock};
}

}  // namespace pbi
