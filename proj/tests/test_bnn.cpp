#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <numeric>
#include <vector>

#include "datasets.hpp"
#include "pbi/bnn.hpp"
#include "pbi/experiments.hpp"

using namespace pbi;

namespace {

std::filesystem::path linear_csv(const std::string& name, int rows = 500) {
  const auto p = testdata::scratch_dir(name) / "linear.csv";
  testdata::write_linear_csv(p, rows, 2024);
  return p;
}

BnnPotential small_net(const RegressionDataset& ds, Eigen::Index hidden = 6) { return make_bnn(ds, hidden, 1.0, 0.5); }

Vector random_theta(const BnnPotential& b, std::uint64_t seed) {
  NormalStream s(seed, 0, 3);
  Vector t(b.parameter_count());
  for (Eigen::Index i = 0; i < t.size(); ++i) t[i] = 0.7 * s.normal();
  return t;
}

// On/off state of every hidden unit for every batch row.
std::vector<bool> relu_pattern(const BnnPotential& b, const Vector& theta, std::span<const std::size_t> batch) {
  const Eigen::Index h = b.hidden_dim, in = b.input_dim;
  std::vector<bool> on;
  for (std::size_t j : batch)
    for (Eigen::Index k = 0; k < h; ++k) {
      double pre = theta[h * in + k];
      for (Eigen::Index i = 0; i < in; ++i) pre += theta[k * in + i] * b.x(static_cast<Eigen::Index>(j), i);
      on.push_back(pre > 0.0);
    }
  return on;
}

std::vector<std::size_t> iota(std::size_t n) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), std::size_t{0});
  return v;
}

}  // namespace

TEST(LoadCsv, TrainingColumnsAreStandardized) {
  const auto p = linear_csv("std", 20);
  const RegressionDataset ds = load_csv(p.string(), "y", 0.5, 1);
  ASSERT_EQ(ds.x_train.rows(), 10);
  for (Eigen::Index c = 0; c < ds.x_train.cols(); ++c) {
    const Vector col = ds.x_train.col(c);
    EXPECT_NEAR(col.mean(), 0.0, 1e-14);
    EXPECT_NEAR(std::sqrt((col.array() - col.mean()).square().mean()), 1.0, 1e-14);
  }
  EXPECT_NEAR(ds.y_train.mean(), 0.0, 1e-14);
  EXPECT_NEAR(std::sqrt(ds.y_train.array().square().mean()), 1.0, 1e-14);
}

TEST(LoadCsv, TooFewRowsRejected) {
  const auto p = linear_csv("few", 10);
  EXPECT_THROW(load_csv(p.string(), "y"), InvalidArgument);
}

TEST(LoadCsv, SplitSizesAndDeterminism) {
  const auto p = linear_csv("split", 100);
  const RegressionDataset a = load_csv(p.string(), "y", 0.9, 5), b = load_csv(p.string(), "y", 0.9, 5);
  EXPECT_EQ(a.train_index.size(), 90u);
  EXPECT_EQ(a.test_index.size(), 10u);
  EXPECT_EQ(a.train_index, b.train_index);
  EXPECT_EQ(a.test_index, b.test_index);
  EXPECT_NE(load_csv(p.string(), "y", 0.9, 6).train_index, a.train_index);
}

TEST(LoadCsv, NonNumericCellReportsPosition) {
  const auto dir = testdata::scratch_dir("bad");
  {
    std::ofstream out(dir / "bad.csv");
    out << "a,b,y\n";
    for (int i = 0; i < 25; ++i) out << i << ',' << (i == 7 ? "oops" : "1.5") << ',' << i * 2 << '\n';
  }
  try {
    load_csv((dir / "bad.csv").string(), "y");
    FAIL() << "expected parse error";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.row, 9u);  // header is line 1
    EXPECT_EQ(e.column, 2u);
  }
}

TEST(LoadCsv, ZeroVarianceColumnDropped) {
  const auto dir = testdata::scratch_dir("flat");
  {
    std::ofstream out(dir / "flat.csv");
    out << "a,const,y\n";
    for (int i = 0; i < 30; ++i) out << i * 0.1 << ",4," << (i % 7) << '\n';
  }
  const RegressionDataset ds = load_csv((dir / "flat.csv").string(), "y");
  EXPECT_EQ(ds.input_dim(), 1);
  ASSERT_EQ(ds.warnings.size(), 1u);
  EXPECT_NE(ds.warnings[0].find("const"), std::string::npos);
}

TEST(LoadCsv, BundledDiabetesData) {
  const RegressionDataset ds = load_csv(testdata::data_dir() + "/diabetes.csv", "target", 0.9, 0);
  EXPECT_EQ(ds.input_dim(), 10);
  EXPECT_EQ(ds.x_train.rows() + ds.x_test.rows(), 442);
}

TEST(Standardization, RoundTrip) {
  const auto p = linear_csv("round", 60);
  std::ifstream in(p);
  std::string header, line;
  std::getline(in, header);
  std::vector<double> ys;
  while (std::getline(in, line)) ys.push_back(std::stod(line.substr(line.rfind(',') + 1)));
  const RegressionDataset ds = load_csv(p.string(), "y", 0.8, 2);
  for (std::size_t i = 0; i < ds.train_index.size(); ++i)
    EXPECT_NEAR(ds.target_stats.inverse(ds.y_train[static_cast<Eigen::Index>(i)]), ys[ds.train_index[i]], 1e-10);
  for (std::size_t i = 0; i < ds.test_index.size(); ++i)
    EXPECT_NEAR(ds.target_stats.inverse(ds.y_test[static_cast<Eigen::Index>(i)]), ys[ds.test_index[i]], 1e-10);
}

TEST(BnnPotential, ParameterCount) {
  BnnPotential b;
  b.input_dim = 8;
  EXPECT_EQ(b.parameter_count(), 50 * 9 + 50 + 1);
}

TEST(PotentialGrad, MatchesFiniteDifferences) {
  const RegressionDataset ds = load_csv(linear_csv("fd").string(), "y", 0.9, 3);
  const BnnPotential b = small_net(ds);
  std::vector<std::size_t> batch;
  for (std::size_t i = 0; i < 40; ++i) batch.push_back(3 * i);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Vector theta = random_theta(b, s);
    const Vector g = potential_grad(b, theta, batch);
    const double h = 1e-5;
    double worst = 0.0;
    int skipped = 0;
    for (Eigen::Index i = 0; i < theta.size(); ++i) {
      Vector tp = theta, tm = theta;
      tp[i] += h;
      tm[i] -= h;
      // the potential is not differentiable where a unit switches on or off
      if (relu_pattern(b, tp, batch) != relu_pattern(b, tm, batch)) {
        ++skipped;
        continue;
      }
      const double fd = (b.potential(tp, batch) - b.potential(tm, batch)) / (2.0 * h);
      worst = std::max(worst, std::abs(g[i] - fd) / std::max(1.0, std::abs(fd)));
    }
    EXPECT_LT(worst, 1e-5) << "theta " << s;
    EXPECT_LT(skipped, theta.size() / 4) << "theta " << s;
  }
}

TEST(PotentialGrad, EmptyDatasetIsPriorOnly) {
  BnnPotential b;
  b.input_dim = 2;
  b.hidden_dim = 3;
  b.prior_std = 2.0;
  const Vector theta = random_theta(b, 1);
  EXPECT_LT((potential_grad(b, theta, {}) - theta / 4.0).norm(), 1e-15);
}

TEST(PotentialGrad, DeadUnitHasNoFirstLayerDataGradient) {
  const RegressionDataset ds = load_csv(linear_csv("dead").string(), "y", 0.9, 3);
  const BnnPotential b = small_net(ds);
  Vector theta = random_theta(b, 4);
  const Eigen::Index in = b.input_dim, h = b.hidden_dim, k = 2;
  for (Eigen::Index i = 0; i < in; ++i) theta[k * in + i] = 0.0;
  theta[h * in + k] = -5.0;  // bias keeps the unit off for every input
  const auto batch = iota(b.dataset_size());
  const Vector g = potential_grad(b, theta, batch);
  const Vector prior = theta / (b.prior_std * b.prior_std);
  for (Eigen::Index i = 0; i < in; ++i) EXPECT_EQ(g[k * in + i], prior[k * in + i]);
  EXPECT_EQ(g[h * in + k], prior[h * in + k]);
}

TEST(PotentialGrad, ExhaustivePartitionIsUnbiased) {
  const RegressionDataset ds = load_csv(linear_csv("part").string(), "y", 0.9, 3);
  const BnnPotential b = small_net(ds);
  const Vector theta = random_theta(b, 5);
  const std::size_t n = b.dataset_size();
  const Vector full = potential_grad(b, theta, iota(n));
  Vector avg = Vector::Zero(theta.size());
  for (std::size_t start = 0; start < n; start += 100) {
    std::vector<std::size_t> batch;
    for (std::size_t i = start; i < std::min(n, start + 100); ++i) batch.push_back(i);
    avg += (static_cast<double>(batch.size()) / static_cast<double>(n)) * potential_grad(b, theta, batch);
  }
  EXPECT_LT((avg - full).norm() / full.norm(), 1e-12);
}

TEST(Predict, SingleParticle) {
  const RegressionDataset ds = load_csv(linear_csv("pred1").string(), "y", 0.9, 3);
  const BnnPotential b = small_net(ds);
  const Vector theta = random_theta(b, 6);
  const Prediction p = predict(b, theta.transpose(), ds.x_test);
  for (Eigen::Index i = 0; i < ds.x_test.rows(); ++i) {
    EXPECT_EQ(p.mean[i], b.forward(theta, ds.x_test.row(i).transpose()));
    EXPECT_EQ(p.std[i], b.noise_std);
  }
}

TEST(Predict, IdenticalParticlesCollapse) {
  const RegressionDataset ds = load_csv(linear_csv("pred2").string(), "y", 0.9, 3);
  const BnnPotential b = small_net(ds);
  const Vector theta = random_theta(b, 7);
  Matrix particles(4, theta.size());
  for (int k = 0; k < 4; ++k) particles.row(k) = theta.transpose();
  const Prediction many = predict(b, particles, ds.x_test), one = predict(b, theta.transpose(), ds.x_test);
  for (Eigen::Index i = 0; i < ds.x_test.rows(); ++i) {
    EXPECT_NEAR(many.mean[i], one.mean[i], 1e-14);
    EXPECT_NEAR(many.log_likelihood(i, 0.3), one.log_likelihood(i, 0.3), 1e-13);
  }
}

TEST(Predict, MixtureLogLikelihoodMatchesDirectSum) {
  const RegressionDataset ds = load_csv(linear_csv("pred3").string(), "y", 0.9, 3);
  const BnnPotential b = small_net(ds);
  Matrix particles(5, b.parameter_count());
  for (int k = 0; k < 5; ++k) particles.row(k) = random_theta(b, 10 + k).transpose();
  const Prediction p = predict(b, particles, ds.x_test, ds.target_stats);
  const double sd = b.noise_std * ds.target_stats.std;
  for (Eigen::Index i = 0; i < ds.x_test.rows(); ++i) {
    const double y = ds.target_stats.inverse(ds.y_test[i]);
    double dens = 0.0;
    for (int k = 0; k < 5; ++k) {
      const double mu = ds.target_stats.inverse(b.forward(particles.row(k).transpose(), ds.x_test.row(i).transpose()));
      dens += std::exp(-0.5 * (y - mu) * (y - mu) / (sd * sd)) / (sd * std::sqrt(2.0 * M_PI)) / 5.0;
    }
    EXPECT_NEAR(p.log_likelihood(i, y), std::log(dens), 1e-12);
  }
}

TEST(MinibatchField, ReproducibleAndEpochCovering) {
  const RegressionDataset ds = load_csv(linear_csv("field").string(), "y", 0.9, 3);
  const BnnPotential b = small_net(ds);
  const Matrix z = random_theta(b, 8).transpose();
  const GradientField f1 = minibatch_field(b, 100, 4), f2 = minibatch_field(b, 100, 4);
  for (int t = 0; t < 6; ++t) EXPECT_TRUE((f1(z).array() == f2(z).array()).all());
  // over one epoch the batches partition the training set, so their mean is the full gradient
  const GradientField f = minibatch_field(b, 50, 9);
  const std::size_t n = b.dataset_size();
  ASSERT_EQ(n % 50, 0u);
  Vector avg = Vector::Zero(z.cols());
  for (std::size_t k = 0; k < n / 50; ++k) avg += -f(z).row(0).transpose();
  avg /= static_cast<double>(n / 50);
  const Vector full = potential_grad(b, z.row(0).transpose(), iota(n));
  EXPECT_LT((avg - full).norm() / full.norm(), 1e-12);
}

TEST(BnnRun, ShortRunsStayFinite) {
  const RegressionDataset ds = load_csv(linear_csv("run").string(), "y", 0.9, 1);
  BnnProtocol p;
  p.particles = 5;
  p.iterations = 200;
  for (SamplerKind k : {SamplerKind::sgld, SamplerKind::sgld_r}) {
    const BnnOutcome o = bnn_run(ds, k, p, 1);
    EXPECT_TRUE(std::isfinite(o.score.rmse)) << to_string(k);
    EXPECT_TRUE(std::isfinite(o.score.test_ll)) << to_string(k);
  }
}
