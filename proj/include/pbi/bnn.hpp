#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <functional>
#include <memory>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pbi/common.hpp"
#include "pbi/targets.hpp"

namespace pbi {

struct ParseError : std::runtime_error {
  ParseError(const std::string& what, std::size_t row, std::size_t column)
      : std::runtime_error(what), row(row), column(column) {}
  std::size_t row;     // 1-based line number in the file
  std::size_t column;  // 1-based
};

struct Standardization {
  double mean = 0.0;
  double std = 1.0;

  double forward(double x) const { return (x - mean) / std; }
  double inverse(double z) const { return z * std + mean; }
};

/// Features and targets standardized with training-split statistics.
struct RegressionDataset {
  std::vector<std::string> feature_names;
  std::string target_name;
  Matrix x_train, x_test;
  Vector y_train, y_test;
  std::vector<Standardization> feature_stats;
  Standardization target_stats;
  std::vector<std::size_t> train_index, test_index;  // rows of the source file (0-based, header excluded)
  std::uint64_t split_seed = 0;
  std::vector<std::string> warnings;

  Eigen::Index input_dim() const { return x_train.cols(); }
};

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

inline std::string trim(std::string s) {
  const auto keep = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), keep));
  s.erase(std::find_if(s.rbegin(), s.rend(), keep).base(), s.end());
  return s;
}

inline Standardization column_stats(const Vector& v) {
  const double mean = v.mean();
  const double var = (v.array() - mean).square().mean();
  return {mean, std::sqrt(var)};
}

}  // namespace detail

/// Reads a comma-separated file with a header row and numeric cells, splits
/// rows into train/test with a seeded shuffle and standardizes every column
/// with the training statistics. Zero-variance feature columns are dropped.
inline RegressionDataset load_csv(const std::string& path, const std::string& target_column,
                                  double train_fraction = 0.9, std::uint64_t seed = 0) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw InvalidArgument("load_csv: train fraction must lie in (0, 1)");
  std::ifstream in(path);
  if (!in) throw InvalidArgument("load_csv: cannot open " + path);

  std::string line;
  if (!std::getline(in, line)) throw ParseError("load_csv: missing header row", 1, 1);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::vector<std::string> header = detail::split_csv_line(line);
  for (auto& h : header) h = detail::trim(h);
  const auto target_it = std::find(header.begin(), header.end(), target_column);
  if (target_it == header.end()) throw InvalidArgument("load_csv: no column named '" + target_column + "'");
  const auto target_col = static_cast<std::size_t>(target_it - header.begin());

  std::vector<std::vector<double>> rows;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != header.size())
      throw ParseError("load_csv: line " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                           " cells, expected " + std::to_string(header.size()),
                       line_no, std::min(cells.size(), header.size()) + 1);
    std::vector<double> row(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) {
      const std::string cell = detail::trim(cells[c]);
      const char* first = cell.data();
      const char* last = cell.data() + cell.size();
      const auto [ptr, ec] = std::from_chars(first, last, row[c]);
      if (cell.empty() || ec != std::errc() || ptr != last || !std::isfinite(row[c]))
        throw ParseError("load_csv: non-numeric cell '" + cell + "' at line " + std::to_string(line_no) +
                             ", column " + std::to_string(c + 1) + " (" + header[c] + ")",
                         line_no, c + 1);
    }
    rows.push_back(std::move(row));
  }
  const std::size_t n = rows.size();
  if (n < 20) throw InvalidArgument("load_csv: need at least 20 data rows");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  if (n_train < 1 || n_train >= n) throw InvalidArgument("load_csv: split leaves an empty train or test set");

  RegressionDataset ds;
  ds.split_seed = seed;
  ds.target_name = target_column;
  ds.train_index.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  ds.test_index.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());

  auto column = [&](std::size_t c, const std::vector<std::size_t>& idx) {
    Vector v(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) v[static_cast<Eigen::Index>(i)] = rows[idx[i]][c];
    return v;
  };

  std::vector<std::size_t> kept;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c == target_col) continue;
    const Standardization st = detail::column_stats(column(c, ds.train_index));
    if (!(st.std > 0.0)) {
      ds.warnings.push_back("dropped zero-variance column '" + header[c] + "'");
      continue;
    }
    kept.push_back(c);
    ds.feature_names.push_back(header[c]);
    ds.feature_stats.push_back(st);
  }
  if (kept.empty()) throw InvalidArgument("load_csv: no usable feature columns");

  ds.target_stats = detail::column_stats(column(target_col, ds.train_index));
  if (!(ds.target_stats.std > 0.0)) throw InvalidArgument("load_csv: target column has zero variance");

  auto build = [&](const std::vector<std::size_t>& idx, Matrix& x, Vector& y) {
    x.resize(static_cast<Eigen::Index>(idx.size()), static_cast<Eigen::Index>(kept.size()));
    y.resize(static_cast<Eigen::Index>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i) {
      for (std::size_t k = 0; k < kept.size(); ++k)
        x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = ds.feature_stats[k].forward(rows[idx[i]][kept[k]]);
      y[static_cast<Eigen::Index>(i)] = ds.target_stats.forward(rows[idx[i]][target_col]);
    }
  };
  build(ds.train_index, ds.x_train, ds.y_train);
  build(ds.test_index, ds.x_test, ds.y_test);
  return ds;
}

/// One-hidden-layer ReLU regression network with a Gaussian prior on every
/// weight and Gaussian observation noise. Parameters are flattened as
/// [W1 (hidden x input, row-major), b1 (hidden), w2 (hidden), b2].
struct BnnPotential {
  Eigen::Index input_dim = 1;
  Eigen::Index hidden_dim = 50;
  double prior_std = 1.0;
  double noise_std = 0.5;
  Matrix x;  // standardized training inputs; may be empty
  Vector y;

  Eigen::Index parameter_count() const { return hidden_dim * (input_dim + 1) + hidden_dim + 1; }
  std::size_t dataset_size() const { return static_cast<std::size_t>(x.rows()); }

  void validate() const {
    if (input_dim < 1 || hidden_dim < 1) throw InvalidArgument("BnnPotential: dimensions must be >= 1");
    if (!(prior_std > 0.0) || !(noise_std > 0.0)) throw InvalidArgument("BnnPotential: std parameters must be > 0");
    if (x.rows() != y.size() || (x.rows() > 0 && x.cols() != input_dim))
      throw InvalidArgument("BnnPotential: data shape does not match the network");
  }

  using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  struct Layers {
    Eigen::Map<const RowMatrix> w1;  // hidden x input
    Eigen::Map<const Vector> b1;
    Eigen::Map<const Vector> w2;
    double b2;
  };

  Layers unpack(const Vector& theta) const {
    if (theta.size() != parameter_count()) throw InvalidArgument("BnnPotential: wrong parameter count");
    const double* p = theta.data();
    const Eigen::Index h = hidden_dim, in = input_dim;
    return {Eigen::Map<const RowMatrix>(p, h, in), Eigen::Map<const Vector>(p + h * in, h), Eigen::Map<const Vector>(p + h * in + h, h),
            p[h * in + 2 * h]};
  }

  double forward(const Vector& theta, const Eigen::Ref<const Vector>& input) const {
    const Layers l = unpack(theta);
    const Vector a = (l.w1 * input + l.b1).cwiseMax(0.0);
    return l.w2.dot(a) + l.b2;
  }

  /// U(theta) = |theta|^2 / (2 prior^2) + (N / |batch|) sum_j (y_j - f_j)^2 / (2 noise^2)
  double potential(const Vector& theta, std::span<const std::size_t> batch) const {
    double u = theta.squaredNorm() / (2.0 * prior_std * prior_std);
    if (dataset_size() == 0) return u;
    if (batch.empty()) throw InvalidArgument("BnnPotential: empty batch");
    double data = 0.0;
    for (std::size_t j : batch) {
      const double r = y[static_cast<Eigen::Index>(j)] - forward(theta, x.row(static_cast<Eigen::Index>(j)).transpose());
      data += r * r;
    }
    return u + static_cast<double>(dataset_size()) / static_cast<double>(batch.size()) * data /
                   (2.0 * noise_std * noise_std);
  }

  /// grad_theta U for one data point, likelihood part only (unscaled).
  Vector point_grad(const Vector& theta, std::size_t j) const {
    const Layers l = unpack(theta);
    const Eigen::Index h = hidden_dim, in = input_dim;
    const Vector input = x.row(static_cast<Eigen::Index>(j)).transpose();
    const Vector pre = l.w1 * input + l.b1;
    const Vector a = pre.cwiseMax(0.0);
    const double f = l.w2.dot(a) + l.b2;
    const double df = -(y[static_cast<Eigen::Index>(j)] - f) / (noise_std * noise_std);

    Vector g(parameter_count());
    for (Eigen::Index k = 0; k < h; ++k) {
      const double back = pre[k] > 0.0 ? df * l.w2[k] : 0.0;
      for (Eigen::Index i = 0; i < in; ++i) g[k * in + i] = back * input[i];
      g[h * in + k] = back;
      g[h * in + h + k] = df * a[k];
    }
    g[h * in + 2 * h] = df;
    return g;
  }

  MinibatchPotential as_minibatch() const {
    MinibatchPotential mp;
    mp.dataset_size = dataset_size();
    const double inv_var = 1.0 / (prior_std * prior_std);
    mp.prior_grad = [inv_var](const Vector& theta) { return Vector(theta * inv_var); };
    mp.per_point_grad = [self = *this](const Vector& theta, std::size_t j) { return self.point_grad(theta, j); };
    return mp;
  }
};

/// grad_theta U: prior gradient plus the (N / |batch|)-scaled data gradient.
inline Vector potential_grad(const BnnPotential& bnn, const Vector& theta, std::span<const std::size_t> batch) {
  Vector g = theta / (bnn.prior_std * bnn.prior_std);
  if (bnn.dataset_size() == 0) return g;
  if (batch.empty()) throw InvalidArgument("potential_grad: empty batch");
  Vector data = Vector::Zero(theta.size());
  for (std::size_t j : batch) {
    if (j >= bnn.dataset_size()) throw InvalidArgument("potential_grad: batch index outside the training set");
    data += bnn.point_grad(theta, j);
  }
  g += static_cast<double>(bnn.dataset_size()) / static_cast<double>(batch.size()) * data;
  if (!g.allFinite()) throw NumericalError("potential_grad: non-finite gradient");
  return g;
}

/// Minibatch grad log posterior for a particle matrix. Each call draws the
/// next batch from a seeded reshuffle-per-epoch schedule shared by all
/// particles, so a run is reproducible from the seed alone.
inline GradientField minibatch_field(const BnnPotential& bnn, std::size_t batch_size, std::uint64_t seed) {
  bnn.validate();
  if (batch_size < 1) throw InvalidArgument("minibatch_field: batch size must be >= 1");
  struct State {
    std::mt19937_64 rng;
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
  };
  auto st = std::make_shared<State>();
  st->rng.seed(seed ^ 0xb5ad4eceda1ce2a9ULL);
  st->order.resize(bnn.dataset_size());
  std::iota(st->order.begin(), st->order.end(), std::size_t{0});
  st->cursor = st->order.size();
  const std::size_t b = std::min(batch_size, std::max<std::size_t>(bnn.dataset_size(), 1));
  return [bnn, st, b](const Matrix& z) {
    std::vector<std::size_t> batch;
    if (bnn.dataset_size() > 0) {
      if (st->cursor + b > st->order.size()) {
        std::shuffle(st->order.begin(), st->order.end(), st->rng);
        st->cursor = 0;
      }
      batch.assign(st->order.begin() + static_cast<std::ptrdiff_t>(st->cursor),
                   st->order.begin() + static_cast<std::ptrdiff_t>(st->cursor + b));
      st->cursor += b;
    }
    Matrix g(z.rows(), z.cols());
    for (Eigen::Index i = 0; i < z.rows(); ++i) {
      const Vector theta = z.row(i).transpose();
      Vector gi = theta / (bnn.prior_std * bnn.prior_std);
      if (!batch.empty()) {
        Vector data = Vector::Zero(theta.size());
        for (std::size_t j : batch) data += bnn.point_grad(theta, j);
        gi += static_cast<double>(bnn.dataset_size()) / static_cast<double>(batch.size()) * data;
      }
      g.row(i) = -gi.transpose();
    }
    return g;
  };
}

/// Per-coordinate initial std 1/sqrt(fan-in).
inline Vector bnn_init_std(const BnnPotential& bnn) {
  const Eigen::Index h = bnn.hidden_dim, in = bnn.input_dim;
  Vector s(bnn.parameter_count());
  s.head(h * in).setConstant(1.0 / std::sqrt(static_cast<double>(in)));
  s.segment(h * in, h).setConstant(1.0 / std::sqrt(static_cast<double>(in)));
  s.segment(h * in + h, h + 1).setConstant(1.0 / std::sqrt(static_cast<double>(h)));
  return s;
}

/// Equal-weight Gaussian mixture over particles, in original target units.
struct Prediction {
  Vector mean;
  Vector std;
  Matrix component_means;  // points x particles, original units
  double component_std = 0.0;

  /// log (1/K) sum_k N(y; component_means(i, k), component_std^2)
  double log_likelihood(Eigen::Index i, double y) const {
    const Eigen::Index k = component_means.cols();
    double peak = -std::numeric_limits<double>::infinity();
    Vector terms(k);
    for (Eigen::Index c = 0; c < k; ++c) {
      const double r = (y - component_means(i, c)) / component_std;
      terms[c] = -0.5 * r * r;
      peak = std::max(peak, terms[c]);
    }
    const double lse = peak + std::log((terms.array() - peak).exp().sum());
    return lse - std::log(static_cast<double>(k)) - std::log(component_std) - 0.5 * std::log(2.0 * std::numbers::pi);
  }
};

inline Prediction predict(const BnnPotential& bnn, const Matrix& particles, const Matrix& x,
                          const Standardization& target = {}) {
  if (particles.rows() < 1) throw InvalidArgument("predict: need at least one particle");
  Prediction p;
  p.component_means.resize(x.rows(), particles.rows());
  for (Eigen::Index k = 0; k < particles.rows(); ++k) {
    const Vector theta = particles.row(k).transpose();
    for (Eigen::Index i = 0; i < x.rows(); ++i)
      p.component_means(i, k) = target.inverse(bnn.forward(theta, x.row(i).transpose()));
  }
  p.component_std = bnn.noise_std * target.std;
  p.mean = p.component_means.rowwise().mean();
  p.std.resize(x.rows());
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const double spread = (p.component_means.row(i).array() - p.mean[i]).square().mean();
    p.std[i] = std::sqrt(p.component_std * p.component_std + spread);
  }
  return p;
}

struct PredictiveScore {
  double rmse = 0.0;
  double test_ll = 0.0;  // mean per test point
};

/// RMSE of the predictive mean and mean log-likelihood on the test split,
/// both in original target units.
inline PredictiveScore evaluate(const BnnPotential& bnn, const Matrix& particles, const RegressionDataset& ds) {
  const Prediction p = predict(bnn, particles, ds.x_test, ds.target_stats);
  PredictiveScore s;
  double se = 0.0, ll = 0.0;
  for (Eigen::Index i = 0; i < ds.x_test.rows(); ++i) {
    const double y = ds.target_stats.inverse(ds.y_test[i]);
    se += (y - p.mean[i]) * (y - p.mean[i]);
    ll += p.log_likelihood(i, y);
  }
  const double n = static_cast<double>(ds.x_test.rows());
  s.rmse = std::sqrt(se / n);
  s.test_ll = ll / n;
  return s;
}

inline BnnPotential make_bnn(const RegressionDataset& ds, Eigen::Index hidden = 50, double prior_std = 1.0,
                             double noise_std = 0.5) {
  BnnPotential b;
  b.input_dim = ds.input_dim();
  b.hidden_dim = hidden;
  b.prior_std = prior_std;
  b.noise_std = noise_std;
  b.x = ds.x_train;
  b.y = ds.y_train;
  b.validate();
  return b;
}

}  // namespace pbi
