#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

namespace pbi {

/// Particle matrices are stored one particle per row (L x d).
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct InvalidArgument : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// A non-finite coordinate or gradient showed up during a run.
struct DivergenceError : std::runtime_error {
  DivergenceError(const std::string& what, std::size_t particle, std::size_t step, Matrix last_good = {})
      : std::runtime_error(what), particle(particle), step(step), last_good(std::move(last_good)) {}
  std::size_t particle;
  std::size_t step;
  Matrix last_good;  // positions before the failing step, when known
};

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

/// Index of the first row holding a non-finite value, or rows() if none.
inline Eigen::Index first_nonfinite_row(const Matrix& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    if (!m.row(i).allFinite()) return i;
  return m.rows();
}

/// Independent normal stream with a fixed seed-derivation rule.
class NormalStream {
 public:
  NormalStream() = default;
  explicit NormalStream(std::uint64_t seed, std::uint64_t stream, std::uint64_t purpose = 0) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32),
                      static_cast<std::uint32_t>(purpose), 0x9e3779b9u};
    engine_.seed(seq);
  }

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

/// One stream per particle so results never depend on evaluation order or
/// thread count.
class ParticleStreams {
 public:
  ParticleStreams() = default;
  ParticleStreams(std::uint64_t seed, std::size_t count, std::uint64_t purpose = 1) {
    streams_.reserve(count);
    for (std::size_t i = 0; i < count; ++i) streams_.emplace_back(seed, i, purpose);
  }

  std::size_t size() const { return streams_.size(); }
  NormalStream& operator[](std::size_t i) { return streams_[i]; }

  /// Row i is filled from stream i.
  Matrix standard_normal(Eigen::Index rows, Eigen::Index cols) {
    if (static_cast<std::size_t>(rows) > streams_.size())
      throw InvalidArgument("ParticleStreams: more rows than streams");
    Matrix out(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j) out(i, j) = streams_[static_cast<std::size_t>(i)].normal();
    return out;
  }

 private:
  std::vector<NormalStream> streams_;
};

}  // namespace pbi
