#pragma once

// Artifact serialization: flat JSON reports, CSV with 17 significant digits,
// atomic file writes and a stable config hash.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "pbi/diagnostics.hpp"

namespace pbi::io {

using Json = nlohmann::json;

inline constexpr int schema_version = 1;

/// %.17g, with nan/inf spelled out so CSV readers accept them.
inline std::string fmt(double x) {
  if (std::isnan(x)) return "nan";
  if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

/// JSON number, or null when the value is not finite.
inline Json num(double x) { return std::isfinite(x) ? Json(x) : Json(nullptr); }

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

/// Hash of the canonical (sorted-key, compact) dump.
inline std::string config_hash(const Json& cfg) { return hex64(fnv1a(cfg.dump())); }

/// Writes to a temporary sibling and renames it into place.
inline void write_atomic(const std::filesystem::path& path, std::string_view content) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

/// Flat JSON form of a report: one key per scalar.
inline Json report_json(const RunReport& r) {
  Json j;
  j["sampler"] = r.sampler;
  j["target"] = r.target;
  j["seed"] = r.seed;
  j["ess"] = num(r.ess);
  j["ess_per_second"] = num(r.ess_per_second);
  j["wall_clock"] = num(r.wall_clock);
  j["collected_count"] = r.collected_count;
  for (const auto& m : r.moment_errors) {
    j["estimate_" + m.name] = num(m.estimate);
    j["exact_" + m.name] = num(m.exact);
    j["error_" + m.name] = num(m.error);
  }
  for (std::size_t d = 0; d < r.rhat.size(); ++d) j["rhat_" + std::to_string(d)] = num(r.rhat[d]);
  return j;
}

/// Header: sampler,target,seed,ess,ess_per_second,wall_clock,collected_count,
/// then estimate_/exact_/error_<moment> triples and rhat_<dim>.
inline std::string report_csv_header(const RunReport& r) {
  std::string h = "sampler,target,seed,ess,ess_per_second,wall_clock,collected_count";
  for (const auto& m : r.moment_errors) h += ",estimate_" + m.name + ",exact_" + m.name + ",error_" + m.name;
  for (std::size_t d = 0; d < r.rhat.size(); ++d) h += ",rhat_" + std::to_string(d);
  return h;
}

inline std::string report_csv_row(const RunReport& r) {
  std::string s = r.sampler + "," + r.target + "," + std::to_string(r.seed) + "," + fmt(r.ess) + "," +
                  fmt(r.ess_per_second) + "," + fmt(r.wall_clock) + "," + std::to_string(r.collected_count);
  for (const auto& m : r.moment_errors) s += "," + fmt(m.estimate) + "," + fmt(m.exact) + "," + fmt(m.error);
  for (double v : r.rhat) s += "," + fmt(v);
  return s;
}

inline std::string report_csv(const RunReport& r) { return report_csv_header(r) + "\n" + report_csv_row(r) + "\n"; }

/// iteration,particle,z_0,...,z_{d-1} for every collected particle.
inline std::string trajectory_csv(const RunResult& r) {
  std::string s = "iteration,particle";
  for (Eigen::Index d = 0; d < r.samples.cols(); ++d) s += ",z_" + std::to_string(d);
  s += "\n";
  for (Eigen::Index i = 0; i < r.samples.rows(); ++i) {
    s += std::to_string(r.sample_iteration[static_cast<std::size_t>(i)]) + "," +
         std::to_string(r.sample_particle[static_cast<std::size_t>(i)]);
    for (Eigen::Index d = 0; d < r.samples.cols(); ++d) s += "," + fmt(r.samples(i, d));
    s += "\n";
  }
  return s;
}

}  // namespace pbi::io
