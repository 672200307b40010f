// pbi: run particle samplers, the synthetic benchmark, refined VI on the
// funnel and BNN regression from the command line.
//
// Exit codes: 0 ok, 1 other failure, 2 configuration error, 3 divergence.

#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pbi/bnn.hpp"
#include "pbi/diagnostics.hpp"
#include "pbi/experiments.hpp"
#include "pbi/report_io.hpp"
#include "pbi/samplers.hpp"
#include "pbi/targets.hpp"
#include "pbi/vis.hpp"

namespace fs = std::filesystem;
using pbi::io::Json;

namespace {

constexpr int exit_config = 2;
constexpr int exit_divergence = 3;

struct Common {
  std::string config;
  std::string seeds;
  std::string out;
  std::size_t threads = 1;
  std::string timing = "wall";
};

// Strict accessor over one JSON object: every key read is recorded and
// finish() rejects the rest.
class Fields {
 public:
  Fields(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw pbi::ConfigError(where("") + "expected an object");
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key) && !j_.at(key).is_null();
  }

  template <class T>
  T get(const std::string& key, T fallback) {
    if (!has(key)) return fallback;
    return convert<T>(key);
  }

  template <class T>
  T require(const std::string& key) {
    if (!has(key)) throw pbi::ConfigError(where(key) + "missing required field");
    return convert<T>(key);
  }

  const Json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  std::string where(const std::string& key) const {
    std::string p = path_;
    if (!key.empty()) p += (p.empty() ? "" : ".") + key;
    return (p.empty() ? std::string("config") : p) + ": ";
  }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!seen_.count(k)) throw pbi::ConfigError(where(k) + "unknown field");
  }

 private:
  template <class T>
  T convert(const std::string& key) {
    const Json& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw pbi::ConfigError(where(key) + "expected a boolean");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw pbi::ConfigError(where(key) + "expected a string");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer() || (std::is_unsigned_v<T> && v.get<long long>() < 0))
        throw pbi::ConfigError(where(key) + "expected a non-negative integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw pbi::ConfigError(where(key) + "expected a number");
    }
    return v.get<T>();
  }

  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

Json load_config(const std::string& path) {
  std::string text;
  try {
    text = pbi::io::read_file(path);
  } catch (const std::exception& e) {
    throw pbi::ConfigError(e.what());
  }
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw pbi::ConfigError(path + ": " + e.what());
  }
}

void check_schema(Fields& f) {
  const int v = f.require<int>("schema_version");
  if (v != pbi::io::schema_version)
    throw pbi::ConfigError(f.where("schema_version") + "unsupported version " + std::to_string(v));
}

std::vector<std::uint64_t> parse_seed_list(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::size_t pos = 0;
  while (pos <= s.size()) {
    const std::size_t comma = s.find(',', pos);
    const std::string tok = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    if (tok.empty() || tok.find_first_not_of("0123456789") != std::string::npos)
      throw pbi::ConfigError("--seed: expected comma-separated non-negative integers, got '" + s + "'");
    out.push_back(std::stoull(tok));
    if (comma == std::string::npos) break;
    pos = comma + 1;
  }
  return out;
}

std::vector<std::uint64_t> seeds_from(Fields& f, const Common& c, std::vector<std::uint64_t> fallback) {
  if (f.has("seeds")) {
    const Json& s = f.raw("seeds");
    if (!s.is_array() || s.empty()) throw pbi::ConfigError(f.where("seeds") + "expected a non-empty array");
    fallback.clear();
    for (const auto& v : s) {
      if (!v.is_number_unsigned()) throw pbi::ConfigError(f.where("seeds") + "expected non-negative integers");
      fallback.push_back(v.get<std::uint64_t>());
    }
  }
  if (!c.seeds.empty()) return parse_seed_list(c.seeds);
  return fallback;
}

fs::path output_dir(const Common& c, Fields* f) {
  std::string dir = c.out;
  if (f != nullptr && f->has("output_dir")) {
    const std::string cfg_dir = f->get<std::string>("output_dir", "");
    if (dir.empty()) dir = cfg_dir;
  }
  if (dir.empty()) {
    const char* env = std::getenv("PBI_OUT_DIR");
    dir = env != nullptr && *env != '\0' ? env : "pbi_out";
  }
  return dir;
}

bool timing_on(const Common& c) {
  if (c.timing == "wall") return true;
  if (c.timing == "off") return false;
  throw pbi::ConfigError("--timing: expected 'wall' or 'off'");
}

void write_manifest(const fs::path& dir, const std::string& command, const std::string& hash,
                    std::map<std::string, std::string> artifacts) {
  Json m;
  m["schema_version"] = pbi::io::schema_version;
  m["command"] = command;
  m["config_hash"] = hash;
  Json list = Json::array();
  for (const auto& [file, kind] : artifacts)
    list.push_back({{"file", file}, {"kind", kind}, {"schema_version", pbi::io::schema_version}});
  m["artifacts"] = list;
  pbi::io::write_atomic(dir / "manifest.json", m.dump(2) + "\n");
}

// ---------------------------------------------------------------- run

pbi::TargetModel parse_target(Fields& f) {
  const std::string name = f.require<std::string>("name");
  if (name == "moe") return pbi::mixture_of_exponentials();
  if (name == "mog") return pbi::mog_grid();
  if (name == "gaussian") {
    const int d = f.get<int>("dim", 2);
    if (d < 1) throw pbi::ConfigError(f.where("dim") + "must be >= 1");
    return pbi::std_gaussian(d);
  }
  if (name == "funnel") {
    const std::string conv = f.get<std::string>("scale_convention", "std");
    if (conv != "std" && conv != "variance") throw pbi::ConfigError(f.where("scale_convention") + "expected 'std' or 'variance'");
    return pbi::funnel(conv == "std" ? pbi::ScaleConvention::standard_deviation : pbi::ScaleConvention::variance);
  }
  throw pbi::ConfigError(f.where("name") + "unknown target '" + name + "'");
}

pbi::Vector vector_field(Fields& f, const std::string& key, int dim, double fallback) {
  if (!f.has(key)) return pbi::Vector::Constant(dim, fallback);
  const Json& v = f.raw(key);
  if (v.is_number()) return pbi::Vector::Constant(dim, v.get<double>());
  if (!v.is_array() || static_cast<int>(v.size()) != dim)
    throw pbi::ConfigError(f.where(key) + "expected a number or an array of length " + std::to_string(dim));
  pbi::Vector out(dim);
  for (int i = 0; i < dim; ++i) {
    if (!v[static_cast<std::size_t>(i)].is_number()) throw pbi::ConfigError(f.where(key) + "expected numbers");
    out[i] = v[static_cast<std::size_t>(i)].get<double>();
  }
  return out;
}

pbi::RunConfig parse_sampler(const Json& j, const std::string& path) {
  Fields f(j, path);
  pbi::RunConfig c;
  const std::string name = f.require<std::string>("name");
  const auto kind = pbi::parse_sampler(name);
  if (!kind) throw pbi::ConfigError(f.where("name") + "unknown sampler '" + name + "'");
  c.kind = *kind;
  c.particles = f.get<std::size_t>("particles", 10);
  c.schedule.eps0 = f.require<double>("eps");
  const std::string sched = f.get<std::string>("schedule", "constant");
  if (sched == "robbins_monro") {
    c.schedule.kind = pbi::ScheduleKind::robbins_monro;
  } else if (sched != "constant") {
    throw pbi::ConfigError(f.where("schedule") + "expected 'constant' or 'robbins_monro'");
  }
  c.schedule.gamma = f.get<double>("gamma", c.schedule.gamma);
  c.beta1 = f.get<double>("beta1", c.beta1);
  c.beta2 = f.get<double>("beta2", c.beta2);
  c.stabilizer = f.get<double>("stabilizer", c.stabilizer);
  if (f.has("repulsion_cutoff")) c.repulsion_cutoff = f.get<std::size_t>("repulsion_cutoff", 0);
  c.position_noise = f.get<bool>("position_noise", false);
  if (f.has("kernel")) {
    Fields k(f.raw("kernel"), path + ".kernel");
    if (k.has("bandwidth")) {
      const Json& b = k.raw("bandwidth");
      if (b.is_string() && b.get<std::string>() == "median") {
        c.kernel.mode = pbi::BandwidthMode::median;
      } else if (b.is_number()) {
        c.kernel.mode = pbi::BandwidthMode::fixed;
        c.kernel.bandwidth = b.get<double>();
      } else {
        throw pbi::ConfigError(k.where("bandwidth") + "expected 'median' or a positive number");
      }
    }
    c.kernel.jitter = k.get<double>("jitter", 0.0);
    k.finish();
  }
  f.finish();
  try {
    c.schedule.validate();
    c.kernel.validate();
  } catch (const pbi::InvalidArgument& e) {
    throw pbi::ConfigError(path + ": " + e.what());
  }
  if (c.particles < 1) throw pbi::ConfigError(f.where("particles") + "must be >= 1");
  return c;
}

int cmd_run(const Common& common) {
  if (common.config.empty()) throw pbi::ConfigError("run: --config is required");
  const Json cfg = load_config(common.config);
  Fields f(cfg, "");
  check_schema(f);
  Fields tf(f.raw("target"), "target");
  const pbi::TargetModel target = parse_target(tf);
  tf.finish();

  const std::size_t iterations = f.require<std::size_t>("iterations");
  pbi::CollectionPolicy collection;
  if (f.has("collection")) {
    Fields cf(f.raw("collection"), "collection");
    collection.burn_in = cf.get<std::size_t>("burn_in", 0);
    collection.thin = cf.get<std::size_t>("thin", 1);
    cf.finish();
  }
  if (collection.thin < 1) throw pbi::ConfigError("collection.thin: must be >= 1");
  if (iterations <= collection.burn_in) throw pbi::ConfigError("iterations: must exceed collection.burn_in");

  pbi::InitDistribution init{pbi::Vector::Zero(target.dim), pbi::Vector::Ones(target.dim)};
  if (f.has("init")) {
    Fields inf(f.raw("init"), "init");
    init.mean = vector_field(inf, "mean", target.dim, 0.0);
    init.std = vector_field(inf, "std", target.dim, 1.0);
    inf.finish();
  }
  if (!(init.std.array() >= 0.0).all()) throw pbi::ConfigError("init.std: must be >= 0");

  if (!f.has("samplers") || !f.raw("samplers").is_array() || f.raw("samplers").empty())
    throw pbi::ConfigError("samplers: expected a non-empty array");
  std::vector<pbi::RunConfig> samplers;
  const Json& sj = f.raw("samplers");
  for (std::size_t i = 0; i < sj.size(); ++i) {
    pbi::RunConfig c = parse_sampler(sj[i], "samplers[" + std::to_string(i) + "]");
    c.iterations = iterations;
    c.collection = collection;
    c.init = init;
    samplers.push_back(std::move(c));
  }
  const auto seeds = seeds_from(f, common, {1});
  const fs::path dir = output_dir(common, &f);
  f.finish();
  const bool timing = timing_on(common);
  const std::string hash = pbi::io::config_hash(cfg);

  struct Job {
    std::size_t sampler;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (auto s : seeds)
    for (std::size_t k = 0; k < samplers.size(); ++k) jobs.push_back({k, s});
  std::map<std::string, std::string> artifacts;
  std::vector<std::vector<std::string>> names(jobs.size());
  pbi::parallel_for(jobs.size(), common.threads, [&](std::size_t i) {
    const auto& c = samplers[jobs[i].sampler];
    const std::string sampler = std::string(pbi::to_string(c.kind));
    const pbi::RunResult r = pbi::run(c, target, jobs[i].seed);
    pbi::RunReport rep = pbi::summarize(r, target, sampler, jobs[i].seed);
    if (!timing) {
      rep.wall_clock = std::numeric_limits<double>::quiet_NaN();
      rep.ess_per_second = std::numeric_limits<double>::quiet_NaN();
    }
    Json j = pbi::io::report_json(rep);
    j["schema_version"] = pbi::io::schema_version;
    j["config_hash"] = hash;
    j["sampler_index"] = jobs[i].sampler;
    const std::string stem =
        target.name + "_" + sampler + "_" + std::to_string(jobs[i].sampler) + "_seed" + std::to_string(jobs[i].seed);
    pbi::io::write_atomic(dir / (stem + ".json"), j.dump(2) + "\n");
    pbi::io::write_atomic(dir / (stem + ".csv"), pbi::io::trajectory_csv(r));
    names[i] = {stem};
  });
  for (const auto& n : names) {
    artifacts[n[0] + ".json"] = "run_report";
    artifacts[n[0] + ".csv"] = "trajectory";
  }
  write_manifest(dir, "run", hash, artifacts);
  std::cout << "wrote " << 2 * jobs.size() << " artifacts to " << dir.string() << "\n";
  return 0;
}

// ---------------------------------------------------------------- bench-synthetic

int cmd_bench(const Common& common) {
  pbi::SyntheticProtocol p;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  Json cfg = Json::object();
  std::optional<fs::path> dir;
  if (!common.config.empty()) {
    cfg = load_config(common.config);
    Fields f(cfg, "");
    check_schema(f);
    p.moe_particles = f.get<std::size_t>("moe_particles", p.moe_particles);
    p.mog_particles = f.get<std::size_t>("mog_particles", p.mog_particles);
    p.moe_eps = f.get<double>("moe_eps", p.moe_eps);
    p.mog_eps = f.get<double>("mog_eps", p.mog_eps);
    p.iterations = f.get<std::size_t>("iterations", p.iterations);
    p.burn_in = f.get<std::size_t>("burn_in", p.burn_in);
    p.thin = f.get<std::size_t>("thin", p.thin);
    p.init_std = f.get<double>("init_std", p.init_std);
    seeds = seeds_from(f, common, seeds);
    dir = output_dir(common, &f);
    f.finish();
  } else {
    if (!common.seeds.empty()) seeds = parse_seed_list(common.seeds);
    dir = output_dir(common, nullptr);
  }
  if (p.iterations <= p.burn_in || p.thin < 1 || p.moe_particles < 1 || p.mog_particles < 1 || !(p.moe_eps > 0.0) ||
      !(p.mog_eps > 0.0) || !(p.init_std >= 0.0))
    throw pbi::ConfigError("bench-synthetic: protocol values out of range");
  const bool timing = timing_on(common);

  const auto rows = pbi::bench_synthetic(p, seeds, common.threads);
  std::string csv = "distribution,sampler,seed,ess,ess_per_s,err_ex,err_ex2\n";
  for (const auto& r : rows)
    csv += r.distribution + "," + r.sampler + "," + std::to_string(r.seed) + "," + pbi::io::fmt(r.ess) + "," +
           pbi::io::fmt(timing ? r.ess_per_s : std::numeric_limits<double>::quiet_NaN()) + "," +
           pbi::io::fmt(r.err_ex) + "," + pbi::io::fmt(r.err_ex2) + "\n";
  pbi::io::write_atomic(*dir / "bench_synthetic.csv", csv);
  write_manifest(*dir, "bench-synthetic", pbi::io::config_hash(cfg), {{"bench_synthetic.csv", "bench_table"}});
  std::cout << csv;
  return 0;
}

// ---------------------------------------------------------------- vis-funnel

int cmd_vis(const Common& common) {
  pbi::FunnelProtocol p;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  std::vector<std::size_t> steps{0, 1, 2};
  Json cfg = Json::object();
  fs::path dir;
  if (!common.config.empty()) {
    cfg = load_config(common.config);
    Fields f(cfg, "");
    check_schema(f);
    p.iterations = f.get<std::size_t>("iterations", p.iterations);
    p.samples = f.get<std::size_t>("samples", p.samples);
    p.learning_rate = f.get<double>("learning_rate", p.learning_rate);
    p.eta = f.get<double>("eta", p.eta);
    if (f.has("inner")) {
      const auto v = pbi::parse_inner_sampler(f.get<std::string>("inner", ""));
      if (!v) throw pbi::ConfigError(f.where("inner") + "expected sgd, sgld, svgd or fp_flow");
      p.inner = *v;
    }
    if (f.has("entropy")) {
      const auto v = pbi::parse_entropy_mode(f.get<std::string>("entropy", ""));
      if (!v) throw pbi::ConfigError(f.where("entropy") + "expected vis_p, vis_mc, vis_g or vis_fp");
      p.entropy = *v;
    }
    if (f.has("ad")) {
      const auto v = pbi::parse_ad_mode(f.get<std::string>("ad", ""));
      if (!v) throw pbi::ConfigError(f.where("ad") + "expected full or fast");
      p.ad = *v;
    }
    if (f.has("steps")) {
      const Json& s = f.raw("steps");
      if (!s.is_array() || s.empty()) throw pbi::ConfigError(f.where("steps") + "expected a non-empty array");
      steps.clear();
      for (const auto& v : s) {
        if (!v.is_number_unsigned()) throw pbi::ConfigError(f.where("steps") + "expected non-negative integers");
        steps.push_back(v.get<std::size_t>());
      }
    }
    seeds = seeds_from(f, common, seeds);
    dir = output_dir(common, &f);
    f.finish();
  } else {
    if (!common.seeds.empty()) seeds = parse_seed_list(common.seeds);
    dir = output_dir(common, nullptr);
  }
  timing_on(common);

  struct Job {
    std::size_t t;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (auto t : steps)
    for (auto s : seeds) jobs.push_back({t, s});
  std::vector<pbi::VisResult> results(jobs.size());
  pbi::parallel_for(jobs.size(), common.threads,
                    [&](std::size_t i) { results[i] = pbi::vis_funnel_run(p, jobs[i].t, jobs[i].seed); });

  std::map<std::string, std::string> traces;
  Json runs = Json::array();
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const std::string file = "vis_funnel_T" + std::to_string(jobs[i].t) + ".csv";
    if (!traces.count(file)) traces[file] = "seed,iteration,neg_elbo\n";
    const auto& r = results[i];
    for (std::size_t it = 0; it < r.loss_trace.size(); ++it)
      traces[file] += std::to_string(jobs[i].seed) + "," + std::to_string(it + 1) + "," + pbi::io::fmt(r.loss_trace[it]) + "\n";
    Json run;
    run["T"] = jobs[i].t;
    run["seed"] = jobs[i].seed;
    run["mean"] = std::vector<double>(r.trained.guide.mean.data(), r.trained.guide.mean.data() + 2);
    const pbi::Vector sc = r.trained.guide.scale();
    run["scale"] = std::vector<double>(sc.data(), sc.data() + 2);
    run["eta"] = r.trained.eta;
    run["final_neg_elbo"] = pbi::io::num(r.loss_trace.back());
    runs.push_back(run);
  }
  std::map<std::string, std::string> artifacts;
  for (const auto& [file, content] : traces) {
    pbi::io::write_atomic(dir / file, content);
    artifacts[file] = "loss_trace";
  }
  Json params;
  params["schema_version"] = pbi::io::schema_version;
  params["config_hash"] = pbi::io::config_hash(cfg);
  params["inner"] = std::string(pbi::to_string(p.inner));
  params["entropy"] = std::string(pbi::to_string(p.entropy));
  params["ad"] = std::string(pbi::to_string(p.ad));
  params["runs"] = runs;
  pbi::io::write_atomic(dir / "vis_funnel_params.json", params.dump(2) + "\n");
  artifacts["vis_funnel_params.json"] = "learned_parameters";
  write_manifest(dir, "vis-funnel", pbi::io::config_hash(cfg), artifacts);

  for (auto t : steps) {
    std::vector<double> finals;
    for (std::size_t i = 0; i < jobs.size(); ++i)
      if (jobs[i].t == t) finals.push_back(results[i].loss_trace.back());
    std::cout << "T=" << t << " median final negative ELBO " << pbi::io::fmt(pbi::median(finals)) << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------- bnn

struct BnnArgs {
  std::string data;
  std::string target_column;
  std::string samplers;
};

int cmd_bnn(const Common& common, const BnnArgs& args) {
  pbi::BnnProtocol p;
  std::string data = args.data;
  std::string target_column = args.target_column;
  double train_fraction = 0.9;
  std::vector<std::string> samplers{"sgld", "sgld_r"};
  std::vector<std::uint64_t> seeds{1};
  Json cfg = Json::object();
  fs::path dir;
  if (!common.config.empty()) {
    cfg = load_config(common.config);
    Fields f(cfg, "");
    check_schema(f);
    if (data.empty()) data = f.get<std::string>("dataset", "");
    else f.has("dataset");
    if (target_column.empty()) target_column = f.get<std::string>("target_column", "");
    else f.has("target_column");
    train_fraction = f.get<double>("train_fraction", train_fraction);
    p.particles = f.get<std::size_t>("particles", p.particles);
    p.iterations = f.get<std::size_t>("iterations", p.iterations);
    p.batch_size = f.get<std::size_t>("batch_size", p.batch_size);
    p.eps = f.get<double>("eps", p.eps);
    p.hidden = f.get<long>("hidden", p.hidden);
    p.prior_std = f.get<double>("prior_std", p.prior_std);
    p.noise_std = f.get<double>("noise_std", p.noise_std);
    if (f.has("samplers")) {
      const Json& s = f.raw("samplers");
      if (!s.is_array() || s.empty()) throw pbi::ConfigError(f.where("samplers") + "expected a non-empty array");
      samplers.clear();
      for (const auto& v : s) {
        if (!v.is_string()) throw pbi::ConfigError(f.where("samplers") + "expected sampler names");
        samplers.push_back(v.get<std::string>());
      }
    }
    seeds = seeds_from(f, common, seeds);
    dir = output_dir(common, &f);
    f.finish();
  } else {
    if (!common.seeds.empty()) seeds = parse_seed_list(common.seeds);
    dir = output_dir(common, nullptr);
  }
  if (!args.samplers.empty()) {
    samplers.clear();
    std::size_t pos = 0;
    while (true) {
      const std::size_t comma = args.samplers.find(',', pos);
      samplers.push_back(args.samplers.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos));
      if (comma == std::string::npos) break;
      pos = comma + 1;
    }
  }
  if (data.empty()) throw pbi::ConfigError("bnn: dataset path missing (--data or config 'dataset')");
  if (target_column.empty()) target_column = "target";
  std::vector<pbi::SamplerKind> kinds;
  for (const auto& s : samplers) {
    const auto k = pbi::parse_sampler(s);
    if (!k) throw pbi::ConfigError("samplers: unknown sampler '" + s + "'");
    kinds.push_back(*k);
  }
  if (p.particles < 1 || p.iterations < 1 || p.batch_size < 1 || !(p.eps > 0.0) || p.hidden < 1 ||
      !(p.prior_std > 0.0) || !(p.noise_std > 0.0) || !(train_fraction > 0.0 && train_fraction < 1.0))
    throw pbi::ConfigError("bnn: protocol values out of range");
  const bool timing = timing_on(common);

  Json echo = cfg;
  echo["dataset"] = data;
  echo["target_column"] = target_column;
  echo["samplers"] = samplers;
  const std::string hash = pbi::io::config_hash(echo);
  const std::string stem = fs::path(data).stem().string();

  std::vector<pbi::RegressionDataset> datasets;
  for (auto s : seeds) {
    try {
      datasets.push_back(pbi::load_csv(data, target_column, train_fraction, s));
    } catch (const pbi::InvalidArgument& e) {
      throw pbi::ConfigError(e.what());
    }
    for (const auto& w : datasets.back().warnings) std::cerr << "warning: " << w << "\n";
  }

  struct Job {
    std::size_t seed_index;
    pbi::SamplerKind kind;
  };
  std::vector<Job> jobs;
  for (std::size_t s = 0; s < seeds.size(); ++s)
    for (auto k : kinds) jobs.push_back({s, k});
  std::vector<std::string> files(jobs.size());
  pbi::parallel_for(jobs.size(), common.threads, [&](std::size_t i) {
    const std::uint64_t seed = seeds[jobs[i].seed_index];
    const auto outcome = pbi::bnn_run(datasets[jobs[i].seed_index], jobs[i].kind, p, seed);
    Json j;
    j["schema_version"] = pbi::io::schema_version;
    j["dataset"] = stem;
    j["sampler"] = std::string(pbi::to_string(jobs[i].kind));
    j["seed"] = seed;
    j["rmse"] = pbi::io::num(outcome.score.rmse);
    j["test_ll"] = pbi::io::num(outcome.score.test_ll);
    j["wall_clock"] = pbi::io::num(timing ? outcome.wall_clock : std::numeric_limits<double>::quiet_NaN());
    j["config_hash"] = hash;
    j["config"] = echo;
    files[i] = "bnn_" + stem + "_" + std::string(pbi::to_string(jobs[i].kind)) + "_seed" + std::to_string(seed) + ".json";
    pbi::io::write_atomic(dir / files[i], j.dump(2) + "\n");
    std::cout << files[i] << ": rmse " << pbi::io::fmt(outcome.score.rmse) << " test_ll "
              << pbi::io::fmt(outcome.score.test_ll) << "\n";
  });
  std::map<std::string, std::string> artifacts;
  for (const auto& f : files) artifacts[f] = "bnn_report";
  write_manifest(dir, "bnn", hash, artifacts);
  return 0;
}

void add_common(CLI::App* sub, Common& c, bool config_required) {
  auto* opt = sub->add_option("--config", c.config, "JSON configuration file");
  if (config_required) opt->required();
  sub->add_option("--seed", c.seeds, "comma-separated seeds, overriding the config");
  sub->add_option("--out", c.out, "output directory (default: $PBI_OUT_DIR or ./pbi_out)");
  sub->add_option("--threads", c.threads, "worker threads for independent runs")->check(CLI::PositiveNumber);
  sub->add_option("--timing", c.timing, "wall: record wall-clock timings; off: write nan for reproducible bytes")
      ->check(CLI::IsMember({"wall", "off"}));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pbi: particle-based Bayesian inference"};
  app.require_subcommand(1);
  Common common;
  BnnArgs bnn_args;

  auto* run = app.add_subcommand("run", "run samplers from a configuration file");
  add_common(run, common, true);
  auto* bench = app.add_subcommand("bench-synthetic", "SGLD vs SGLD+R on the mixture-of-exponentials and grid targets");
  add_common(bench, common, false);
  auto* vis = app.add_subcommand("vis-funnel", "refined variational inference on the funnel, T = 0, 1, 2");
  add_common(vis, common, false);
  auto* bnn = app.add_subcommand("bnn", "Bayesian neural network regression on a CSV dataset");
  add_common(bnn, common, false);
  bnn->add_option("--data", bnn_args.data, "CSV file with a header row");
  bnn->add_option("--target-column", bnn_args.target_column, "name of the response column (default: target)");
  bnn->add_option("--sampler", bnn_args.samplers, "comma-separated sampler names");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : exit_config;
  }

  try {
    if (*run) return cmd_run(common);
    if (*bench) return cmd_bench(common);
    if (*vis) return cmd_vis(common);
    if (*bnn) return cmd_bnn(common, bnn_args);
  } catch (const pbi::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return exit_config;
  } catch (const pbi::ParseError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return exit_config;
  } catch (const pbi::DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << " (particle " << e.particle << ", step " << e.step << ")\n";
    return exit_divergence;
  } catch (const pbi::OptimizationError& e) {
    std::cerr << "divergence: " << e.what() << " after " << e.trace.size() << " outer iterations\n";
    return exit_divergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
