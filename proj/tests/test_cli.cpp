#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include <json.hpp>

#include "datasets.hpp"

namespace fs = std::filesystem;
using Json = nlohmann::json;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

void put(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

struct Outcome {
  int code = -1;
  std::string err;
};

// Runs the CLI with stdout discarded and stderr captured.
Outcome cli(const std::string& args, const fs::path& scratch) {
  const fs::path err = scratch / "stderr.txt";
  const std::string cmd = std::string("\"") + PBI_CLI_PATH + "\" " + args + " > /dev/null 2> \"" + err.string() + "\"";
  const int status = std::system(cmd.c_str());
  Outcome o;
  o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  o.err = slurp(err);
  return o;
}

std::size_t count_with_ext(const fs::path& dir, const std::string& ext) {
  std::size_t n = 0;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ext && e.path().filename() != "manifest.json") ++n;
  return n;
}

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream in(s);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

const char* kMoeConfig = R"({
  "schema_version": 1,
  "target": {"name": "moe"},
  "iterations": 200,
  "collection": {"burn_in": 100, "thin": 10},
  "samplers": [{"name": "sgld", "eps": 0.5, "particles": 5},
               {"name": "sgld_r", "eps": 0.5, "particles": 5}],
  "seeds": [1, 2]
})";

}  // namespace

TEST(CliRun, TwoSamplersWriteReportAndTrajectoryPerSeed) {
  const auto dir = testdata::scratch_dir("cli_run");
  put(dir / "moe.json", kMoeConfig);
  const auto o = cli("run --config " + (dir / "moe.json").string() + " --out " + (dir / "out").string(), dir);
  ASSERT_EQ(o.code, 0) << o.err;
  EXPECT_EQ(count_with_ext(dir / "out", ".json"), 4u);
  EXPECT_EQ(count_with_ext(dir / "out", ".csv"), 4u);
  for (const auto& e : fs::directory_iterator(dir / "out")) {
    if (e.path().extension() != ".json") continue;
    const Json j = Json::parse(slurp(e.path()));
    EXPECT_EQ(j.at("schema_version"), 1) << e.path();
  }
  const Json r = Json::parse(slurp(dir / "out" / "moe_sgld_r_1_seed2.json"));
  EXPECT_EQ(r.at("collected_count"), 50);
  EXPECT_EQ(r.at("sampler"), "sgld_r");
}

TEST(CliRun, UnknownSamplerNamesTheField) {
  const auto dir = testdata::scratch_dir("cli_bad_sampler");
  std::string cfg = kMoeConfig;
  cfg.replace(cfg.find("\"sgld_r\""), 8, "\"hmc\"");
  put(dir / "bad.json", cfg);
  const auto o = cli("run --config " + (dir / "bad.json").string() + " --out " + (dir / "out").string(), dir);
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.err.find("samplers[1].name"), std::string::npos) << o.err;
  EXPECT_FALSE(fs::exists(dir / "out" / "manifest.json"));
}

TEST(CliRun, UnknownFieldAndMissingConfigAreConfigErrors) {
  const auto dir = testdata::scratch_dir("cli_unknown");
  std::string cfg = kMoeConfig;
  cfg.replace(cfg.find("\"iterations\""), 12, "\"iteratons\": 5, \"iterations\"");
  put(dir / "typo.json", cfg);
  auto o = cli("run --config " + (dir / "typo.json").string() + " --out " + (dir / "out").string(), dir);
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.err.find("iteratons"), std::string::npos) << o.err;
  o = cli("run --config " + (dir / "absent.json").string(), dir);
  EXPECT_EQ(o.code, 2);
  o = cli("run", dir);
  EXPECT_EQ(o.code, 2);
}

TEST(CliRun, DivergenceExitsWithThree) {
  const auto dir = testdata::scratch_dir("cli_diverge");
  put(dir / "hot.json", R"({
    "schema_version": 1,
    "target": {"name": "gaussian", "dim": 2},
    "iterations": 400,
    "samplers": [{"name": "sgld", "eps": 50.0, "particles": 2}]
  })");
  const auto o = cli("run --config " + (dir / "hot.json").string() + " --out " + (dir / "out").string(), dir);
  EXPECT_EQ(o.code, 3) << o.err;
  EXPECT_NE(o.err.find("particle"), std::string::npos);
}

TEST(CliRun, RerunIsByteIdenticalWithTimingOff) {
  const auto dir = testdata::scratch_dir("cli_determinism");
  put(dir / "moe.json", kMoeConfig);
  for (const char* sub : {"a", "b"})
    ASSERT_EQ(cli("run --timing off --config " + (dir / "moe.json").string() + " --out " + (dir / sub).string(), dir).code, 0);
  std::size_t compared = 0;
  for (const auto& e : fs::directory_iterator(dir / "a")) {
    EXPECT_EQ(slurp(e.path()), slurp(dir / "b" / e.path().filename())) << e.path().filename();
    ++compared;
  }
  EXPECT_EQ(compared, 9u);
}

TEST(CliBench, RowCountAndHeader) {
  const auto dir = testdata::scratch_dir("cli_bench");
  put(dir / "bench.json", R"({"schema_version": 1, "iterations": 120, "burn_in": 20, "thin": 1, "seeds": [4, 5, 6]})");
  const auto o = cli("bench-synthetic --config " + (dir / "bench.json").string() + " --out " + dir.string(), dir);
  ASSERT_EQ(o.code, 0) << o.err;
  const auto rows = lines(slurp(dir / "bench_synthetic.csv"));
  ASSERT_EQ(rows.size(), 1u + 2 * 2 * 3);
  EXPECT_EQ(rows[0], "distribution,sampler,seed,ess,ess_per_s,err_ex,err_ex2");
  EXPECT_EQ(rows[1].rfind("moe,sgld,4,", 0), 0u);
  EXPECT_EQ(rows.back().rfind("mog,sgld_r,6,", 0), 0u);
  EXPECT_EQ(Json::parse(slurp(dir / "manifest.json")).at("schema_version"), 1);
}

TEST(CliVis, TraceLengthAndPositiveEta) {
  const auto dir = testdata::scratch_dir("cli_vis");
  put(dir / "vis.json", R"({"schema_version": 1, "iterations": 6, "samples": 4, "steps": [0, 1], "seeds": [1, 2]})");
  const auto o = cli("vis-funnel --config " + (dir / "vis.json").string() + " --out " + dir.string(), dir);
  ASSERT_EQ(o.code, 0) << o.err;
  const auto t1 = lines(slurp(dir / "vis_funnel_T1.csv"));
  EXPECT_EQ(t1.size(), 1u + 2 * 6);
  EXPECT_EQ(t1[0], "seed,iteration,neg_elbo");
  const Json p = Json::parse(slurp(dir / "vis_funnel_params.json"));
  EXPECT_EQ(p.at("schema_version"), 1);
  ASSERT_EQ(p.at("runs").size(), 4u);
  for (const auto& r : p.at("runs")) {
    EXPECT_GT(r.at("eta").get<double>(), 0.0);
    EXPECT_TRUE(r.at("final_neg_elbo").is_number());
  }
}

TEST(CliBnn, LinearDatasetFitsWithinTwiceTheNoise) {
  const auto dir = testdata::scratch_dir("cli_bnn");
  testdata::write_linear_csv(dir / "linear.csv", 500, 11);
  const auto o = cli("bnn --data " + (dir / "linear.csv").string() + " --target-column y --seed 1 --out " + dir.string(),
                     dir);
  ASSERT_EQ(o.code, 0) << o.err;
  for (const char* s : {"sgld", "sgld_r"}) {
    const fs::path f = dir / (std::string("bnn_linear_") + s + "_seed1.json");
    ASSERT_TRUE(fs::exists(f)) << f;
    const Json j = Json::parse(slurp(f));
    EXPECT_EQ(j.at("schema_version"), 1);
    EXPECT_EQ(j.at("seed"), 1);
    ASSERT_TRUE(j.at("rmse").is_number());
    ASSERT_TRUE(j.at("test_ll").is_number());
    EXPECT_LE(j.at("rmse").get<double>(), 2.0 * 0.3) << s;
  }
}

TEST(CliBnn, MissingTargetColumnIsConfigError) {
  const auto dir = testdata::scratch_dir("cli_bnn_bad");
  testdata::write_linear_csv(dir / "linear.csv", 40, 2);
  const auto o = cli("bnn --data " + (dir / "linear.csv").string() + " --target-column nope --out " + dir.string(), dir);
  EXPECT_EQ(o.code, 2);
  EXPECT_NE(o.err.find("nope"), std::string::npos) << o.err;
}
