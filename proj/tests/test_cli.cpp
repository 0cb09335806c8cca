#include "sgdm/cli.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace sgdm;
namespace fs = std::filesystem;

namespace {

struct Invocation {
  int code;
  std::string out;
  std::string err;
};

Invocation invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "sgdm_lab");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

fs::path write_config(const std::string& name, const json& j) {
  const fs::path p = fs::temp_directory_path() / name;
  std::ofstream(p) << j.dump(2);
  return p;
}

json quad_config() {
  return json::parse(R"({
    "problem": {"kind": "quadratic", "diag": [1, 10]},
    "noise": {"kind": "additive_gaussian", "sigma2": 1.0},
    "algorithm": {"kind": "sgdm", "alpha": 0.05, "beta": 0.9},
    "run": {"epochs": 5, "batches_per_epoch": 10},
    "seeds": [1, 2]
  })");
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream o;
  o << in.rdbuf();
  return o.str();
}

}  // namespace

TEST(Cli, SubcommandIsRequired) {
  EXPECT_EQ(invoke({}).code, kExitUsage);
  EXPECT_EQ(invoke({"frobnicate"}).code, kExitUsage);
  EXPECT_EQ(invoke({"--help"}).code, kExitOk);
}

TEST(Cli, PlanJsonValues) {
  const Invocation r = invoke({"plan", "--a1", "1.0", "--a2", "2.0", "--lengths", "3,6,21", "--format", "json"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const json j = json::parse(r.out);
  ASSERT_EQ(j["stages"].size(), 3u);
  EXPECT_NEAR(j["stages"][0]["alpha"].get<double>(), 0.667, 5e-4);
  EXPECT_NEAR(j["stages"][1]["alpha"].get<double>(), 0.333, 5e-4);
  EXPECT_NEAR(j["stages"][2]["alpha"].get<double>(), 0.095, 5e-4);
  EXPECT_NEAR(j["stages"][0]["beta"].get<double>(), 0.6, 1e-12);
  EXPECT_NEAR(j["stages"][1]["beta"].get<double>(), 0.75, 1e-12);
  EXPECT_NEAR(j["stages"][2]["beta"].get<double>(), 0.913, 5e-4);
  EXPECT_TRUE(j["practical_ok"].get<bool>());
}

TEST(Cli, PlanTableAndOutFile) {
  const fs::path dir = fs::temp_directory_path() / "sgdm_cli_plan";
  fs::remove_all(dir);
  const Invocation r = invoke({"plan", "--a1", "1.0", "--a2", "2.0", "--lengths", "3,6,21", "--out", dir.string()});
  EXPECT_EQ(r.code, kExitOk);
  EXPECT_NE(r.out.find("A1_consistent"), std::string::npos);
  EXPECT_TRUE(fs::exists(dir / "plan.json"));
}

TEST(Cli, PlanRejectsDecreasingLengths) {
  const Invocation r = invoke({"plan", "--a1", "1.0", "--a2", "2.0", "--lengths", "21,6,3"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("--lengths"), std::string::npos);
  EXPECT_EQ(invoke({"plan", "--a1", "1.0", "--a2", "2.0", "--lengths", "3,x"}).code, kExitUsage);
  EXPECT_EQ(invoke({"plan", "--a1", "1.0", "--a2", "2.0", "--lengths", "3", "--bogus", "1"}).code, kExitUsage);
}

TEST(Cli, PlanTheoreticalMode) {
  // A1 matches 1/(24 sqrt 2) but beta_1 < 1/2 for these lengths, so the plan as a whole fails
  const Invocation r =
      invoke({"plan", "--a1", "0.029463", "--a2", "2.0", "--lengths", "3,6,21", "--L", "1.0", "--mode", "theoretical", "--format", "json"});
  EXPECT_EQ(r.code, kExitCheckFailed);
  const json j = json::parse(r.out);
  int seen = 0;
  for (const auto& e : j["validation"])
    if (e["name"] == "A1_theoretical") {
      EXPECT_TRUE(e["pass"].get<bool>());
      ++seen;
    }
  EXPECT_EQ(seen, 1);
  EXPECT_EQ(invoke({"plan", "--a1", "1.0", "--a2", "2.0", "--lengths", "3,6,21", "--mode", "theoretical"}).code, kExitCheckFailed);
}

TEST(Cli, RunWritesFilesAndHonoursOverrides) {
  const fs::path cfg = write_config("sgdm_cli_run.json", quad_config());
  const fs::path dir = fs::temp_directory_path() / "sgdm_cli_run";
  fs::remove_all(dir);
  const Invocation r = invoke({"run", "--config", cfg.string(), "--out", dir.string(), "--seed", "7", "--epochs", "3", "--format", "json"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  EXPECT_TRUE(fs::exists(dir / "seed_7.csv"));
  EXPECT_FALSE(fs::exists(dir / "seed_1.csv"));
  const json s = json::parse(slurp(dir / "summary.json"));
  EXPECT_EQ(s["epochs"].size(), 3u);
}

TEST(Cli, RunMissingOrInvalidConfig) {
  EXPECT_EQ(invoke({"run", "--config", "/nonexistent/x.json"}).code, kExitUsage);
  json j = quad_config();
  j["algorithm"]["alpha"] = -1;
  const Invocation r = invoke({"run", "--config", write_config("sgdm_cli_bad.json", j).string()});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("algorithm.alpha"), std::string::npos);
}

TEST(Cli, RunDivergentConfigExitsZero) {
  json j = quad_config();
  j["algorithm"] = {{"kind", "sgd"}, {"alpha", 1.0}};
  const fs::path dir = fs::temp_directory_path() / "sgdm_cli_div";
  const Invocation r = invoke({"run", "--config", write_config("sgdm_cli_div.json", j).string(), "--out", dir.string()});
  EXPECT_EQ(r.code, kExitOk);
  EXPECT_NE(r.out.find("diverged"), std::string::npos);
}

TEST(Cli, VerifyIdentityOnDefaultConfig) {
  const fs::path dir = fs::temp_directory_path() / "sgdm_cli_verify";
  fs::remove_all(dir);
  const Invocation r = invoke({"verify", "--check", "identity_z", "--out", dir.string()});
  ASSERT_EQ(r.code, kExitOk) << r.out << r.err;
  EXPECT_NE(r.out.find("PASS identity_z"), std::string::npos);
  const std::string csv = slurp(dir / "report.csv");
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "k,check_name,lhs,rhs,margin,pass");
  const json rep = json::parse(slurp(dir / "report.json"));
  EXPECT_TRUE(rep.contains("horizon"));
}

TEST(Cli, VerifyUnknownCheck) {
  const Invocation r = invoke({"verify", "--check", "identity_z,lemma99"});
  EXPECT_EQ(r.code, kExitUsage);
  EXPECT_NE(r.err.find("lemma99"), std::string::npos);
}

TEST(Cli, SweepEmptyValuesIsUsageError) {
  const fs::path cfg = write_config("sgdm_cli_sweep0.json", quad_config());
  EXPECT_EQ(invoke({"sweep", "--config", cfg.string(), "--param", "algorithm.alpha", "--values", ""}).code, kExitUsage);
  EXPECT_EQ(invoke({"sweep", "--config", cfg.string(), "--param", "algorithm.alpha", "--values", ","}).code, kExitUsage);
}

TEST(Cli, SingleValueSweepEqualsRun) {
  const fs::path cfg = write_config("sgdm_cli_sweep1.json", quad_config());
  const fs::path sd = fs::temp_directory_path() / "sgdm_cli_sweep", rd = fs::temp_directory_path() / "sgdm_cli_sweep_run";
  fs::remove_all(sd);
  fs::remove_all(rd);
  ASSERT_EQ(invoke({"sweep", "--config", cfg.string(), "--param", "algorithm.alpha", "--values", "0.05", "--out", sd.string()}).code, kExitOk);
  ASSERT_EQ(invoke({"run", "--config", cfg.string(), "--out", rd.string()}).code, kExitOk);
  for (const char* f : {"seed_1.csv", "seed_2.csv", "summary.json"})
    EXPECT_EQ(slurp(sd / "algorithm.alpha=0.05" / f), slurp(rd / f)) << f;
  EXPECT_TRUE(fs::exists(sd / "plot_loss_epoch_avg.svg"));
  const json sw = json::parse(slurp(sd / "sweep.json"));
  EXPECT_EQ(sw["rows"].size(), 1u);
}

TEST(Cli, SweepOrdersStepsizes) {
  json j = quad_config();
  j["problem"]["diag"] = {1.0, 1.0};
  j["algorithm"] = {{"kind", "sgd"}, {"alpha", 0.1}};
  j["x0"] = {10.0, 10.0};
  j["run"] = {{"epochs", 50}, {"batches_per_epoch", 10}};
  j["seeds"] = {1, 2, 3};
  const fs::path cfg = write_config("sgdm_cli_sweep3.json", j);
  const fs::path sd = fs::temp_directory_path() / "sgdm_cli_sweep3";
  fs::remove_all(sd);
  const Invocation r =
      invoke({"sweep", "--config", cfg.string(), "--param", "algorithm.alpha", "--values", "1.0,0.5,0.02", "--out", sd.string(), "--format", "json"});
  ASSERT_EQ(r.code, kExitOk) << r.err;
  const json rows = json::parse(r.out)["rows"];
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_LT(rows[0]["initial_loss"].get<double>(), rows[2]["initial_loss"].get<double>());
  EXPECT_GT(rows[0]["final_loss"].get<double>(), rows[2]["final_loss"].get<double>());
  EXPECT_EQ(rows[2]["vs_first_final"]["better"], "this");
}
