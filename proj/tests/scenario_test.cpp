#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "json.hpp"

#include <gtest/gtest.h>

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct CliResult {
  int code = -1;
  std::string out;
  std::string err;
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

long line_count(const std::string& text) {
  long n = 0;
  for (char c : text)
    if (c == '\n') ++n;
  return n;
}

class ScenarioTest : public ::testing::Test {
 protected:
  fs::path dir;

  void SetUp() override {
    const char* bin = std::getenv("PVDCTL_BIN");
    ASSERT_NE(bin, nullptr) << "PVDCTL_BIN must point at the CLI binary";
    bin_ = bin;
    dir = fs::path(::testing::TempDir()) / "pvdctl_scn" /
          ::testing::UnitTest::GetInstance()->current_test_info()->name();
    fs::remove_all(dir);
    fs::create_directories(dir);
  }

  CliResult run(const std::string& args) const {
    const fs::path so = dir / "_stdout", se = dir / "_stderr";
    const std::string cmd =
        bin_ + " " + args + " > " + so.string() + " 2> " + se.string();
    const int status = std::system(cmd.c_str());
    CliResult r;
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = slurp(so);
    r.err = slurp(se);
    return r;
  }

  fs::path write_config(const std::string& name, const json& j) const {
    const fs::path p = dir / name;
    spit(p, j.dump(2) + "\n");
    return p;
  }

  json kernel_config() const {
    return json{{"kind", "kernel"}, {"lambda", 1.0}, {"sigma", 1.0}, {"L", 1.0}, {"N", 101}};
  }

 private:
  std::string bin_;
};

TEST_F(ScenarioTest, kernel_run_writes_artifacts_and_passes) {
  const fs::path cfg = write_config("kernel.json", kernel_config());
  const CliResult r = run("kernel --config " + cfg.string() + " --out " + (dir / "o").string());
  ASSERT_EQ(r.code, 0) << r.err;

  const json summary = json::parse(slurp(dir / "o" / "summary.json"));
  EXPECT_EQ(summary["format_version"], 1);
  EXPECT_EQ(summary["kind"], "kernel");
  EXPECT_TRUE(summary["pass"].get<bool>());
  for (const auto& kv : summary["checks"].items())
    EXPECT_TRUE(kv.value().get<bool>()) << kv.key();
  EXPECT_EQ(summary["metrics"]["diag_trace_err"].get<double>(), 0.0);
  EXPECT_EQ(summary["metrics"]["loc_outside_max"].get<double>(), 0.0);
  EXPECT_GT(summary["metrics"]["k_h1"].get<double>(), 0.0);
  EXPECT_EQ(summary["grid"]["N"].get<int>(), 101);

  const json manifest = json::parse(slurp(dir / "o" / "manifest.json"));
  EXPECT_EQ(manifest["tool"], "pvdctl");
  EXPECT_EQ(manifest["tool_version"], "1.0.0");
  EXPECT_EQ(manifest["artifacts"]["summary"], "summary.json");
  EXPECT_EQ(manifest["artifacts"]["csv"][0], "kernel.csv");
  EXPECT_EQ(manifest["config"]["N"].get<int>(), 101);
  EXPECT_GE(manifest["wall_time_s"].get<double>(), 0.0);

  const std::string csv = slurp(dir / "o" / "kernel.csv");
  EXPECT_EQ(csv.substr(0, 6), "x,y,k\n");
  EXPECT_EQ(line_count(csv), 101 * 102 / 2 + 1);
}

TEST_F(ScenarioTest, identical_configs_reproduce_identical_bytes) {
  const fs::path cfg = write_config("kernel.json", kernel_config());
  ASSERT_EQ(run("kernel --config " + cfg.string() + " --out " + (dir / "a").string()).code, 0);
  ASSERT_EQ(run("kernel --config " + cfg.string() + " --out " + (dir / "b").string()).code, 0);
  EXPECT_EQ(slurp(dir / "a" / "kernel.csv"), slurp(dir / "b" / "kernel.csv"));
  EXPECT_EQ(slurp(dir / "a" / "summary.json"), slurp(dir / "b" / "summary.json"));
}

TEST_F(ScenarioTest, refine_halves_grid_and_shrinks_oracle_error) {
  const fs::path cfg = write_config("kernel.json", kernel_config());
  ASSERT_EQ(run("kernel --config " + cfg.string() + " --out " + (dir / "r0").string()).code, 0);
  ASSERT_EQ(run("kernel --config " + cfg.string() + " --out " + (dir / "r1").string() +
                " --refine 1")
                .code,
            0);
  const json s0 = json::parse(slurp(dir / "r0" / "summary.json"));
  const json s1 = json::parse(slurp(dir / "r1" / "summary.json"));
  EXPECT_EQ(s1["grid"]["N"].get<int>(), 201);
  EXPECT_NEAR(s1["grid"]["h"].get<double>(), 0.5 * s0["grid"]["h"].get<double>(), 1e-15);
  EXPECT_LE(s1["metrics"]["oracle_abs_err"].get<double>(),
            s0["metrics"]["oracle_abs_err"].get<double>() / 3.0);
}

TEST_F(ScenarioTest, malformed_json_reports_line_and_exits_2) {
  const fs::path p = dir / "bad.json";
  spit(p, "{\n  \"kind\": kernel\n}\n");
  const CliResult r = run("kernel --config " + p.string() + " --out " + (dir / "o").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("bad.json:2"), std::string::npos) << r.err;
}

TEST_F(ScenarioTest, kind_mismatch_exits_2) {
  const fs::path cfg = write_config("kernel.json", kernel_config());
  const CliResult r =
      run("simulate-target --config " + cfg.string() + " --out " + (dir / "o").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("error:"), std::string::npos);
  EXPECT_NE(r.err.find("kernel"), std::string::npos);
}

TEST_F(ScenarioTest, missing_required_key_exits_2) {
  const fs::path cfg = write_config("nl.json", json{{"kind", "nonlinear"},
                                                    {"phi", {0.25, 0.3, 0.45}},
                                                    {"u_init", {0.3, 0.45}}});
  const CliResult r =
      run("simulate-nonlinear --config " + cfg.string() + " --out " + (dir / "o").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("error:"), std::string::npos);
}

TEST_F(ScenarioTest, target_scenario_with_snapshots) {
  const fs::path cfg = write_config("target.json", json{{"kind", "target"},
                                                        {"lambda", 5.0},
                                                        {"M", 101},
                                                        {"dt", 2e-3},
                                                        {"T", 0.8},
                                                        {"output_every", 5},
                                                        {"snapshot_times", {0.1}}});
  const CliResult r =
      run("simulate-target --config " + cfg.string() + " --out " + (dir / "o").string());
  ASSERT_EQ(r.code, 0) << r.err;
  const json summary = json::parse(slurp(dir / "o" / "summary.json"));
  EXPECT_TRUE(summary["pass"].get<bool>());
  const json manifest = json::parse(slurp(dir / "o" / "manifest.json"));
  bool has_snapshot = false;
  for (const auto& name : manifest["artifacts"]["csv"])
    if (name == "snapshot_0.csv") has_snapshot = true;
  EXPECT_TRUE(has_snapshot);
  EXPECT_TRUE(fs::exists(dir / "o" / "snapshot_0.csv"));
  const std::string ts = slurp(dir / "o" / "timeseries.csv");
  EXPECT_EQ(ts.substr(0, ts.find('\n')), "t,L2_norm,boundary_value,control_value");
}

TEST_F(ScenarioTest, weak_schedule_fails_finite_time_checks) {
  const fs::path cfg = write_config(
      "ft.json", json{{"kind", "finite-time"},
                      {"schedule", {{"gamma", 1.5}, {"t", {0.0, 0.2, 0.4}}, {"lam", {4.0, 4.0}}}},
                      {"dt", 1e-3},
                      {"M", 121},
                      {"kernel_N", 221}});
  const CliResult r =
      run("simulate-finite-time --config " + cfg.string() + " --out " + (dir / "o").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("check failed: hyp1_ok"), std::string::npos) << r.err;
  const json summary = json::parse(slurp(dir / "o" / "summary.json"));
  EXPECT_FALSE(summary["pass"].get<bool>());
  EXPECT_TRUE(fs::exists(dir / "o" / "switches.csv"));
}

TEST_F(ScenarioTest, schedule_check_reports_first_offender) {
  const fs::path cfg = write_config(
      "sc.json",
      json{{"kind", "schedule-check"},
           {"schedule", {{"gamma", 1.5}, {"t", {0.0, 0.2, 0.4}}, {"lam", {4.0, 4.0}}}}});
  const CliResult r =
      run("schedule-check --config " + cfg.string() + " --out " + (dir / "o").string());
  EXPECT_EQ(r.code, 1);
  EXPECT_NE(r.err.find("first offending interval m = 0"), std::string::npos) << r.err;
  EXPECT_TRUE(fs::exists(dir / "o" / "certificates.csv"));

  const fs::path good = write_config(
      "good.json", json{{"kind", "schedule-check"},
                        {"schedule", {{"default", {{"T", 1.0}, {"gamma", 1.5}, {"intervals", 6}}}}}});
  EXPECT_EQ(run("schedule-check --config " + good.string() + " --out " + (dir / "g").string())
                .code,
            0);
}

TEST_F(ScenarioTest, unstable_time_step_exits_3) {
  const fs::path cfg = write_config("nl.json", json{{"kind", "nonlinear"},
                                                    {"K", {{0.0, 1.0, 0.8},
                                                           {1.0, 0.0, 1.2},
                                                           {0.8, 1.2, 0.0}}},
                                                    {"phi", {0.25, 0.3, 0.45}},
                                                    {"u_init", {0.3, 0.45}},
                                                    {"dt", 0.5},
                                                    {"T", 1.0},
                                                    {"M", 50}});
  const CliResult r =
      run("simulate-nonlinear --config " + cfg.string() + " --out " + (dir / "o").string());
  EXPECT_EQ(r.code, 3);
  EXPECT_NE(r.err.find("numerical failure"), std::string::npos) << r.err;
}

TEST_F(ScenarioTest, report_orders_baseline_and_regressions) {
  const fs::path cfg = write_config("kernel.json", kernel_config());
  ASSERT_EQ(run("kernel --config " + cfg.string() + " --out " + (dir / "r0").string()).code, 0);
  ASSERT_EQ(run("kernel --config " + cfg.string() + " --out " + (dir / "r1").string() +
                " --refine 1")
                .code,
            0);

  const CliResult rep = run("report " + (dir / "r0").string() + " " + (dir / "r1").string() +
                            " --out " + (dir / "rep").string());
  ASSERT_EQ(rep.code, 0) << rep.err;
  EXPECT_TRUE(fs::exists(dir / "rep" / "report.csv"));
  EXPECT_TRUE(fs::exists(dir / "rep" / "report.txt"));

  // convergence order of the series-oracle mismatch, from the CSV
  const std::string csv = slurp(dir / "rep" / "report.csv");
  const std::size_t at = csv.find("order:oracle_abs_err");
  ASSERT_NE(at, std::string::npos);
  const std::size_t eol = csv.find('\n', at);
  const std::string row = csv.substr(at, eol - at);
  const double order = std::stod(row.substr(row.rfind(',') + 1));
  EXPECT_GE(order, 1.8);
  EXPECT_LE(order, 2.2);

  // clean baseline comparison passes...
  const CliResult clean = run("report " + (dir / "r0").string() + " " + (dir / "r1").string() +
                              " --baseline " + (dir / "rep" / "report.csv").string() +
                              " --out " + (dir / "rep2").string());
  EXPECT_EQ(clean.code, 0) << clean.out;
  EXPECT_EQ(clean.out.find("REGRESSION"), std::string::npos);

  // ...and a tampered baseline is flagged
  std::string tampered = csv;
  const std::size_t kpos = tampered.find("k_h1,");
  ASSERT_NE(kpos, std::string::npos);
  tampered.insert(kpos + 5, "9");  // prefix a digit: value change well past tolerance
  spit(dir / "tampered.csv", tampered);
  const CliResult reg = run("report " + (dir / "r0").string() + " " + (dir / "r1").string() +
                            " --baseline " + (dir / "tampered.csv").string() + " --out " +
                            (dir / "rep3").string());
  EXPECT_EQ(reg.code, 1);
  EXPECT_NE(reg.out.find("REGRESSION k_h1"), std::string::npos) << reg.out;
  EXPECT_NE(reg.out.find("regressions: "), std::string::npos);
}

TEST_F(ScenarioTest, report_rejects_mixed_kinds) {
  const fs::path kc = write_config("kernel.json", kernel_config());
  ASSERT_EQ(run("kernel --config " + kc.string() + " --out " + (dir / "k").string()).code, 0);
  const fs::path sc = write_config(
      "sched.json", json{{"kind", "schedule-check"},
                         {"schedule", {{"default", {{"T", 1.0}, {"gamma", 1.5}, {"intervals", 4}}}}}});
  ASSERT_EQ(run("schedule-check --config " + sc.string() + " --out " + (dir / "s").string()).code,
            0);
  const CliResult r = run("report " + (dir / "k").string() + " " + (dir / "s").string() +
                          " --out " + (dir / "rep").string());
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("conflicting scenario kinds"), std::string::npos);
  EXPECT_NE(r.err.find("kernel"), std::string::npos);
  EXPECT_NE(r.err.find("schedule-check"), std::string::npos);
}

TEST_F(ScenarioTest, usage_and_version) {
  EXPECT_EQ(run("").code, 2);  // a subcommand is required
  const CliResult v = run("--version");
  EXPECT_EQ(v.code, 0);
  EXPECT_NE(v.out.find("1.0.0"), std::string::npos);
}

}  // namespace
