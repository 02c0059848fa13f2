// pvdctl: boundary-feedback stabilization toolkit for the linearized
// cross-diffusion film model on a growing interval.
//
// Exit codes: 0 success, 1 scenario check failure or report regression,
// 2 config/usage error, 3 numerical failure.

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "pvdctl/errors.hpp"
#include "pvdctl/scenario.hpp"

namespace {

struct CommonOpts {
  std::string config;
  std::string out = "out";
  int refine = 0;
};

void add_scenario_command(CLI::App& app, const std::string& verb, const std::string& kind,
                          const std::string& help, int& rc) {
  CLI::App* cmd = app.add_subcommand(verb, help);
  auto opts = std::make_shared<CommonOpts>();
  cmd->add_option("--config", opts->config, "scenario config (JSON)")->required();
  cmd->add_option("--out", opts->out, "output directory for CSV/JSON artifacts");
  cmd->add_option("--refine", opts->refine,
                  "halve the spatial step and the time step this many times");
  cmd->callback([&rc, opts, kind]() {
    rc = pvdctl::run_scenario(kind, opts->config, opts->out, opts->refine);
  });
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stabilization scenarios for a thin film with cross diffusion"};
  app.set_version_flag("--version", std::string(pvdctl::kToolVersion));
  app.require_subcommand(1);

  int rc = 0;

  add_scenario_command(app, "kernel", "kernel",
                       "solve the backstepping kernel and its diagnostics", rc);
  add_scenario_command(app, "simulate-target", "target",
                       "run the damped target system on the fixed reference interval", rc);
  add_scenario_command(app, "simulate-closed-loop", "closed-loop",
                       "run the scalar plant with boundary feedback", rc);
  add_scenario_command(app, "simulate-finite-time", "finite-time",
                       "run the switched-gain finite-time scenario", rc);
  add_scenario_command(app, "simulate-nonlinear", "nonlinear",
                       "run the open-loop nonlinear film model", rc);
  add_scenario_command(app, "schedule-check", "schedule-check",
                       "certify a switching schedule without simulating", rc);

  CLI::App* rep = app.add_subcommand("report", "aggregate run summaries into one table");
  std::vector<std::string> manifests;
  std::string baseline;
  std::string rep_out = "out";
  rep->add_option("manifests", manifests, "run directories or manifest.json paths")
      ->required();
  rep->add_option("--baseline", baseline, "previous report.csv to compare against");
  rep->add_option("--out", rep_out, "output directory");
  rep->callback(
      [&]() { rc = pvdctl::report_command(manifests, baseline, rep_out); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const pvdctl::config_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const pvdctl::numeric_error& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "failure: %s\n", e.what());
    return 3;
  }
  return rc;
}
