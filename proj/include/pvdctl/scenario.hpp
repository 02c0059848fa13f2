#pragma once

// Scenario plumbing shared by the CLI: JSON config loading with line-anchored
// diagnostics, per-kind runners that emit CSV time series plus a manifest and
// a summary, and the report aggregator.  Every CSV cell goes through
// format_double, so identical configs reproduce byte-identical artifacts;
// wall time lives only in the manifest.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "pvdctl/control.hpp"
#include "pvdctl/errors.hpp"
#include "pvdctl/kernel.hpp"
#include "pvdctl/model.hpp"
#include "pvdctl/nonlinear.hpp"
#include "pvdctl/numerics.hpp"
#include "pvdctl/pde.hpp"
#include "pvdctl/transform.hpp"

namespace pvdctl {

inline constexpr const char* kToolName = "pvdctl";
inline constexpr const char* kToolVersion = "1.0.0";
inline constexpr int kFormatVersion = 1;

// ---------------------------------------------------------------------------
// Config loading

inline nlohmann::json load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw config_error("config '" + path + "' is not readable");
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    std::size_t line = 1;
    const std::size_t stop = std::min(text.size(), e.byte > 0 ? e.byte - 1 : 0);
    for (std::size_t i = 0; i < stop; ++i)
      if (text[i] == '\n') ++line;
    throw config_error(path + ":" + std::to_string(line) + ": " + e.what());
  }
}

namespace detail {

template <typename T>
T jget(const nlohmann::json& j, const std::string& key, const T& def) {
  if (!j.contains(key)) return def;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw config_error("config field '" + key + "': " + e.what());
  }
}

template <typename T>
T jreq(const nlohmann::json& j, const std::string& key) {
  if (!j.contains(key)) throw config_error("config: missing required field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw config_error("config field '" + key + "': " + e.what());
  }
}

inline int refined_nodes(int n, int k) { return (n - 1) * (1 << k) + 1; }

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw config_error("cannot write '" + p.string() + "'");
  out << text;
}

// Column-major CSV with a header row; every cell is round-trippable.
inline void write_csv(const std::filesystem::path& p, const std::vector<std::string>& header,
                      const std::vector<std::vector<double>>& cols) {
  std::ostringstream out;
  for (std::size_t c = 0; c < header.size(); ++c) {
    if (c) out << ',';
    out << header[c];
  }
  out << '\n';
  const std::size_t rows = cols.empty() ? 0 : cols[0].size();
  for (const auto& col : cols)
    if (col.size() != rows) throw numeric_error("write_csv: ragged columns");
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols.size(); ++c) {
      if (c) out << ',';
      out << format_double(cols[c][r]);
    }
    out << '\n';
  }
  write_text(p, out.str());
}

// Least-squares decay fit of log(values) on [t0, t1]; returns NaN when fewer
// than three positive samples fall in the window.
inline LinearFit window_log_fit(const std::vector<double>& t, const std::vector<double>& v,
                                double t0, double t1) {
  std::vector<double> xs, ys;
  for (std::size_t i = 0; i < t.size() && i < v.size(); ++i)
    if (t[i] >= t0 - 1e-12 && t[i] <= t1 + 1e-12 && v[i] > 0.0) {
      xs.push_back(t[i]);
      ys.push_back(std::log(v[i]));
    }
  if (xs.size() < 3) {
    LinearFit f;
    f.slope = std::numeric_limits<double>::quiet_NaN();
    return f;
  }
  return linear_fit(xs, ys);
}

inline Schedule schedule_from_json(const nlohmann::json& j) {
  if (j.contains("default")) {
    const nlohmann::json& d = j.at("default");
    return default_schedule(jreq<double>(d, "T"), jreq<double>(d, "gamma"),
                            jreq<int>(d, "intervals"));
  }
  Schedule s;
  s.gamma = jreq<double>(j, "gamma");
  s.t = jreq<std::vector<double>>(j, "t");
  s.lam = jreq<std::vector<double>>(j, "lam");
  if (s.t.size() < 2 || s.lam.size() + 1 != s.t.size())
    throw config_error("schedule: need breakpoints t (>= 2) and one rate per interval");
  return s;
}

inline ThicknessSchedule thickness_from_json(const nlohmann::json& j) {
  if (j.contains("default")) {
    const nlohmann::json& d = j.at("default");
    return default_thickness_schedule(jreq<double>(d, "T"), jreq<int>(d, "intervals"));
  }
  ThicknessSchedule s;
  s.t = jreq<std::vector<double>>(j, "t");
  s.mu = jreq<std::vector<double>>(j, "mu");
  if (s.t.size() < 2 || s.mu.size() + 1 != s.t.size())
    throw config_error("thickness schedule: need breakpoints t (>= 2) and one rate per interval");
  return s;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Scenario result plumbing

struct ScenarioResult {
  std::string kind;
  nlohmann::json grid;     // step metadata needed to reproduce the numbers
  nlohmann::json metrics;  // flat name -> double
  nlohmann::json checks;   // flat name -> bool
  nlohmann::json diagnostics;
  std::vector<std::string> csv_files;

  bool pass() const {
    for (const auto& kv : checks.items())
      if (!kv.value().get<bool>()) return false;
    return true;
  }
};

namespace detail {

// ---- kernel ---------------------------------------------------------------

inline ScenarioResult run_kernel_scenario(const nlohmann::json& cfg,
                                          const std::filesystem::path& out, int refine) {
  const double lambda = jget<double>(cfg, "lambda", 1.0);
  const double sigma = jget<double>(cfg, "sigma", 1.0);
  const double L = jget<double>(cfg, "L", 1.0);
  const int N = refined_nodes(jget<int>(cfg, "N", 201), refine);
  const double alpha = lambda / sigma;

  const KernelSolution sol = forward_kernel(lambda, sigma, L, N);
  const ResidualNorms res = kernel_residual(sol);
  const LocalizationReport loc = localization_check(alpha, L, N);
  const double h = sol.grid.h();

  double diag_err = 0.0;
  for (int i = 0; i < N; ++i)
    diag_err = std::max(diag_err,
                        std::abs(sol.diag[std::size_t(i)] - sol.ext_slope * sol.grid.x(i)));

  std::vector<double> probe = jget<std::vector<double>>(cfg, "probe", {0.8 * L, 0.4 * L});
  if (probe.size() != 2) throw config_error("kernel: probe must be [x, y]");
  int pi = int(std::round(probe[0] / h));
  int pj = int(std::round(probe[1] / h));
  pi = std::clamp(pi, 0, N - 1);
  pj = std::clamp(pj, 0, pi);
  const double px = double(pi) * h, py = double(pj) * h;
  const OracleValue oracle = series_oracle(alpha, px, py, 400);
  const double marching = sol.value(pi, pj);
  const double oracle_err = std::abs(marching - oracle.value);

  std::vector<double> cx, cy, cv;
  cx.reserve(sol.grid.size());
  for (int i = 0; i < N; ++i)
    for (int j = 0; j <= i; ++j) {
      cx.push_back(sol.grid.x(i));
      cy.push_back(sol.grid.x(j));
      cv.push_back(sol.k[sol.grid.index(i, j)]);
    }
  write_csv(out / "kernel.csv", {"x", "y", "k"}, {cx, cy, cv});

  ScenarioResult r;
  r.kind = "kernel";
  r.csv_files = {"kernel.csv"};
  r.grid = {{"N", N}, {"h", h}, {"L", L}};
  r.metrics = {{"alpha", alpha},
               {"diag_trace_err", diag_err},
               {"residual_linf", res.linf},
               {"residual_l2", res.l2},
               {"loc_inside_max", loc.inside_max},
               {"loc_outside_max", loc.outside_max},
               {"oracle_x", px},
               {"oracle_y", py},
               {"oracle_series", oracle.value},
               {"oracle_marching", marching},
               {"oracle_abs_err", oracle_err},
               {"k_l2", sol.l2_total()},
               {"k_h1", sol.h1_total()}};
  r.diagnostics = {{"residual_nodes", res.nodes},
                   {"oracle_converged", oracle.converged},
                   {"oracle_last_increment", oracle.last_increment}};
  const double diag_scale = std::max(1.0, std::abs(alpha) * L / 2.0);
  r.checks = {{"diag_trace_ok", diag_err <= 1e-3 * diag_scale},
              {"localization_ok", loc.outside_max <= 5.0 * h * h * loc.inside_max},
              {"oracle_ok", oracle.converged && oracle_err <= std::max(1e-4, 5.0 * h * h)}};
  return r;
}

// ---- target ---------------------------------------------------------------

inline ScenarioResult run_target_scenario(const nlohmann::json& cfg,
                                          const std::filesystem::path& out, int refine) {
  SolverConfig sc;
  sc.sigma = jget<double>(cfg, "sigma", sc.sigma);
  sc.v_bar = jget<double>(cfg, "v_bar", sc.v_bar);
  sc.e0 = jget<double>(cfg, "e0", sc.e0);
  sc.lambda = jget<double>(cfg, "lambda", 5.0);
  sc.theta = jget<double>(cfg, "theta", sc.theta);
  sc.dt = jget<double>(cfg, "dt", sc.dt) / double(1 << refine);
  sc.T = jget<double>(cfg, "T", sc.T);
  sc.M = refined_nodes(jget<int>(cfg, "M", sc.M), refine);
  sc.output_every = jget<int>(cfg, "output_every", sc.output_every) * (1 << refine);
  sc.snapshot_times = jget<std::vector<double>>(cfg, "snapshot_times", {});
  const std::string init = jget<std::string>(cfg, "init", "mixed");
  const double amp = jget<double>(cfg, "init_amp", 1.0);
  sc.validate();

  const TargetRun run = simulate_target(sc, initial_profile(init, amp, sc.M));

  std::vector<double> control(run.times.size(), 0.0);
  write_csv(out / "timeseries.csv", {"t", "L2_norm", "boundary_value", "control_value"},
            {run.times, run.norm, run.boundary, control});

  ScenarioResult r;
  r.kind = "target";
  r.csv_files = {"timeseries.csv"};
  const double dy = 1.0 / double(sc.M - 1);
  for (std::size_t s = 0; s < run.snapshots.size(); ++s) {
    std::vector<double> ys(std::size_t(sc.M));
    for (int m = 0; m < sc.M; ++m) ys[std::size_t(m)] = double(m) * dy;
    const std::string name = "snapshot_" + std::to_string(s) + ".csv";
    write_csv(out / name, {"y", "w"}, {ys, run.snapshots[s].second});
    r.csv_files.push_back(name);
  }

  const LinearFit fit = window_log_fit(run.times, run.norm, sc.T / 2.0, sc.T);
  const double decay = -fit.slope;
  const double rel = std::abs(decay - sc.lambda) / std::max(1e-300, sc.lambda);

  bool sup_ok = true;
  for (std::size_t i = 0; i < run.times.size(); ++i)
    if (run.norm[i] > 1.05 * std::exp(-sc.lambda * run.times[i]) * run.norm[0] + 1e-300)
      sup_ok = false;
  const double ledger_ratio = run.ledger.max_ratio();

  r.grid = {{"M", sc.M}, {"h", dy}, {"dt", sc.dt}, {"T", sc.T}};
  r.metrics = {{"lambda", sc.lambda},
               {"decay_fit", decay},
               {"decay_rel_err", rel},
               {"decay_fit_r2", fit.r2},
               {"ledger_ratio", ledger_ratio},
               {"norm_initial", run.norm.front()},
               {"norm_final", run.norm.back()}};
  r.diagnostics = {{"outputs", run.times.size()}};
  r.checks = {{"decay_fit_ok", std::isfinite(decay) && rel <= 0.05},
              {"sup_bound_ok", sup_ok},
              {"energy_ledger_ok", ledger_ratio <= 1.05}};
  return r;
}

// ---- closed loop ----------------------------------------------------------

inline ScenarioResult run_closed_loop_scenario(const nlohmann::json& cfg,
                                               const std::filesystem::path& out, int refine) {
  ClosedLoopConfig cc;
  cc.sigma = jget<double>(cfg, "sigma", cc.sigma);
  cc.v_bar = jget<double>(cfg, "v_bar", cc.v_bar);
  cc.e0 = jget<double>(cfg, "e0", cc.e0);
  cc.lambda = jget<double>(cfg, "lambda", cc.lambda);
  cc.T = jget<double>(cfg, "T", cc.T);
  cc.theta = jget<double>(cfg, "theta", cc.theta);
  cc.dt = jget<double>(cfg, "dt", cc.dt) / double(1 << refine);
  cc.M = refined_nodes(jget<int>(cfg, "M", cc.M), refine);
  cc.kernel_N = refined_nodes(jget<int>(cfg, "kernel_N", cc.kernel_N), refine);
  cc.output_every = jget<int>(cfg, "output_every", cc.output_every) * (1 << refine);
  cc.init = jget<std::string>(cfg, "init", cc.init);
  cc.init_amp = jget<double>(cfg, "init_amp", cc.init_amp);

  const ClosedLoopRun run = run_closed_loop(cc);

  write_csv(out / "timeseries.csv",
            {"t", "L2_norm", "boundary_value", "control_value", "ebar", "target_norm",
             "transform_norm", "equiv_rel_err", "l_norm", "loop_bound"},
            {run.times, run.zeta_norm, run.boundary, run.control, run.ebar, run.target_norm,
             run.transform_norm, run.equiv_rel_err, run.l_norm_t, run.loop_bound});

  const LinearFit fit = window_log_fit(run.times, run.zeta_norm, cc.T / 2.0, cc.T);
  const double decay = -fit.slope;

  // Kernel-norm growth rate c in ||T|| <= C e^{c ebar}.
  std::vector<double> lg;
  lg.reserve(run.l_norm_t.size());
  for (double v : run.l_norm_t) lg.push_back(std::log(1.0 + v));
  const LinearFit cgrow = linear_fit(run.ebar, lg);
  const double threshold = 0.8 * (cc.lambda - cgrow.slope * cc.v_bar);

  double equiv_max = 0.0;
  for (double e : run.equiv_rel_err)
    if (e >= 0.0) equiv_max = std::max(equiv_max, e);
  const double equiv_tol = 10.0 * run.h_kernel * run.h_kernel;

  double control_max = 0.0;
  for (double q : run.control) control_max = std::max(control_max, std::abs(q));
  const double control_final = std::abs(run.control.back());

  ScenarioResult r;
  r.kind = "closed-loop";
  r.csv_files = {"timeseries.csv"};
  r.grid = {{"M", cc.M},
            {"kernel_N", cc.kernel_N},
            {"h", run.h_kernel},
            {"dy", 1.0 / double(cc.M - 1)},
            {"dt", cc.dt},
            {"T", cc.T}};
  r.metrics = {{"lambda", cc.lambda},
               {"decay_fit", decay},
               {"decay_threshold", threshold},
               {"c_fit", cgrow.slope},
               {"equiv_rel_err_max", equiv_max},
               {"equiv_tol", equiv_tol},
               {"k_norm_tau1", run.k_norm_tau1},
               {"control_max", control_max},
               {"control_final", control_final},
               {"norm_initial", run.zeta_norm.front()},
               {"norm_final", run.zeta_norm.back()}};
  r.diagnostics = {{"outputs", run.times.size()}};
  r.checks = {{"loop_bound_ok", run.bound_ok},
              {"transform_tracks_target", equiv_max <= equiv_tol},
              {"decay_ok", std::isfinite(decay) && decay >= threshold},
              {"control_vanishes", control_final <= 0.05 * control_max}};
  return r;
}

// ---- finite time ----------------------------------------------------------

inline ScenarioResult run_finite_time_scenario(const nlohmann::json& cfg,
                                               const std::filesystem::path& out, int refine) {
  FiniteTimeConfig fc;
  fc.sigma = jget<double>(cfg, "sigma", fc.sigma);
  fc.v_bar = jget<double>(cfg, "v_bar", fc.v_bar);
  fc.e0 = jget<double>(cfg, "e0", fc.e0);
  fc.theta = jget<double>(cfg, "theta", fc.theta);
  fc.dt = jget<double>(cfg, "dt", fc.dt) / double(1 << refine);
  fc.M = refined_nodes(jget<int>(cfg, "M", fc.M), refine);
  fc.kernel_N = refined_nodes(jget<int>(cfg, "kernel_N", fc.kernel_N), refine);
  fc.output_every = jget<int>(cfg, "output_every", fc.output_every) * (1 << refine);
  fc.init = jget<std::string>(cfg, "init", fc.init);
  fc.init_amp = jget<double>(cfg, "init_amp", fc.init_amp);
  if (!cfg.contains("schedule")) throw config_error("finite-time: missing 'schedule'");
  fc.schedule = schedule_from_json(cfg.at("schedule"));
  const double lambda_floor = jget<double>(cfg, "lambda_floor", fc.sigma);
  const double min_decay = jget<double>(cfg, "min_total_decay", 10.0);

  const ScheduleCertificates cert = certify_schedule(fc.schedule, lambda_floor);
  const FiniteTimeRun run = run_finite_time(fc);

  write_csv(out / "timeseries.csv",
            {"t", "L2_norm", "boundary_value", "control_value", "ebar", "envelope_s"},
            {run.times, run.zeta_norm, run.boundary, run.control, run.ebar, run.envelope_s});
  std::vector<double> st, sl, sn, se;
  for (const SwitchRecord& s : run.switches) {
    st.push_back(s.t);
    sl.push_back(s.lambda);
    sn.push_back(s.zeta_norm);
    se.push_back(s.envelope_s);
  }
  write_csv(out / "switches.csv", {"t", "lambda", "zeta_norm", "envelope_s"},
            {st, sl, sn, se});

  ScenarioResult r;
  r.kind = "finite-time";
  r.csv_files = {"timeseries.csv", "switches.csv"};

  double min_margin = std::numeric_limits<double>::infinity();
  for (double m : cert.hyp1_margin) min_margin = std::min(min_margin, m);

  r.grid = {{"M", fc.M},
            {"kernel_N", fc.kernel_N},
            {"dt", fc.dt},
            {"dy", 1.0 / double(fc.M - 1)},
            {"h", (fc.e0 + fc.v_bar * fc.schedule.t.back()) / double(fc.kernel_N - 1)}};
  r.metrics = {{"total_decay_factor", run.total_decay_factor},
               {"min_hyp1_margin", min_margin},
               {"intervals", double(fc.schedule.lam.size())},
               {"norm_initial", run.switches.front().zeta_norm},
               {"norm_final", run.switches.back().zeta_norm},
               {"envelope_s_final", run.envelope_s.back()}};
  r.checks = {{"hyp1_ok", cert.hyp1_ok},
              {"rates_ok", cert.rates_ok},
              {"mass_increasing", cert.mass_increasing},
              {"per_interval_decrease", run.per_interval_decrease},
              {"total_decay_ok", run.total_decay_factor >= min_decay}};

  if (cfg.contains("thickness")) {
    const nlohmann::json& tj = cfg.at("thickness");
    const ThicknessSchedule ts = thickness_from_json(tj);
    const std::vector<double> logs = thickness_log_ratios(ts);
    bool monotone = true;
    for (std::size_t i = 1; i < logs.size(); ++i)
      if (!(logs[i] < logs[i - 1])) monotone = false;
    double env = 0.0;
    for (std::size_t m = 0; m + 1 < ts.t.size(); ++m) env += -ts.mu[m] * (ts.t[m + 1] - ts.t[m]);
    r.metrics["thickness_log_final"] = logs.back();
    r.metrics["thickness_envelope"] = env;
    r.metrics["thickness_identity_err"] = std::abs(logs.back() - env);
    r.checks["thickness_decreasing"] = monotone;
    r.checks["thickness_identity_ok"] = logs.back() == env;
    std::vector<double> clipped_mu = ts.mu;
    clipped_mu.push_back(ts.mu.back());
    write_csv(out / "thickness.csv", {"t", "mu", "log_ratio"}, {ts.t, clipped_mu, logs});
    r.csv_files.push_back("thickness.csv");
  }
  return r;
}

// ---- nonlinear ------------------------------------------------------------

inline ScenarioResult run_nonlinear_scenario(const nlohmann::json& cfg,
                                             const std::filesystem::path& out, int refine) {
  NonlinearConfig nc;
  const std::vector<std::vector<double>> kmat =
      jreq<std::vector<std::vector<double>>>(cfg, "K");
  const int n1 = int(kmat.size());
  nc.params.n = n1 - 1;
  nc.params.K = Eigen::MatrixXd::Zero(n1, n1);
  for (int i = 0; i < n1; ++i) {
    if (int(kmat[std::size_t(i)].size()) != n1)
      throw config_error("nonlinear: K must be square");
    for (int j = 0; j < n1; ++j) nc.params.K(i, j) = kmat[std::size_t(i)][std::size_t(j)];
  }
  nc.phi = jreq<std::vector<double>>(cfg, "phi");
  nc.u_init = jreq<std::vector<double>>(cfg, "u_init");
  nc.perturb_amp = jget<std::vector<double>>(cfg, "perturb_amp", {});
  nc.e0 = jget<double>(cfg, "e0", nc.e0);
  nc.dt = jget<double>(cfg, "dt", nc.dt) / double(1 << refine);
  nc.T = jget<double>(cfg, "T", nc.T);
  nc.M = refined_nodes(jget<int>(cfg, "M", nc.M), refine);
  nc.output_every = jget<int>(cfg, "output_every", nc.output_every) * (1 << refine);
  nc.cfl_safety = jget<double>(cfg, "cfl_safety", nc.cfl_safety);
  nc.snapshot_times = jget<std::vector<double>>(cfg, "snapshot_times", {});
  const double mass_tol = jget<double>(cfg, "mass_defect_tol", 5e-2);

  const NonlinearRun run = simulate_open_loop(nc);
  const int n = nc.params.n;

  std::vector<std::string> header = {"t",       "L2_norm", "boundary_value",
                                     "control_value", "e",       "entropy"};
  std::vector<double> control(run.times.size(), 0.0);
  std::vector<std::vector<double>> cols = {run.times, run.dev_l2, run.boundary_rho,
                                           control,   run.e,      run.entropy};
  for (int i = 0; i < n; ++i) {
    header.push_back("r_" + std::to_string(i + 1));
    cols.push_back(run.r[std::size_t(i)]);
  }
  for (int i = 0; i < n; ++i) {
    header.push_back("mass_" + std::to_string(i + 1));
    cols.push_back(run.mass[std::size_t(i)]);
  }
  write_csv(out / "timeseries.csv", header, cols);

  ScenarioResult r;
  r.kind = "nonlinear";
  r.csv_files = {"timeseries.csv"};
  const double dy = 1.0 / double(nc.M - 1);
  for (std::size_t s = 0; s < run.snapshots.size(); ++s) {
    std::vector<std::string> shead = {"y"};
    std::vector<std::vector<double>> scols(1, std::vector<double>(std::size_t(nc.M)));
    for (int m = 0; m < nc.M; ++m) scols[0][std::size_t(m)] = double(m) * dy;
    for (int i = 0; i < n; ++i) {
      shead.push_back("v_" + std::to_string(i + 1));
      scols.push_back(run.snapshots[s].second[std::size_t(i)]);
    }
    const std::string name = "snapshot_" + std::to_string(s) + ".csv";
    write_csv(out / name, shead, scols);
    r.csv_files.push_back(name);
  }

  const double vs = nc.vsum();
  bool perturbed = false;
  for (double a : nc.perturb_amp)
    if (a != 0.0) perturbed = true;

  r.grid = {{"M", nc.M}, {"h", dy}, {"dt", nc.dt}, {"T", nc.T}};
  r.metrics = {{"vsum", vs},
               {"e_final", run.e.back()},
               {"max_mass_defect", run.max_mass_defect},
               {"max_entropy_increase", run.max_entropy_increase},
               {"dev_l2_final", run.dev_l2.back()}};
  for (int i = 0; i < n; ++i) {
    r.metrics["u_bar_" + std::to_string(i + 1)] = run.u_bar[std::size_t(i)];
    r.metrics["r_final_" + std::to_string(i + 1)] = run.r[std::size_t(i)].back();
  }

  r.checks = {{"mass_defect_ok", run.max_mass_defect <= mass_tol}};

  if (vs == 0.0) {
    r.checks["entropy_monotone"] =
        run.max_entropy_increase <= 1e-9;
  }

  if (!perturbed) {
    double worst = 0.0;
    for (int i = 0; i < n; ++i)
      for (double ri : run.r[std::size_t(i)]) worst = std::max(worst, ri);
    r.metrics["stationary_max_r"] = worst;
    r.checks["stationary_ok"] = worst <= 1e-8;
  } else if (vs > 0.0 && run.times.back() >= 10.0) {
    // Detrended convergence: sqrt(t+1) r_i(t) must show no increasing trend
    // over the tail window.
    const double t0 = std::max(5.0, nc.T / 10.0);
    bool trend_ok = true;
    for (int i = 0; i < n; ++i) {
      std::vector<double> xs, ys;
      for (std::size_t o = 0; o < run.times.size(); ++o)
        if (run.times[o] >= t0) {
          xs.push_back(run.times[o]);
          ys.push_back(std::sqrt(run.times[o] + 1.0) * run.r[std::size_t(i)][o]);
        }
      if (xs.size() < 3) continue;
      const LinearFit f = linear_fit(xs, ys);
      r.metrics["trend_slope_" + std::to_string(i + 1)] = f.slope;
      r.metrics["trend_sigma_" + std::to_string(i + 1)] = f.slope_se;
      if (!(f.slope <= 2.0 * f.slope_se)) trend_ok = false;
    }
    r.checks["trend_ok"] = trend_ok;
  }
  return r;
}

// ---- schedule check -------------------------------------------------------

inline ScenarioResult run_schedule_check_scenario(const nlohmann::json& cfg,
                                                  const std::filesystem::path& out,
                                                  int /*refine*/) {
  if (!cfg.contains("schedule")) throw config_error("schedule-check: missing 'schedule'");
  const Schedule sch = schedule_from_json(cfg.at("schedule"));
  const double lambda_floor = jget<double>(cfg, "lambda_floor", 1.0);
  const ScheduleCertificates cert = certify_schedule(sch, lambda_floor);

  std::vector<double> idx, t0s, t1s, lam, margin, mass, avg;
  for (std::size_t m = 0; m + 1 < sch.t.size(); ++m) {
    idx.push_back(double(m));
    t0s.push_back(sch.t[m]);
    t1s.push_back(sch.t[m + 1]);
    lam.push_back(sch.lam[m]);
    margin.push_back(cert.hyp1_margin[m]);
    mass.push_back(cert.interval_mass[m]);
    avg.push_back(cert.mass_avg[m]);
  }
  write_csv(out / "certificates.csv",
            {"m", "t_m", "t_mp1", "lambda_m", "hyp1_margin", "interval_mass", "mass_avg"},
            {idx, t0s, t1s, lam, margin, mass, avg});

  int first_violation = -1;
  for (std::size_t m = 0; m < cert.hyp1_margin.size(); ++m)
    if (cert.hyp1_margin[m] < 0.0) {
      first_violation = int(m);
      break;
    }

  ScenarioResult r;
  r.kind = "schedule-check";
  r.csv_files = {"certificates.csv"};
  r.grid = {{"intervals", sch.lam.size()}};
  double min_margin = std::numeric_limits<double>::infinity();
  for (double m : cert.hyp1_margin) min_margin = std::min(min_margin, m);
  r.metrics = {{"min_hyp1_margin", min_margin},
               {"first_violation_m", double(first_violation)},
               {"lambda_floor", lambda_floor},
               {"gamma", sch.gamma}};
  r.checks = {{"hyp1_ok", cert.hyp1_ok},
              {"rates_ok", cert.rates_ok},
              {"mass_increasing", cert.mass_increasing}};

  if (cfg.contains("thickness")) {
    const ThicknessSchedule ts = thickness_from_json(cfg.at("thickness"));
    const std::vector<double> logs = thickness_log_ratios(ts);
    bool monotone = true;
    for (std::size_t i = 1; i < logs.size(); ++i)
      if (!(logs[i] < logs[i - 1])) monotone = false;
    r.metrics["thickness_log_final"] = logs.back();
    r.checks["thickness_decreasing"] = monotone;
  }
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Entry points

inline ScenarioResult dispatch_scenario(const std::string& kind, const nlohmann::json& cfg,
                                        const std::filesystem::path& out, int refine) {
  if (kind == "kernel") return detail::run_kernel_scenario(cfg, out, refine);
  if (kind == "target") return detail::run_target_scenario(cfg, out, refine);
  if (kind == "closed-loop") return detail::run_closed_loop_scenario(cfg, out, refine);
  if (kind == "finite-time") return detail::run_finite_time_scenario(cfg, out, refine);
  if (kind == "nonlinear") return detail::run_nonlinear_scenario(cfg, out, refine);
  if (kind == "schedule-check") return detail::run_schedule_check_scenario(cfg, out, refine);
  throw config_error("unknown scenario kind '" + kind + "'");
}

// Runs one scenario end to end and writes manifest.json + summary.json next
// to the CSV artifacts.  Returns the process exit code (0 pass, 1 check
// failure); config and numeric errors propagate as exceptions.
inline int run_scenario(const std::string& expected_kind, const std::string& config_path,
                        const std::string& out_dir, int refine) {
  if (refine < 0 || refine > 8) throw config_error("--refine must be between 0 and 8");
  const nlohmann::json cfg = load_config(config_path);
  if (!cfg.is_object()) throw config_error(config_path + ":1: config must be a JSON object");
  const std::string kind = detail::jreq<std::string>(cfg, "kind");
  if (!expected_kind.empty() && kind != expected_kind)
    throw config_error("config kind '" + kind + "' does not match the '" + expected_kind +
                       "' command");

  const std::filesystem::path out(out_dir);
  std::filesystem::create_directories(out);

  const auto t0 = std::chrono::steady_clock::now();
  const ScenarioResult res = dispatch_scenario(kind, cfg, out, refine);
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  nlohmann::json summary = {{"format_version", kFormatVersion},
                            {"kind", res.kind},
                            {"grid", res.grid},
                            {"metrics", res.metrics},
                            {"checks", res.checks},
                            {"pass", res.pass()}};
  detail::write_text(out / "summary.json", summary.dump(2) + "\n");

  nlohmann::json manifest = {{"format_version", kFormatVersion},
                             {"tool", kToolName},
                             {"tool_version", kToolVersion},
                             {"kind", res.kind},
                             {"config", cfg},
                             {"refine", refine},
                             {"diagnostics", res.diagnostics},
                             {"grid", res.grid},
                             {"wall_time_s", wall},
                             {"artifacts",
                              {{"summary", "summary.json"}, {"csv", res.csv_files}}}};
  detail::write_text(out / "manifest.json", manifest.dump(2) + "\n");

  if (!res.pass()) {
    for (const auto& kv : res.checks.items())
      if (!kv.value().get<bool>())
        std::fprintf(stderr, "check failed: %s\n", kv.key().c_str());
    if (res.metrics.contains("first_violation_m") &&
        res.metrics["first_violation_m"].get<double>() >= 0.0)
      std::fprintf(stderr, "first offending interval m = %d\n",
                   int(res.metrics["first_violation_m"].get<double>()));
    return 1;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// Report aggregation

namespace detail {

struct LoadedRun {
  std::string name;
  std::string kind;
  nlohmann::json summary;
  double h = std::numeric_limits<double>::quiet_NaN();
};

inline LoadedRun load_run(const std::string& spec_path) {
  namespace fs = std::filesystem;
  fs::path p(spec_path);
  if (fs::is_directory(p)) p /= "manifest.json";
  if (!fs::exists(p)) throw config_error("report: manifest '" + p.string() + "' not found");
  const nlohmann::json manifest = load_config(p.string());
  LoadedRun run;
  run.kind = jreq<std::string>(manifest, "kind");
  run.name = p.parent_path().filename().string();
  if (run.name.empty()) run.name = p.string();
  const fs::path sp = p.parent_path() / jget<std::string>(
                                            manifest.contains("artifacts")
                                                ? manifest.at("artifacts")
                                                : nlohmann::json::object(),
                                            "summary", "summary.json");
  if (!fs::exists(sp)) throw config_error("report: summary '" + sp.string() + "' not found");
  run.summary = load_config(sp.string());
  if (run.summary.contains("grid") && run.summary["grid"].contains("h"))
    run.h = run.summary["grid"]["h"].get<double>();
  return run;
}

inline bool error_like(const std::string& metric) {
  return metric.find("err") != std::string::npos ||
         metric.find("residual") != std::string::npos ||
         metric.find("defect") != std::string::npos;
}

}  // namespace detail

// Aggregates run summaries into report.csv / report.txt in out_dir, appends
// observed convergence orders for error-like metrics across refinement
// levels, and compares against a previous report.csv when given.  Returns 0,
// or 1 when a baseline comparison flags regressions.
inline int report_command(const std::vector<std::string>& manifest_paths,
                          const std::string& baseline_path, const std::string& out_dir) {
  namespace fs = std::filesystem;
  if (manifest_paths.empty()) throw config_error("report: need at least one manifest");

  std::vector<detail::LoadedRun> runs;
  runs.reserve(manifest_paths.size());
  for (const std::string& p : manifest_paths) runs.push_back(detail::load_run(p));

  std::set<std::string> kinds;
  for (const auto& r : runs) kinds.insert(r.kind);
  if (kinds.size() > 1) {
    std::string list;
    for (const auto& k : kinds) list += (list.empty() ? "" : ", ") + k;
    throw config_error("report: conflicting scenario kinds: " + list);
  }

  std::set<std::string> metric_names;
  for (const auto& r : runs)
    if (r.summary.contains("metrics"))
      for (const auto& kv : r.summary["metrics"].items()) metric_names.insert(kv.key());

  // cell text per (row, column); empty when a run lacks the metric
  std::vector<std::string> row_names(metric_names.begin(), metric_names.end());
  auto cell = [&](const std::string& metric, const detail::LoadedRun& r) -> std::string {
    if (!r.summary.contains("metrics") || !r.summary["metrics"].contains(metric)) return "";
    return format_double(r.summary["metrics"][metric].get<double>());
  };

  // convergence orders across strictly refined pairs (descending h)
  std::vector<std::pair<std::string, std::string>> order_rows;
  if (runs.size() >= 2) {
    std::vector<const detail::LoadedRun*> sorted;
    for (const auto& r : runs)
      if (std::isfinite(r.h)) sorted.push_back(&r);
    std::sort(sorted.begin(), sorted.end(),
              [](const detail::LoadedRun* a, const detail::LoadedRun* b) { return a->h > b->h; });
    if (sorted.size() >= 2) {
      for (const std::string& metric : row_names) {
        if (!detail::error_like(metric)) continue;
        const detail::LoadedRun* coarse = sorted.front();
        const detail::LoadedRun* fine = sorted.back();
        if (!coarse->summary["metrics"].contains(metric) ||
            !fine->summary["metrics"].contains(metric))
          continue;
        const double ec = coarse->summary["metrics"][metric].get<double>();
        const double ef = fine->summary["metrics"][metric].get<double>();
        if (ec > 0.0 && ef > 0.0 && coarse->h > fine->h) {
          const double order = std::log(ec / ef) / std::log(coarse->h / fine->h);
          order_rows.emplace_back("order:" + metric, format_double(order));
        }
      }
    }
  }

  std::ostringstream csv, txt;
  csv << "metric";
  for (const auto& r : runs) csv << ',' << r.name;
  csv << '\n';
  for (const std::string& metric : row_names) {
    csv << metric;
    for (const auto& r : runs) csv << ',' << cell(metric, r);
    csv << '\n';
  }
  for (const auto& orow : order_rows) {
    csv << orow.first;
    for (std::size_t i = 0; i < runs.size(); ++i)
      csv << ',' << (i + 1 == runs.size() ? orow.second : "");
    csv << '\n';
  }

  // aligned text table
  {
    std::size_t w0 = std::string("metric").size();
    for (const std::string& m : row_names) w0 = std::max(w0, m.size());
    for (const auto& orow : order_rows) w0 = std::max(w0, orow.first.size());
    std::vector<std::size_t> widths;
    for (const auto& r : runs) widths.push_back(std::max<std::size_t>(12, r.name.size()));
    auto pad = [](const std::string& s, std::size_t w) {
      return s + std::string(w > s.size() ? w - s.size() : 0, ' ');
    };
    auto num = [](const std::string& full) {
      if (full.empty()) return std::string("-");
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.6g", std::strtod(full.c_str(), nullptr));
      return std::string(buf);
    };
    txt << pad("metric", w0);
    for (std::size_t i = 0; i < runs.size(); ++i) txt << "  " << pad(runs[i].name, widths[i]);
    txt << '\n';
    for (const std::string& metric : row_names) {
      txt << pad(metric, w0);
      for (std::size_t i = 0; i < runs.size(); ++i)
        txt << "  " << pad(num(cell(metric, runs[i])), widths[i]);
      txt << '\n';
    }
    for (const auto& orow : order_rows) {
      txt << pad(orow.first, w0);
      for (std::size_t i = 0; i < runs.size(); ++i)
        txt << "  " << pad(i + 1 == runs.size() ? num(orow.second) : "-", widths[i]);
      txt << '\n';
    }
  }

  int regressions = 0;
  if (!baseline_path.empty()) {
    std::ifstream in(baseline_path, std::ios::binary);
    if (!in) throw config_error("report: baseline '" + baseline_path + "' is not readable");
    std::map<std::pair<std::string, std::string>, double> base;
    std::string line;
    std::vector<std::string> base_cols;
    bool first = true;
    while (std::getline(in, line)) {
      std::vector<std::string> parts;
      std::stringstream ls(line);
      std::string tok;
      while (std::getline(ls, tok, ',')) parts.push_back(tok);
      if (line.size() && line.back() == ',') parts.push_back("");
      if (first) {
        base_cols = parts;
        first = false;
        continue;
      }
      for (std::size_t c = 1; c < parts.size() && c < base_cols.size(); ++c)
        if (!parts[c].empty())
          base[{parts[0], base_cols[c]}] = std::strtod(parts[c].c_str(), nullptr);
    }
    for (const std::string& metric : row_names) {
      for (const auto& r : runs) {
        const auto it = base.find({metric, r.name});
        const std::string now = cell(metric, r);
        if (it == base.end() || now.empty()) continue;
        const double v = std::strtod(now.c_str(), nullptr);
        if (std::abs(v - it->second) > 1e-9 + 1e-6 * std::abs(it->second)) {
          ++regressions;
          txt << "REGRESSION " << metric << " [" << r.name << "]: " << format_double(it->second)
              << " -> " << now << '\n';
        }
      }
    }
    txt << "regressions: " << regressions << '\n';
  }

  const fs::path out(out_dir);
  fs::create_directories(out);
  detail::write_text(out / "report.csv", csv.str());
  detail::write_text(out / "report.txt", txt.str());
  std::fputs(txt.str().c_str(), stdout);
  return regressions > 0 ? 1 : 0;
}

}  // namespace pvdctl
