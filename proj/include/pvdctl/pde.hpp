#pragma once

// Theta-scheme steppers for the rescaled problems on the fixed unit
// interval.  With ebar(t) = e0 + v_bar t, both the damped target
//
//   w_t = (sigma/ebar^2) w_yy + (v_bar/ebar) y w_y - lambda w
//
// and the controlled plant (same operator with lambda = 0) carry a Neumann
// condition at y = 0 and a Robin condition at y = 1:
//
//   (sigma/ebar) w_y(1) + v_bar w(1) = q(t),
//
// where q = 0 for the target and q = delta-psi for the plant.  Boundary
// conditions enter through second-order ghost nodes, coefficients freeze at
// t + dt/2, and the tridiagonal systems are solved with the Thomas
// algorithm.  The implicit boundary datum q^{n+1} appears linearly with a
// single coefficient, which the closed-loop driver exploits to couple the
// feedback exactly (rank-one update).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "pvdctl/errors.hpp"
#include "pvdctl/numerics.hpp"
#include "pvdctl/transform.hpp"

namespace pvdctl {

struct SolverConfig {
  double sigma = 1.0;
  double v_bar = 0.25;
  double e0 = 1.0;
  double lambda = 0.0;   // damping of the target problem
  double theta = 0.5;    // Crank-Nicolson by default
  double dt = 1e-3;
  double T = 1.0;
  int M = 200;           // nodes on [0, 1]
  int output_every = 10;
  std::vector<double> snapshot_times;  // full-field captures, first step at or past each

  void validate() const {
    if (!(sigma > 0.0)) throw config_error("SolverConfig: sigma must be positive");
    if (v_bar < 0.0) throw config_error("SolverConfig: v_bar must be nonnegative");
    if (!(e0 > 0.0)) throw config_error("SolverConfig: e0 must be positive");
    if (lambda < 0.0) throw config_error("SolverConfig: lambda must be nonnegative");
    if (theta < 0.0 || theta > 1.0) throw config_error("SolverConfig: theta must be in [0, 1]");
    if (!(dt > 0.0) || !(T > 0.0)) throw config_error("SolverConfig: dt and T must be positive");
    if (M < 3) throw config_error("SolverConfig: need at least 3 nodes");
    if (output_every < 1) throw config_error("SolverConfig: output_every must be >= 1");
  }

  double ebar(double t) const { return e0 + v_bar * t; }
};

// State on the unit interval together with the thickness it rescales.
struct RescaledField {
  std::vector<double> w;
  double ebar = 1.0;
};

inline SampledField to_physical(const RescaledField& f) {
  return SampledField{f.ebar, f.w};
}

inline RescaledField to_rescaled(const SampledField& f) {
  return RescaledField{f.v, f.L};
}

using SourceFn = std::function<double(double t, double y)>;

// Assembled implicit system (I - theta dt L) w' = rhs_base + q_imp_coef q' e_last.
struct ThetaSystem {
  std::vector<double> lo, di, up;
  std::vector<double> rhs_base;
  double q_imp_coef = 0.0;  // multiplies the implicit boundary datum q^{n+1}
};

namespace detail {

// Spatial operator rows at thickness ebar_mid; lambda >= 0 adds damping.
// Row M-1 carries the ghost-eliminated Robin data with coefficient
// c_q = 2/(ebar dy) + v_bar/sigma on q.
inline ThetaSystem assemble_theta(const std::vector<double>& w, double t, double dt,
                                  const SolverConfig& cfg, double lambda, double q_n,
                                  const SourceFn& source) {
  const std::size_t M = w.size();
  const double dy = 1.0 / double(M - 1);
  const double em = cfg.ebar(t + 0.5 * dt);
  const double a = cfg.sigma / (em * em);
  const double cq = 2.0 / (em * dy) + cfg.v_bar / cfg.sigma;
  const double th = cfg.theta;

  std::vector<double> Llo(M, 0.0), Ldi(M, 0.0), Lup(M, 0.0);
  Ldi[0] = -2.0 * a / (dy * dy) - lambda;
  Lup[0] = 2.0 * a / (dy * dy);
  for (std::size_t m = 1; m + 1 < M; ++m) {
    const double b = (cfg.v_bar / em) * (double(m) * dy);
    Llo[m] = a / (dy * dy) - b / (2.0 * dy);
    Ldi[m] = -2.0 * a / (dy * dy) - lambda;
    Lup[m] = a / (dy * dy) + b / (2.0 * dy);
  }
  Llo[M - 1] = 2.0 * a / (dy * dy);
  Ldi[M - 1] = -2.0 * a / (dy * dy) - cfg.v_bar * cq - lambda;

  ThetaSystem sys;
  sys.lo.assign(M, 0.0);
  sys.di.assign(M, 0.0);
  sys.up.assign(M, 0.0);
  sys.rhs_base.assign(M, 0.0);
  for (std::size_t m = 0; m < M; ++m) {
    sys.lo[m] = -th * dt * Llo[m];
    sys.di[m] = 1.0 - th * dt * Ldi[m];
    sys.up[m] = -th * dt * Lup[m];
    double rhs = w[m] + (1.0 - th) * dt *
                            (Ldi[m] * w[m] + (m > 0 ? Llo[m] * w[m - 1] : 0.0) +
                             (m + 1 < M ? Lup[m] * w[m + 1] : 0.0));
    if (source) rhs += dt * source(t + 0.5 * dt, double(m) * dy);
    sys.rhs_base[m] = rhs;
  }
  sys.rhs_base[M - 1] += dt * (1.0 - th) * cq * q_n;
  sys.q_imp_coef = dt * th * cq;
  return sys;
}

}  // namespace detail

inline std::vector<double> step_plant(const std::vector<double>& w, double t,
                                      const SolverConfig& cfg, double q_n, double q_np1,
                                      const SourceFn& source = nullptr) {
  ThetaSystem sys = detail::assemble_theta(w, t, cfg.dt, cfg, 0.0, q_n, source);
  sys.rhs_base.back() += sys.q_imp_coef * q_np1;
  return solve_tridiagonal(sys.lo, sys.di, sys.up, sys.rhs_base);
}

inline std::vector<double> step_target(const std::vector<double>& w, double t,
                                       const SolverConfig& cfg,
                                       const SourceFn& source = nullptr) {
  ThetaSystem sys = detail::assemble_theta(w, t, cfg.dt, cfg, cfg.lambda, 0.0, source);
  return solve_tridiagonal(sys.lo, sys.di, sys.up, sys.rhs_base);
}

// Boundary-consistent discrete gradient used by the energy ledger: central
// differences inside, the Neumann and Robin data at the edges.
inline std::vector<double> discrete_gradient(const std::vector<double>& w, double ebar,
                                             double sigma, double v_bar, double q) {
  const std::size_t M = w.size();
  const double dy = 1.0 / double(M - 1);
  std::vector<double> g(M, 0.0);
  for (std::size_t m = 1; m + 1 < M; ++m) g[m] = (w[m + 1] - w[m - 1]) / (2.0 * dy);
  g[M - 1] = ebar * (q - v_bar * w[M - 1]) / sigma;
  return g;
}

// Discrete analogue of the a-priori energy inequality: at each output time t,
//   1/2 sup_{s<=t} ||w||^2 + (sigma/ebar(t)^2) Int ||w_y||^2
//     + (v_bar/(2 ebar(t))) Int w(., 1)^2 + (v_bar/(2 ebar(t)) + lambda) Int ||w||^2
//   <= slack * ||w0||^2.
struct EnergyLedger {
  std::vector<double> sup_w2, int_grad, int_bnd, int_w2, lhs;
  double rhs0 = 0.0;

  double max_ratio() const {
    double r = 0.0;
    for (double v : lhs) r = std::max(r, v / rhs0);
    return r;
  }
};

struct TargetRun {
  std::vector<double> times, norm, boundary;
  EnergyLedger ledger;
  std::vector<double> final_w;
  std::vector<std::pair<double, std::vector<double>>> snapshots;
};

inline TargetRun simulate_target(const SolverConfig& cfg, const std::vector<double>& w0) {
  cfg.validate();
  if (int(w0.size()) != cfg.M) throw config_error("simulate_target: state size mismatch");
  const double dy = 1.0 / double(cfg.M - 1);
  const long n_steps = std::lround(std::ceil(cfg.T / cfg.dt - 1e-9));

  TargetRun run;
  run.ledger.rhs0 = l2_inner(w0, w0, dy);

  std::vector<double> w = w0;
  double t = 0.0;
  double sup_w2 = run.ledger.rhs0;
  double Ig = 0.0, Ib = 0.0, Iw = 0.0;

  auto instant = [&](const std::vector<double>& f, double tt, double& g2, double& b2,
                     double& w2) {
    const std::vector<double> g = discrete_gradient(f, cfg.ebar(tt), cfg.sigma, cfg.v_bar, 0.0);
    g2 = l2_inner(g, g, dy);
    b2 = f.back() * f.back();
    w2 = l2_inner(f, f, dy);
  };
  double g2p, b2p, w2p;
  instant(w, 0.0, g2p, b2p, w2p);

  auto record = [&](double tt) {
    run.times.push_back(tt);
    run.norm.push_back(std::sqrt(std::max(0.0, l2_inner(w, w, dy))));
    run.boundary.push_back(w.back());
    const double eb = cfg.ebar(tt);
    run.ledger.sup_w2.push_back(sup_w2);
    run.ledger.int_grad.push_back(Ig);
    run.ledger.int_bnd.push_back(Ib);
    run.ledger.int_w2.push_back(Iw);
    run.ledger.lhs.push_back(0.5 * sup_w2 + (cfg.sigma / (eb * eb)) * Ig +
                             (cfg.v_bar / (2.0 * eb)) * Ib +
                             (cfg.v_bar / (2.0 * eb) + cfg.lambda) * Iw);
  };
  record(0.0);

  std::vector<double> pending = cfg.snapshot_times;
  std::sort(pending.begin(), pending.end());
  auto capture = [&](double tt) {
    while (!pending.empty() && tt >= pending.front() - 1e-12) {
      run.snapshots.emplace_back(tt, w);
      pending.erase(pending.begin());
    }
  };
  capture(0.0);

  for (long s = 0; s < n_steps; ++s) {
    const double step_dt = std::min(cfg.dt, cfg.T - t);
    SolverConfig local = cfg;
    local.dt = step_dt;
    w = step_target(w, t, local);
    t += step_dt;
    capture(t);
    double g2, b2, w2;
    instant(w, t, g2, b2, w2);
    Ig += 0.5 * step_dt * (g2p + g2);
    Ib += 0.5 * step_dt * (b2p + b2);
    Iw += 0.5 * step_dt * (w2p + w2);
    g2p = g2;
    b2p = b2;
    w2p = w2;
    sup_w2 = std::max(sup_w2, w2);
    if ((s + 1) % cfg.output_every == 0 || s + 1 == n_steps) record(t);
  }
  run.final_w = w;
  return run;
}

// Named initial profiles used by scenarios and tests; every profile has a
// vanishing derivative at y = 0 so the Neumann edge starts clean.
inline std::vector<double> initial_profile(const std::string& kind, double amplitude, int M) {
  std::vector<double> w(M, 0.0);
  const double pi = 3.14159265358979323846;
  for (int m = 0; m < M; ++m) {
    const double y = double(m) / double(M - 1);
    if (kind == "constant")
      w[m] = amplitude;
    else if (kind == "cosine")
      w[m] = amplitude * std::cos(0.5 * pi * y);
    else if (kind == "mixed")
      w[m] = amplitude * (1.0 + 0.5 * std::cos(pi * y));
    else
      throw config_error("initial_profile: unknown profile '" + kind + "'");
  }
  return w;
}

}  // namespace pvdctl
