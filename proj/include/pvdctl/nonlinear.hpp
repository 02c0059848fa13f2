#pragma once

// Open-loop simulator for the full quasilinear cross-diffusion system on the
// rescaled unit interval,
//
//   v_t = (1/e^2) d/dy (A(v) v_y) + (e'/e) y v_y,
//   (1/e) A(v) v_y + e' v = phi   at y = 1,      A(v) v_y = 0   at y = 0,
//
// with constant prescribed fluxes and the exact thickness e(t) = e0 + vsum t,
// vsum the total flux including the vacancy component.  One step treats the
// conservative diffusion implicitly with the matrix lagged at face averages
// and the rescaling advection explicitly; a compatible flux vector keeps the
// uniform deposition profile stationary to round-off.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "pvdctl/errors.hpp"
#include "pvdctl/model.hpp"
#include "pvdctl/numerics.hpp"

namespace pvdctl {

struct NonlinearConfig {
  PvdParams params;
  std::vector<double> phi;          // n+1 prescribed fluxes, vacancy first
  Composition u_init;               // background composition, n species
  std::vector<double> perturb_amp;  // per-species amplitude of a cos(pi y) bump
  double e0 = 1.0;
  double dt = 2e-4;
  double T = 1.0;
  int M = 201;
  int output_every = 25;
  double cfl_safety = 1.0;
  std::vector<double> snapshot_times;

  double vsum() const {
    double s = 0.0;
    for (double p : phi) s += p;
    return s;
  }

  void validate() const {
    params.validate();
    if (int(phi.size()) != params.n + 1)
      throw config_error("nonlinear: phi must list the vacancy flux and one flux per species");
    if (int(u_init.size()) != params.n)
      throw config_error("nonlinear: u_init must list one fraction per species");
    require_interior(u_init, "nonlinear u_init");
    if (!(e0 > 0.0)) throw config_error("nonlinear: e0 must be positive");
    if (!(dt > 0.0) || !(T > 0.0)) throw config_error("nonlinear: dt and T must be positive");
    if (M < 5) throw config_error("nonlinear: need at least 5 grid nodes");
    if (output_every < 1) throw config_error("nonlinear: output_every must be at least 1");
    if (vsum() < 0.0) throw config_error("nonlinear: total flux must be nonnegative");
  }
};

struct NonlinearRun {
  std::vector<double> times, e;
  std::vector<std::vector<double>> r;     // [species][output] L1 distance to the target
  std::vector<std::vector<double>> mass;  // [species][output] physical mass
  std::vector<double> entropy;            // per output
  std::vector<double> dev_l2;             // stacked L2 distance to the target
  std::vector<double> boundary_rho;       // total volume fraction at y = 1
  Composition u_bar;                      // target composition used for r
  double max_mass_defect = 0.0;           // per-step defect against dt * phi_i
  double max_entropy_increase = 0.0;      // largest per-step entropy rise
  std::vector<std::vector<double>> final_v;
  std::vector<std::pair<double, std::vector<std::vector<double>>>> snapshots;
};

namespace detail {

inline void require_admissible(const std::vector<Eigen::VectorXd>& v, int n) {
  for (const auto& node : v) {
    double rho = 0.0;
    for (int i = 0; i < n; ++i) {
      if (!(node(i) > 1e-12))
        throw numeric_error("nonlinear: a volume fraction left the admissible simplex");
      rho += node(i);
    }
    if (!(rho < 1.0 - 1e-12))
      throw numeric_error("nonlinear: the vacancy fraction left the admissible simplex");
  }
}

inline double mixture_entropy(const std::vector<Eigen::VectorXd>& v, int n, double dy) {
  const std::size_t M = v.size();
  double H = 0.0;
  for (std::size_t m = 0; m < M; ++m) {
    double rho = 0.0, h = 0.0;
    for (int i = 0; i < n; ++i) {
      h += v[m](i) * std::log(v[m](i));
      rho += v[m](i);
    }
    h += (1.0 - rho) * std::log(1.0 - rho);
    H += trapezoid_weight(m, M, dy) * h;
  }
  return H;
}

}  // namespace detail

inline NonlinearRun simulate_open_loop(const NonlinearConfig& cfg) {
  cfg.validate();
  const int n = cfg.params.n;
  const int M = cfg.M;
  const double dy = 1.0 / double(M - 1);
  const double vs = cfg.vsum();

  // Species fluxes (the vacancy component only enters through vsum).
  Eigen::VectorXd phi_s(n);
  for (int i = 0; i < n; ++i) phi_s(i) = cfg.phi[std::size_t(i) + 1];

  NonlinearRun run;
  // Distances are measured against the flux-compatible composition when the
  // film grows, otherwise against the conserved mean of the initial state.
  run.u_bar.assign(std::size_t(n), 0.0);

  std::vector<Eigen::VectorXd> v(std::size_t(M), Eigen::VectorXd::Zero(n));
  for (int m = 0; m < M; ++m)
    for (int i = 0; i < n; ++i) {
      const double amp =
          (i < int(cfg.perturb_amp.size())) ? cfg.perturb_amp[std::size_t(i)] : 0.0;
      v[std::size_t(m)](i) =
          cfg.u_init[std::size_t(i)] + amp * std::cos(M_PI * double(m) * dy);
    }
  detail::require_admissible(v, n);

  if (vs > 0.0) {
    for (int i = 0; i < n; ++i) {
      run.u_bar[std::size_t(i)] = phi_s(i) / vs;
      if (!(run.u_bar[std::size_t(i)] > 0.0))
        throw config_error("nonlinear: fluxes are incompatible with an interior target");
    }
    require_interior(run.u_bar, "nonlinear flux target");
  } else {
    for (int i = 0; i < n; ++i) {
      double acc = 0.0;
      for (int m = 0; m < M; ++m)
        acc += trapezoid_weight(std::size_t(m), std::size_t(M), dy) * v[std::size_t(m)](i);
      run.u_bar[std::size_t(i)] = acc;
    }
  }

  run.r.assign(std::size_t(n), {});
  run.mass.assign(std::size_t(n), {});

  const long n_steps = std::lround(std::ceil(cfg.T / cfg.dt - 1e-9));
  double t = 0.0;

  auto species_mass = [&](int i, double e_now) {
    double acc = 0.0;
    for (int m = 0; m < M; ++m)
      acc += trapezoid_weight(std::size_t(m), std::size_t(M), dy) * v[std::size_t(m)](i);
    return e_now * acc;
  };

  auto record = [&](double tt) {
    const double e_now = cfg.e0 + vs * tt;
    run.times.push_back(tt);
    run.e.push_back(e_now);
    double dev2 = 0.0;
    for (int i = 0; i < n; ++i) {
      double acc = 0.0;
      for (int m = 0; m < M; ++m) {
        const double w = trapezoid_weight(std::size_t(m), std::size_t(M), dy);
        const double d = v[std::size_t(m)](i) - run.u_bar[std::size_t(i)];
        acc += w * std::abs(d);
        dev2 += w * d * d;
      }
      run.r[std::size_t(i)].push_back(acc);
      run.mass[std::size_t(i)].push_back(species_mass(i, e_now));
    }
    run.dev_l2.push_back(std::sqrt(dev2));
    run.boundary_rho.push_back(v[std::size_t(M - 1)].sum());
    run.entropy.push_back(detail::mixture_entropy(v, n, dy));
  };
  record(0.0);

  std::vector<double> pending = cfg.snapshot_times;
  std::sort(pending.begin(), pending.end());
  auto capture = [&](double tt) {
    while (!pending.empty() && tt >= pending.front() - 1e-12) {
      std::vector<std::vector<double>> snap(std::size_t(n),
                                            std::vector<double>(std::size_t(M), 0.0));
      for (int i = 0; i < n; ++i)
        for (int m = 0; m < M; ++m) snap[std::size_t(i)][std::size_t(m)] = v[std::size_t(m)](i);
      run.snapshots.emplace_back(tt, std::move(snap));
      pending.erase(pending.begin());
    }
  };
  capture(0.0);

  double entropy_prev = run.entropy.back();
  const std::size_t nsz = std::size_t(n), Ms = std::size_t(M);
  std::vector<double> mass_prev(nsz);
  for (int i = 0; i < n; ++i) mass_prev[std::size_t(i)] = species_mass(i, cfg.e0);

  std::vector<Eigen::MatrixXd> lo(Ms), di(Ms), up(Ms), rhs(Ms);
  std::vector<Eigen::MatrixXd> face(Ms - 1);
  const Eigen::MatrixXd I = Eigen::MatrixXd::Identity(n, n);

  for (long s = 0; s < n_steps; ++s) {
    const double step_dt = std::min(cfg.dt, cfg.T - t);
    const double e_n = cfg.e0 + vs * t;
    const double e_mid = cfg.e0 + vs * (t + 0.5 * step_dt);

    if (vs > 0.0 && step_dt > cfg.cfl_safety * dy * e_n / (2.0 * vs))
      throw numeric_error("nonlinear: time step breaks the advective stability margin");

    for (int m = 0; m < M - 1; ++m) {
      Composition mid(nsz, 0.0);
      for (int i = 0; i < n; ++i)
        mid[std::size_t(i)] = 0.5 * (v[std::size_t(m)](i) + v[std::size_t(m) + 1](i));
      require_interior(mid, "nonlinear face state");
      face[std::size_t(m)] = diffusion_matrix(cfg.params, mid);
    }

    const double kappa = step_dt / (e_mid * e_mid * dy * dy);
    const double c_bnd = 2.0 * step_dt / (e_mid * dy);

    for (int m = 0; m < M; ++m) {
      rhs[std::size_t(m)] = Eigen::MatrixXd::Zero(n, 1);
      lo[std::size_t(m)] = Eigen::MatrixXd::Zero(n, n);
      up[std::size_t(m)] = Eigen::MatrixXd::Zero(n, n);
      if (m == 0) {
        di[std::size_t(m)] = I + 2.0 * kappa * face[0];
        up[std::size_t(m)] = -2.0 * kappa * face[0];
        rhs[std::size_t(m)].col(0) = v[0];
      } else if (m == M - 1) {
        const Eigen::MatrixXd& fl = face[std::size_t(M - 2)];
        lo[std::size_t(m)] = -2.0 * kappa * fl;
        di[std::size_t(m)] = I + 2.0 * kappa * fl + (c_bnd * vs) * I;
        Composition top(nsz, 0.0);
        for (int i = 0; i < n; ++i) top[std::size_t(i)] = v[std::size_t(m)](i);
        const Eigen::MatrixXd Atop = diffusion_matrix(cfg.params, top);
        const Eigen::VectorXd bc_res = phi_s - vs * v[std::size_t(m)];
        rhs[std::size_t(m)].col(0) =
            v[std::size_t(m)] + c_bnd * phi_s +
            step_dt * vs * Atop.partialPivLu().solve(bc_res);
      } else {
        const double b = (vs / e_mid) * (double(m) * dy) / (2.0 * dy);
        lo[std::size_t(m)] = -kappa * face[std::size_t(m - 1)];
        di[std::size_t(m)] = I + kappa * (face[std::size_t(m - 1)] + face[std::size_t(m)]);
        up[std::size_t(m)] = -kappa * face[std::size_t(m)];
        rhs[std::size_t(m)].col(0) =
            v[std::size_t(m)] +
            step_dt * b * (v[std::size_t(m) + 1] - v[std::size_t(m) - 1]);
      }
    }

    const std::vector<Eigen::MatrixXd> sol = solve_block_tridiagonal(lo, di, up, rhs);
    for (int m = 0; m < M; ++m) v[std::size_t(m)] = sol[std::size_t(m)].col(0);
    detail::require_admissible(v, n);
    t += step_dt;

    const double e_next = cfg.e0 + vs * t;
    for (int i = 0; i < n; ++i) {
      const double m_now = species_mass(i, e_next);
      const double defect = m_now - mass_prev[std::size_t(i)] - step_dt * phi_s(i);
      run.max_mass_defect = std::max(run.max_mass_defect, std::abs(defect) / step_dt);
      mass_prev[std::size_t(i)] = m_now;
    }
    const double entropy_now = detail::mixture_entropy(v, n, dy);
    run.max_entropy_increase = std::max(run.max_entropy_increase, entropy_now - entropy_prev);
    entropy_prev = entropy_now;

    capture(t);
    if ((s + 1) % cfg.output_every == 0 || s + 1 == n_steps) record(t);
  }

  run.final_v.assign(std::size_t(n), std::vector<double>(std::size_t(M), 0.0));
  for (int i = 0; i < n; ++i)
    for (int m = 0; m < M; ++m) run.final_v[std::size_t(i)][std::size_t(m)] = v[std::size_t(m)](i);
  return run;
}

}  // namespace pvdctl
