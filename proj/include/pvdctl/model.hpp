#pragma once

// Cross-diffusion model assembly for the physical-vapor-deposition system:
// diffusion matrix A(u), Boltzmann entropy Hessian D2h(u), mobility M(u),
// and the similarity transform that diagonalizes A(u) with a positive
// spectrum.  Species are indexed 1..n; index 0 is the vacancy fraction.

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "pvdctl/errors.hpp"

namespace pvdctl {

// Pairwise exchange rates K_ij = K_ji > 0 (i != j, indices 0..n).
struct PvdParams {
  int n = 0;                    // number of tracked species
  Eigen::MatrixXd K;            // (n+1) x (n+1), zero diagonal

  void validate() const {
    if (n < 1) throw config_error("PvdParams: n must be >= 1");
    if (K.rows() != n + 1 || K.cols() != n + 1)
      throw config_error("PvdParams: K must be (n+1) x (n+1)");
    for (int i = 0; i <= n; ++i) {
      if (K(i, i) != 0.0) throw config_error("PvdParams: K diagonal must be zero");
      for (int j = 0; j <= n; ++j) {
        if (i == j) continue;
        if (K(i, j) <= 0.0) throw config_error("PvdParams: off-diagonal K must be positive");
        if (K(i, j) != K(j, i)) throw config_error("PvdParams: K must be symmetric");
      }
    }
  }
};

// Volume fractions of the tracked species; the admissible region is
// u_i > 0 with rho(u) = sum_i u_i < 1 (vacancies occupy the rest).
using Composition = std::vector<double>;

inline double rho(const Composition& u) {
  double s = 0.0;
  for (double v : u) s += v;
  return s;
}

inline bool composition_interior(const Composition& u) {
  for (double v : u) {
    if (!(v > 0.0)) return false;
  }
  return rho(u) < 1.0;
}

inline void require_interior(const Composition& u, const char* where) {
  if (!composition_interior(u))
    throw numeric_error(std::string(where) + ": composition left the admissible region");
}

// Constant-flux target data: phi_bar has n+1 entries (vacancy flux first),
// v_bar = sum phi_bar_i is the growth speed and u_bar_i = phi_bar_i / v_bar
// the stationary composition.
struct TargetState {
  std::vector<double> phi_bar;  // size n+1, index 0 = vacancy flux
  double e0 = 1.0;              // initial thickness

  double v_bar() const {
    double s = 0.0;
    for (double v : phi_bar) s += v;
    return s;
  }

  Composition u_bar() const {
    Composition u(phi_bar.size() - 1);
    const double vb = v_bar();
    for (std::size_t i = 1; i < phi_bar.size(); ++i) u[i - 1] = phi_bar[i] / vb;
    return u;
  }

  void validate(int n) const {
    if (static_cast<int>(phi_bar.size()) != n + 1)
      throw config_error("TargetState: phi_bar must have n+1 entries");
    for (double v : phi_bar)
      if (!(v > 0.0)) throw config_error("TargetState: phi_bar entries must be positive");
    if (!(e0 > 0.0)) throw config_error("TargetState: e0 must be positive");
    if (!composition_interior(u_bar()))
      throw config_error("TargetState: u_bar leaves the admissible region");
  }
};

inline Eigen::MatrixXd diffusion_matrix(const PvdParams& p, const Composition& u) {
  const int n = p.n;
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(n, n);
  for (int i = 1; i <= n; ++i) {
    double diag = p.K(i, 0);
    for (int j = 1; j <= n; ++j) {
      if (j == i) continue;
      diag += (p.K(i, j) - p.K(i, 0)) * u[j - 1];
      A(i - 1, j - 1) = -(p.K(i, j) - p.K(i, 0)) * u[i - 1];
    }
    A(i - 1, i - 1) = diag;
  }
  return A;
}

inline Eigen::MatrixXd entropy_hessian(const Composition& u) {
  require_interior(u, "entropy_hessian");
  const int n = static_cast<int>(u.size());
  const double vac = 1.0 - rho(u);
  Eigen::MatrixXd H = Eigen::MatrixXd::Constant(n, n, 1.0 / vac);
  for (int i = 0; i < n; ++i) H(i, i) += 1.0 / u[i];
  return H;
}

// Onsager mobility in closed form; symmetric by construction and equal to
// A(u) * D2h(u)^{-1}.
inline Eigen::MatrixXd mobility(const PvdParams& p, const Composition& u) {
  require_interior(u, "mobility");
  const int n = p.n;
  const double vac = 1.0 - rho(u);
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(n, n);
  for (int i = 1; i <= n; ++i) {
    double diag = p.K(i, 0) * u[i - 1] * vac;
    for (int j = 1; j <= n; ++j) {
      if (j == i) continue;
      diag += p.K(i, j) * u[i - 1] * u[j - 1];
      M(i - 1, j - 1) = -p.K(i, j) * u[i - 1] * u[j - 1];
    }
    M(i - 1, i - 1) = diag;
  }
  return M;
}

// Similarity data for A(u) = Qinv * diag(sigma) * Q with sigma_i > 0.
struct Spectral {
  Eigen::MatrixXd Q;
  Eigen::MatrixXd Qinv;
  Eigen::VectorXd sigma;  // ascending
};

// Diagonalizes A(u) through the entropic symmetrization
// S = H^{1/2} M H^{1/2} (H = D2h(u), M = mobility): S is symmetric positive
// definite, and A = H^{-1/2} S H^{1/2}, so Q = U^T H^{1/2} with S = U diag U^T.
inline Spectral diagonalize_at(const PvdParams& p, const Composition& u) {
  require_interior(u, "diagonalize_at");
  const Eigen::MatrixXd H = entropy_hessian(u);
  const Eigen::MatrixXd M = mobility(p, u);

  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> hs(H);
  if (hs.info() != Eigen::Success || hs.eigenvalues().minCoeff() <= 0.0)
    throw numeric_error("diagonalize_at: entropy Hessian is not positive definite");
  const Eigen::VectorXd hroot = hs.eigenvalues().cwiseSqrt();
  const Eigen::MatrixXd Hhalf =
      hs.eigenvectors() * hroot.asDiagonal() * hs.eigenvectors().transpose();
  const Eigen::MatrixXd Hhalf_inv =
      hs.eigenvectors() * hroot.cwiseInverse().asDiagonal() * hs.eigenvectors().transpose();

  const Eigen::MatrixXd S = Hhalf * M * Hhalf;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ss(0.5 * (S + S.transpose()));
  if (ss.info() != Eigen::Success)
    throw numeric_error("diagonalize_at: eigensolve failed");
  Spectral out;
  out.sigma = ss.eigenvalues();  // ascending
  if (out.sigma.minCoeff() <= 0.0)
    throw numeric_error("diagonalize_at: nonpositive diffusion eigenvalue");
  out.Q = ss.eigenvectors().transpose() * Hhalf;
  out.Qinv = Hhalf_inv * ss.eigenvectors();
  return out;
}

// Rayleigh-type dissipation ratio z^T D2h(u) A(u) z / sum_i z_i^2 / u_i
// (the weight uses m_i = 1/2).  Positive for all z when the entropic
// ellipticity hypothesis holds at u.
inline double entropic_ratio(const PvdParams& p, const Composition& u,
                             const Eigen::VectorXd& z) {
  const Eigen::MatrixXd HA = entropy_hessian(u) * diffusion_matrix(p, u);
  double denom = 0.0;
  for (int i = 0; i < p.n; ++i) denom += z(i) * z(i) / u[i];
  if (denom == 0.0) throw numeric_error("entropic_ratio: zero direction");
  return z.dot(HA * z) / denom;
}

struct EntropicReport {
  double min_sym_eig = 0.0;     // smallest eigenvalue of sym(D2h * A)
  double empirical_alpha = 0.0; // min dissipation ratio over sampled directions
  bool ok = false;
};

inline EntropicReport check_entropic(const PvdParams& p, const Composition& u,
                                     int trials, std::uint64_t seed) {
  require_interior(u, "check_entropic");
  const Eigen::MatrixXd HA = entropy_hessian(u) * diffusion_matrix(p, u);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (HA + HA.transpose()));
  if (es.info() != Eigen::Success) throw numeric_error("check_entropic: eigensolve failed");

  EntropicReport rep;
  rep.min_sym_eig = es.eigenvalues().minCoeff();

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  double alpha = std::numeric_limits<double>::infinity();
  for (int t = 0; t < trials; ++t) {
    Eigen::VectorXd z(p.n);
    double norm2 = 0.0;
    do {
      for (int i = 0; i < p.n; ++i) z(i) = gauss(rng);
      norm2 = z.squaredNorm();
    } while (norm2 == 0.0);
    z /= std::sqrt(norm2);
    alpha = std::min(alpha, entropic_ratio(p, u, z));
  }
  rep.empirical_alpha = (trials > 0) ? alpha : rep.min_sym_eig;
  rep.ok = rep.min_sym_eig > 0.0 && rep.empirical_alpha > 0.0;
  return rep;
}

}  // namespace pvdctl
