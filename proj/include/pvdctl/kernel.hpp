#pragma once

// Backstepping kernel solver.  The kernel k(x, y) on the triangle
// D_L = {0 <= y <= x <= L} satisfies the damped wave problem
//
//   k_xx - k_yy = alpha k,   dk/dy (x, 0) = 0,   k(x, x) = -(alpha/2) x,
//
// and is computed through the substitution K = k + (alpha/2) x, which turns
// the diagonal data homogeneous: K solves
//
//   K_xx - K_yy = alpha K - (alpha^2/2) x 1_{y <= x}
//
// on the full square (0, L)^2 with K(0, .) = K_x(0, .) = 0 and Neumann edges
// at y = 0 and y = L, and vanishes identically above the diagonal.  The
// marching direction x is time-like; the explicit leapfrog step uses
// h_x = h_y, which places the scheme exactly on the CFL boundary so the
// diagonal characteristics carry no dispersive error.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "pvdctl/errors.hpp"
#include "pvdctl/numerics.hpp"

namespace pvdctl {

struct TriangleGrid {
  double L = 1.0;
  int N = 2;  // nodes per edge

  double h() const { return L / double(N - 1); }
  double x(int i) const { return h() * double(i); }
  std::size_t index(int i, int j) const {
    return std::size_t(i) * std::size_t(i + 1) / 2 + std::size_t(j);
  }
  std::size_t size() const { return std::size_t(N) * std::size_t(N + 1) / 2; }
};

struct KernelSolution {
  TriangleGrid grid;
  double alpha = 0.0;       // coefficient of the solved PDE k_xx - k_yy = alpha k
  double ext_slope = 0.0;   // diagonal trace slope: k(x, x) = ext_slope * x
  std::vector<double> k;            // triangle values, row-major (grid.index)
  std::vector<double> diag;         // k(x_i, x_i)
  std::vector<double> dkdx_top;     // d/dx k(L, y_j), three-slice one-sided
  std::vector<double> per_x_h1;     // sqrt of int_0^{x_i} (k^2 + |grad k|^2) dy
  std::vector<double> cum_l2sq;     // int over D_{x_i} of k^2 (prefix in x)
  std::vector<double> cum_h1sq;     // int over D_{x_i} of k^2 + |grad k|^2

  // Triangle value with the canonical continuation above the diagonal
  // (the square-problem solution vanishes there, so k continues as the
  // diagonal trace).
  double value(int i, int j) const {
    if (j <= i) return k[grid.index(i, j)];
    return ext_slope * grid.x(i);
  }

  double l2_restricted(double x) const { return restricted(cum_l2sq, x); }
  double h1_restricted(double x) const { return restricted(cum_h1sq, x); }
  double l2_total() const { return std::sqrt(std::max(0.0, cum_l2sq.back())); }
  double h1_total() const { return std::sqrt(std::max(0.0, cum_h1sq.back())); }

 private:
  double restricted(const std::vector<double>& cum, double x) const {
    const double h = grid.h();
    const double p = std::clamp(x / h, 0.0, double(grid.N - 1));
    const std::size_t i = std::min(std::size_t(p), std::size_t(grid.N - 2));
    const double t = p - double(i);
    return std::sqrt(std::max(0.0, cum[i] + t * (cum[i + 1] - cum[i])));
  }
};

namespace detail {

struct MarchResult {
  std::vector<double> tri;      // K restricted to the triangle
  std::vector<double> last[3];  // slices N-3, N-2, N-1 on the full square
  double outside_max = 0.0;     // max |K| strictly above the diagonal
  double inside_max = 0.0;      // max |K| on the triangle
};

// Leapfrog march of the square problem.  Aborts when a slice's H1 content
// exceeds 1e3 times the analytic energy envelope
// (1 + L^2) exp(max(6 sqrt(alpha_+), 4) L) ||f||^2, ||f||^2 = alpha^4 L^4/16.
inline MarchResult march_square(double alpha, double L, int N) {
  if (!(L > 0.0)) throw config_error("kernel: L must be positive");
  if (N < 7) throw config_error("kernel: need at least 7 grid nodes");
  const double h = L / double(N - 1);
  const double fsq = std::pow(alpha, 4) * std::pow(L, 4) / 16.0;
  const double envelope =
      1e3 * (1.0 + L * L) * std::exp(std::max(6.0 * std::sqrt(std::max(alpha, 0.0)), 4.0) * L) *
      fsq;

  TriangleGrid grid{L, N};
  MarchResult out;
  out.tri.assign(grid.size(), 0.0);

  std::vector<double> prev(N, 0.0), cur(N, 0.0), next(N, 0.0);
  // Slices 0 and 1 vanish: K(0,.) = K_x(0,.) = 0 and the source is zero at
  // x = 0, so the second-order Taylor start contributes nothing.
  for (int i = 1; i + 1 < N; ++i) {
    const double x = h * double(i);
    const double src = -0.5 * alpha * alpha * x;
    for (int j = 0; j < N; ++j) {
      const int jm = (j == 0) ? 1 : j - 1;
      const int jp = (j == N - 1) ? N - 2 : j + 1;
      double f = 0.0;
      if (j < i)
        f = src;
      else if (j == i)
        f = 0.5 * src;  // trapezoid-consistent weight at the jump
      next[j] = cur[jp] + cur[jm] - prev[j] + h * h * (alpha * cur[j] + f);
    }
    // Energy guard on the freshly available centered slice i.
    double h1 = 0.0;
    for (int j = 0; j < N; ++j) {
      const double kx = (next[j] - prev[j]) / (2.0 * h);
      double ky = 0.0;
      if (j > 0 && j + 1 < N) ky = (cur[j + 1] - cur[j - 1]) / (2.0 * h);
      h1 += trapezoid_weight(j, N, h) * (cur[j] * cur[j] + kx * kx + ky * ky);
    }
    if (envelope > 0.0 && h1 > envelope)
      throw numeric_error("kernel: marching energy left the CFL-stable envelope");

    const int inext = i + 1;
    for (int j = 0; j < N; ++j) {
      const double a = std::abs(next[j]);
      if (j <= inext) {
        out.tri[grid.index(inext, j)] = next[j];
        out.inside_max = std::max(out.inside_max, a);
      } else {
        out.outside_max = std::max(out.outside_max, a);
      }
    }
    if (inext == N - 1) {
      out.last[0] = prev;  // slice N-3
      out.last[1] = cur;   // slice N-2
      out.last[2] = next;  // slice N-1
    }
    std::swap(prev, cur);
    std::swap(cur, next);
  }
  return out;
}

}  // namespace detail

// Solves k_xx - k_yy = alpha k with k(x,x) = -(alpha/2) x and a Neumann edge
// at y = 0 on D_L.
inline KernelSolution solve_kernel(double alpha, double L, int N) {
  detail::MarchResult m = detail::march_square(alpha, L, N);

  KernelSolution s;
  s.grid = TriangleGrid{L, N};
  s.alpha = alpha;
  s.ext_slope = -0.5 * alpha;
  const double h = s.grid.h();

  s.k.assign(s.grid.size(), 0.0);
  for (int i = 0; i < N; ++i) {
    const double shift = -0.5 * alpha * s.grid.x(i);
    for (int j = 0; j <= i; ++j) s.k[s.grid.index(i, j)] = m.tri[s.grid.index(i, j)] + shift;
  }

  s.diag.resize(N);
  for (int i = 0; i < N; ++i) s.diag[i] = s.k[s.grid.index(i, i)];

  // d/dx k at the top slice from the last three marching slices
  // (second-order one-sided difference); dK/dx - alpha/2.
  s.dkdx_top.resize(N);
  for (int j = 0; j < N; ++j)
    s.dkdx_top[j] =
        (3.0 * m.last[2][j] - 4.0 * m.last[1][j] + m.last[0][j]) / (2.0 * h) - 0.5 * alpha;

  // Per-slice H1 content and prefix norms over D_{x_i}.
  s.per_x_h1.assign(N, 0.0);
  s.cum_l2sq.assign(N, 0.0);
  s.cum_h1sq.assign(N, 0.0);
  std::vector<double> h1sq(N, 0.0), l2sq(N, 0.0);
  for (int i = 1; i < N; ++i) {
    const std::size_t row = s.grid.index(i, 0);
    double acc_h1 = 0.0, acc_l2 = 0.0;
    for (int j = 0; j <= i; ++j) {
      const double kv = s.k[row + j];
      double kx;
      if (i == N - 1)
        kx = s.dkdx_top[j];
      else
        kx = (s.value(i + 1, j) - s.value(i - 1, j)) / (2.0 * h);
      double ky = 0.0;
      if (j == 0) {
        ky = 0.0;  // Neumann edge
      } else if (j == i) {
        ky = (i >= 2) ? (3.0 * s.k[row + i] - 4.0 * s.k[row + i - 1] + s.k[row + i - 2]) /
                            (2.0 * h)
                      : (s.k[row + 1] - s.k[row]) / h;
      } else {
        ky = (s.k[row + j + 1] - s.k[row + j - 1]) / (2.0 * h);
      }
      const double w = trapezoid_weight(std::size_t(j), std::size_t(i + 1), h);
      acc_h1 += w * (kv * kv + kx * kx + ky * ky);
      acc_l2 += w * kv * kv;
    }
    h1sq[i] = acc_h1;
    l2sq[i] = acc_l2;
    s.per_x_h1[i] = std::sqrt(std::max(0.0, acc_h1));
    s.cum_l2sq[i] = s.cum_l2sq[i - 1] + 0.5 * h * (l2sq[i - 1] + l2sq[i]);
    s.cum_h1sq[i] = s.cum_h1sq[i - 1] + 0.5 * h * (h1sq[i - 1] + h1sq[i]);
  }
  return s;
}

// Forward kernel of the stabilizing transform: alpha = lambda / sigma.
inline KernelSolution forward_kernel(double lambda, double sigma, double L, int N) {
  if (!(sigma > 0.0)) throw config_error("forward_kernel: sigma must be positive");
  return solve_kernel(lambda / sigma, L, N);
}

// Inverse-transform kernel l: same problem with the opposite sign of the
// reaction coefficient, l = -k^{-lambda/sigma}; its diagonal trace is also
// -(lambda/(2 sigma)) x.
inline KernelSolution inverse_kernel(double lambda, double sigma, double L, int N) {
  if (!(sigma > 0.0)) throw config_error("inverse_kernel: sigma must be positive");
  KernelSolution s = solve_kernel(-lambda / sigma, L, N);
  for (double& v : s.k) v = -v;
  for (double& v : s.diag) v = -v;
  for (double& v : s.dkdx_top) v = -v;
  s.ext_slope = -s.ext_slope;  // trace becomes -(lambda/(2 sigma)) x
  return s;
}

struct LocalizationReport {
  double inside_max = 0.0;
  double outside_max = 0.0;
  double h = 0.0;
};

// Full-square solve with the source supported in the triangle; reports the
// maxima of |K| on and strictly above the diagonal.
inline LocalizationReport localization_check(double alpha, double L, int N) {
  detail::MarchResult m = detail::march_square(alpha, L, N);
  return LocalizationReport{m.inside_max, m.outside_max, L / double(N - 1)};
}

struct ResidualNorms {
  double linf = 0.0;
  double l2 = 0.0;
  int nodes = 0;
};

// Interior PDE residual of the marching solution measured with fourth-order
// central stencils on nodes at least two cells away from every edge and from
// the diagonal.  The discretization error of the solution is O(h^2), so this
// independent residual must shrink at second order as well.
inline ResidualNorms kernel_residual(const KernelSolution& s) {
  const int N = s.grid.N;
  const double h = s.grid.h();
  ResidualNorms r;
  double sum = 0.0;
  for (int i = 4; i <= N - 3; ++i) {
    for (int j = 2; j <= i - 2; ++j) {
      const double dxx = (-s.value(i - 2, j) + 16.0 * s.value(i - 1, j) - 30.0 * s.value(i, j) +
                          16.0 * s.value(i + 1, j) - s.value(i + 2, j)) /
                         (12.0 * h * h);
      const double dyy = (-s.value(i, j - 2) + 16.0 * s.value(i, j - 1) - 30.0 * s.value(i, j) +
                          16.0 * s.value(i, j + 1) - s.value(i, j + 2)) /
                         (12.0 * h * h);
      const double res = dxx - dyy - s.alpha * s.value(i, j);
      r.linf = std::max(r.linf, std::abs(res));
      sum += res * res;
      ++r.nodes;
    }
  }
  r.l2 = (r.nodes > 0) ? std::sqrt(sum * h * h) : 0.0;
  return r;
}

struct OracleValue {
  double value = 0.0;
  bool converged = true;
  double last_increment = 0.0;  // magnitude of the final Picard increment
};

// Independent series oracle.  Even reflection across the Neumann edge turns
// the kernel problem into a Goursat problem on the characteristic cone;
// Picard iteration of its integral equation sums to
//   k(x, y) = -(alpha x / 2) * sum_{n>=0} t_n,   t_0 = 1,
//   t_{n+1} = t_n * w / ((n+1)(n+2)),            w = alpha (x^2 - y^2) / 4.
// The increment ratio is |w|/((n+1)(n+2)), so the tail is geometrically
// dominated once (n+1)(n+2) exceeds |w|.
inline OracleValue series_oracle(double alpha, double x, double y, int terms) {
  if (terms < 1) throw config_error("series_oracle: need at least one term");
  if (y < 0.0 || y > x) throw config_error("series_oracle: point outside the triangle");
  const double w = alpha * (x * x - y * y) / 4.0;
  double term = 1.0, sum = 1.0;
  for (int n = 1; n < terms; ++n) {
    term *= w / (double(n) * double(n + 1));
    sum += term;
  }
  OracleValue out;
  out.value = -0.5 * alpha * x * sum;
  out.last_increment = std::abs(0.5 * alpha * x * term);
  out.converged = std::abs(term) <= 1e-12 * std::abs(sum);
  return out;
}

}  // namespace pvdctl
