#pragma once

// Shared numerical utilities: trapezoid quadrature on uniform grids,
// Lagrange resampling, Thomas solves (scalar and block-matrix), and
// least-squares line fits.  All routines are deterministic.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdio>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "pvdctl/errors.hpp"

namespace pvdctl {

// ---------------------------------------------------------------------------
// Quadrature

inline double trapezoid_weight(std::size_t i, std::size_t n, double h) {
  return (i == 0 || i + 1 == n) ? 0.5 * h : h;
}

inline double trapezoid(const std::vector<double>& f, double h) {
  if (f.size() < 2) return 0.0;
  double s = 0.5 * (f.front() + f.back());
  for (std::size_t i = 1; i + 1 < f.size(); ++i) s += f[i];
  return s * h;
}

inline double l2_inner(const std::vector<double>& f, const std::vector<double>& g, double h) {
  const std::size_t n = std::min(f.size(), g.size());
  if (n < 2) return 0.0;
  double s = 0.5 * (f[0] * g[0] + f[n - 1] * g[n - 1]);
  for (std::size_t i = 1; i + 1 < n; ++i) s += f[i] * g[i];
  return s * h;
}

inline double l2_norm(const std::vector<double>& f, double h) {
  return std::sqrt(std::max(0.0, l2_inner(f, f, h)));
}

inline double l1_norm(const std::vector<double>& f, double h) {
  if (f.size() < 2) return 0.0;
  double s = 0.5 * (std::abs(f.front()) + std::abs(f.back()));
  for (std::size_t i = 1; i + 1 < f.size(); ++i) s += std::abs(f[i]);
  return s * h;
}

// ---------------------------------------------------------------------------
// Resampling on uniform grids.  Nodes are x_i = i*h, i = 0..n-1.

struct StencilWeights {
  std::size_t base = 0;                  // first node of the stencil
  std::array<double, 4> w{0, 0, 0, 0};   // Lagrange weights (unused entries 0)
  int count = 0;
};

// Cubic (4-point) Lagrange weights for sampling at x; exact-node positions
// snap to a single unit weight so resampling at grid nodes is bitwise.
inline StencilWeights lagrange_weights(double x, double h, std::size_t n) {
  StencilWeights sw;
  if (n == 0) throw numeric_error("lagrange_weights: empty grid");
  if (n == 1) {
    sw.base = 0;
    sw.w[0] = 1.0;
    sw.count = 1;
    return sw;
  }
  const double p = x / h;
  const double nearest = std::round(p);
  if (std::abs(p - nearest) < 1e-9 && nearest >= 0 && nearest <= double(n - 1)) {
    sw.base = static_cast<std::size_t>(nearest);
    sw.w[0] = 1.0;
    sw.count = 1;
    return sw;
  }
  if (n < 4) {  // linear fallback on tiny grids
    std::size_t i = static_cast<std::size_t>(std::clamp(std::floor(p), 0.0, double(n - 2)));
    const double t = p - double(i);
    sw.base = i;
    sw.w[0] = 1.0 - t;
    sw.w[1] = t;
    sw.count = 2;
    return sw;
  }
  const double lo = 0.0, hi = double(n - 4);
  const std::size_t i0 =
      static_cast<std::size_t>(std::clamp(std::floor(p) - 1.0, lo, hi));
  const double t = p - double(i0);
  for (int k = 0; k < 4; ++k) {
    double w = 1.0;
    for (int m = 0; m < 4; ++m) {
      if (m == k) continue;
      w *= (t - double(m)) / (double(k) - double(m));
    }
    sw.w[k] = w;
  }
  sw.base = i0;
  sw.count = 4;
  return sw;
}

inline double sample(const std::vector<double>& f, double h, double x) {
  const StencilWeights sw = lagrange_weights(x, h, f.size());
  double v = 0.0;
  for (int k = 0; k < sw.count; ++k) v += sw.w[k] * f[sw.base + k];
  return v;
}

// ---------------------------------------------------------------------------
// Tridiagonal Thomas solve.  a = sub-diagonal (a[0] unused), b = diagonal,
// c = super-diagonal (c[n-1] unused), d = right-hand side.

inline std::vector<double> solve_tridiagonal(const std::vector<double>& a,
                                             const std::vector<double>& b,
                                             const std::vector<double>& c,
                                             const std::vector<double>& d) {
  const std::size_t n = b.size();
  if (a.size() != n || c.size() != n || d.size() != n)
    throw numeric_error("solve_tridiagonal: size mismatch");
  std::vector<double> cp(n), dp(n), x(n);
  if (b[0] == 0.0) throw numeric_error("solve_tridiagonal: zero pivot");
  cp[0] = c[0] / b[0];
  dp[0] = d[0] / b[0];
  for (std::size_t i = 1; i < n; ++i) {
    const double m = b[i] - a[i] * cp[i - 1];
    if (m == 0.0) throw numeric_error("solve_tridiagonal: zero pivot");
    cp[i] = c[i] / m;
    dp[i] = (d[i] - a[i] * dp[i - 1]) / m;
  }
  x[n - 1] = dp[n - 1];
  for (std::size_t i = n - 1; i-- > 0;) x[i] = dp[i] - cp[i] * x[i + 1];
  return x;
}

// Block-tridiagonal Thomas solve with dense blocks; d may carry several
// right-hand sides as matrix columns.
inline std::vector<Eigen::MatrixXd> solve_block_tridiagonal(
    const std::vector<Eigen::MatrixXd>& a, const std::vector<Eigen::MatrixXd>& b,
    const std::vector<Eigen::MatrixXd>& c, const std::vector<Eigen::MatrixXd>& d) {
  const std::size_t n = b.size();
  if (a.size() != n || c.size() != n || d.size() != n)
    throw numeric_error("solve_block_tridiagonal: size mismatch");
  std::vector<Eigen::MatrixXd> cp(n), dp(n), x(n);
  Eigen::PartialPivLU<Eigen::MatrixXd> lu(b[0]);
  cp[0] = lu.solve(c[0]);
  dp[0] = lu.solve(d[0]);
  for (std::size_t i = 1; i < n; ++i) {
    const Eigen::MatrixXd m = b[i] - a[i] * cp[i - 1];
    lu.compute(m);
    cp[i] = lu.solve(c[i]);
    dp[i] = lu.solve(d[i] - a[i] * dp[i - 1]);
  }
  x[n - 1] = dp[n - 1];
  for (std::size_t i = n - 1; i-- > 0;) x[i] = dp[i] - cp[i] * x[i + 1];
  return x;
}

// ---------------------------------------------------------------------------
// Least-squares line fit y ~ intercept + slope*x.

struct LinearFit {
  double slope = 0.0;
  double intercept = 0.0;
  double r2 = 1.0;
  double slope_se = 0.0;  // standard error of the slope (0 when n <= 2)
};

inline LinearFit linear_fit(const std::vector<double>& x, const std::vector<double>& y) {
  const std::size_t n = std::min(x.size(), y.size());
  if (n < 2) throw numeric_error("linear_fit: need at least two points");
  double sx = 0, sy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sx += x[i];
    sy += y[i];
  }
  const double mx = sx / double(n), my = sy / double(n);
  double sxx = 0, sxy = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    sxy += (x[i] - mx) * (y[i] - my);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0) throw numeric_error("linear_fit: degenerate abscissae");
  LinearFit fit;
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  double ss_res = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = y[i] - (fit.intercept + fit.slope * x[i]);
    ss_res += r * r;
  }
  fit.r2 = (syy > 0.0) ? 1.0 - ss_res / syy : 1.0;
  if (n > 2) fit.slope_se = std::sqrt(std::max(0.0, ss_res / double(n - 2) / sxx));
  return fit;
}

// Canonical round-trippable text form for CSV output.
inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace pvdctl
