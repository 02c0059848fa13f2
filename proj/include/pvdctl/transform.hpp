#pragma once

// Volterra transform of the second kind and its companions:
//
//   (T f)(x)    = f(x) - int_0^x k(x, y) f(y) dy        (apply_forward)
//   (Tinv g)(x) = g(x) + int_0^x l(x, y) g(y) dy        (apply_inverse)
//   (G f)(y)    = f(y) - int_y^L k(x, y) f(x) dx        (apply_adjoint)
//
// Fields live on the same uniform grid as the kernel (possibly restricted
// to fewer leading nodes), and all integrals use the shared trapezoid rule
// so the feedback law and the transform stay consistent.

#include <cmath>
#include <cstddef>
#include <vector>

#include "pvdctl/errors.hpp"
#include "pvdctl/kernel.hpp"
#include "pvdctl/numerics.hpp"

namespace pvdctl {

// Nodal samples on [0, L] with uniform spacing.
struct SampledField {
  double L = 1.0;
  std::vector<double> v;

  double h() const { return L / double(v.size() - 1); }
};

namespace detail {

inline void require_aligned(const KernelSolution& ker, const SampledField& f, const char* who) {
  if (f.v.size() < 2) throw config_error(std::string(who) + ": field needs two nodes");
  if (f.v.size() > std::size_t(ker.grid.N))
    throw config_error(std::string(who) + ": field extends past the kernel domain");
  const double hk = ker.grid.h();
  if (std::abs(f.h() - hk) > 1e-12 * hk)
    throw config_error(std::string(who) + ": field grid is not aligned with the kernel grid");
}

}  // namespace detail

inline SampledField apply_forward(const KernelSolution& ker, const SampledField& f) {
  detail::require_aligned(ker, f, "apply_forward");
  const std::size_t m = f.v.size();
  const double h = ker.grid.h();
  SampledField out{f.L, std::vector<double>(m, 0.0)};
  out.v[0] = f.v[0];
  for (std::size_t i = 1; i < m; ++i) {
    const std::size_t row = ker.grid.index(int(i), 0);
    double acc = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      const double w = trapezoid_weight(j, i + 1, h);
      acc += w * ker.k[row + j] * f.v[j];
    }
    out.v[i] = f.v[i] - acc;
  }
  return out;
}

inline SampledField apply_inverse(const KernelSolution& inv, const SampledField& g) {
  detail::require_aligned(inv, g, "apply_inverse");
  const std::size_t m = g.v.size();
  const double h = inv.grid.h();
  SampledField out{g.L, std::vector<double>(m, 0.0)};
  out.v[0] = g.v[0];
  for (std::size_t i = 1; i < m; ++i) {
    const std::size_t row = inv.grid.index(int(i), 0);
    double acc = 0.0;
    for (std::size_t j = 0; j <= i; ++j) {
      const double w = trapezoid_weight(j, i + 1, h);
      acc += w * inv.k[row + j] * g.v[j];
    }
    out.v[i] = g.v[i] + acc;
  }
  return out;
}

inline SampledField apply_adjoint(const KernelSolution& ker, const SampledField& f) {
  detail::require_aligned(ker, f, "apply_adjoint");
  const std::size_t m = f.v.size();
  const double h = ker.grid.h();
  SampledField out{f.L, std::vector<double>(m, 0.0)};
  for (std::size_t j = 0; j < m; ++j) {
    double acc = 0.0;
    if (j + 1 < m) {
      for (std::size_t i = j; i < m; ++i) {
        const double w = (i == j || i + 1 == m) ? 0.5 * h : h;
        acc += w * ker.k[ker.grid.index(int(i), int(j))] * f.v[i];
      }
    }
    out.v[j] = f.v[j] - acc;
  }
  return out;
}

}  // namespace pvdctl
