#include "pvdctl/model.hpp"

#include <cmath>
#include <random>

#include <gtest/gtest.h>

namespace {

using namespace pvdctl;

PvdParams desk_params() {
  PvdParams p;
  p.n = 2;
  p.K = Eigen::MatrixXd::Zero(3, 3);
  // K_10 = 2, K_20 = 3, K_12 = 1.
  p.K << 0.0, 2.0, 3.0, 2.0, 0.0, 1.0, 3.0, 1.0, 0.0;
  return p;
}

TEST(params, validation) {
  PvdParams p = desk_params();
  EXPECT_NO_THROW(p.validate());

  PvdParams bad = p;
  bad.n = 0;
  EXPECT_THROW(bad.validate(), config_error);

  bad = p;
  bad.K = Eigen::MatrixXd::Zero(2, 2);
  EXPECT_THROW(bad.validate(), config_error);

  bad = p;
  bad.K(1, 1) = 0.5;
  EXPECT_THROW(bad.validate(), config_error);

  bad = p;
  bad.K(0, 1) = -1.0;
  EXPECT_THROW(bad.validate(), config_error);

  bad = p;
  bad.K(1, 2) = 7.0;  // breaks symmetry
  EXPECT_THROW(bad.validate(), config_error);
}

TEST(params, composition_helpers) {
  EXPECT_DOUBLE_EQ(rho({0.3, 0.4}), 0.7);
  EXPECT_TRUE(composition_interior({0.3, 0.4}));
  EXPECT_FALSE(composition_interior({0.0, 0.4}));
  EXPECT_FALSE(composition_interior({0.6, 0.4}));
  EXPECT_THROW(require_interior({0.5, 0.5}, "test"), numeric_error);
}

TEST(target_state, flux_decomposition) {
  TargetState ts;
  ts.phi_bar = {0.075, 0.075, 0.1};
  EXPECT_DOUBLE_EQ(ts.v_bar(), 0.25);
  const Composition ub = ts.u_bar();
  ASSERT_EQ(ub.size(), 2u);
  EXPECT_DOUBLE_EQ(ub[0], 0.3);
  EXPECT_DOUBLE_EQ(ub[1], 0.4);
  EXPECT_NO_THROW(ts.validate(2));
  EXPECT_THROW(ts.validate(3), config_error);

  TargetState bad = ts;
  bad.phi_bar[1] = 0.0;
  EXPECT_THROW(bad.validate(2), config_error);
  bad = ts;
  bad.e0 = 0.0;
  EXPECT_THROW(bad.validate(2), config_error);
}

TEST(diffusion_matrix, hand_values) {
  // n = 1: all inner sums are empty, A = [K_10].
  PvdParams p1;
  p1.n = 1;
  p1.K = Eigen::MatrixXd::Zero(2, 2);
  p1.K << 0.0, 2.0, 2.0, 0.0;
  const Eigen::MatrixXd A1 = diffusion_matrix(p1, {0.37});
  ASSERT_EQ(A1.rows(), 1);
  EXPECT_DOUBLE_EQ(A1(0, 0), 2.0);

  // n = 2, K_12 = 1, K_10 = 2, K_20 = 3, u = (0.3, 0.4).
  const Eigen::MatrixXd A = diffusion_matrix(desk_params(), {0.3, 0.4});
  EXPECT_NEAR(A(0, 0), 1.6, 1e-15);
  EXPECT_NEAR(A(0, 1), 0.3, 1e-15);
  EXPECT_NEAR(A(1, 0), 0.8, 1e-15);
  EXPECT_NEAR(A(1, 1), 2.4, 1e-15);
}

TEST(diffusion_matrix, equal_rates_give_identity) {
  PvdParams p;
  p.n = 3;
  const double kappa = 1.7;
  p.K = Eigen::MatrixXd::Constant(4, 4, kappa);
  p.K.diagonal().setZero();
  const Eigen::MatrixXd A = diffusion_matrix(p, {0.2, 0.3, 0.1});
  EXPECT_LE((A - kappa * Eigen::MatrixXd::Identity(3, 3)).norm(), 1e-15);
}

TEST(entropy_hessian, hand_values_and_guards) {
  const Eigen::MatrixXd H1 = entropy_hessian({0.5});
  EXPECT_DOUBLE_EQ(H1(0, 0), 4.0);

  const Eigen::MatrixXd H = entropy_hessian({1.0 / 3.0, 1.0 / 3.0});
  EXPECT_NEAR(H(0, 0), 6.0, 1e-12);
  EXPECT_NEAR(H(0, 1), 3.0, 1e-12);
  EXPECT_NEAR(H(1, 0), 3.0, 1e-12);
  EXPECT_NEAR(H(1, 1), 6.0, 1e-12);
  EXPECT_EQ(H(0, 1), H(1, 0));

  EXPECT_THROW(entropy_hessian({0.0, 0.4}), numeric_error);
  EXPECT_THROW(entropy_hessian({0.6, 0.4}), numeric_error);
}

TEST(mobility, hand_value_symmetry_consistency) {
  PvdParams p1;
  p1.n = 1;
  p1.K = Eigen::MatrixXd::Zero(2, 2);
  p1.K << 0.0, 2.0, 2.0, 0.0;
  const Eigen::MatrixXd M1 = mobility(p1, {0.5});
  EXPECT_DOUBLE_EQ(M1(0, 0), 0.5);

  EXPECT_THROW(mobility(desk_params(), {0.5, 0.5}), numeric_error);

  const PvdParams p = desk_params();
  std::mt19937_64 rng(20260814);
  std::uniform_real_distribution<double> unif(0.05, 0.45);
  for (int trial = 0; trial < 50; ++trial) {
    Composition u{unif(rng), unif(rng)};
    const Eigen::MatrixXd M = mobility(p, u);
    EXPECT_LE((M - M.transpose()).norm(), 1e-15 * M.norm());
    // Closed form must agree with A(u) D2h(u)^{-1}.
    const Eigen::MatrixXd viaA =
        diffusion_matrix(p, u) * entropy_hessian(u).inverse();
    EXPECT_LE((M - viaA).norm(), 1e-10 * M.norm());
  }
}

TEST(spectral, scalar_case) {
  PvdParams p1;
  p1.n = 1;
  p1.K = Eigen::MatrixXd::Zero(2, 2);
  p1.K << 0.0, 2.0, 2.0, 0.0;
  const Spectral s = diagonalize_at(p1, {0.25});
  ASSERT_EQ(s.sigma.size(), 1);
  EXPECT_NEAR(s.sigma(0), 2.0, 1e-12);
  EXPECT_NEAR((s.Q * s.Qinv)(0, 0), 1.0, 1e-12);
}

TEST(spectral, reconstruction_and_positivity) {
  const PvdParams p = desk_params();
  const Composition ub{0.3, 0.4};
  const Spectral s = diagonalize_at(p, ub);
  ASSERT_EQ(s.sigma.size(), 2);
  EXPECT_GT(s.sigma(0), 0.0);
  EXPECT_GT(s.sigma(1), s.sigma(0));  // distinct, ascending

  const Eigen::MatrixXd I2 = Eigen::MatrixXd::Identity(2, 2);
  EXPECT_LE((s.Q * s.Qinv - I2).norm(), 1e-12);

  const Eigen::MatrixXd A = diffusion_matrix(p, ub);
  const Eigen::MatrixXd rec = s.Qinv * s.sigma.asDiagonal() * s.Q;
  EXPECT_LE((rec - A).norm(), 1e-9 * A.norm());

  // Q diagonalizes A from the left: Q A = diag(sigma) Q.
  EXPECT_LE((s.Q * A - s.sigma.asDiagonal() * s.Q).norm(), 1e-10);
}

TEST(spectral, equal_rates_degenerate_spectrum) {
  PvdParams p;
  p.n = 2;
  const double kappa = 0.8;
  p.K = Eigen::MatrixXd::Constant(3, 3, kappa);
  p.K.diagonal().setZero();
  const Spectral s = diagonalize_at(p, {0.3, 0.3});
  EXPECT_NEAR(s.sigma(0), kappa, 1e-12);
  EXPECT_NEAR(s.sigma(1), kappa, 1e-12);
}

TEST(entropic, dissipation_positive_and_relabel_invariant) {
  const PvdParams p = desk_params();
  const Composition u{0.3, 0.4};
  const EntropicReport rep = check_entropic(p, u, 1000, 20260814);
  EXPECT_TRUE(rep.ok);
  EXPECT_GT(rep.min_sym_eig, 0.0);
  EXPECT_GT(rep.empirical_alpha, 0.0);

  // Relabeling species 1 <-> 2 permutes D2h(u) A(u) orthogonally, so the
  // symmetric-part spectrum is unchanged.
  PvdParams ps = p;
  ps.K = Eigen::MatrixXd::Zero(3, 3);
  ps.K << 0.0, 3.0, 2.0, 3.0, 0.0, 1.0, 2.0, 1.0, 0.0;
  const EntropicReport swapped = check_entropic(ps, {0.4, 0.3}, 0, 1);
  EXPECT_NEAR(swapped.min_sym_eig, rep.min_sym_eig,
              1e-12 * std::abs(rep.min_sym_eig));

  Eigen::VectorXd z(2);
  z << 1.0, -0.7;
  EXPECT_GT(entropic_ratio(p, u, z), 0.0);
  EXPECT_THROW(entropic_ratio(p, u, Eigen::VectorXd::Zero(2)), numeric_error);
}

}  // namespace
