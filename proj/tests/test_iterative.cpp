#include "gbs/direct.hpp"
#include "gbs/iterative.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

using namespace gbs;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

/// H by its block formula: diagonal P0⁻¹ + AᵀQ⁻¹A, Q⁻¹ + AᵀQ⁻¹A, ..., Q⁻¹; off-diagonal −AᵀQ⁻¹.
MatrixXd block_formula_H(const SystemModel& model, int N) {
  const int n = model.state_dim();
  const MatrixXd Qi = model.Q().inverse();
  const MatrixXd AtQiA = model.A().transpose() * Qi * model.A();
  MatrixXd H = MatrixXd::Zero((N + 1) * n, (N + 1) * n);
  for (int t = 0; t <= N; ++t) {
    MatrixXd d = t == 0 ? MatrixXd(model.P0().inverse()) : Qi;
    if (t < N) d += AtQiA;
    H.block(t * n, t * n, n, n) = d;
    if (t < N) {
      H.block(t * n, (t + 1) * n, n, n) = -model.A().transpose() * Qi;
      H.block((t + 1) * n, t * n, n, n) = -Qi * model.A();
    }
  }
  return H;
}

}  // namespace

TEST(Stacked, HMatchesBlockFormulaAndStepSize) {
  Rng rng(1);
  for (int trial = 0; trial < 10; ++trial) {
    const SystemModel model = oracle::random_model(rng, 1 + trial % 3, 1, 2);
    const int N = 3 + trial;
    const StackedSystem sys(model, N);
    EXPECT_LT(oracle::max_abs(sys.H() - block_formula_H(model, N)), 1e-10);
    EXPECT_NEAR(sys.eta(), 1.0 / oracle::power_iteration(model.information()), 1e-8 * sys.eta());
    const VectorXd v = oracle::random_matrix(rng, sys.dim(), 1);
    const MatrixXd I = MatrixXd::Identity(sys.dim(), sys.dim());
    EXPECT_LT(oracle::relative_error((I + sys.eta() * sys.H()) * sys.apply_prox(v), v), 1e-10);
  }
}

TEST(Stacked, LargeSystemUsesFactorization) {
  MatrixXd I = MatrixXd::Identity(3, 3);
  const SystemModel model(I, {I}, I, {I}, I);
  const StackedSystem sys(model, 200);  // 603 unknowns
  Rng rng(2);
  const VectorXd v = oracle::random_matrix(rng, sys.dim(), 1);
  const MatrixXd M = MatrixXd::Identity(sys.dim(), sys.dim()) + sys.eta() * sys.H();
  EXPECT_LT(oracle::relative_error(M * sys.apply_prox(v), v), 1e-10);
}

TEST(Iterative, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const SystemModel model = oracle::random_model(rng, 2, 2, 2);
    const Simulation sim = simulate(model, 5, trial);
    const IndexSet O = oracle::random_index_set(rng, 5, 2, 0.6);
    const VectorXd X = oracle::random_matrix(rng, 12, 1);
    auto neg_f = [&](const VectorXd& Z) {
      double f = 0;
      for (int t = 0; t <= 5; ++t)
        for (int j = 0; j < 2; ++j)
          if (O.contains(t, j)) f += detail::residual_cost(model, sim.window, Z, t, j);
      return -f;
    };
    const VectorXd fd = oracle::central_difference(neg_f, X, 1e-5);
    EXPECT_LT(oracle::relative_error(2.0 * grad_f(model, sim.window, O, X), fd), 1e-5);
  }
}

TEST(Iterative, ProxWithVanishingRegularizerIsGradientStep) {
  MatrixXd one = MatrixXd::Constant(1, 1, 1.0);
  const SystemModel model(one, {MatrixXd::Constant(1, 1, 2.0)}, MatrixXd::Constant(1, 1, 1e12), {one},
                          MatrixXd::Constant(1, 1, 1e12));
  const Simulation sim = simulate(model, 4, 9);
  const StackedSystem sys(model, 4);
  const IndexSet O = IndexSet::full(4, 1);
  const VectorXd X = VectorXd::LinSpaced(5, -1.0, 1.0);
  const VectorXd d = grad_f(model, sim.window, O, X);
  EXPECT_LT(oracle::relative_error(prox_step(sys, X, d), X + sys.eta() * d), 1e-10);
}

TEST(Iterative, ConvergesMonotonicallyToDirect) {
  Rng rng(4);
  for (int trial = 0; trial < 15; ++trial) {
    const SystemModel model = oracle::random_model(rng, 1 + trial % 3, 1, 2, 0.9, trial % 2);
    const int N = 4 + trial % 8;
    const Simulation sim = simulate(model, N, trial);
    const IndexSet O = oracle::random_index_set(rng, N, 2, 0.7);
    const StackedSystem sys(model, N);
    const auto est = estimate_iterative(model, sim.window, O, sys, VectorXd::Zero(sys.dim()), 1e-13);
    EXPECT_TRUE(est.trace.converged);
    for (std::size_t i = 1; i < est.trace.objective.size(); ++i) {
      EXPECT_LE(est.trace.objective[i], est.trace.objective[i - 1] + 1e-12);
    }
    EXPECT_LT(oracle::relative_error(est.X, estimate_direct(model, sim.window, O).X), 1e-4);
  }
}

TEST(Iterative, HitsCapWithConvergenceError) {
  Rng rng(5);
  const SystemModel model = oracle::random_model(rng, 2, 1, 1);
  const Simulation sim = simulate(model, 8, 1);
  const StackedSystem sys(model, 8);
  EXPECT_THROW(estimate_iterative(model, sim.window, IndexSet::full(8, 1), sys, VectorXd::Zero(sys.dim()), 1e-300, 3),
               ConvergenceError);
}

TEST(Iterative, RateParameters) {
  Rng rng(6);
  const SystemModel model = oracle::random_model(rng, 2, 1, 2);
  const StackedSystem sys(model, 6);
  const auto full = convergence_params(model, sys, IndexSet::full(6, 2));
  const auto partial = convergence_params(model, sys, oracle::random_index_set(rng, 6, 2, 0.5));
  EXPECT_GT(full.theta, 0.0);
  EXPECT_LT(full.theta, 1.0);
  EXPECT_GE(full.theta, partial.theta);
  EXPECT_DOUBLE_EQ(partial.lambda_f, 0.0);
}

TEST(Iterative, BoundEdgeCases) {
  ConvergenceParams p;
  p.theta = 0.5;
  const MatrixXd one = MatrixXd::Constant(1, 1, 1.0);
  const VectorXd x = VectorXd::Constant(1, 2.0);
  // Observation already explained by the estimate: nothing to recover.
  EXPECT_EQ(iteration_bound(p, x, one, x, one, one, 1e-9), 0);
  EXPECT_GT(iteration_bound(p, x, one, VectorXd::Constant(1, 50.0), one, one, 1e-9), 0);
  p.theta = 1.0;
  EXPECT_THROW(iteration_bound(p, x, one, x, one, one, 1e-9), ModelError);
}
