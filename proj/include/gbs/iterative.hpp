// Proximal-gradient solver for the sequence MAP problem written as
// f_O(X) + g(X), with g(X) = ‖Ã X − b‖²_{P̃⁻¹} the dynamics prior.
#pragma once

#include "gbs/model.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <optional>
#include <variant>
#include <vector>

namespace gbs {

/**
 * @brief Quantities fixed for a horizon: H = ÃᵀP̃⁻¹Ã, the step η and the
 *        factored prox operator (I + ηH)⁻¹.
 *
 * Ã is unit lower block-bidiagonal with −A below the diagonal and
 * P̃ = blkdiag(P0, Q, ..., Q). `prior_term` is ÃᵀP̃⁻¹b with b = col{x0_mean, 0, ...};
 * it vanishes for a zero prior mean.
 *
 * Immutable after construction; safe to share across concurrent solves.
 */
class StackedSystem {
 public:
  /// Dense explicit inverse is used up to this many unknowns, a cached LLT above.
  static constexpr Eigen::Index kExplicitInverseLimit = 512;

  StackedSystem(const SystemModel& model, int horizon, std::optional<IndexSet> O_for_eta = std::nullopt,
                std::optional<double> eta_override = std::nullopt)
      : horizon_(horizon), n_(model.state_dim()) {
    if (horizon < 0) throw ModelError("horizon must be nonnegative");
    const Eigen::Index dim = static_cast<Eigen::Index>(horizon + 1) * n_;
    const MatrixXd In = MatrixXd::Identity(n_, n_);

    A_tilde_ = MatrixXd::Identity(dim, dim);
    P_tilde_inv_ = MatrixXd::Zero(dim, dim);
    P_tilde_inv_.topLeftCorner(n_, n_) = model.P0_inv();
    for (int t = 1; t <= horizon; ++t) {
      A_tilde_.block(t * n_, (t - 1) * n_, n_, n_) = -model.A();
      P_tilde_inv_.block(t * n_, t * n_, n_, n_) = model.Q_inv();
    }
    H_ = A_tilde_.transpose() * P_tilde_inv_ * A_tilde_;
    H_ = 0.5 * (H_ + H_.transpose());

    prior_term_ = VectorXd::Zero(dim);
    prior_term_.head(n_) = model.P0_inv() * model.x0_mean();

    if (eta_override) {
      if (!(*eta_override > 0.0)) throw ModelError("step size must be positive");
      eta_ = *eta_override;
    } else {
      double lmax = 0.0;
      if (O_for_eta) {
        for (int t = 0; t <= horizon; ++t) {
          MatrixXd info = MatrixXd::Zero(n_, n_);
          for (int j : O_for_eta->sensors_at(t)) info += model.C(j).transpose() * model.R_inv(j) * model.C(j);
          lmax = std::max(lmax, Eigen::SelfAdjointEigenSolver<MatrixXd>(info).eigenvalues().maxCoeff());
        }
      } else {
        lmax = Eigen::SelfAdjointEigenSolver<MatrixXd>(model.information()).eigenvalues().maxCoeff();
      }
      if (!(lmax > 0.0)) throw ModelError("measurement information is zero; step size undefined");
      eta_ = 1.0 / lmax;
    }

    const Eigen::SelfAdjointEigenSolver<MatrixXd> eig(H_, Eigen::EigenvaluesOnly);
    lambda_min_H_ = std::max(0.0, eig.eigenvalues().minCoeff());
    lambda_max_H_ = eig.eigenvalues().maxCoeff();

    const MatrixXd system = MatrixXd::Identity(dim, dim) + eta_ * H_;
    Eigen::LLT<MatrixXd> llt(system);
    if (llt.info() != Eigen::Success) throw IllConditionedError("I + ηH is not positive definite");
    if (dim <= kExplicitInverseLimit) {
      prox_ = MatrixXd(llt.solve(MatrixXd::Identity(dim, dim)));
    } else {
      prox_ = std::move(llt);
    }
  }

  int horizon() const { return horizon_; }
  int state_dim() const { return n_; }
  Eigen::Index dim() const { return H_.rows(); }
  double eta() const { return eta_; }
  const MatrixXd& H() const { return H_; }
  const MatrixXd& A_tilde() const { return A_tilde_; }
  const MatrixXd& P_tilde_inv() const { return P_tilde_inv_; }
  const VectorXd& prior_term() const { return prior_term_; }
  double lambda_min_H() const { return lambda_min_H_; }
  double lambda_max_H() const { return lambda_max_H_; }

  /// (I + ηH)⁻¹ v.
  VectorXd apply_prox(const VectorXd& v) const {
    if (const auto* inv = std::get_if<MatrixXd>(&prox_)) return (*inv) * v;
    return std::get<Eigen::LLT<MatrixXd>>(prox_).solve(v);
  }

 private:
  int horizon_;
  int n_;
  MatrixXd A_tilde_;
  MatrixXd P_tilde_inv_;
  MatrixXd H_;
  VectorXd prior_term_;
  double eta_ = 0.0;
  double lambda_min_H_ = 0.0;
  double lambda_max_H_ = 0.0;
  std::variant<MatrixXd, Eigen::LLT<MatrixXd>> prox_;
};

inline StackedSystem build_stacked(const SystemModel& model, int horizon,
                                   std::optional<IndexSet> O_for_eta = std::nullopt,
                                   std::optional<double> eta_override = std::nullopt) {
  return StackedSystem(model, horizon, std::move(O_for_eta), eta_override);
}

/// Smoothness / strong-convexity constants and the linear rate θ.
struct ConvergenceParams {
  double L_f = 0.0;
  double lambda_f = 0.0;
  double L_g = 0.0;
  double lambda_g = 0.0;
  double eta = 0.0;
  double theta = 0.0;  // (ηλ_f + ηλ_g) / (1 + ηλ_g)
};

inline ConvergenceParams convergence_params(const SystemModel& model, const StackedSystem& sys, const IndexSet& O) {
  if (O.horizon() != sys.horizon()) throw ModelError("index set horizon does not match the stacked system");
  const Eigen::SelfAdjointEigenSolver<MatrixXd> eig(model.information(), Eigen::EigenvaluesOnly);
  ConvergenceParams p;
  p.L_f = O.empty() ? 0.0 : eig.eigenvalues().maxCoeff();
  p.lambda_f = O.is_full() ? std::max(0.0, eig.eigenvalues().minCoeff()) : 0.0;
  p.L_g = sys.lambda_max_H();
  p.lambda_g = sys.lambda_min_H();
  p.eta = sys.eta();
  p.theta = (p.eta * p.lambda_f + p.eta * p.lambda_g) / (1.0 + p.eta * p.lambda_g);
  return p;
}

/**
 * @brief f_O in whitened per-time form.
 *
 * With R_j⁻¹ = U_j U_jᵀ, the active sensors at time t are stacked into
 * C̄_t = [U_jᵀ C_j] and ȳ_t = [U_jᵀ y_{t,j}], so f_O = Σ_t ‖ȳ_t − C̄_t x_t‖².
 * Built once per solve; each evaluation is then a handful of small dense
 * products per time step instead of one per cell.
 */
class DataTerm {
 public:
  DataTerm(const SystemModel& model, const ObservationWindow& window, const IndexSet& O)
      : n_(model.state_dim()), C_(static_cast<std::size_t>(window.steps())), y_(C_.size()) {
    window.require_compatible(model);
    O.require_compatible(window);
    const int m = model.meas_dim();
    std::vector<MatrixXd> Ut(static_cast<std::size_t>(model.sensor_count()));
    std::vector<MatrixXd> UtC(Ut.size());
    for (int j = 0; j < model.sensor_count(); ++j) {
      Ut[j] = Eigen::LLT<MatrixXd>(model.R_inv(j)).matrixL().transpose();
      UtC[j] = Ut[j] * model.C(j);
    }
    for (int t = 0; t < window.steps(); ++t) {
      const std::vector<int> active = O.sensors_at(t);
      const auto rows = static_cast<Eigen::Index>(active.size()) * m;
      C_[t].resize(rows, n_);
      y_[t].resize(rows);
      for (std::size_t i = 0; i < active.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i) * m;
        C_[t].middleRows(r, m) = UtC[active[i]];
        y_[t].segment(r, m).noalias() = Ut[active[i]] * window.at(t, active[i]);
      }
    }
  }

  double value(const VectorXd& X) const {
    double total = 0.0;
    for (std::size_t t = 0; t < C_.size(); ++t) {
      if (C_[t].rows() == 0) continue;
      total += (y_[t] - C_[t] * X.segment(static_cast<Eigen::Index>(t) * n_, n_)).squaredNorm();
    }
    return total;
  }

  /// Block t is Σ_{j ∈ O_t} C_jᵀ R_j⁻¹ (y_{t,j} − C_j x_t).
  VectorXd descent(const VectorXd& X) const {
    VectorXd g = VectorXd::Zero(X.size());
    for (std::size_t t = 0; t < C_.size(); ++t) {
      if (C_[t].rows() == 0) continue;
      const auto off = static_cast<Eigen::Index>(t) * n_;
      g.segment(off, n_).noalias() = C_[t].transpose() * (y_[t] - C_[t] * X.segment(off, n_));
    }
    return g;
  }

 private:
  int n_;
  std::vector<MatrixXd> C_;
  std::vector<VectorXd> y_;
};

/**
 * Descent direction: block t is Σ_{j ∈ O_t} C_jᵀ R_j⁻¹ (y_{t,j} − C_j x̂_t).
 * This is −½ ∇f_O, the form consumed by prox_step.
 */
inline VectorXd grad_f(const SystemModel& model, const ObservationWindow& window, const IndexSet& O,
                       const VectorXd& X) {
  detail::require_stacked(model, window, X);
  return DataTerm(model, window, O).descent(X);
}

/// X′ = (I + ηH)⁻¹ (X + η·descent + η·ÃᵀP̃⁻¹b).
inline VectorXd prox_step(const StackedSystem& sys, const VectorXd& X, const VectorXd& descent) {
  if (X.size() != sys.dim() || descent.size() != sys.dim()) throw ModelError("stacked vector has the wrong length");
  return sys.apply_prox(X + sys.eta() * (descent + sys.prior_term()));
}

struct IterateTrace {
  std::vector<double> objective;  // L_O(X^0), L_O(X^1), ...
  int iterations = 0;             // prox steps taken
  bool converged = false;
  double epsilon = 0.0;
};

struct IterativeEstimate {
  VectorXd X;
  IterateTrace trace;
};

/// Default stop threshold 1e−9 · (1 + L_O(X_init)).
inline double default_epsilon(double initial_objective, double relative = 1e-9) {
  return relative * (1.0 + std::abs(initial_objective));
}

inline constexpr int kDefaultMaxIterations = 1'000'000;

/**
 * @brief Fixed-step proximal gradient iteration for argmin L_O.
 *
 * Stops when successive objectives differ by less than `epsilon` (absolute;
 * nullopt selects default_epsilon of the starting objective) and returns the
 * last iterate. Throws ConvergenceError when `max_iterations` is reached.
 */
inline IterativeEstimate estimate_iterative(const SystemModel& model, const ObservationWindow& window,
                                            const IndexSet& O, const StackedSystem& sys, const VectorXd& X_init,
                                            std::optional<double> epsilon = std::nullopt,
                                            int max_iterations = kDefaultMaxIterations) {
  if (sys.horizon() != window.horizon()) throw ModelError("stacked system horizon does not match the window");
  detail::require_stacked(model, window, X_init);
  const DataTerm data(model, window, O);
  const int steps = window.steps();
  auto objective = [&](const VectorXd& X) { return data.value(X) + detail::dynamics_cost(model, X, steps); };

  IterativeEstimate out;
  out.X = X_init;
  double current = objective(out.X);
  out.trace.objective.push_back(current);
  out.trace.epsilon = epsilon ? *epsilon : default_epsilon(current);
  if (!(out.trace.epsilon > 0.0)) throw ModelError("stop threshold must be positive");

  while (out.trace.iterations < max_iterations) {
    VectorXd next = prox_step(sys, out.X, data.descent(out.X));
    const double value = objective(next);
    ++out.trace.iterations;
    out.trace.objective.push_back(value);
    out.X = std::move(next);
    if (std::abs(current - value) < out.trace.epsilon) {
      out.trace.converged = true;
      return out;
    }
    current = value;
  }
  throw ConvergenceError("proximal gradient did not converge within " + std::to_string(max_iterations) +
                         " iterations (last objective " + std::to_string(current) + ")");
}

/// x̂ + P Cᵀ (C P Cᵀ + R)⁻¹ (y − C x̂).
inline VectorXd rank_one_update(const VectorXd& x_prior, const MatrixXd& P_prior, const VectorXd& y,
                                const MatrixXd& C, const MatrixXd& R) {
  const MatrixXd PCt = P_prior * C.transpose();
  Eigen::LLT<MatrixXd> llt(C * PCt + R);
  if (llt.info() != Eigen::Success) throw IllConditionedError("innovation covariance is singular");
  return x_prior + PCt * llt.solve(y - C * x_prior);
}

/// sup_{v≠0} ‖Ξv‖_W / ‖v‖_W for the weight W = R⁻¹.
inline double weighted_operator_norm(const MatrixXd& Xi, const MatrixXd& R) {
  // With W = R⁻¹ = U Uᵀ, ‖u‖_W = ‖Uᵀu‖, so the norm is ‖Uᵀ Ξ U⁻ᵀ‖₂.
  const MatrixXd R_inv = detail::spd_inverse(R, "R");
  const MatrixXd U = Eigen::LLT<MatrixXd>(R_inv).matrixL();
  const MatrixXd U_inv_t = U.transpose().triangularView<Eigen::Upper>().solve(MatrixXd::Identity(R.rows(), R.cols()));
  const MatrixXd T = U.transpose() * Xi * U_inv_t;
  return Eigen::JacobiSVD<MatrixXd>(T).singularValues()(0);
}

/// Upper bound D on L_{O∪{k}}(X̂_O) − min L_{O∪{k}} for a warm start at X̂_O.
inline double warm_start_gap_bound(const VectorXd& x_prior, const MatrixXd& P_prior, const VectorXd& y,
                                   const MatrixXd& C, const MatrixXd& R) {
  const VectorXd xi = y - C * x_prior;
  const MatrixXd CPCt = C * P_prior * C.transpose();
  Eigen::LLT<MatrixXd> llt(CPCt + R);
  if (llt.info() != Eigen::Success) throw IllConditionedError("innovation covariance is singular");
  const MatrixXd Xi = llt.solve(CPCt.transpose()).transpose();  // CPCᵀ (CPCᵀ + R)⁻¹
  const MatrixXd R_inv = detail::spd_inverse(R, "R");
  const VectorXd shift = Xi * xi;
  const double shift_norm = std::sqrt(std::max(0.0, weighted_sq_norm(shift, R_inv)));
  const double xi_norm = std::sqrt(std::max(0.0, weighted_sq_norm(xi, R_inv)));
  return shift_norm * shift_norm + 2.0 * shift_norm * xi_norm;
}

/**
 * Iterations sufficient for the warm-started solver to reach the ε-level
 * after one observation is added: ⌈log_{1−θ}(ε / D)⌉, or 0 when D ≤ ε.
 */
inline int iteration_bound(const ConvergenceParams& params, const VectorXd& x_prior, const MatrixXd& P_prior,
                           const VectorXd& y, const MatrixXd& C, const MatrixXd& R, double epsilon) {
  if (!(epsilon > 0.0)) throw ModelError("stop threshold must be positive");
  if (!(params.theta > 0.0 && params.theta < 1.0)) throw ModelError("rate θ must lie in (0, 1)");
  const double D = warm_start_gap_bound(x_prior, P_prior, y, C, R);
  if (D == 0.0 || epsilon >= D) return 0;
  const double tau = std::ceil(std::log(epsilon / D) / std::log1p(-params.theta));
  if (tau >= static_cast<double>(std::numeric_limits<int>::max())) return std::numeric_limits<int>::max();
  return std::max(0, static_cast<int>(tau));
}

}  // namespace gbs
