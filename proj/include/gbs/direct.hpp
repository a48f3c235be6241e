// Closed-form sequence estimation under a partial observation set: Kalman
// filter with skipped updates, RTS smoother, and the explicit stacked gain
// K_O = H_O M_O L*_O that maps all observations to the smoothed sequence.
#pragma once

#include "gbs/model.hpp"

#include <Eigen/Dense>

#include <vector>

namespace gbs {

/**
 * @brief Forward pass of the partial-observation Kalman filter.
 *
 * Indexed by time t = 0..N. `gain[t]` is the n × (M·m) gain acting on the
 * stacked innovation of all sensors; its block-columns for sensors not in O_t
 * are exactly zero. `innovation[t]` is y_t − C x̂_{t|t−1} for every sensor.
 */
struct FilterPass {
  std::vector<VectorXd> x_pred;  // x̂_{t|O_{t−1}}
  std::vector<MatrixXd> P_pred;
  std::vector<VectorXd> x_filt;  // x̂_{t|O_t}
  std::vector<MatrixXd> P_filt;
  std::vector<MatrixXd> gain;
  std::vector<VectorXd> innovation;

  int steps() const { return static_cast<int>(x_filt.size()); }
};

/// Backward RTS pass. `gain[t]` is F_t for t = 0..N−1.
struct SmootherPass {
  std::vector<MatrixXd> gain;
  std::vector<VectorXd> x_smooth;  // x̂_{t|O}
  std::vector<MatrixXd> P_smooth;
};

/// K_O and its factors. Built densely; meant for validation and benchmarks.
struct StackedGain {
  MatrixXd K;       // (N+1)n × (N+1)Mm
  MatrixXd M;       // innovations → filtered means
  MatrixXd L;       // innovations → observations
  MatrixXd L_star;  // observations → innovations
  MatrixXd H;       // filtered means → smoothed means
};

struct DirectEstimate {
  VectorXd X;  // stacked smoothed means
  FilterPass filter;
  SmootherPass smoother;
};

namespace detail {

inline MatrixXd symmetrized(const MatrixXd& P) { return 0.5 * (P + P.transpose()); }

/// One filter step at time t starting from the stored prediction x_pred[t], P_pred[t].
/// Active sensors are stacked into a single measurement with block-diagonal R.
inline void filter_step(const SystemModel& model, const ObservationWindow& window, const IndexSet& O, int t,
                        FilterPass& fp) {
  const int n = model.state_dim();
  const int m = model.meas_dim();
  const int M = model.sensor_count();
  const VectorXd& x_prior = fp.x_pred[t];
  const MatrixXd& P_prior = fp.P_pred[t];

  VectorXd innovation(M * m);
  for (int j = 0; j < M; ++j) innovation.segment(j * m, m) = window.at(t, j) - model.C(j) * x_prior;
  fp.innovation[t] = innovation;

  MatrixXd gain = MatrixXd::Zero(n, M * m);
  const std::vector<int> active = O.sensors_at(t);
  if (active.empty()) {
    fp.x_filt[t] = x_prior;
    fp.P_filt[t] = P_prior;
  } else {
    const int k = static_cast<int>(active.size()) * m;
    MatrixXd C_a(k, n);
    MatrixXd R_a = MatrixXd::Zero(k, k);
    VectorXd e_a(k);
    for (std::size_t i = 0; i < active.size(); ++i) {
      const int j = active[i];
      const auto row = static_cast<Eigen::Index>(i) * m;
      C_a.middleRows(row, m) = model.C(j);
      R_a.block(row, row, m, m) = model.R(j);
      e_a.segment(row, m) = innovation.segment(j * m, m);
    }
    const MatrixXd PCt = P_prior * C_a.transpose();
    const MatrixXd S = C_a * PCt + R_a;
    Eigen::LLT<MatrixXd> llt(S);
    if (llt.info() != Eigen::Success) {
      throw IllConditionedError("innovation covariance is not positive definite at t=" + std::to_string(t));
    }
    const MatrixXd K_a = llt.solve(PCt.transpose()).transpose();
    fp.x_filt[t] = x_prior + K_a * e_a;
    // Joseph form keeps P symmetric positive semidefinite.
    const MatrixXd IKC = MatrixXd::Identity(n, n) - K_a * C_a;
    fp.P_filt[t] = symmetrized(IKC * P_prior * IKC.transpose() + K_a * R_a * K_a.transpose());
    for (std::size_t i = 0; i < active.size(); ++i) {
      gain.middleCols(active[i] * m, m) = K_a.middleCols(static_cast<Eigen::Index>(i) * m, m);
    }
  }
  fp.gain[t] = std::move(gain);

  if (t + 1 < fp.steps()) {
    fp.x_pred[t + 1] = model.A() * fp.x_filt[t];
    fp.P_pred[t + 1] = symmetrized(model.A() * fp.P_filt[t] * model.A().transpose() + model.Q());
  }
}

inline void require_index_set(const SystemModel& model, const ObservationWindow& window, const IndexSet& O) {
  window.require_compatible(model);
  O.require_compatible(window);
}

}  // namespace detail

/// Kalman filter over [0, N] that performs the measurement update only for cells in O.
inline FilterPass filter_partial(const SystemModel& model, const ObservationWindow& window, const IndexSet& O) {
  detail::require_index_set(model, window, O);
  const auto steps = static_cast<std::size_t>(window.steps());
  FilterPass fp;
  fp.x_pred.resize(steps);
  fp.P_pred.resize(steps);
  fp.x_filt.resize(steps);
  fp.P_filt.resize(steps);
  fp.gain.resize(steps);
  fp.innovation.resize(steps);
  fp.x_pred[0] = model.x0_mean();
  fp.P_pred[0] = model.P0();
  for (int t = 0; t < window.steps(); ++t) detail::filter_step(model, window, O, t, fp);
  return fp;
}

/// Re-run the filter from time `from` onward, keeping steps t < from of `prev`.
/// `prev` must have been computed for an index set that agrees with O before `from`.
inline FilterPass refilter_from(const SystemModel& model, const ObservationWindow& window, const IndexSet& O,
                                const FilterPass& prev, int from) {
  detail::require_index_set(model, window, O);
  if (prev.steps() != window.steps()) throw ModelError("previous filter pass has the wrong length");
  if (from < 0 || from > window.horizon()) throw ModelError("restart time outside the window");
  FilterPass fp = prev;
  for (int t = from; t < window.steps(); ++t) detail::filter_step(model, window, O, t, fp);
  return fp;
}

/// Rauch-Tung-Striebel backward pass.
inline SmootherPass smooth(const SystemModel& model, const FilterPass& fp) {
  const int steps = fp.steps();
  if (steps == 0) throw ModelError("empty filter pass");
  SmootherPass sp;
  sp.gain.resize(static_cast<std::size_t>(steps - 1));
  sp.x_smooth.resize(static_cast<std::size_t>(steps));
  sp.P_smooth.resize(static_cast<std::size_t>(steps));
  sp.x_smooth[steps - 1] = fp.x_filt[steps - 1];
  sp.P_smooth[steps - 1] = fp.P_filt[steps - 1];
  for (int t = steps - 2; t >= 0; --t) {
    // F_t = P_{t|t} Aᵀ (A P_{t|t} Aᵀ + Q)⁻¹, and the bracket is P_pred[t+1].
    Eigen::LLT<MatrixXd> llt(fp.P_pred[t + 1]);
    if (llt.info() != Eigen::Success) {
      throw IllConditionedError("predicted covariance is not positive definite at t=" + std::to_string(t + 1));
    }
    const MatrixXd F = llt.solve(model.A() * fp.P_filt[t]).transpose();
    sp.x_smooth[t] = fp.x_filt[t] + F * (sp.x_smooth[t + 1] - fp.x_pred[t + 1]);
    sp.P_smooth[t] = detail::symmetrized(fp.P_filt[t] + F * (sp.P_smooth[t + 1] - fp.P_pred[t + 1]) * F.transpose());
    sp.gain[t] = F;
  }
  return sp;
}

/// Smoothed sequence estimate under O, i.e. the minimizer of L_O.
inline DirectEstimate estimate_direct(const SystemModel& model, const ObservationWindow& window, const IndexSet& O) {
  DirectEstimate est;
  est.filter = filter_partial(model, window, O);
  est.smoother = smooth(model, est.filter);
  est.X = stack_states(est.smoother.x_smooth);
  return est;
}

/**
 * Update after adding one cell k to O. The filter steps before time(k) do not
 * depend on y_k and are reused from `prev`; everything from time(k) onward and
 * the full smoother pass are recomputed.
 */
inline DirectEstimate recompute_after_insert(const SystemModel& model, const ObservationWindow& window,
                                             const IndexSet& O, Cell k, const FilterPass& prev) {
  if (O.contains(k)) throw ModelError("inserted cell is already in the index set");
  IndexSet grown = O;
  grown.insert(k);
  DirectEstimate est;
  est.filter = refilter_from(model, window, grown, prev, k.time);
  est.smoother = smooth(model, est.filter);
  est.X = stack_states(est.smoother.x_smooth);
  return est;
}

/**
 * @brief Assemble K_O = H_O M_O L*_O from the gains of a filter/smoother pass.
 *
 * With e_t the stacked innovation and C the stacked sensor matrix:
 *   M[t,s]  = A^{t−s} K_s                          (s ≤ t)
 *   L[t,s]  = C A^{t−s} K_s                        (s < t),  L[t,t] = I
 *   L*[t,s] = −C Φ_p(t, s+1) A K_s                 (s < t),  L*[t,t] = I
 *   Φ_p(k, j) = A(I − K_{k−1}C) ··· A(I − K_j C)
 *   H[t,s]  = F_t ··· F_{s−1} (I − F_s A)          (t ≤ s < N),  H[t,N] = F_t ··· F_{N−1}
 * The map is linear in Y, so the prior mean must be zero for K_O Y to equal
 * the smoothed sequence.
 */
inline StackedGain build_stacked_gain(const SystemModel& model, const FilterPass& fp, const SmootherPass& sp) {
  const int n = model.state_dim();
  const int p = model.sensor_count() * model.meas_dim();
  const int steps = fp.steps();
  const MatrixXd& A = model.A();
  const MatrixXd& C = model.stacked_C();
  const MatrixXd In = MatrixXd::Identity(n, n);

  StackedGain g;
  g.M = MatrixXd::Zero(steps * n, steps * p);
  g.L = MatrixXd::Identity(steps * p, steps * p);
  g.L_star = MatrixXd::Identity(steps * p, steps * p);
  g.H = MatrixXd::Zero(steps * n, steps * n);

  for (int s = 0; s < steps; ++s) {
    const MatrixXd& K = fp.gain[s];
    MatrixXd power_K = K;         // A^{t−s} K_s
    MatrixXd transfer = A * K;    // Φ_p(t, s+1) A K_s
    g.M.block(s * n, s * p, n, p) = K;
    for (int t = s + 1; t < steps; ++t) {
      power_K = A * power_K;
      g.M.block(t * n, s * p, n, p) = power_K;
      g.L.block(t * p, s * p, p, p) = C * power_K;
      g.L_star.block(t * p, s * p, p, p) = -C * transfer;
      transfer = A * (In - fp.gain[t] * C) * transfer;
    }
  }

  for (int t = 0; t < steps; ++t) {
    MatrixXd chain = In;  // F_t ··· F_{s−1}
    for (int s = t; s < steps; ++s) {
      if (s + 1 < steps) {
        g.H.block(t * n, s * n, n, n) = chain * (In - sp.gain[s] * A);
        chain = chain * sp.gain[s];
      } else {
        g.H.block(t * n, s * n, n, n) = chain;
      }
    }
  }

  g.K = g.H * g.M * g.L_star;
  return g;
}

/// Stack the window row-wise into Y = col{y_0, ..., y_N}, each y_t = col{y_{t,1}, ..., y_{t,M}}.
inline VectorXd stack_observations(const ObservationWindow& window) {
  const int p = window.sensors() * window.meas_dim();
  VectorXd Y(window.steps() * p);
  for (int t = 0; t < window.steps(); ++t)
    for (int j = 0; j < window.sensors(); ++j)
      Y.segment(t * p + j * window.meas_dim(), window.meas_dim()) = window.at(t, j);
  return Y;
}

}  // namespace gbs
