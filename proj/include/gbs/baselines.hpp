// Comparison detectors (per-time χ², CUSUM on the χ² statistic, a one-pass
// resilient filter) and the per-trial / aggregate evaluation metrics.
#pragma once

#include "gbs/direct.hpp"
#include "gbs/estimator.hpp"
#include "gbs/model.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <vector>

namespace gbs {

/**
 * @brief Output of a baseline detector over one window.
 *
 * `statistic(t, j)` is the per-sensor χ²_t or S_t value, `flags` marks the
 * cells whose statistic crossed the threshold, and `alarms[j]` is set when
 * sensor j has more than τ flags.
 */
struct DetectorVerdict {
  IndicatorSequence flags;
  std::vector<bool> alarms;
  MatrixXd statistic;  // (N+1) × M
};

inline constexpr double kDefaultCusumReference = 0.5;

/// χ²_{t,j} = ‖y_{t,j} − C_j x̂_{t|t−1}‖² weighted by (C_j P_{t|t−1} C_jᵀ + R_j)⁻¹ under the full-observation filter.
inline MatrixXd chi2_statistics(const SystemModel& model, const ObservationWindow& window) {
  const FilterPass fp = filter_partial(model, window, IndexSet::full(window.horizon(), window.sensors()));
  const int m = model.meas_dim();
  MatrixXd stat(window.steps(), window.sensors());
  for (int t = 0; t < window.steps(); ++t) {
    for (int j = 0; j < window.sensors(); ++j) {
      const MatrixXd S = model.C(j) * fp.P_pred[t] * model.C(j).transpose() + model.R(j);
      Eigen::LLT<MatrixXd> llt(S);
      if (llt.info() != Eigen::Success) {
        throw IllConditionedError("residual covariance is not positive definite at t=" + std::to_string(t));
      }
      const VectorXd e = fp.innovation[t].segment(j * m, m);
      stat(t, j) = e.dot(llt.solve(e));
    }
  }
  return stat;
}

namespace detail {

inline DetectorVerdict threshold_verdict(MatrixXd statistic, double threshold, int tau) {
  const int horizon = static_cast<int>(statistic.rows()) - 1;
  const int sensors = static_cast<int>(statistic.cols());
  DetectorVerdict v{IndicatorSequence(horizon, sensors), {}, std::move(statistic)};
  for (int t = 0; t <= horizon; ++t)
    for (int j = 0; j < sensors; ++j) v.flags.set(t, j, v.statistic(t, j) > threshold);
  v.alarms = sensor_alarms(v.flags, tau);
  return v;
}

inline void require_threshold(double threshold, int tau) {
  if (!(threshold > 0.0)) throw ModelError("detector threshold must be positive");
  if (tau < 0) throw ModelError("tau must be nonnegative");
}

}  // namespace detail

/// Flags (t, j) when χ²_{t,j} > threshold. `threshold` may be +∞.
inline DetectorVerdict chi2_detector(const SystemModel& model, const ObservationWindow& window, double threshold,
                                     int tau) {
  detail::require_threshold(threshold, tau);
  return detail::threshold_verdict(chi2_statistics(model, window), threshold, tau);
}

/// S_0 = 0, S_t = max(0, S_{t−1} + r_t − δ_ref) for t ≥ 1.
inline VectorXd cusum_accumulate(const VectorXd& r, double reference) {
  VectorXd S = VectorXd::Zero(r.size());
  for (Eigen::Index t = 1; t < r.size(); ++t) S(t) = std::max(0.0, S(t - 1) + r(t) - reference);
  return S;
}

/// CUSUM per sensor with r_t = χ²_t.
inline DetectorVerdict cusum_detector(const SystemModel& model, const ObservationWindow& window, double reference,
                                      double threshold, int tau) {
  detail::require_threshold(threshold, tau);
  const MatrixXd chi2 = chi2_statistics(model, window);
  MatrixXd S(chi2.rows(), chi2.cols());
  for (Eigen::Index j = 0; j < chi2.cols(); ++j) S.col(j) = cusum_accumulate(chi2.col(j), reference);
  return detail::threshold_verdict(std::move(S), threshold, tau);
}

struct ResilientEstimate {
  VectorXd X;
  DetectorVerdict verdict;
  IndexSet accepted;
};

/**
 * @brief One forward pass that drops any measurement whose χ² statistic
 *        (innovation-covariance weighted) exceeds the threshold, followed by
 *        smoothing over the accepted cells.
 *
 * Sensors at one time are gated in ascending order against the mean already
 * updated by the accepted sensors before them. Decisions are never revisited.
 */
inline ResilientEstimate resilient_estimator(const SystemModel& model, const ObservationWindow& window,
                                             double threshold, int tau) {
  detail::require_threshold(threshold, tau);
  window.require_compatible(model);
  const int n = model.state_dim();
  ResilientEstimate out{VectorXd(), DetectorVerdict{IndicatorSequence(window.horizon(), window.sensors()), {},
                                                    MatrixXd::Zero(window.steps(), window.sensors())},
                        IndexSet::full(window.horizon(), window.sensors())};
  VectorXd x = model.x0_mean();
  MatrixXd P = model.P0();
  for (int t = 0; t <= window.horizon(); ++t) {
    for (int j = 0; j < window.sensors(); ++j) {
      const MatrixXd& C = model.C(j);
      const MatrixXd PCt = P * C.transpose();
      Eigen::LLT<MatrixXd> llt(C * PCt + model.R(j));
      if (llt.info() != Eigen::Success) {
        throw IllConditionedError("innovation covariance is not positive definite at t=" + std::to_string(t));
      }
      const VectorXd e = window.at(t, j) - C * x;
      const double stat = e.dot(llt.solve(e));
      out.verdict.statistic(t, j) = stat;
      if (stat > threshold) {
        out.verdict.flags.set(t, j, true);
        out.accepted.erase({t, j});
        continue;
      }
      const MatrixXd K = llt.solve(PCt.transpose()).transpose();
      x += K * e;
      const MatrixXd IKC = MatrixXd::Identity(n, n) - K * C;
      P = detail::symmetrized(IKC * P * IKC.transpose() + K * model.R(j) * K.transpose());
    }
    x = model.A() * x;
    P = detail::symmetrized(model.A() * P * model.A().transpose() + model.Q());
  }
  out.verdict.alarms = sensor_alarms(out.verdict.flags, tau);
  out.X = estimate_direct(model, window, out.accepted).X;
  return out;
}

// =============================================================================
// Metrics
// =============================================================================

/// Outcome of one trial for one method.
struct TrialMetrics {
  bool detection_success = false;  // every attacked sensor alarmed and no clean sensor
  double false_alarm = 0.0;        // fraction of clean sensors alarmed
  double mse = 0.0;                // mean over t of ‖x_t − x̂_t‖²
};

/// Rates and error statistics over a set of trials.
struct Metrics {
  int trials = 0;
  double detection_success_rate = 0.0;
  double false_alarm_rate = 0.0;
  double mse = 0.0;
  double mse_stddev = 0.0;  // sample standard deviation across trials
};

inline double mean_squared_error(const StateTrajectory& truth, const VectorXd& X) {
  if (truth.states.empty()) throw ModelError("empty trajectory");
  const Eigen::Index n = truth.states.front().size();
  if (X.size() != n * static_cast<Eigen::Index>(truth.states.size())) {
    throw ModelError("estimate length does not match the trajectory");
  }
  double total = 0.0;
  for (std::size_t t = 0; t < truth.states.size(); ++t) {
    total += (truth.states[t] - X.segment(static_cast<Eigen::Index>(t) * n, n)).squaredNorm();
  }
  return total / static_cast<double>(truth.states.size());
}

inline TrialMetrics evaluate(const StateTrajectory& truth, const VectorXd& X, const std::vector<bool>& alarms,
                             const std::vector<int>& attacked) {
  TrialMetrics m;
  m.mse = mean_squared_error(truth, X);
  std::vector<bool> is_attacked(alarms.size(), false);
  for (int j : attacked) {
    if (j < 0 || static_cast<std::size_t>(j) >= alarms.size()) throw ModelError("attacked sensor out of range");
    is_attacked[j] = true;
  }
  bool all_hit = true;
  int clean = 0;
  int false_alarms = 0;
  for (std::size_t j = 0; j < alarms.size(); ++j) {
    if (is_attacked[j]) {
      all_hit = all_hit && alarms[j];
    } else {
      ++clean;
      false_alarms += alarms[j] ? 1 : 0;
    }
  }
  m.detection_success = all_hit && false_alarms == 0;
  m.false_alarm = clean == 0 ? 0.0 : static_cast<double>(false_alarms) / clean;
  return m;
}

inline Metrics aggregate(const std::vector<TrialMetrics>& trials) {
  Metrics out;
  out.trials = static_cast<int>(trials.size());
  if (trials.empty()) return out;
  double success = 0.0;
  double false_alarm = 0.0;
  double mse = 0.0;
  for (const auto& t : trials) {
    success += t.detection_success ? 1.0 : 0.0;
    false_alarm += t.false_alarm;
    mse += t.mse;
  }
  const double k = static_cast<double>(trials.size());
  out.detection_success_rate = success / k;
  out.false_alarm_rate = false_alarm / k;
  out.mse = mse / k;
  if (trials.size() > 1) {
    double ss = 0.0;
    for (const auto& t : trials) ss += (t.mse - out.mse) * (t.mse - out.mse);
    out.mse_stddev = std::sqrt(ss / (k - 1.0));
  }
  return out;
}

}  // namespace gbs
