// Linear-Gaussian plant, observation grid, attack injection and the two
// least-squares objectives shared by every estimator in the library.
#pragma once

#include "gbs/error.hpp"
#include "gbs/rng.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

namespace gbs {

using Eigen::MatrixXd;
using Eigen::VectorXd;

/// ‖v‖²_S = vᵀ S v.
inline double weighted_sq_norm(const VectorXd& v, const MatrixXd& S) { return v.dot(S * v); }

namespace detail {

inline MatrixXd spd_inverse(const MatrixXd& S, const char* what) {
  Eigen::LLT<MatrixXd> llt(S);
  if (llt.info() != Eigen::Success) {
    throw ModelError(std::string(what) + " is not positive definite");
  }
  return llt.solve(MatrixXd::Identity(S.rows(), S.cols()));
}

inline void require_square(const MatrixXd& S, Eigen::Index dim, const char* what) {
  if (S.rows() != dim || S.cols() != dim) {
    throw ModelError(std::string(what) + " must be " + std::to_string(dim) + "x" + std::to_string(dim));
  }
}

inline void require_symmetric(const MatrixXd& S, const char* what) {
  const double scale = std::max(1.0, S.cwiseAbs().maxCoeff());
  if ((S - S.transpose()).cwiseAbs().maxCoeff() > 1e-12 * scale) {
    throw ModelError(std::string(what) + " must be symmetric");
  }
}

}  // namespace detail

// =============================================================================
// System model
// =============================================================================

/**
 * @brief Time-invariant plant x_{t+1} = A x_t + w_t observed by M sensors
 *        y_{t,j} = C_j x_t + v_{t,j}.
 *
 * Construction validates dimensions, positive definiteness of Q, P0 and every
 * R_j, and observability of (A, [C_1; ...; C_M]). Inverses of the covariances
 * are cached since every objective evaluation needs them.
 */
class SystemModel {
 public:
  SystemModel(MatrixXd A, std::vector<MatrixXd> C, MatrixXd Q, std::vector<MatrixXd> R, MatrixXd P0,
              VectorXd x0_mean = VectorXd())
      : A_(std::move(A)), C_(std::move(C)), Q_(std::move(Q)), R_(std::move(R)), P0_(std::move(P0)),
        x0_mean_(std::move(x0_mean)) {
    const Eigen::Index n = A_.rows();
    if (n == 0 || A_.cols() != n) throw ModelError("A must be a non-empty square matrix");
    if (C_.empty()) throw ModelError("at least one sensor is required");
    if (C_.size() != R_.size()) throw ModelError("C and R must list the same number of sensors");
    const Eigen::Index m = C_.front().rows();
    if (m == 0) throw ModelError("measurement dimension must be positive");
    for (const auto& Cj : C_) {
      if (Cj.rows() != m || Cj.cols() != n) throw ModelError("every C_j must be m x n with a common m");
    }
    detail::require_square(Q_, n, "Q");
    detail::require_square(P0_, n, "P0");
    detail::require_symmetric(Q_, "Q");
    detail::require_symmetric(P0_, "P0");
    if (x0_mean_.size() == 0) x0_mean_ = VectorXd::Zero(n);
    if (x0_mean_.size() != n) throw ModelError("x0_mean must have length n");

    Q_inv_ = detail::spd_inverse(Q_, "Q");
    P0_inv_ = detail::spd_inverse(P0_, "P0");
    R_inv_.reserve(R_.size());
    for (const auto& Rj : R_) {
      detail::require_square(Rj, m, "R_j");
      detail::require_symmetric(Rj, "R_j");
      R_inv_.push_back(detail::spd_inverse(Rj, "R_j"));
    }

    stacked_C_.resize(m * sensor_count(), n);
    for (int j = 0; j < sensor_count(); ++j) stacked_C_.middleRows(j * m, m) = C_[j];

    information_ = MatrixXd::Zero(n, n);
    for (int j = 0; j < sensor_count(); ++j) information_ += C_[j].transpose() * R_inv_[j] * C_[j];

    MatrixXd obs(stacked_C_.rows() * n, n);
    MatrixXd power = MatrixXd::Identity(n, n);
    for (Eigen::Index k = 0; k < n; ++k) {
      obs.middleRows(k * stacked_C_.rows(), stacked_C_.rows()) = stacked_C_ * power;
      power = A_ * power;
    }
    Eigen::ColPivHouseholderQR<MatrixXd> qr(obs);
    qr.setThreshold(1e-10);
    if (qr.rank() != n) throw ModelError("the pair (A, C) is not observable");
  }

  int state_dim() const { return static_cast<int>(A_.rows()); }
  int meas_dim() const { return static_cast<int>(C_.front().rows()); }
  int sensor_count() const { return static_cast<int>(C_.size()); }

  const MatrixXd& A() const { return A_; }
  const MatrixXd& C(int j) const { return C_.at(j); }
  const MatrixXd& Q() const { return Q_; }
  const MatrixXd& R(int j) const { return R_.at(j); }
  const MatrixXd& P0() const { return P0_; }
  const VectorXd& x0_mean() const { return x0_mean_; }

  const MatrixXd& Q_inv() const { return Q_inv_; }
  const MatrixXd& P0_inv() const { return P0_inv_; }
  const MatrixXd& R_inv(int j) const { return R_inv_.at(j); }

  /// [C_1; ...; C_M], shape (M·m) × n.
  const MatrixXd& stacked_C() const { return stacked_C_; }
  /// Σ_j C_jᵀ R_j⁻¹ C_j, the per-time measurement information of all sensors.
  const MatrixXd& information() const { return information_; }

 private:
  MatrixXd A_;
  std::vector<MatrixXd> C_;
  MatrixXd Q_;
  std::vector<MatrixXd> R_;
  MatrixXd P0_;
  VectorXd x0_mean_;
  MatrixXd Q_inv_;
  MatrixXd P0_inv_;
  std::vector<MatrixXd> R_inv_;
  MatrixXd stacked_C_;
  MatrixXd information_;
};

// =============================================================================
// Observation grid, index sets and indicators
// =============================================================================

/// One cell of the observation grid: time index in [0, N], sensor in [0, M).
struct Cell {
  int time = 0;
  int sensor = 0;
  auto operator<=>(const Cell&) const = default;
};

/// Measurements y_{t,j} for t = 0..N and j = 0..M-1.
class ObservationWindow {
 public:
  ObservationWindow() = default;
  ObservationWindow(int horizon, int sensors, int meas_dim)
      : horizon_(horizon), sensors_(sensors), meas_dim_(meas_dim),
        values_(static_cast<std::size_t>(horizon + 1) * sensors, VectorXd::Zero(meas_dim)) {
    if (horizon < 0 || sensors <= 0 || meas_dim <= 0) throw ModelError("invalid observation window shape");
  }

  int horizon() const { return horizon_; }
  int steps() const { return horizon_ + 1; }
  int sensors() const { return sensors_; }
  int meas_dim() const { return meas_dim_; }

  const VectorXd& at(int t, int j) const { return values_.at(index(t, j)); }
  VectorXd& at(int t, int j) { return values_.at(index(t, j)); }

  /// Throws unless every cell has length m and finite entries.
  void validate() const {
    for (const auto& v : values_) {
      if (v.size() != meas_dim_) throw ModelError("observation has wrong length");
      if (!v.allFinite()) throw ModelError("observation is not finite");
    }
  }

  /// Throws unless the window can be paired with `model`.
  void require_compatible(const SystemModel& model) const {
    if (sensors_ != model.sensor_count() || meas_dim_ != model.meas_dim()) {
      throw ModelError("observation window does not match the model's sensors");
    }
  }

  bool operator==(const ObservationWindow& other) const {
    if (horizon_ != other.horizon_ || sensors_ != other.sensors_ || meas_dim_ != other.meas_dim_) return false;
    for (std::size_t i = 0; i < values_.size(); ++i) {
      if (values_[i].size() != other.values_[i].size() || values_[i] != other.values_[i]) return false;
    }
    return true;
  }

 private:
  std::size_t index(int t, int j) const {
    if (t < 0 || t > horizon_ || j < 0 || j >= sensors_) throw ModelError("observation index out of range");
    return static_cast<std::size_t>(t) * sensors_ + j;
  }

  int horizon_ = 0;
  int sensors_ = 0;
  int meas_dim_ = 0;
  std::vector<VectorXd> values_;
};

/// Boolean grid over (time, sensor) cells.
class CellGrid {
 public:
  CellGrid() = default;
  CellGrid(int horizon, int sensors, bool value = false)
      : horizon_(horizon), sensors_(sensors),
        bits_(static_cast<std::size_t>(horizon + 1) * sensors, value ? 1 : 0) {
    if (horizon < 0 || sensors <= 0) throw ModelError("invalid grid shape");
  }

  int horizon() const { return horizon_; }
  int sensors() const { return sensors_; }
  std::size_t cell_count() const { return bits_.size(); }

  bool get(int t, int j) const { return bits_[index(t, j)] != 0; }
  void put(int t, int j, bool value) { bits_[index(t, j)] = value ? 1 : 0; }

  std::size_t count() const { return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), 1)); }
  std::size_t count_sensor(int j) const {
    std::size_t c = 0;
    for (int t = 0; t <= horizon_; ++t) c += get(t, j) ? 1 : 0;
    return c;
  }

  bool same_shape(const CellGrid& other) const {
    return horizon_ == other.horizon_ && sensors_ == other.sensors_;
  }
  bool operator==(const CellGrid&) const = default;

 protected:
  std::size_t index(int t, int j) const {
    if (t < 0 || t > horizon_ || j < 0 || j >= sensors_) throw ModelError("cell out of range");
    return static_cast<std::size_t>(t) * sensors_ + j;
  }

 private:
  int horizon_ = 0;
  int sensors_ = 0;
  std::vector<std::uint8_t> bits_;
};

/// p̂_{t,j}; true means the observation is judged anomalous.
class IndicatorSequence : public CellGrid {
 public:
  using CellGrid::CellGrid;

  bool flagged(int t, int j) const { return get(t, j); }
  bool flagged(Cell c) const { return get(c.time, c.sensor); }
  void set(int t, int j, bool anomalous) { put(t, j, anomalous); }
  void set(Cell c, bool anomalous) { put(c.time, c.sensor, anomalous); }
  std::size_t flagged_count() const { return count(); }
};

/// Subset O of the observation grid, the cells an estimator may use.
class IndexSet : public CellGrid {
 public:
  using CellGrid::CellGrid;

  static IndexSet full(int horizon, int sensors) { return IndexSet(horizon, sensors, true); }
  static IndexSet none(int horizon, int sensors) { return IndexSet(horizon, sensors, false); }

  /// G(p̂): the cells whose indicator is zero.
  static IndexSet reliable(const IndicatorSequence& p) {
    IndexSet out(p.horizon(), p.sensors());
    for (int t = 0; t <= p.horizon(); ++t)
      for (int j = 0; j < p.sensors(); ++j) out.put(t, j, !p.flagged(t, j));
    return out;
  }

  bool contains(int t, int j) const { return get(t, j); }
  bool contains(Cell c) const { return get(c.time, c.sensor); }
  void insert(Cell c) { put(c.time, c.sensor, true); }
  void erase(Cell c) { put(c.time, c.sensor, false); }
  std::size_t size() const { return count(); }
  bool empty() const { return count() == 0; }
  bool is_full() const { return count() == cell_count(); }

  /// Cells in ascending (time, sensor) order.
  std::vector<Cell> entries() const {
    std::vector<Cell> out;
    for (int t = 0; t <= horizon(); ++t)
      for (int j = 0; j < sensors(); ++j)
        if (get(t, j)) out.push_back({t, j});
    return out;
  }

  std::vector<int> sensors_at(int t) const {
    std::vector<int> out;
    for (int j = 0; j < sensors(); ++j)
      if (get(t, j)) out.push_back(j);
    return out;
  }

  void require_compatible(const ObservationWindow& w) const {
    if (horizon() != w.horizon() || sensors() != w.sensors()) {
      throw ModelError("index set does not match the observation window");
    }
  }
};

// =============================================================================
// Trajectories and stacked vectors
// =============================================================================

struct StateTrajectory {
  std::vector<VectorXd> states;
};

/// col{x_0, ..., x_N}.
inline VectorXd stack_states(const std::vector<VectorXd>& states) {
  if (states.empty()) return VectorXd();
  const Eigen::Index n = states.front().size();
  VectorXd X(n * static_cast<Eigen::Index>(states.size()));
  for (std::size_t t = 0; t < states.size(); ++t) X.segment(static_cast<Eigen::Index>(t) * n, n) = states[t];
  return X;
}

inline std::vector<VectorXd> unstack_states(const VectorXd& X, int n) {
  std::vector<VectorXd> out(static_cast<std::size_t>(X.size() / n));
  for (std::size_t t = 0; t < out.size(); ++t) out[t] = X.segment(static_cast<Eigen::Index>(t) * n, n);
  return out;
}

// =============================================================================
// Attacks
// =============================================================================

enum class AttackKind { none, random_interference, constant_bias, increasing_bias };

inline const char* to_string(AttackKind kind) {
  switch (kind) {
    case AttackKind::none: return "none";
    case AttackKind::random_interference: return "random_interference";
    case AttackKind::constant_bias: return "constant_bias";
    case AttackKind::increasing_bias: return "increasing_bias";
  }
  return "none";
}

/**
 * @brief False-data injection e_t added to the targeted sensors.
 *
 * random_interference: e_t ~ N(0, R_tilde), drawn independently per sensor.
 * constant_bias:       e_t = mu.
 * increasing_bias:     e_t = (t / N) mu_max.
 * Every kind is active only for t >= t_start.
 */
struct AttackSpec {
  AttackKind kind = AttackKind::none;
  MatrixXd R_tilde;
  VectorXd mu;
  int t_start = 0;
  VectorXd mu_max;
  std::vector<int> targets;  // zero-based sensor indices

  static AttackSpec none() { return {}; }
  static AttackSpec random_interference(MatrixXd R_tilde, std::vector<int> targets, int t_start = 0) {
    AttackSpec s;
    s.kind = AttackKind::random_interference;
    s.R_tilde = std::move(R_tilde);
    s.t_start = t_start;
    s.targets = std::move(targets);
    return s;
  }
  static AttackSpec constant_bias(VectorXd mu, int t_start, std::vector<int> targets) {
    AttackSpec s;
    s.kind = AttackKind::constant_bias;
    s.mu = std::move(mu);
    s.t_start = t_start;
    s.targets = std::move(targets);
    return s;
  }
  static AttackSpec increasing_bias(VectorXd mu_max, std::vector<int> targets, int t_start = 0) {
    AttackSpec s;
    s.kind = AttackKind::increasing_bias;
    s.mu_max = std::move(mu_max);
    s.t_start = t_start;
    s.targets = std::move(targets);
    return s;
  }

  bool targets_sensor(int j) const { return std::find(targets.begin(), targets.end(), j) != targets.end(); }

  void validate(const ObservationWindow& w) const {
    for (int j : targets) {
      if (j < 0 || j >= w.sensors()) throw ModelError("attack target out of range");
    }
    if (t_start < 0 || t_start > w.horizon()) throw ModelError("t_start outside the window");
    const Eigen::Index m = w.meas_dim();
    switch (kind) {
      case AttackKind::none: break;
      case AttackKind::random_interference:
        detail::require_square(R_tilde, m, "R_tilde");
        detail::require_symmetric(R_tilde, "R_tilde");
        if (Eigen::LLT<MatrixXd>(R_tilde).info() != Eigen::Success) {
          throw ModelError("R_tilde is not positive definite");
        }
        break;
      case AttackKind::constant_bias:
        if (mu.size() != m) throw ModelError("mu must have length m");
        break;
      case AttackKind::increasing_bias:
        if (mu_max.size() != m) throw ModelError("mu_max must have length m");
        break;
    }
  }
};

// =============================================================================
// Operations
// =============================================================================

struct Simulation {
  StateTrajectory truth;
  ObservationWindow window;
};

/// Sample x_0 ~ N(x0_mean, P0), x_{t+1} = A x_t + w_t, y_{t,j} = C_j x_t + v_{t,j}.
inline Simulation simulate(const SystemModel& model, int horizon, std::uint64_t seed) {
  if (horizon < 0) throw ModelError("horizon must be nonnegative");
  Rng rng(seed);
  const int n = model.state_dim();
  const MatrixXd chol_P0 = Eigen::LLT<MatrixXd>(model.P0()).matrixL();
  const MatrixXd chol_Q = Eigen::LLT<MatrixXd>(model.Q()).matrixL();
  std::vector<MatrixXd> chol_R;
  for (int j = 0; j < model.sensor_count(); ++j) chol_R.push_back(Eigen::LLT<MatrixXd>(model.R(j)).matrixL());

  Simulation sim{StateTrajectory{}, ObservationWindow(horizon, model.sensor_count(), model.meas_dim())};
  VectorXd x = rng.gaussian(model.x0_mean(), chol_P0);
  const VectorXd zero_m = VectorXd::Zero(model.meas_dim());
  for (int t = 0; t <= horizon; ++t) {
    sim.truth.states.push_back(x);
    for (int j = 0; j < model.sensor_count(); ++j) {
      sim.window.at(t, j) = model.C(j) * x + rng.gaussian(zero_m, chol_R[j]);
    }
    x = model.A() * x + rng.gaussian(VectorXd::Zero(n), chol_Q);
  }
  return sim;
}

/// Add the attack signal to the targeted sensors; other cells are copied unchanged.
inline ObservationWindow apply_attack(const ObservationWindow& window, const AttackSpec& spec, std::uint64_t seed) {
  spec.validate(window);
  ObservationWindow out = window;
  if (spec.kind == AttackKind::none) return out;

  Rng rng(seed);
  MatrixXd chol;
  if (spec.kind == AttackKind::random_interference) chol = Eigen::LLT<MatrixXd>(spec.R_tilde).matrixL();
  const VectorXd zero_m = VectorXd::Zero(window.meas_dim());
  const double N = window.horizon();

  for (int t = spec.t_start; t <= window.horizon(); ++t) {
    for (int j = 0; j < window.sensors(); ++j) {
      if (!spec.targets_sensor(j)) continue;
      switch (spec.kind) {
        case AttackKind::random_interference: out.at(t, j) += rng.gaussian(zero_m, chol); break;
        case AttackKind::constant_bias: out.at(t, j) += spec.mu; break;
        case AttackKind::increasing_bias:
          if (N > 0) out.at(t, j) += (t / N) * spec.mu_max;
          break;
        case AttackKind::none: break;
      }
    }
  }
  return out;
}

namespace detail {

inline void require_stacked(const SystemModel& model, const ObservationWindow& w, const VectorXd& X) {
  w.require_compatible(model);
  if (X.size() != static_cast<Eigen::Index>(w.steps()) * model.state_dim()) {
    throw ModelError("stacked state vector has the wrong length");
  }
}

/// ‖x̂_0 − x0_mean‖²_{P0⁻¹} + Σ_{i≥1} ‖x̂_i − A x̂_{i−1}‖²_{Q⁻¹}.
inline double dynamics_cost(const SystemModel& model, const VectorXd& X, int steps) {
  const int n = model.state_dim();
  double cost = weighted_sq_norm(X.segment(0, n) - model.x0_mean(), model.P0_inv());
  for (int i = 1; i < steps; ++i) {
    const VectorXd r = X.segment(i * n, n) - model.A() * X.segment((i - 1) * n, n);
    cost += weighted_sq_norm(r, model.Q_inv());
  }
  return cost;
}

inline double residual_cost(const SystemModel& model, const ObservationWindow& w, const VectorXd& X, int t, int j) {
  const int n = model.state_dim();
  const VectorXd r = w.at(t, j) - model.C(j) * X.segment(t * n, n);
  return weighted_sq_norm(r, model.R_inv(j));
}

}  // namespace detail

/// W(X̂, p̂): mixture objective with anomaly penalty α per flagged cell.
inline double objective_w(const SystemModel& model, const ObservationWindow& window, const VectorXd& X,
                          const IndicatorSequence& p, double alpha) {
  detail::require_stacked(model, window, X);
  if (p.horizon() != window.horizon() || p.sensors() != window.sensors()) {
    throw ModelError("indicator grid does not match the observation window");
  }
  double cost = 0.0;
  for (int t = 0; t < window.steps(); ++t) {
    for (int j = 0; j < window.sensors(); ++j) {
      cost += p.flagged(t, j) ? alpha : detail::residual_cost(model, window, X, t, j);
    }
  }
  return cost + detail::dynamics_cost(model, X, window.steps());
}

/// L_O(X̂): MAP objective restricted to the observations in O.
inline double objective_l(const SystemModel& model, const ObservationWindow& window, const IndexSet& O,
                          const VectorXd& X) {
  detail::require_stacked(model, window, X);
  O.require_compatible(window);
  double cost = 0.0;
  for (int t = 0; t < window.steps(); ++t) {
    for (int j = 0; j < window.sensors(); ++j) {
      if (O.contains(t, j)) cost += detail::residual_cost(model, window, X, t, j);
    }
  }
  return cost + detail::dynamics_cost(model, X, window.steps());
}

}  // namespace gbs
