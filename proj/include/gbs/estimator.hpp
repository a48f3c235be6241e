// Gaussian-Bernoulli secure estimator: alternating minimization of W(X, p)
// over the state sequence and the anomaly indicators, with a single-indicator
// re-evaluation sweep to leave local minima, and a per-sensor alarm rule.
#pragma once

#include "gbs/direct.hpp"
#include "gbs/iterative.hpp"
#include "gbs/model.hpp"

#include <Eigen/Dense>

#include <bit>
#include <cstdint>
#include <limits>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace gbs {

enum class SolverKind { direct, iterative, automatic };

inline const char* to_string(SolverKind s) {
  switch (s) {
    case SolverKind::direct: return "direct";
    case SolverKind::iterative: return "iterative";
    case SolverKind::automatic: return "auto";
  }
  return "auto";
}

struct GbsConfig {
  double alpha = 6.0;
  int tau = 3;
  /// Absolute stop threshold for iterative inner solves; nullopt selects the relative default.
  std::optional<double> epsilon;
  int max_outer = 200;
  SolverKind solver = SolverKind::automatic;

  void validate() const {
    if (!(alpha > 0.0)) throw ModelError("alpha must be positive");
    if (tau < 0) throw ModelError("tau must be nonnegative");
    if (epsilon && !(*epsilon > 0.0)) throw ModelError("epsilon must be positive");
    if (max_outer <= 0) throw ModelError("max_outer must be positive");
  }
};

struct GbsResult {
  VectorXd X;
  IndicatorSequence p;
  std::vector<bool> alarms;  // per sensor
  double objective = 0.0;    // W(X, p)
  int outer_iters = 0;
  std::vector<int> inner_iters;  // prox steps per inner solve, 0 for direct solves
  std::vector<double> trace;     // W after initialization and after every outer iteration
  int refine_flips = 0;
};

/// Raised when the outer loop reaches max_outer; carries the last state.
class GbsConvergenceError : public ConvergenceError {
 public:
  GbsConvergenceError(const std::string& what, GbsResult partial)
      : ConvergenceError(what), partial_(std::move(partial)) {}
  const GbsResult& partial() const { return partial_; }

 private:
  GbsResult partial_;
};

struct InitialEstimate {
  IndicatorSequence p;
  std::vector<VectorXd> x_filt;  // per-time filtered means
};

/// ‖y_{t,j} − C_j x‖²_{R_j⁻¹}.
inline double weighted_residual(const SystemModel& model, const ObservationWindow& window, int t, int j,
                                const VectorXd& x) {
  return weighted_sq_norm(window.at(t, j) - model.C(j) * x, model.R_inv(j));
}

/**
 * @brief Rough first pass: a Kalman filter that skips every measurement whose
 *        R⁻¹-weighted residual against the current mean exceeds α.
 *
 * Sensors at one time are processed in ascending order, each checked against
 * the mean already updated by the accepted sensors before it.
 */
inline InitialEstimate initial_strategy(const SystemModel& model, const ObservationWindow& window, double alpha) {
  if (!(alpha > 0.0)) throw ModelError("alpha must be positive");
  window.require_compatible(model);
  const int n = model.state_dim();
  InitialEstimate out{IndicatorSequence(window.horizon(), window.sensors()), {}};
  VectorXd x = model.x0_mean();
  MatrixXd P = model.P0();
  for (int t = 0; t <= window.horizon(); ++t) {
    for (int j = 0; j < window.sensors(); ++j) {
      const bool anomalous = weighted_residual(model, window, t, j, x) > alpha;
      out.p.set(t, j, anomalous);
      if (anomalous) continue;
      const MatrixXd& C = model.C(j);
      const MatrixXd PCt = P * C.transpose();
      Eigen::LLT<MatrixXd> llt(C * PCt + model.R(j));
      if (llt.info() != Eigen::Success) {
        throw IllConditionedError("innovation covariance is not positive definite at t=" + std::to_string(t));
      }
      const MatrixXd K = llt.solve(PCt.transpose()).transpose();
      x += K * (window.at(t, j) - C * x);
      const MatrixXd IKC = MatrixXd::Identity(n, n) - K * C;
      P = detail::symmetrized(IKC * P * IKC.transpose() + K * model.R(j) * K.transpose());
    }
    out.x_filt.push_back(x);
    x = model.A() * x;
    P = detail::symmetrized(model.A() * P * model.A().transpose() + model.Q());
  }
  return out;
}

/// p̂_{t,j} = 1 iff ‖y_{t,j} − C_j x̂_t‖²_{R_j⁻¹} > α.
inline IndicatorSequence update_indicators(const SystemModel& model, const ObservationWindow& window,
                                           const VectorXd& X, double alpha) {
  detail::require_stacked(model, window, X);
  const int n = model.state_dim();
  IndicatorSequence p(window.horizon(), window.sensors());
  for (int t = 0; t <= window.horizon(); ++t)
    for (int j = 0; j < window.sensors(); ++j)
      p.set(t, j, weighted_residual(model, window, t, j, X.segment(t * n, n)) > alpha);
  return p;
}

/// Per-sensor alarm: more than τ flagged cells.
inline std::vector<bool> sensor_alarms(const IndicatorSequence& p, int tau) {
  std::vector<bool> alarms(static_cast<std::size_t>(p.sensors()));
  for (int j = 0; j < p.sensors(); ++j) alarms[j] = p.count_sensor(j) > static_cast<std::size_t>(tau);
  return alarms;
}

namespace detail {

struct InnerSolve {
  VectorXd X;
  int iterations = 0;
};

/// Minimizes L_O. Direct when `use_direct`, otherwise proximal gradient from `warm`.
inline InnerSolve solve_inner(const SystemModel& model, const ObservationWindow& window, const IndexSet& O,
                              bool use_direct, const StackedSystem* sys, const VectorXd& warm,
                              const std::optional<double>& epsilon) {
  if (use_direct) return {estimate_direct(model, window, O).X, 0};
  auto est = estimate_iterative(model, window, O, *sys, warm, epsilon);
  return {std::move(est.X), est.trace.iterations};
}

struct RefineOutcome {
  bool flag = false;        // p̂_k*
  double with_k = 0.0;      // min L over O ∪ {k}
  double without_k = 0.0;   // min L over O \ {k}
  VectorXd X_other;         // minimizer on the side opposite to the current p̂_k
  int iterations = 0;
};

/// Evaluate both sides of cell k. `X_current` is taken as the minimizer for the
/// side matching the current p̂_k; only the other side is solved.
inline RefineOutcome refine_cell(const SystemModel& model, const ObservationWindow& window,
                                 const IndicatorSequence& p, Cell k, double alpha, bool use_direct,
                                 const StackedSystem* sys, const VectorXd& X_current,
                                 const std::optional<double>& epsilon) {
  IndexSet O = IndexSet::reliable(p);
  const bool currently_flagged = p.flagged(k);
  IndexSet with = O;
  with.insert(k);
  IndexSet without = O;
  without.erase(k);

  RefineOutcome r;
  const IndexSet& other = currently_flagged ? with : without;
  InnerSolve solved = solve_inner(model, window, other, use_direct, sys, X_current, epsilon);
  const double current_value = objective_l(model, window, currently_flagged ? without : with, X_current);
  const double other_value = objective_l(model, window, other, solved.X);
  r.with_k = currently_flagged ? other_value : current_value;
  r.without_k = currently_flagged ? current_value : other_value;
  r.flag = (r.with_k - r.without_k) > alpha;
  r.X_other = std::move(solved.X);
  r.iterations = solved.iterations;
  return r;
}

}  // namespace detail

/**
 * p̂_k* = 1 iff min L_{O∪{k}} − min L_{O∖{k}} > α, with O = {p̂ = 0}. Both
 * minima are computed with the configured solver (direct unless
 * cfg.solver == iterative, which warm-starts from the direct solution).
 */
inline bool refine_indicator(const SystemModel& model, const ObservationWindow& window,
                             const IndicatorSequence& p, Cell k, double alpha, const GbsConfig& cfg) {
  if (!(alpha > 0.0)) throw ModelError("alpha must be positive");
  if (p.horizon() != window.horizon() || p.sensors() != window.sensors()) {
    throw ModelError("indicator grid does not match the observation window");
  }
  const VectorXd X = estimate_direct(model, window, IndexSet::reliable(p)).X;
  if (cfg.solver != SolverKind::iterative) {
    return detail::refine_cell(model, window, p, k, alpha, true, nullptr, X, cfg.epsilon).flag;
  }
  const StackedSystem sys(model, window.horizon());
  return detail::refine_cell(model, window, p, k, alpha, false, &sys, X, cfg.epsilon).flag;
}

/**
 * @brief Alternating minimization of W(X, p).
 *
 * Each outer iteration either (a) recomputes p̂ from X̂ and re-solves X̂ under
 * O = {p̂ = 0}, or, once p̂ is stable, (b) sweeps the cells in (time, sensor)
 * order and applies the first single-indicator flip that lowers W. The loop
 * ends when a full sweep changes nothing. W never increases.
 */
inline GbsResult gbs_estimate(const SystemModel& model, const ObservationWindow& window, const GbsConfig& cfg) {
  cfg.validate();
  window.require_compatible(model);
  window.validate();

  std::optional<StackedSystem> sys;
  if (cfg.solver != SolverKind::direct) sys.emplace(model, window.horizon());
  const StackedSystem* sys_ptr = sys ? &*sys : nullptr;

  GbsResult res;
  InitialEstimate init = initial_strategy(model, window, cfg.alpha);
  res.p = init.p;

  bool first_solve = true;
  auto solve = [&](const IndexSet& O, const VectorXd& warm) {
    const bool use_direct = cfg.solver == SolverKind::direct || (cfg.solver == SolverKind::automatic && first_solve);
    first_solve = false;
    detail::InnerSolve s = detail::solve_inner(model, window, O, use_direct, sys_ptr, warm, cfg.epsilon);
    res.inner_iters.push_back(s.iterations);
    return s.X;
  };
  auto uses_direct_now = [&] { return cfg.solver == SolverKind::direct; };

  res.X = solve(IndexSet::reliable(res.p), stack_states(init.x_filt));
  res.trace.push_back(objective_w(model, window, res.X, res.p, cfg.alpha));

  const std::vector<Cell> cells = IndexSet::full(window.horizon(), window.sensors()).entries();
  bool done = false;
  while (!done) {
    if (res.outer_iters >= cfg.max_outer) {
      res.objective = res.trace.back();
      res.alarms = sensor_alarms(res.p, cfg.tau);
      throw GbsConvergenceError("GBS outer loop did not terminate within " + std::to_string(cfg.max_outer) +
                                    " iterations",
                                res);
    }
    ++res.outer_iters;

    IndicatorSequence next = update_indicators(model, window, res.X, cfg.alpha);
    if (!(next == res.p)) {
      res.p = std::move(next);
      res.X = solve(IndexSet::reliable(res.p), res.X);
      res.trace.push_back(objective_w(model, window, res.X, res.p, cfg.alpha));
      continue;
    }

    done = true;
    for (const Cell& k : cells) {
      detail::RefineOutcome r = detail::refine_cell(model, window, res.p, k, cfg.alpha, uses_direct_now(), sys_ptr,
                                                    res.X, cfg.epsilon);
      res.inner_iters.push_back(r.iterations);
      if (r.flag == res.p.flagged(k)) continue;
      res.p.set(k, r.flag);
      res.X = std::move(r.X_other);
      ++res.refine_flips;
      res.trace.push_back(objective_w(model, window, res.X, res.p, cfg.alpha));
      done = false;
      break;
    }
  }

  res.objective = objective_w(model, window, res.X, res.p, cfg.alpha);
  res.alarms = sensor_alarms(res.p, cfg.tau);
  return res;
}

struct MipSolution {
  IndicatorSequence p;
  VectorXd X;
  double objective = 0.0;
};

inline constexpr int kBruteForceCellLimit = 20;

/**
 * @brief Global minimum of W by enumerating every indicator pattern.
 *
 * Refuses grids with more than kBruteForceCellLimit cells. Among equal
 * objectives the pattern with fewer flags wins, then the one whose first
 * differing cell in (time, sensor) order is unflagged.
 */
inline MipSolution brute_force_mip(const SystemModel& model, const ObservationWindow& window, double alpha) {
  if (!(alpha > 0.0)) throw ModelError("alpha must be positive");
  window.require_compatible(model);
  const int cells = window.steps() * window.sensors();
  if (cells > kBruteForceCellLimit) {
    throw ModelError("brute-force enumeration refused: " + std::to_string(cells) + " cells exceeds " +
                     std::to_string(kBruteForceCellLimit));
  }
  const int M = window.sensors();
  // Cell i maps to bit (cells − 1 − i), so numeric order of masks equals
  // lexicographic order of patterns.
  auto pattern = [&](std::uint32_t mask) {
    IndicatorSequence p(window.horizon(), M);
    for (int i = 0; i < cells; ++i) p.set(i / M, i % M, (mask >> (cells - 1 - i)) & 1U);
    return p;
  };

  MipSolution best;
  int best_flags = std::numeric_limits<int>::max();
  std::uint32_t best_mask = 0;
  bool have = false;
  const std::uint32_t total = std::uint32_t{1} << cells;
  for (std::uint32_t mask = 0; mask < total; ++mask) {
    IndicatorSequence p = pattern(mask);
    VectorXd X = estimate_direct(model, window, IndexSet::reliable(p)).X;
    const double w = objective_w(model, window, X, p, alpha);
    const int flags = std::popcount(mask);
    const bool better = !have || w < best.objective ||
                        (w == best.objective && (flags < best_flags || (flags == best_flags && mask < best_mask)));
    if (better) {
      best = {std::move(p), std::move(X), w};
      best_flags = flags;
      best_mask = mask;
      have = true;
    }
  }
  return best;
}

}  // namespace gbs
