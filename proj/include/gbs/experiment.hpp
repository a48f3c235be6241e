// Experiment configuration, trial orchestration and CSV emission for the
// command-line tool: detection sweeps, the direct-vs-iterative update
// benchmark and the multi-sensor indicator map.
#pragma once

#include "gbs/baselines.hpp"
#include "gbs/direct.hpp"
#include "gbs/estimator.hpp"
#include "gbs/iterative.hpp"
#include "gbs/model.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace gbs::experiment {

using json = nlohmann::json;

// =============================================================================
// Configuration
// =============================================================================

struct DetectorSettings {
  GbsConfig gbs;
  double delta_ref = kDefaultCusumReference;
  double alpha_threshold = 6.0;
};

struct RunSettings {
  int trials = 0;
  std::uint64_t master_seed = 0;
  int parallelism = 1;
  std::string output;  // empty: standard output
  bool timing = false;
};

enum class BenchPattern { timeline, sensor_order, random_insertion };

inline const char* to_string(BenchPattern p) {
  switch (p) {
    case BenchPattern::timeline: return "timeline";
    case BenchPattern::sensor_order: return "sensor";
    case BenchPattern::random_insertion: return "random";
  }
  return "random";
}

inline BenchPattern parse_pattern(const std::string& s) {
  if (s == "timeline") return BenchPattern::timeline;
  if (s == "sensor" || s == "sensor_order") return BenchPattern::sensor_order;
  if (s == "random" || s == "random_insertion") return BenchPattern::random_insertion;
  throw ConfigError("unknown bench pattern '" + s + "' (expected timeline, sensor or random)");
}

struct BenchSettings {
  BenchPattern pattern = BenchPattern::random_insertion;
  double hidden_fraction = 0.05;
  int max_updates = 20;  // 0: the whole schedule
  int reps = 5;
  std::optional<double> epsilon;  // absolute; default is relative to the warm-start objective
};

struct ExperimentConfig {
  std::optional<SystemModel> model;
  int horizon = 0;
  AttackSpec attack;  // zero-based targets
  DetectorSettings detector;
  RunSettings run;
  std::vector<double> intensities{1.0};
  bool has_sweep = false;
  BenchSettings bench;

  const SystemModel& system() const {
    if (!model) throw ConfigError("configuration has no model block");
    return *model;
  }
};

namespace detail {

/// Walks a JSON tree, reporting errors with the dotted key path.
class Reader {
 public:
  Reader(const json& node, std::string path) : node_(node), path_(std::move(path)) {}

  void allow_only(std::initializer_list<const char*> keys) const {
    if (!node_.is_object()) fail("must be an object");
    std::set<std::string> allowed(keys.begin(), keys.end());
    for (auto it = node_.begin(); it != node_.end(); ++it) {
      if (!allowed.count(it.key())) throw ConfigError("unknown key '" + join(it.key()) + "'");
    }
  }

  bool has(const char* key) const { return node_.contains(key) && !node_.at(key).is_null(); }
  Reader child(const char* key) const {
    if (!has(key)) throw ConfigError("missing key '" + join(key) + "'");
    return Reader(node_.at(key), join(key));
  }

  double number() const {
    if (!node_.is_number()) fail("must be a number");
    return node_.get<double>();
  }
  long long integer() const {
    if (!node_.is_number_integer()) fail("must be an integer");
    return node_.get<long long>();
  }
  std::uint64_t unsigned_integer() const {
    if (node_.is_number_unsigned()) return node_.get<std::uint64_t>();
    if (node_.is_number_integer() && node_.get<long long>() >= 0) return static_cast<std::uint64_t>(node_.get<long long>());
    fail("must be a nonnegative integer");
  }
  bool boolean() const {
    if (!node_.is_boolean()) fail("must be true or false");
    return node_.get<bool>();
  }
  std::string string() const {
    if (!node_.is_string()) fail("must be a string");
    return node_.get<std::string>();
  }

  /// A number is read as a length-1 vector.
  VectorXd vector() const {
    if (node_.is_number()) return VectorXd::Constant(1, node_.get<double>());
    if (!node_.is_array()) fail("must be a number or an array of numbers");
    VectorXd v(static_cast<Eigen::Index>(node_.size()));
    for (std::size_t i = 0; i < node_.size(); ++i) v(static_cast<Eigen::Index>(i)) = Reader(node_[i], index(i)).number();
    return v;
  }

  /// Row-major nested arrays; a number is read as 1 × 1.
  MatrixXd matrix() const {
    if (node_.is_number()) return MatrixXd::Constant(1, 1, node_.get<double>());
    if (!node_.is_array() || node_.empty()) fail("must be a non-empty array of rows");
    const std::size_t rows = node_.size();
    std::size_t cols = 0;
    MatrixXd M;
    for (std::size_t i = 0; i < rows; ++i) {
      const VectorXd row = Reader(node_[i], index(i)).vector();
      if (i == 0) {
        cols = static_cast<std::size_t>(row.size());
        M.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
      } else if (static_cast<std::size_t>(row.size()) != cols) {
        fail("rows must all have the same length");
      }
      M.row(static_cast<Eigen::Index>(i)) = row.transpose();
    }
    return M;
  }

  /// Either a list of matrices or a single matrix shared by `count` sensors.
  std::vector<MatrixXd> matrices(std::optional<int> count) const {
    const bool is_list = node_.is_array() && !node_.empty() && node_[0].is_array() && !node_[0].empty() &&
                         node_[0][0].is_array();
    if (is_list) {
      std::vector<MatrixXd> out;
      for (std::size_t i = 0; i < node_.size(); ++i) out.push_back(Reader(node_[i], index(i)).matrix());
      if (count && static_cast<int>(out.size()) != *count) fail("must list exactly M matrices");
      return out;
    }
    if (!count) fail("is a single matrix, so the model block needs M");
    return std::vector<MatrixXd>(static_cast<std::size_t>(*count), matrix());
  }

  [[noreturn]] void fail(const std::string& msg) const { throw ConfigError("'" + path_ + "' " + msg); }

 private:
  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string index(std::size_t i) const { return path_ + "[" + std::to_string(i) + "]"; }

  const json& node_;
  std::string path_;
};

inline int as_int(const Reader& r, long long lo, long long hi) {
  const long long v = r.integer();
  if (v < lo || v > hi) r.fail("must be in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
  return static_cast<int>(v);
}

inline SystemModel parse_model(const Reader& r) {
  r.allow_only({"n", "m", "M", "A", "C", "Q", "R", "P0", "x0_mean"});
  std::optional<int> M;
  if (r.has("M")) M = as_int(r.child("M"), 1, 100000);
  const MatrixXd A = r.child("A").matrix();
  std::vector<MatrixXd> C = r.child("C").matrices(M);
  std::vector<MatrixXd> R = r.child("R").matrices(M ? M : std::optional<int>(static_cast<int>(C.size())));
  const MatrixXd Q = r.child("Q").matrix();
  const MatrixXd P0 = r.child("P0").matrix();
  VectorXd mean;
  if (r.has("x0_mean")) mean = r.child("x0_mean").vector();
  try {
    SystemModel model(A, std::move(C), Q, std::move(R), P0, mean);
    if (r.has("n") && as_int(r.child("n"), 1, 100000) != model.state_dim()) r.fail("n does not match A");
    if (r.has("m") && as_int(r.child("m"), 1, 100000) != model.meas_dim()) r.fail("m does not match C");
    return model;
  } catch (const ModelError& e) {
    throw ConfigError(std::string("'model' ") + e.what());
  }
}

inline AttackKind parse_attack_kind(const Reader& r) {
  const std::string s = r.string();
  if (s == "none") return AttackKind::none;
  if (s == "random_interference") return AttackKind::random_interference;
  if (s == "constant_bias") return AttackKind::constant_bias;
  if (s == "increasing_bias") return AttackKind::increasing_bias;
  r.fail("must be one of none, random_interference, constant_bias, increasing_bias");
}

inline AttackSpec parse_attack(const Reader& r, int sensors) {
  r.allow_only({"kind", "targets", "R_tilde", "mu", "mu_max", "t_start"});
  AttackSpec a;
  a.kind = parse_attack_kind(r.child("kind"));
  if (r.has("targets")) {
    const VectorXd targets = r.child("targets").vector();
    for (Eigen::Index i = 0; i < targets.size(); ++i) {
      const double t = targets(i);
      if (t != std::floor(t) || t < 1 || t > sensors) {
        r.child("targets").fail("entries must be sensor numbers in [1, " + std::to_string(sensors) + "]");
      }
      a.targets.push_back(static_cast<int>(t) - 1);
    }
  }
  if (r.has("R_tilde")) a.R_tilde = r.child("R_tilde").matrix();
  if (r.has("mu")) a.mu = r.child("mu").vector();
  if (r.has("mu_max")) a.mu_max = r.child("mu_max").vector();
  if (r.has("t_start")) a.t_start = as_int(r.child("t_start"), 0, std::numeric_limits<int>::max());
  auto need = [&](bool ok, const char* key) {
    if (!ok) throw ConfigError(std::string("'attack' of this kind needs '") + key + "'");
  };
  switch (a.kind) {
    case AttackKind::random_interference: need(a.R_tilde.size() > 0, "R_tilde"); break;
    case AttackKind::constant_bias: need(a.mu.size() > 0, "mu"); break;
    case AttackKind::increasing_bias: need(a.mu_max.size() > 0, "mu_max"); break;
    case AttackKind::none: break;
  }
  if (a.kind != AttackKind::none && a.targets.empty()) throw ConfigError("'attack.targets' must not be empty");
  return a;
}

inline SolverKind parse_solver(const Reader& r) {
  const std::string s = r.string();
  if (s == "direct") return SolverKind::direct;
  if (s == "iterative") return SolverKind::iterative;
  if (s == "auto") return SolverKind::automatic;
  r.fail("must be direct, iterative or auto");
}

inline DetectorSettings parse_detector(const Reader& r) {
  r.allow_only({"alpha", "tau", "epsilon", "delta_ref", "alpha_threshold", "solver", "max_outer"});
  DetectorSettings d;
  if (r.has("alpha")) d.gbs.alpha = r.child("alpha").number();
  if (r.has("tau")) d.gbs.tau = as_int(r.child("tau"), 0, std::numeric_limits<int>::max());
  if (r.has("epsilon")) d.gbs.epsilon = r.child("epsilon").number();
  if (r.has("max_outer")) d.gbs.max_outer = as_int(r.child("max_outer"), 1, std::numeric_limits<int>::max());
  if (r.has("solver")) d.gbs.solver = parse_solver(r.child("solver"));
  if (r.has("delta_ref")) d.delta_ref = r.child("delta_ref").number();
  // A detector-specific threshold defaults to the GBS penalty.
  d.alpha_threshold = r.has("alpha_threshold") ? r.child("alpha_threshold").number() : d.gbs.alpha;
  try {
    d.gbs.validate();
  } catch (const ModelError& e) {
    throw ConfigError(std::string("'detector' ") + e.what());
  }
  if (!(d.alpha_threshold > 0.0)) r.fail("alpha_threshold must be positive");
  return d;
}

inline RunSettings parse_run(const Reader& r) {
  r.allow_only({"trials", "master_seed", "parallelism", "output", "timing"});
  RunSettings s;
  if (r.has("trials")) s.trials = as_int(r.child("trials"), 0, std::numeric_limits<int>::max());
  if (r.has("master_seed")) s.master_seed = r.child("master_seed").unsigned_integer();
  if (r.has("parallelism")) s.parallelism = as_int(r.child("parallelism"), 0, 4096);
  if (r.has("output")) s.output = r.child("output").string();
  if (r.has("timing")) s.timing = r.child("timing").boolean();
  return s;
}

inline BenchSettings parse_bench(const Reader& r) {
  r.allow_only({"pattern", "hidden_fraction", "max_updates", "reps", "epsilon"});
  BenchSettings b;
  if (r.has("pattern")) b.pattern = parse_pattern(r.child("pattern").string());
  if (r.has("hidden_fraction")) b.hidden_fraction = r.child("hidden_fraction").number();
  if (r.has("max_updates")) b.max_updates = as_int(r.child("max_updates"), 0, std::numeric_limits<int>::max());
  if (r.has("reps")) b.reps = as_int(r.child("reps"), 1, 1000);
  if (r.has("epsilon")) {
    b.epsilon = r.child("epsilon").number();
    if (!(*b.epsilon > 0.0)) r.child("epsilon").fail("must be positive");
  }
  if (!(b.hidden_fraction > 0.0 && b.hidden_fraction < 1.0)) {
    r.child("hidden_fraction").fail("must lie strictly between 0 and 1");
  }
  return b;
}

/// 1-based line and column of a byte offset.
inline std::pair<std::size_t, std::size_t> line_and_column(const std::string& text, std::size_t byte) {
  std::size_t line = 1, col = 1;
  for (std::size_t i = 0; i + 1 < byte && i < text.size(); ++i) {
    if (text[i] == '\n') {
      ++line;
      col = 1;
    } else {
      ++col;
    }
  }
  return {line, col};
}

}  // namespace detail

/// Parse a configuration document. Unknown keys anywhere are errors.
inline ExperimentConfig parse_config(const json& doc) {
  const detail::Reader root(doc, "");
  root.allow_only({"description", "model", "window", "attack", "detector", "run", "sweep", "bench"});
  ExperimentConfig cfg;
  if (root.has("model")) cfg.model = detail::parse_model(root.child("model"));
  if (root.has("window")) {
    const auto w = root.child("window");
    w.allow_only({"N"});
    cfg.horizon = detail::as_int(w.child("N"), 0, 1000000);
  }
  if (root.has("attack")) {
    if (!cfg.model) throw ConfigError("'attack' requires a model block");
    cfg.attack = detail::parse_attack(root.child("attack"), cfg.model->sensor_count());
    try {
      cfg.attack.validate(ObservationWindow(cfg.horizon, cfg.model->sensor_count(), cfg.model->meas_dim()));
    } catch (const ModelError& e) {
      throw ConfigError(std::string("'attack' ") + e.what());
    }
  }
  if (root.has("detector")) cfg.detector = detail::parse_detector(root.child("detector"));
  if (root.has("run")) cfg.run = detail::parse_run(root.child("run"));
  if (root.has("sweep")) {
    const auto s = root.child("sweep");
    s.allow_only({"parameter", "values"});
    if (s.child("parameter").string() != "intensity") s.child("parameter").fail("only 'intensity' can be swept");
    const VectorXd v = s.child("values").vector();
    if (v.size() == 0) s.child("values").fail("must not be empty");
    cfg.intensities.assign(v.data(), v.data() + v.size());
    for (double x : cfg.intensities) {
      if (!(x >= 0.0) || !std::isfinite(x)) s.child("values").fail("must be finite and nonnegative");
      if (x == 0.0 && cfg.attack.kind == AttackKind::random_interference) {
        s.child("values").fail("must be positive for random_interference");
      }
    }
    cfg.has_sweep = true;
  }
  if (root.has("bench")) cfg.bench = detail::parse_bench(root.child("bench"));
  return cfg;
}

inline ExperimentConfig parse_config_text(const std::string& text, const std::string& source = "config") {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    const auto [line, col] = detail::line_and_column(text, e.byte);
    throw ConfigError(source + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + e.what());
  }
  try {
    return parse_config(doc);
  } catch (const ConfigError& e) {
    throw ConfigError(source + ": " + e.what());
  }
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str(), path);
}

// =============================================================================
// Orchestration helpers
// =============================================================================

/// Sub-stream tags so simulation and attack noise never share a seed.
inline constexpr std::uint64_t kSimulationStream = 0x5157'0001;
inline constexpr std::uint64_t kAttackStream = 0x5157'0002;
inline constexpr std::uint64_t kMaskStream = 0x5157'0003;

inline std::uint64_t stream_seed(std::uint64_t master, std::uint64_t stream, std::uint64_t index) {
  return derive_seed(derive_seed(master, stream), index);
}

/**
 * Runs body(i) for i in [0, count) on up to `workers` threads (0: hardware
 * concurrency). Each index is handled exactly once; results must be written to
 * per-index slots by the caller, so ordering is independent of scheduling.
 */
inline void parallel_for(std::size_t count, int workers, const std::function<void(std::size_t)>& body) {
  unsigned threads = workers > 0 ? static_cast<unsigned>(workers) : std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(count, 1)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> pool;
  for (unsigned w = 0; w < threads; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

/// Scale the attack magnitude: R_tilde, mu and mu_max are multiplied by `intensity`.
inline AttackSpec scaled_attack(const AttackSpec& base, double intensity) {
  AttackSpec a = base;
  if (a.R_tilde.size() > 0) a.R_tilde *= intensity;
  if (a.mu.size() > 0) a.mu *= intensity;
  if (a.mu_max.size() > 0) a.mu_max *= intensity;
  return a;
}

/// "%.12g"; non-finite values become empty fields.
inline std::string format_number(double v) {
  if (!std::isfinite(v)) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

inline double elapsed_ms(std::chrono::steady_clock::time_point since) {
  return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - since).count();
}

// =============================================================================
// Detection sweep
// =============================================================================

inline const std::vector<std::string>& detect_methods() {
  static const std::vector<std::string> methods{"chi2", "cusum", "resilient", "gbs"};
  return methods;
}

struct DetectRow {
  std::string method;
  AttackKind kind = AttackKind::none;
  double intensity = 0.0;
  int trials = 0;
  int failed_trials = 0;
  Metrics metrics;  // over the trials that completed
  std::optional<double> mean_runtime_ms;
};

struct MethodOutcome {
  bool ok = false;
  TrialMetrics metrics;
  double runtime_ms = 0.0;
};

/// Runs every method on one attacked window.
inline std::vector<MethodOutcome> run_detect_trial(const ExperimentConfig& cfg, double intensity, int trial) {
  const SystemModel& model = cfg.system();
  const std::uint64_t seed = cfg.run.master_seed;
  const Simulation sim = simulate(model, cfg.horizon, stream_seed(seed, kSimulationStream, trial));
  const AttackSpec attack = scaled_attack(cfg.attack, intensity);
  const ObservationWindow w = apply_attack(sim.window, attack, stream_seed(seed, kAttackStream, trial));
  const auto& d = cfg.detector;

  std::vector<MethodOutcome> out(detect_methods().size());
  auto run = [&](std::size_t slot, const std::function<std::pair<VectorXd, std::vector<bool>>()>& method) {
    const auto start = std::chrono::steady_clock::now();
    try {
      auto [X, alarms] = method();
      out[slot].runtime_ms = elapsed_ms(start);
      out[slot].metrics = evaluate(sim.truth, X, alarms, attack.targets);
      out[slot].ok = true;
    } catch (const std::exception&) {
      out[slot].ok = false;
    }
  };
  const IndexSet full = IndexSet::full(cfg.horizon, model.sensor_count());
  run(0, [&] {
    auto v = chi2_detector(model, w, d.alpha_threshold, d.gbs.tau);
    return std::make_pair(estimate_direct(model, w, full).X, v.alarms);
  });
  run(1, [&] {
    auto v = cusum_detector(model, w, d.delta_ref, d.alpha_threshold, d.gbs.tau);
    return std::make_pair(estimate_direct(model, w, full).X, v.alarms);
  });
  run(2, [&] {
    auto r = resilient_estimator(model, w, d.alpha_threshold, d.gbs.tau);
    return std::make_pair(std::move(r.X), r.verdict.alarms);
  });
  run(3, [&] {
    auto r = gbs_estimate(model, w, d.gbs);
    return std::make_pair(std::move(r.X), r.alarms);
  });
  return out;
}

/**
 * @brief One row per (intensity, method).
 *
 * Trial k uses the same simulation and attack-noise seeds at every intensity,
 * so levels differ only in the attack magnitude. Failed method runs are
 * counted in `failed_trials` and excluded from the rates.
 */
inline std::vector<DetectRow> run_detect(const ExperimentConfig& cfg) {
  cfg.system();
  const auto& methods = detect_methods();
  const std::size_t levels = cfg.intensities.size();
  const std::size_t trials = static_cast<std::size_t>(cfg.run.trials);
  std::vector<std::vector<MethodOutcome>> results(levels * trials);
  parallel_for(levels * trials, cfg.run.parallelism, [&](std::size_t i) {
    results[i] = run_detect_trial(cfg, cfg.intensities[i / trials], static_cast<int>(i % trials));
  });

  std::vector<DetectRow> rows;
  if (trials == 0) return rows;
  for (std::size_t l = 0; l < levels; ++l) {
    for (std::size_t m = 0; m < methods.size(); ++m) {
      DetectRow row;
      row.method = methods[m];
      row.kind = cfg.attack.kind;
      row.intensity = cfg.intensities[l];
      row.trials = static_cast<int>(trials);
      std::vector<TrialMetrics> ok;
      double runtime = 0.0;
      for (std::size_t k = 0; k < trials; ++k) {
        const MethodOutcome& o = results[l * trials + k][m];
        if (!o.ok) {
          ++row.failed_trials;
          continue;
        }
        ok.push_back(o.metrics);
        runtime += o.runtime_ms;
      }
      row.metrics = aggregate(ok);
      if (cfg.run.timing && !ok.empty()) row.mean_runtime_ms = runtime / static_cast<double>(ok.size());
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

inline constexpr const char* kDetectHeader =
    "method,attack_kind,intensity,trials,detection_success_rate,false_alarm_rate,mean_mse,mse_stddev,"
    "mean_runtime_ms,failed_trials";

inline std::string detect_csv(const std::vector<DetectRow>& rows) {
  std::string out = std::string(kDetectHeader) + "\n";
  for (const auto& r : rows) {
    const bool any = r.metrics.trials > 0;
    const double nan = std::numeric_limits<double>::quiet_NaN();
    out += r.method + "," + to_string(r.kind) + "," + format_number(r.intensity) + "," + std::to_string(r.trials) +
           "," + format_number(any ? r.metrics.detection_success_rate : nan) + "," +
           format_number(any ? r.metrics.false_alarm_rate : nan) + "," + format_number(any ? r.metrics.mse : nan) +
           "," + format_number(any ? r.metrics.mse_stddev : nan) + "," +
           (r.mean_runtime_ms ? format_number(*r.mean_runtime_ms) : std::string()) + "," +
           std::to_string(r.failed_trials) + "\n";
  }
  return out;
}

// =============================================================================
// Update benchmark
// =============================================================================

struct BenchRow {
  int step = 0;
  std::string method;
  double wall_time_ms = 0.0;  // median over reps
  std::optional<int> iterations;
  double objective = 0.0;
};

struct BenchSchedule {
  IndexSet initial;
  std::vector<std::vector<Cell>> batches;
};

/// Initial observation set and the cells added at each update step.
inline BenchSchedule bench_schedule(int horizon, int sensors, BenchPattern pattern, double hidden_fraction,
                                    std::uint64_t seed) {
  BenchSchedule s{IndexSet::none(horizon, sensors), {}};
  switch (pattern) {
    case BenchPattern::timeline:
      for (int j = 0; j < sensors; ++j) s.initial.insert({0, j});
      for (int t = 1; t <= horizon; ++t) {
        std::vector<Cell> batch;
        for (int j = 0; j < sensors; ++j) batch.push_back({t, j});
        s.batches.push_back(std::move(batch));
      }
      break;
    case BenchPattern::sensor_order:
      for (int t = 0; t <= horizon; ++t) s.initial.insert({t, 0});
      for (int j = 1; j < sensors; ++j) {
        std::vector<Cell> batch;
        for (int t = 0; t <= horizon; ++t) batch.push_back({t, j});
        s.batches.push_back(std::move(batch));
      }
      break;
    case BenchPattern::random_insertion: {
      if (!(hidden_fraction > 0.0 && hidden_fraction < 1.0)) throw ConfigError("hidden fraction must lie in (0, 1)");
      std::vector<Cell> cells = IndexSet::full(horizon, sensors).entries();
      Rng rng(seed);
      for (std::size_t i = cells.size() - 1; i > 0; --i) std::swap(cells[i], cells[rng.below(i + 1)]);
      const auto hidden = std::max<std::size_t>(
          1, static_cast<std::size_t>(std::llround(hidden_fraction * static_cast<double>(cells.size()))));
      s.initial = IndexSet::full(horizon, sensors);
      for (std::size_t i = 0; i < hidden; ++i) {
        s.initial.erase(cells[i]);
        s.batches.push_back({cells[i]});
      }
      break;
    }
  }
  return s;
}

/**
 * @brief Replays an update schedule with both solvers.
 *
 * Direct: the filter is rerun from the earliest inserted time (earlier steps
 * are reused) and the smoother is rerun. Iterative: proximal gradient
 * warm-started at its previous estimate, using the prebuilt (I + ηH)⁻¹.
 * Each step is timed once as warm-up and then `reps` times; the median is
 * reported.
 */
inline std::vector<BenchRow> run_bench(const ExperimentConfig& cfg, BenchPattern pattern, double hidden_fraction) {
  const SystemModel& model = cfg.system();
  const int N = cfg.horizon;
  const int M = model.sensor_count();
  const std::uint64_t seed = cfg.run.master_seed;
  const Simulation sim = simulate(model, N, stream_seed(seed, kSimulationStream, 0));
  const ObservationWindow& w = sim.window;
  BenchSchedule schedule = bench_schedule(N, M, pattern, hidden_fraction, stream_seed(seed, kMaskStream, 0));
  if (cfg.bench.max_updates > 0 && schedule.batches.size() > static_cast<std::size_t>(cfg.bench.max_updates)) {
    schedule.batches.resize(static_cast<std::size_t>(cfg.bench.max_updates));
  }
  const StackedSystem sys(model, N);

  auto median_time = [&](const std::function<void()>& f) {
    f();  // warm-up
    std::vector<double> times;
    for (int r = 0; r < cfg.bench.reps; ++r) {
      const auto start = std::chrono::steady_clock::now();
      f();
      times.push_back(elapsed_ms(start));
    }
    std::sort(times.begin(), times.end());
    const std::size_t n = times.size();
    return n % 2 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
  };

  std::vector<BenchRow> rows;
  IndexSet O = schedule.initial;
  DirectEstimate direct = estimate_direct(model, w, O);
  VectorXd X_iter = direct.X;
  for (std::size_t k = 0; k < schedule.batches.size(); ++k) {
    const auto& batch = schedule.batches[k];
    int from = N;
    for (const Cell& c : batch) {
      O.insert(c);
      from = std::min(from, c.time);
    }
    const int step = static_cast<int>(k) + 1;

    DirectEstimate next;
    const double t_direct = median_time([&] {
      next.filter = refilter_from(model, w, O, direct.filter, from);
      next.smoother = smooth(model, next.filter);
      next.X = stack_states(next.smoother.x_smooth);
    });
    direct = std::move(next);
    rows.push_back({step, "direct", t_direct, std::nullopt, objective_l(model, w, O, direct.X)});

    IterativeEstimate it;
    const double t_iter = median_time([&] { it = estimate_iterative(model, w, O, sys, X_iter, cfg.bench.epsilon); });
    X_iter = it.X;
    rows.push_back({step, "iterative", t_iter, it.trace.iterations, objective_l(model, w, O, X_iter)});
  }
  return rows;
}

inline constexpr const char* kBenchHeader = "step,method,wall_time_ms,iterations,objective";

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::string out = std::string(kBenchHeader) + "\n";
  for (const auto& r : rows) {
    out += std::to_string(r.step) + "," + r.method + "," + format_number(r.wall_time_ms) + "," +
           (r.iterations ? std::to_string(*r.iterations) : std::string()) + "," + format_number(r.objective) + "\n";
  }
  return out;
}

// =============================================================================
// Multi-sensor indicator map
// =============================================================================

struct MapTrial {
  bool ok = false;
  MatrixXd weighted_error;  // (N+1) × M, ‖y_{t,j} − C_j x_t‖²_{R_j⁻¹} against the true state
  IndicatorSequence indicators;
};

inline std::vector<MapTrial> run_multisensor_map(const ExperimentConfig& cfg) {
  const SystemModel& model = cfg.system();
  const std::uint64_t seed = cfg.run.master_seed;
  std::vector<MapTrial> out(static_cast<std::size_t>(cfg.run.trials));
  parallel_for(out.size(), cfg.run.parallelism, [&](std::size_t k) {
    const Simulation sim = simulate(model, cfg.horizon, stream_seed(seed, kSimulationStream, k));
    const ObservationWindow w = apply_attack(sim.window, cfg.attack, stream_seed(seed, kAttackStream, k));
    MapTrial& trial = out[k];
    trial.weighted_error.resize(w.steps(), w.sensors());
    for (int t = 0; t < w.steps(); ++t)
      for (int j = 0; j < w.sensors(); ++j) trial.weighted_error(t, j) = weighted_residual(model, w, t, j, sim.truth.states[t]);
    try {
      trial.indicators = gbs_estimate(model, w, cfg.detector.gbs).p;
      trial.ok = true;
    } catch (const std::exception&) {
      trial.ok = false;
    }
  });
  return out;
}

inline constexpr const char* kMapHeader = "trial,time,sensor,weighted_error,indicator";

/// Sensors are numbered from 1. Failed trials contribute no rows.
inline std::string multisensor_csv(const std::vector<MapTrial>& trials) {
  std::string out = std::string(kMapHeader) + "\n";
  for (std::size_t k = 0; k < trials.size(); ++k) {
    const MapTrial& tr = trials[k];
    if (!tr.ok) continue;
    for (Eigen::Index t = 0; t < tr.weighted_error.rows(); ++t)
      for (Eigen::Index j = 0; j < tr.weighted_error.cols(); ++j)
        out += std::to_string(k) + "," + std::to_string(t) + "," + std::to_string(j + 1) + "," +
               format_number(tr.weighted_error(t, j)) + "," +
               (tr.indicators.flagged(static_cast<int>(t), static_cast<int>(j)) ? "1" : "0") + "\n";
  }
  return out;
}

// =============================================================================
// Simulation dump
// =============================================================================

/// One row per (time, sensor): observation components, then true state components.
inline std::string simulate_csv(const ExperimentConfig& cfg) {
  const SystemModel& model = cfg.system();
  const std::uint64_t seed = cfg.run.master_seed;
  const Simulation sim = simulate(model, cfg.horizon, stream_seed(seed, kSimulationStream, 0));
  const ObservationWindow w = apply_attack(sim.window, cfg.attack, stream_seed(seed, kAttackStream, 0));
  std::string out = "time,sensor,attacked";
  for (int i = 1; i <= model.meas_dim(); ++i) out += ",y_" + std::to_string(i);
  for (int i = 1; i <= model.state_dim(); ++i) out += ",x_" + std::to_string(i);
  out += "\n";
  for (int t = 0; t < w.steps(); ++t) {
    for (int j = 0; j < w.sensors(); ++j) {
      const bool attacked = cfg.attack.kind != AttackKind::none && cfg.attack.targets_sensor(j) && t >= cfg.attack.t_start;
      out += std::to_string(t) + "," + std::to_string(j + 1) + "," + (attacked ? "1" : "0");
      for (Eigen::Index i = 0; i < w.at(t, j).size(); ++i) out += "," + format_number(w.at(t, j)(i));
      for (Eigen::Index i = 0; i < sim.truth.states[t].size(); ++i) out += "," + format_number(sim.truth.states[t](i));
      out += "\n";
    }
  }
  return out;
}

}  // namespace gbs::experiment
