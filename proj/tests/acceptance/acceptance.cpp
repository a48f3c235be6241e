// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero when any criterion fails. Every tolerance is fixed below.
#include "../oracles.hpp"
#include "gbs/experiment.hpp"
#include "gbs/gbs.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

using namespace gbs;
using Eigen::MatrixXd;
using Eigen::VectorXd;

namespace {

// --- tolerances -------------------------------------------------------------
constexpr double kSolverAgreeAbs = 1e-6;      // direct vs cold iterative, max-abs
constexpr double kOracleRel = 1e-8;           // both solvers vs batch normal equations
constexpr double kIterativeRelEps = 1e-12;    // relative stop threshold for the cold start
constexpr double kSolverBudgetSeconds = 30.0;
constexpr double kGainIdentityAbs = 1e-9;
constexpr double kRateSlackRel = 1e-9;
constexpr double kExtendedStop = 1e-6;       // relative to ε, for measuring iterations to ε-suboptimality
constexpr double kGradientRel = 1e-5;
constexpr double kMonotoneSlack = 1e-10;
constexpr int kMaxOuter = 50;
constexpr double kFloorTol = 1e-9;
constexpr double kOptimalFraction = 0.90;
constexpr double kTrendSigmas = 3.0;
constexpr double kTrendBudgetSeconds = 600.0;
constexpr double kSeparationSEs = 3.0;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double rel_inf(const VectorXd& a, const VectorXd& b) {
  return (a - b).cwiseAbs().maxCoeff() / std::max(1.0, b.cwiseAbs().maxCoeff());
}

// 1 ---------------------------------------------------------------------------
Outcome solver_equivalence() {
  Rng rng(1001);
  const auto t0 = std::chrono::steady_clock::now();
  double worst_agree = 0.0, worst_direct = 0.0, worst_iter = 0.0;
  for (int i = 0; i < 100; ++i) {
    const int n = 1 + static_cast<int>(rng.below(3));
    const int m = 1 + static_cast<int>(rng.below(2));
    const int sensors = 1 + static_cast<int>(rng.below(3));
    const int N = 1 + static_cast<int>(rng.below(20));
    const double density = 0.1 + 0.8 * rng.uniform();
    const SystemModel model = oracle::random_model(rng, n, m, sensors, 0.95, i % 2 == 1);
    const Simulation sim = simulate(model, N, 5000 + i);
    const IndexSet O = oracle::random_index_set(rng, N, sensors, density);
    const VectorXd direct = estimate_direct(model, sim.window, O).X;
    const StackedSystem sys(model, N);
    const VectorXd X0 = VectorXd::Zero(sys.dim());
    const double eps = default_epsilon(objective_l(model, sim.window, O, X0), kIterativeRelEps);
    const VectorXd iter = estimate_iterative(model, sim.window, O, sys, X0, eps).X;
    const VectorXd batch = oracle::batch_solve(model, sim.window, O);
    worst_agree = std::max(worst_agree, (direct - iter).cwiseAbs().maxCoeff());
    worst_direct = std::max(worst_direct, rel_inf(direct, batch));
    worst_iter = std::max(worst_iter, rel_inf(iter, batch));
  }
  const double elapsed = seconds_since(t0);
  return {worst_agree < kSolverAgreeAbs && worst_direct < kOracleRel && worst_iter < kOracleRel &&
              elapsed < kSolverBudgetSeconds,
          "max|direct-iterative|=" + fmt("%.3g", worst_agree) + " direct-vs-batch=" + fmt("%.3g", worst_direct) +
              " iterative-vs-batch=" + fmt("%.3g", worst_iter) + " time=" + fmt("%.1f", elapsed) + "s"};
}

// 2 ---------------------------------------------------------------------------
Outcome gain_structure() {
  Rng rng(1002);
  double worst = 0.0;
  long nonzero_excluded = 0;
  for (int i = 0; i < 50; ++i) {
    const int n = 1 + static_cast<int>(rng.below(3));
    const int m = 1 + static_cast<int>(rng.below(2));
    const int sensors = 1 + static_cast<int>(rng.below(3));
    const int N = 1 + static_cast<int>(rng.below(10));
    const SystemModel model = oracle::random_model(rng, n, m, sensors);
    const Simulation sim = simulate(model, N, 6000 + i);
    const IndexSet O = oracle::random_index_set(rng, N, sensors, 0.2 + 0.6 * rng.uniform());
    const DirectEstimate est = estimate_direct(model, sim.window, O);
    const StackedGain g = build_stacked_gain(model, est.filter, est.smoother);
    worst = std::max(worst, oracle::max_abs(g.L * g.L_star - MatrixXd::Identity(g.L.rows(), g.L.cols())));
    for (int t = 0; t <= N; ++t)
      for (int j = 0; j < sensors; ++j)
        if (!O.contains(t, j)) {
          const Eigen::Index col = (static_cast<Eigen::Index>(t) * sensors + j) * m;
          nonzero_excluded += (g.K.middleCols(col, m).array() != 0.0).count();
        }
  }
  return {worst < kGainIdentityAbs && nonzero_excluded == 0,
          "max|L L* - I|=" + fmt("%.3g", worst) + " nonzero excluded entries=" + std::to_string(nonzero_excluded)};
}

// 3 ---------------------------------------------------------------------------
Outcome linear_rate() {
  Rng rng(1003);
  double worst_excess = -1e300;
  int violations = 0;
  for (int i = 0; i < 20; ++i) {
    const int n = 1 + static_cast<int>(rng.below(3));
    const int sensors = 1 + static_cast<int>(rng.below(3));
    const int N = 2 + static_cast<int>(rng.below(15));
    const SystemModel model = oracle::random_model(rng, n, 1, sensors);
    const Simulation sim = simulate(model, N, 7000 + i);
    const IndexSet O = i % 4 == 0 ? IndexSet::full(N, sensors) : oracle::random_index_set(rng, N, sensors, 0.6);
    const double L_star = objective_l(model, sim.window, O, estimate_direct(model, sim.window, O).X);
    const StackedSystem sys(model, N);
    const ConvergenceParams p = convergence_params(model, sys, O);
    const VectorXd X0 = VectorXd::Zero(sys.dim());
    const auto trace = estimate_iterative(model, sim.window, O, sys, X0, default_epsilon(L_star, 1e-12)).trace;
    const double gap0 = trace.objective[0] - L_star;
    for (std::size_t t = 0; t < trace.objective.size(); ++t) {
      const double bound = std::pow(1.0 - p.theta, static_cast<double>(t)) * gap0;
      const double excess = (trace.objective[t] - L_star) - bound;
      worst_excess = std::max(worst_excess, excess / (1.0 + std::abs(L_star)));
      if (excess > kRateSlackRel * (1.0 + std::abs(L_star))) ++violations;
    }
  }
  return {violations == 0,
          "violating iterates=" + std::to_string(violations) + " worst relative excess=" + fmt("%.3g", worst_excess)};
}

// 4 ---------------------------------------------------------------------------
Outcome warm_start_bound() {
  Rng rng(1004);
  int within = 0;
  int total = 0;
  int worst_ratio_obs = 0, worst_ratio_bound = 1;
  int stop_test_over = 0;
  for (int i = 0; i < 100; ++i) {
    const int sensors = 1 + static_cast<int>(rng.below(2));
    const int N = 1 + static_cast<int>(rng.below(10));
    const SystemModel model = oracle::random_model(rng, 1, 1, sensors);
    const Simulation sim = simulate(model, N, 8000 + i);
    IndexSet O = oracle::random_index_set(rng, N, sensors, 0.5);
    std::vector<Cell> missing;
    for (int t = 0; t <= N; ++t)
      for (int j = 0; j < sensors; ++j)
        if (!O.contains(t, j)) missing.push_back({t, j});
    // A full O ∪ {k} makes θ = 1 for a scalar state, outside the bound's domain.
    while (missing.size() < 2) {
      const Cell c{static_cast<int>(rng.below(N + 1)), static_cast<int>(rng.below(sensors))};
      if (!O.contains(c)) continue;
      O.erase(c);
      missing.push_back(c);
    }
    const Cell k = missing[rng.below(missing.size())];
    const DirectEstimate before = estimate_direct(model, sim.window, O);
    IndexSet grown = O;
    grown.insert(k);
    const StackedSystem sys(model, N);
    const ConvergenceParams p = convergence_params(model, sys, grown);
    const double eps = default_epsilon(objective_l(model, sim.window, grown, before.X));
    const IterateTrace trace = estimate_iterative(model, sim.window, grown, sys, before.X, eps).trace;
    // The iterates do not depend on the stop threshold, so a tighter one only extends the same sequence.
    const IterateTrace extended =
        estimate_iterative(model, sim.window, grown, sys, before.X, kExtendedStop * eps).trace;
    const int bound = iteration_bound(p, before.smoother.x_smooth[k.time], before.smoother.P_smooth[k.time],
                                      sim.window.at(k.time, k.sensor), model.C(k.sensor), model.R(k.sensor), eps);
    // Iterations until L(X^t) − L(X*) < ε, the stop test the bound refers to.
    const double L_star = objective_l(model, sim.window, grown, estimate_direct(model, sim.window, grown).X);
    int observed = std::numeric_limits<int>::max();
    for (std::size_t t = 0; t < extended.objective.size(); ++t)
      if (extended.objective[t] - L_star < eps) {
        observed = static_cast<int>(t);
        break;
      }
    stop_test_over += trace.iterations > bound ? 1 : 0;
    ++total;
    if (observed <= bound) {
      ++within;
      if (bound > 0 && static_cast<double>(observed) / bound >
                           static_cast<double>(worst_ratio_obs) / std::max(1, worst_ratio_bound)) {
        worst_ratio_obs = observed;
        worst_ratio_bound = bound;
      }
    }
  }
  return {within == total, std::to_string(within) + "/" + std::to_string(total) +
                               " within bound; tightest observed/bound=" + std::to_string(worst_ratio_obs) + "/" +
                               std::to_string(worst_ratio_bound) + "; successive-difference stop count over bound in " +
                               std::to_string(stop_test_over) + " cases"};
}

// 5 ---------------------------------------------------------------------------
Outcome gradient_check() {
  Rng rng(1005);
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const int n = 1 + static_cast<int>(rng.below(3));
    const int sensors = 1 + static_cast<int>(rng.below(3));
    const int N = 1 + static_cast<int>(rng.below(8));
    const SystemModel model = oracle::random_model(rng, n, 1 + static_cast<int>(rng.below(2)), sensors);
    const Simulation sim = simulate(model, N, 9000 + i);
    const IndexSet O = oracle::random_index_set(rng, N, sensors, 0.6);
    VectorXd X(static_cast<Eigen::Index>(N + 1) * n);
    for (Eigen::Index k = 0; k < X.size(); ++k) X(k) = rng.normal();
    const DataTerm f(model, sim.window, O);
    const VectorXd fd = oracle::central_difference([&](const VectorXd& Z) { return -f.value(Z); }, X, 1e-5);
    const VectorXd g = 2.0 * grad_f(model, sim.window, O, X);
    worst = std::max(worst, (g - fd).norm() / std::max(1.0, fd.norm()));
  }
  return {worst < kGradientRel, "worst relative difference=" + fmt("%.3g", worst)};
}

// Two-sensor detection setups shared by 6 and 8.
std::vector<experiment::ExperimentConfig> detect_configs(const std::string& dir) {
  return {experiment::load_config(dir + "/detect_random_interference.json"),
          experiment::load_config(dir + "/detect_constant_bias.json"),
          experiment::load_config(dir + "/detect_increasing_bias.json")};
}

// 6 ---------------------------------------------------------------------------
Outcome gbs_convergence(const std::string& dir) {
  const auto configs = detect_configs(dir);
  Rng rng(1006);
  int bad_trace = 0, too_long = 0, failed = 0, max_outer = 0;
  for (int i = 0; i < 500; ++i) {
    const auto& cfg = configs[i % 3];
    const double level = cfg.intensities[rng.below(cfg.intensities.size())];
    const SystemModel& model = cfg.system();
    const Simulation sim = simulate(model, cfg.horizon, 10000 + i);
    const ObservationWindow w =
        apply_attack(sim.window, experiment::scaled_attack(cfg.attack, level), 20000 + static_cast<std::uint64_t>(i));
    GbsConfig gc = cfg.detector.gbs;
    gc.max_outer = kMaxOuter;
    try {
      const GbsResult r = gbs_estimate(model, w, gc);
      for (std::size_t k = 1; k < r.trace.size(); ++k) {
        if (r.trace[k] > r.trace[k - 1] + kMonotoneSlack * (1.0 + std::abs(r.trace[k - 1]))) {
          ++bad_trace;
          break;
        }
      }
      max_outer = std::max(max_outer, r.outer_iters);
      if (r.outer_iters > kMaxOuter) ++too_long;
    } catch (const GbsConvergenceError&) {
      ++too_long;
    } catch (const std::exception&) {
      ++failed;
    }
  }
  return {bad_trace == 0 && too_long == 0 && failed == 0,
          "non-monotone=" + std::to_string(bad_trace) + " over-cap=" + std::to_string(too_long) +
              " errors=" + std::to_string(failed) + " max outer iterations=" + std::to_string(max_outer)};
}

// 7 ---------------------------------------------------------------------------
Outcome optimality_floor() {
  Rng rng(1007);
  int below = 0, equal = 0;
  const int total = 500;
  for (int i = 0; i < total; ++i) {
    const int N = 1 + static_cast<int>(rng.below(8));
    const SystemModel model = oracle::random_model(rng, 1, 1, 1);
    const Simulation sim = simulate(model, N, 30000 + i);
    ObservationWindow w = sim.window;
    for (int t = 0; t <= N; ++t)
      if (rng.uniform() < 0.3) w.at(t, 0)(0) += (rng.uniform() < 0.5 ? -1.0 : 1.0) * (2.0 + 6.0 * rng.uniform());
    GbsConfig gc;
    gc.alpha = 6.0;
    gc.solver = SolverKind::direct;
    const double ours = gbs_estimate(model, w, gc).objective;
    const double best = brute_force_mip(model, w, gc.alpha).objective;
    const double tol = kFloorTol * (1.0 + std::abs(best));
    if (ours < best - tol) ++below;
    if (std::abs(ours - best) <= tol) ++equal;
  }
  const double fraction = static_cast<double>(equal) / total;
  return {below == 0 && fraction >= kOptimalFraction,
          "below floor=" + std::to_string(below) + " global optimum reached in " + fmt("%.3f", fraction) +
              " of instances"};
}

// 8 ---------------------------------------------------------------------------
Outcome trend_reproduction(const std::string& dir) {
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::string> problems;
  std::ostringstream summary;
  for (auto cfg : detect_configs(dir)) {
    cfg.run.trials = 1000;
    cfg.detector.gbs.alpha = 6.0;
    cfg.detector.gbs.tau = 3;
    cfg.horizon = 20;
    if (cfg.intensities.size() != 6) problems.push_back("sweep does not have 6 levels");
    const auto rows = experiment::run_detect(cfg);
    auto row = [&](std::size_t level, const std::string& method) -> const experiment::DetectRow& {
      for (const auto& r : rows)
        if (r.intensity == cfg.intensities[level] && r.method == method) return r;
      throw std::runtime_error("missing row");
    };
    const std::string kind = to_string(cfg.attack.kind);
    const std::size_t top = cfg.intensities.size() - 1;
    summary << kind << " gbs rate";
    for (std::size_t l = 0; l <= top; ++l) {
      const double p = row(l, "gbs").metrics.detection_success_rate;
      summary << " " << fmt("%.3f", p);
      if (l == 0) continue;
      const double q = row(l - 1, "gbs").metrics.detection_success_rate;
      const double n = row(l, "gbs").metrics.trials;
      const double sigma = std::sqrt(q * (1 - q) / n + p * (1 - p) / n);
      if (p < q - kTrendSigmas * sigma) problems.push_back(kind + ": detection drops at level " + std::to_string(l));
    }
    summary << ";";
    if (cfg.attack.kind == AttackKind::constant_bias || cfg.attack.kind == AttackKind::increasing_bias) {
      for (std::size_t l = top - 1; l <= top; ++l) {
        const double ours = row(l, "gbs").metrics.mse;
        const double plain = row(l, "chi2").metrics.mse;  // full-observation smoother
        summary << " mse " << fmt("%.3g", ours) << " vs " << fmt("%.3g", plain) << ";";
        if (!(ours < plain)) problems.push_back(kind + ": GBS MSE not below smoother at level " + std::to_string(l));
      }
    }
    if (cfg.attack.kind == AttackKind::random_interference) {
      const double ours = row(top, "gbs").metrics.detection_success_rate;
      const double chi2 = row(top, "chi2").metrics.detection_success_rate;
      summary << " top rate gbs " << fmt("%.3f", ours) << " vs chi2 " << fmt("%.3f", chi2) << ";";
      if (!(ours >= chi2)) problems.push_back("random_interference: GBS detection below chi2 at top level");
    }
    summary << " ";
  }
  const double elapsed = seconds_since(t0);
  if (elapsed >= kTrendBudgetSeconds) problems.push_back("over time budget");
  std::string detail = summary.str() + "time=" + fmt("%.1f", elapsed) + "s";
  for (const auto& p : problems) detail += " [" + p + "]";
  return {problems.empty(), detail};
}

// 9 ---------------------------------------------------------------------------
Outcome benchmark_trend(const std::string& dir) {
  const auto cfg = experiment::load_config(dir + "/bench.json");
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };
  auto column = [](const std::vector<experiment::BenchRow>& rows, const std::string& method, bool iterations) {
    std::vector<double> out;
    for (const auto& r : rows)
      if (r.method == method) out.push_back(iterations ? static_cast<double>(r.iterations.value_or(0)) : r.wall_time_ms);
    return out;
  };
  const auto sparse_hidden = experiment::run_bench(cfg, experiment::BenchPattern::random_insertion, 0.05);
  const double t_direct = median(column(sparse_hidden, "direct", false));
  const double t_iter = median(column(sparse_hidden, "iterative", false));
  const double it_dense = median(column(experiment::run_bench(cfg, experiment::BenchPattern::random_insertion, 0.25),
                                        "iterative", true));
  const double it_sparse = median(column(experiment::run_bench(cfg, experiment::BenchPattern::random_insertion, 0.75),
                                         "iterative", true));
  return {t_iter < t_direct && it_dense < it_sparse,
          "median ms direct=" + fmt("%.3f", t_direct) + " iterative=" + fmt("%.3f", t_iter) +
              "; median iterations at 75% observed=" + fmt("%.1f", it_dense) + " at 25% observed=" +
              fmt("%.1f", it_sparse)};
}

// 10 --------------------------------------------------------------------------
Outcome multisensor_separation(const std::string& dir) {
  const auto cfg = experiment::load_config(dir + "/multisensor.json");
  const auto trials = experiment::run_multisensor_map(cfg);
  std::vector<double> attacked, clean;
  int failed = 0;
  for (const auto& tr : trials) {
    if (!tr.ok) {
      ++failed;
      continue;
    }
    for (int j = 0; j < tr.indicators.sensors(); ++j) {
      double count = 0.0;
      for (int t = 0; t <= tr.indicators.horizon(); ++t) count += tr.indicators.flagged(t, j) ? 1.0 : 0.0;
      (cfg.attack.targets_sensor(j) ? attacked : clean).push_back(count);
    }
  }
  auto mean_var = [](const std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return std::make_pair(mean, ss / static_cast<double>(v.size() - 1));
  };
  if (attacked.size() < 2 || clean.size() < 2) return {false, "not enough completed trials"};
  const auto [ma, va] = mean_var(attacked);
  const auto [mc, vc] = mean_var(clean);
  const double se = std::sqrt(va / attacked.size() + vc / clean.size());
  return {failed == 0 && ma - mc > kSeparationSEs * se,
          "mean flags attacked=" + fmt("%.3f", ma) + " clean=" + fmt("%.3f", mc) + " pooled SE=" + fmt("%.4f", se) +
              " trials=" + std::to_string(trials.size()) + " failed=" + std::to_string(failed)};
}

// 11 --------------------------------------------------------------------------
std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Outcome determinism(const std::string& dir, const std::string& cli, const std::filesystem::path& work) {
  std::filesystem::create_directories(work);
  const auto config = work / "determinism.json";
  {
    std::string text = slurp(dir + "/detect_random_interference.json");
    const std::string from = "\"trials\": 1000";
    const auto pos = text.find(from);
    if (pos == std::string::npos) return {false, "could not prepare the config"};
    text.replace(pos, from.size(), "\"trials\": 150");
    std::ofstream(config) << text;
  }
  std::vector<std::string> outputs;
  for (int workers : {1, 4, 1}) {
    const auto out = work / ("detect_w" + std::to_string(workers) + "_" + std::to_string(outputs.size()) + ".csv");
    const std::string cmd = "\"" + cli + "\" detect --config \"" + config.string() + "\" --seed 77 --workers " +
                            std::to_string(workers) + " --out \"" + out.string() + "\"";
    if (std::system(cmd.c_str()) != 0) return {false, "CLI failed: " + cmd};
    outputs.push_back(slurp(out));
  }
  const bool same = outputs[0] == outputs[1] && outputs[1] == outputs[2] && !outputs[0].empty();
  return {same, std::string(same ? "identical" : "different") + " output across --workers 1/4/1 (" +
                    std::to_string(outputs[0].size()) + " bytes)"};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 4) {
    std::cerr << "usage: acceptance <configs-dir> <cli-binary> <work-dir> [criterion...]\n";
    return 2;
  }
  const std::string dir = argv[1];
  const std::string cli = argv[2];
  const std::filesystem::path work = argv[3];
  std::vector<int> only;
  for (int i = 4; i < argc; ++i) only.push_back(std::atoi(argv[i]));

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"solver equivalence", solver_equivalence},
      {"stacked gain structure", gain_structure},
      {"linear convergence rate", linear_rate},
      {"warm-start iteration bound", warm_start_bound},
      {"gradient check", gradient_check},
      {"alternation convergence", [&] { return gbs_convergence(dir); }},
      {"global optimality floor", optimality_floor},
      {"detection trend reproduction", [&] { return trend_reproduction(dir); }},
      {"update benchmark trend", [&] { return benchmark_trend(dir); }},
      {"multi-sensor separation", [&] { return multisensor_separation(dir); }},
      {"determinism", [&] { return determinism(dir, cli, work); }},
  };
  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << " " << id << " " << criteria[i].first << ": " << o.detail
              << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
