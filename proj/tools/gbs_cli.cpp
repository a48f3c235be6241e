// gbs: run the estimation experiments from a JSON configuration.
//
//   gbs simulate    --config c.json [--seed S] [--out f.csv]
//   gbs detect      --config c.json [--seed S] [--out f.csv] [--workers K] [--timing]
//   gbs bench       --config c.json [--pattern timeline|sensor|random] [--hidden-fraction F]
//   gbs multisensor --config c.json [--seed S] [--out f.csv] [--workers K]
//
// Exit status: 0 success, 2 configuration or usage error, 3 runtime error.
// Failures print one JSON object to stderr: {"error": "...", "message": "..."}.

#include "gbs/experiment.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

namespace {

using gbs::experiment::ExperimentConfig;

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

int report(const char* kind, const std::string& message, int code) {
  std::cerr << nlohmann::json{{"error", kind}, {"message", message}}.dump() << std::endl;
  return code;
}

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::optional<int> workers;
};

void add_common(CLI::App* cmd, CommonOptions& o, bool with_workers) {
  cmd->add_option("--config", o.config, "JSON experiment configuration")->required();
  cmd->add_option("--seed", o.seed, "Master seed (overrides run.master_seed)");
  cmd->add_option("--out", o.out, "Output CSV path (overrides run.output; default stdout)");
  if (with_workers) cmd->add_option("--workers", o.workers, "Worker threads, 0 for all cores")->check(CLI::NonNegativeNumber);
}

ExperimentConfig load(const CommonOptions& o) {
  ExperimentConfig cfg = gbs::experiment::load_config(o.config);
  if (o.seed) cfg.run.master_seed = *o.seed;
  if (o.workers) cfg.run.parallelism = *o.workers;
  if (!o.out.empty()) cfg.run.output = o.out;
  return cfg;
}

/// Output file, opened before any work so an unwritable path fails fast.
class Sink {
 public:
  explicit Sink(const ExperimentConfig& cfg) : path_(cfg.run.output) {
    if (to_stdout()) return;
    file_.open(path_, std::ios::binary);
    if (!file_) throw std::runtime_error("cannot write '" + path_ + "'");
  }

  void write(const std::string& csv) {
    if (to_stdout()) {
      std::cout << csv;
      std::cout.flush();
      return;
    }
    file_ << csv;
    file_.flush();
    if (!file_) throw std::runtime_error("write to '" + path_ + "' failed");
  }

 private:
  bool to_stdout() const { return path_.empty() || path_ == "-"; }

  std::string path_;
  std::ofstream file_;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Gaussian-Bernoulli secure state estimation experiments"};
  app.require_subcommand(1);

  CommonOptions sim_opts, det_opts, bench_opts, map_opts;
  bool timing = false;
  std::optional<std::string> pattern;
  std::optional<double> hidden_fraction;

  auto* sim_cmd = app.add_subcommand("simulate", "Simulate one attacked window and dump it as CSV");
  add_common(sim_cmd, sim_opts, false);
  auto* det_cmd = app.add_subcommand("detect", "Detector/estimator comparison over an intensity sweep");
  add_common(det_cmd, det_opts, true);
  det_cmd->add_flag("--timing", timing, "Fill mean_runtime_ms (makes output machine dependent)");
  auto* bench_cmd = app.add_subcommand("bench", "Direct vs iterative update timing");
  add_common(bench_cmd, bench_opts, false);
  bench_cmd->add_option("--pattern", pattern, "timeline, sensor or random");
  bench_cmd->add_option("--hidden-fraction", hidden_fraction, "Hidden share for the random pattern, in (0, 1)");
  auto* map_cmd = app.add_subcommand("multisensor", "Per-cell true error and estimated indicator map");
  add_common(map_cmd, map_opts, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report("usage", e.what(), kExitConfig);
  }

  try {
    if (*sim_cmd) {
      const auto cfg = load(sim_opts);
      Sink sink(cfg);
      sink.write(gbs::experiment::simulate_csv(cfg));
    } else if (*det_cmd) {
      auto cfg = load(det_opts);
      cfg.run.timing = cfg.run.timing || timing;
      Sink sink(cfg);
      sink.write(gbs::experiment::detect_csv(gbs::experiment::run_detect(cfg)));
    } else if (*bench_cmd) {
      auto cfg = load(bench_opts);
      if (pattern) cfg.bench.pattern = gbs::experiment::parse_pattern(*pattern);
      if (hidden_fraction) {
        if (!(*hidden_fraction > 0.0 && *hidden_fraction < 1.0)) {
          throw gbs::ConfigError("--hidden-fraction must lie strictly between 0 and 1");
        }
        cfg.bench.hidden_fraction = *hidden_fraction;
      }
      Sink sink(cfg);
      sink.write(gbs::experiment::bench_csv(
                    gbs::experiment::run_bench(cfg, cfg.bench.pattern, cfg.bench.hidden_fraction)));
    } else if (*map_cmd) {
      const auto cfg = load(map_opts);
      Sink sink(cfg);
      sink.write(gbs::experiment::multisensor_csv(gbs::experiment::run_multisensor_map(cfg)));
    }
  } catch (const gbs::ConfigError& e) {
    return report("config", e.what(), kExitConfig);
  } catch (const std::exception& e) {
    return report("runtime", e.what(), kExitRuntime);
  }
  return 0;
}
