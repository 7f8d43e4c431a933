#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "harness/config.hpp"
#include "harness/plot.hpp"
#include "simulator/env.hpp"

namespace nlimb::harness {

namespace fs = std::filesystem;

const char* code_version();

// Objects derived from a config.
struct Experiment {
  ExperimentConfig config;
  grammar::Grammar grammar;
  train::Setup setup;
  control::Controller controller;
  design::DesignModel model;
};

Experiment make_experiment(const ExperimentConfig& c);

// $NLIMB_OUTPUT_ROOT, else ./runs.
fs::path default_output_root();
// The configured output, or <root>/<algorithm>-<task>-seed<seed>-<hash>.
fs::path run_directory(const ExperimentConfig& c);

// Run directory layout.
inline fs::path manifest_path(const fs::path& dir) { return dir / "manifest.json"; }
inline fs::path metrics_path(const fs::path& dir) { return dir / "metrics.jsonl"; }
inline fs::path checkpoint_dir(const fs::path& dir) { return dir / "checkpoints"; }
inline fs::path designs_dir(const fs::path& dir) { return dir / "designs"; }
inline fs::path plots_dir(const fs::path& dir) { return dir / "plots"; }
inline fs::path results_path(const fs::path& dir) { return dir / "results.json"; }
inline fs::path generalization_path(const fs::path& dir) { return dir / "generalization.json"; }

struct Manifest {
  ExperimentConfig config;
  std::string config_hash;
  std::string code_version;
  bool completed = false;
};

Manifest read_manifest(const fs::path& dir);

// Checkpoints sorted by iteration.
std::vector<std::pair<std::uint64_t, fs::path>> list_checkpoints(const fs::path& dir);

using LogFn = std::function<void(const std::string&)>;

struct TrainOptions {
  std::uint64_t stop_after_iterations = 0;  // 0: run to the budget; otherwise leave the run incomplete
  LogFn log;
};

struct TrainSummary {
  fs::path dir;
  bool resumed = false;
  bool completed = false;
  std::uint64_t iterations = 0;
  std::uint64_t T = 0;
  std::vector<std::string> warnings;
};

// Creates (or resumes) the run directory and executes the configured
// algorithm. Refuses a completed directory or one made by another config.
TrainSummary train_run(const ExperimentConfig& c, const TrainOptions& opt = {});

struct EvalSummary {
  train::EvalResult result;
  fs::path checkpoint;
  std::string signature;
};

// `checkpoint` empty: latest in the run; `design_file` empty: the run's final
// design, else the greedy design of the checkpoint's distribution.
EvalSummary eval_run(const fs::path& run_dir, const std::string& checkpoint, const std::string& design_file,
                     std::size_t episodes, std::optional<std::uint64_t> seed);

// Distribution parameters: from a checkpoint (explicit or the latest of a run
// directory) or the initial phi of `c` when both are empty.
ad::ParamSet load_phi(const Experiment& e, const fs::path& run_dir, const std::string& checkpoint);

// {"designs": [...]} with k documents sampled with `seed`.
std::string sample_designs(const Experiment& e, const ad::ParamSet& phi, std::size_t k, std::uint64_t seed);
std::string export_greedy(const Experiment& e, const ad::ParamSet& phi);

// Renders plots/reward.svg (and generalization.svg when present) for each run
// into `out_dir`; with several runs the curves share one figure. Returns the
// files written.
std::vector<fs::path> plot_runs(const std::vector<fs::path>& runs, const fs::path& out_dir);

// Single environment over a design document, for external drivers.
sim::Environment make_environment(const Experiment& e, const std::string& design_document_text);

}  // namespace nlimb::harness
