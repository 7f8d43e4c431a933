#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "autodiff/optim.hpp"
#include "controller/controller.hpp"
#include "design_model/design_model.hpp"
#include "simulator/env.hpp"

namespace nlimb::train {

struct TrainConfig {
  std::uint64_t budget = 5'000'000;  // total control steps
  std::uint64_t warmup = 500'000;    // T0: phi is frozen while T <= T0
  std::size_t designs_per_iter = 16;
  std::size_t steps_per_design = 2048;
  double gamma = 0.99;
  double lambda = 0.95;
  double clip = 0.2;
  std::size_t epochs = 4;
  std::size_t minibatch = 4096;
  double lr_theta = 3e-4;
  double lr_phi = 1e-2;
  double entropy_coef = 0.01;
  double value_coef = 0.5;
  double max_grad_norm = 0.5;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  std::size_t checkpoint_every = 10;  // iterations; 0 disables periodic checkpoints
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

void validate(const TrainConfig& c);

// Everything a run needs besides its mutable state.
struct Setup {
  TrainConfig train;
  sim::EnvConfig env;
  control::ControllerConfig controller;
  design::DesignModelConfig design;
};

// ---------------------------------------------------------------------------
// Rollouts

struct Step {
  sim::Observation obs;
  std::vector<double> action;  // pre-squash Gaussian sample, one per DoF
  double log_prob = 0.0;
  double value = 0.0;
  double reward = 0.0;
  bool terminated = false;  // fell or diverged: bootstrap 0
  bool truncated = false;   // horizon or end of the rollout: bootstrap from `bootstrap`
  double bootstrap = 0.0;
};

struct DesignRollout {
  std::size_t design = 0;  // index into the design list
  control::DesignLayout layout;
  std::vector<Step> steps;
  std::vector<double> episode_returns;  // completed episodes (fell or reached the horizon)
  double partial_return = 0.0;          // the episode cut by the end of the rollout
  bool flagged = false;                 // no completed episode; mean_return is the partial one
  int divergences = 0;
  double mean_return = 0.0;
};

struct RolloutBatch {
  std::vector<DesignRollout> designs;
  std::uint64_t timesteps = 0;
};

struct PolicyRef {
  const control::Controller* controller;
  const ad::ParamSet* theta;
  const control::ObsNormalizer* norm;
};

// Each design runs exactly t control steps with auto-reset. Workers take
// contiguous blocks of designs; results do not depend on the partition.
RolloutBatch collect_rollouts(const PolicyRef& policy, const std::vector<grammar::DesignGraph>& designs,
                              const sim::EnvConfig& env, std::size_t t, std::uint64_t seed, std::size_t workers);

// ---------------------------------------------------------------------------
// PPO

// Per-step arrays of one trajectory segment; bootstrap is read where truncated.
void compute_gae(const std::vector<double>& rewards, const std::vector<double>& values,
                 const std::vector<bool>& terminated, const std::vector<bool>& truncated,
                 const std::vector<double>& bootstrap, double gamma, double lambda, std::vector<double>& advantages,
                 std::vector<double>& targets);

struct PpoStats {
  double policy_loss = 0.0, value_loss = 0.0, entropy = 0.0;
  double approx_kl = 0.0, clip_fraction = 0.0, grad_norm = 0.0;
  double first_ratio_deviation = 0.0;  // max |rho - 1| on epoch 0, minibatch 0
  std::size_t minibatches = 0;
  bool aborted = false;  // non-finite loss: parameters rolled back
};

// Clipped surrogate for one sample: min(rho A, clip(rho, 1-eps, 1+eps) A).
double clipped_objective(double ratio, double advantage, double eps);

// Rewards are multiplied by `reward_scale` before GAE; the value head learns
// returns in those units.
PpoStats ppo_update(const control::Controller& controller, ad::ParamSet& theta, ad::Adam& adam,
                    const control::ObsNormalizer& norm, const RolloutBatch& batch, const TrainConfig& cfg,
                    std::uint64_t seed, double reward_scale = 1.0);

// Running variance of per-step discounted returns; the reward scale is its
// inverse standard deviation (1 until two samples have been seen).
double reward_scale(const control::RunningStat& returns);
void update_return_stat(control::RunningStat& returns, const RolloutBatch& batch, double gamma);

// The PPO loss on an explicit set of samples (used by gradient checks).
struct PpoSample {
  const control::DesignLayout* layout;
  const sim::Observation* obs;
  std::vector<double> action;
  double old_log_prob, advantage, target;
};
ad::Var ppo_loss(const control::Controller& controller, const ad::BoundParams& theta,
                 const control::ObsNormalizer& norm, const std::vector<PpoSample>& samples, const TrainConfig& cfg,
                 PpoStats* stats = nullptr);

// ---------------------------------------------------------------------------
// Training loops

struct RunState {
  ad::ParamSet theta;
  ad::ParamSet phi;  // empty for fixed-design training
  control::ObsNormalizer norm;
  control::RunningStat returns{1};
  ad::Adam adam_theta;
  ad::Adam adam_phi;
  std::uint64_t T = 0;
  std::uint64_t iteration = 0;
};

struct IterationMetrics {
  std::uint64_t iteration = 0;
  std::uint64_t T = 0;
  double mean_return = 0.0;
  double std_return = 0.0;
  double phi_entropy = 0.0;
  double grad_norm_theta = 0.0;
  double grad_norm_phi = 0.0;
  bool phi_updated = false;
  double policy_loss = 0.0, value_loss = 0.0, entropy = 0.0, approx_kl = 0.0, clip_fraction = 0.0;
  bool ppo_aborted = false;
  int flagged_designs = 0;
  int divergences = 0;
  double wall_clock = 0.0;                  // seconds since the loop started; not deterministic
  std::map<std::string, int> histogram;     // design signature digest -> count, every 10th iteration
};

struct Hooks {
  std::function<void(const IterationMetrics&)> on_metrics;
  std::function<void(const RunState&)> on_checkpoint;  // every checkpoint_every iterations and at the end
  std::function<bool(const RunState&)> stop;           // checked after each iteration
};

// Fresh parameters from the run seed.
RunState init_state(const Setup& s, const control::Controller& controller, const design::DesignModel* model);

// Co-optimization: sample designs from p_phi, collect, PPO on theta, and after warmup
// a score-function step on phi. Continues from `state` until T reaches the budget.
void run_nlimb(const Setup& s, const control::Controller& controller, const design::DesignModel& model,
               RunState& state, const Hooks& hooks = {});

// PPO on a fixed design list source (no phi). `budget` caps state.T.
using DesignSource = std::function<std::vector<grammar::DesignGraph>(std::uint64_t iteration, std::size_t n)>;
void run_fixed(const Setup& s, const control::Controller& controller, const DesignSource& source,
               std::uint64_t budget, RunState& state, const Hooks& hooks = {});

// Exact entropy when the derivations can be enumerated, else a Monte Carlo estimate.
double design_entropy(const design::DesignModel& model, const ad::ParamSet& phi,
                      const std::vector<design::DesignSample>& samples);

// ---------------------------------------------------------------------------
// Evaluation and baselines

struct EvalResult {
  std::vector<double> returns;
  double mean = 0.0, std = 0.0;
  int divergences = 0;
  std::uint64_t steps = 0;  // control steps simulated
};

// Episodes on terrains seeded from `seed`. Actions are sampled from the
// policy with per-episode seeded noise, or set to the mean when `mean_action`.
EvalResult evaluate(const PolicyRef& policy, const grammar::DesignGraph& design, const sim::EnvConfig& env,
                    std::size_t episodes, std::uint64_t seed, std::size_t workers = 1, bool mean_action = false);

enum class BaselineKind { random_search, ablation };

struct BaselineConfig {
  std::size_t designs = 8;             // random search: m
  double pretrain_fraction = 0.5;      // ablation: share of the budget for the universal controller
  std::size_t candidates = 16;         // ablation: designs ranked by the universal controller
  std::size_t finetune_top = 3;
  std::size_t rank_episodes = 4;       // ablation: evaluation episodes per ranked design
  std::size_t eval_episodes = 32;
  friend bool operator==(const BaselineConfig&, const BaselineConfig&) = default;
};

struct BaselineResult {
  grammar::DesignGraph design;
  std::vector<grammar::Expansion> choices;  // derivation of `design`
  ad::ParamSet theta;
  control::ObsNormalizer norm;
  double eval_return = 0.0;
  std::uint64_t consumed = 0;  // env steps across all controllers, ranking included
  std::vector<double> candidate_returns;  // per trained (random search) or ranked (ablation) design
};

BaselineResult run_baseline(BaselineKind kind, const Setup& s, const control::Controller& controller,
                            const grammar::Grammar& grammar, const BaselineConfig& b, const Hooks& hooks = {});

struct GeneralizationConfig {
  std::size_t designs = 8;
  std::uint64_t specialist_budget = 200'000;
  std::size_t eval_episodes = 8;
};

struct GeneralizationResult {
  std::vector<double> fractions;                // per checkpoint
  std::vector<std::vector<double>> universal;   // [checkpoint][design] mean return
  std::vector<double> specialist;               // per design
  std::vector<std::size_t> excluded;            // designs whose specialist diverged
  std::vector<grammar::DesignGraph> designs;
  std::vector<RunState> specialists;
};

// Universal checkpoints (theta + normalizer) against per-design specialists
// on k designs sampled from phi0.
GeneralizationResult eval_generalization(const Setup& s, const control::Controller& controller,
                                         const design::DesignModel& model, const ad::ParamSet& phi0,
                                         const std::vector<RunState>& checkpoints, const GeneralizationConfig& g);

// fraction = mean(universal) / mean(specialist) over the included designs.
double relative_fraction(const std::vector<double>& universal, const std::vector<double>& specialist);

// Checkpoint tensors: theta, phi, normalizer, both optimizer states and the
// step counters under "run/".
ad::ParamSet pack_state(const RunState& s);
RunState unpack_state(const ad::ParamSet& tensors, const TrainConfig& cfg, std::size_t terrain_samples);

}  // namespace nlimb::train
