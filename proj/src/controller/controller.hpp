#pragma once

#include <span>
#include <string>
#include <vector>

#include "autodiff/nn.hpp"
#include "autodiff/tape.hpp"
#include "grammar/grammar.hpp"
#include "simulator/env.hpp"

namespace nlimb::control {

struct ControllerConfig {
  std::size_t layers = 3;
  std::size_t heads = 4;
  std::size_t width = 128;
  std::size_t ffn_width = 256;
  std::size_t encoder_hidden = 64;
  std::size_t terrain_hidden = 64;
  std::size_t terrain_width = 32;
  std::size_t decoder_hidden = 128;
  std::size_t max_bodies = 32;
  std::size_t terrain_samples = 10;
  double init_std = 0.5;
  friend bool operator==(const ControllerConfig&, const ControllerConfig&) = default;
};

void validate(const ControllerConfig& cfg);

// Which DoF (if any) drives each body, in flatten_dfs order.
struct DesignLayout {
  std::size_t bodies = 0;
  std::size_t dofs = 0;
  std::vector<int> body_dof;
};
DesignLayout layout_of(const grammar::DesignGraph& design);

// Per-feature running mean/variance (parallel Welford). Frozen outside training.
class RunningStat {
 public:
  explicit RunningStat(std::size_t dim = 0);
  std::size_t dim() const noexcept { return mean_.size(); }
  double count() const noexcept { return count_; }
  void update(std::span<const double> rows);  // rows.size() is a multiple of dim
  void normalize(std::span<const double> in, double* out) const;
  const std::vector<double>& mean() const noexcept { return mean_; }
  const std::vector<double>& m2() const noexcept { return m2_; }
  void set(double count, std::vector<double> mean, std::vector<double> m2);
  friend bool operator==(const RunningStat&, const RunningStat&) = default;

 private:
  double count_ = 0.0;
  std::vector<double> mean_, m2_;
};

struct ObsNormalizer {
  RunningStat body{sim::kBodyFeatures};
  RunningStat dof{sim::kDofFeatures};
  RunningStat terrain;
  explicit ObsNormalizer(std::size_t terrain_samples = 10) : terrain(terrain_samples) {}
  void update(const sim::Observation& obs);
  ad::ParamSet to_params() const;  // under "controller_norm/"
  void load(const ad::ParamSet& params);
  friend bool operator==(const ObsNormalizer&, const ObsNormalizer&) = default;
};

struct PolicyInput {
  const DesignLayout* layout;
  const sim::Observation* obs;
};

struct PolicyOutput {
  ad::Var mean;   // [total DoFs], item-major in action order
  ad::Var std;    // [total DoFs]
  ad::Var value;  // [items]
  std::vector<std::size_t> dof_item;    // item of each DoF row
  std::vector<std::size_t> dof_offset;  // first DoF row of each item; size items+1
};

struct ForwardOptions {
  bool zero_terrain = false;  // zero the terrain encoder output (instrumentation)
};

class Controller {
 public:
  explicit Controller(ControllerConfig cfg = {});
  const ControllerConfig& config() const noexcept { return cfg_; }

  void init(ad::ParamSet& theta, Rng& rng) const;

  // Body embeddings [bodies, width] before positional encodings, for one item.
  ad::Var encode_bodies(const ad::BoundParams& theta, const PolicyInput& in, const ObsNormalizer& norm) const;

  // Batched forward; items may differ in size (padded and masked).
  PolicyOutput forward(const ad::BoundParams& theta, const std::vector<PolicyInput>& batch,
                       const ObsNormalizer& norm, const ForwardOptions& opt = {}) const;

 private:
  void check(const PolicyInput& in) const;
  ControllerConfig cfg_;
  std::size_t geom_width_, dof_width_, inertial_width_;
};

struct LogProbEntropy {
  ad::Var log_prob;  // [items]
  ad::Var entropy;   // [items]
};

// Diagonal Gaussian over the DoF rows, summed per item.
LogProbEntropy action_log_prob_entropy(ad::Var mean, ad::Var std, ad::Var action,
                                       const std::vector<std::size_t>& dof_item, std::size_t items);
double gaussian_log_prob(std::span<const double> mean, std::span<const double> std, std::span<const double> action);
double gaussian_entropy(std::span<const double> std);

}  // namespace nlimb::control
