#pragma once

#include <cstdint>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "grammar/grammar.hpp"
#include "simulator/terrain.hpp"
#include "simulator/world.hpp"

namespace nlimb::sim {

// Observation layout (the feature manifest). Per body, in flatten_dfs order:
// geometry/pose block then inertial/velocity block. Per DoF, in action
// order. Then K terrain samples.
inline constexpr std::size_t kGeomFeatures = 9;
inline constexpr std::size_t kInertialFeatures = 5;
inline constexpr std::size_t kBodyFeatures = kGeomFeatures + kInertialFeatures;
inline constexpr std::size_t kDofFeatures = 11;

const std::vector<std::string>& body_feature_names();
const std::vector<std::string>& dof_feature_names();

struct Observation {
  std::size_t bodies = 0;
  std::size_t dofs = 0;
  std::size_t terrain = 0;
  std::vector<int> body_dof;  // DoF driving each body (its parent joint), -1 if none
  std::vector<double> data;   // bodies*kBodyFeatures + dofs*kDofFeatures + terrain

  std::span<const double> body(std::size_t i) const {
    return {data.data() + i * kBodyFeatures, kBodyFeatures};
  }
  std::span<const double> dof(std::size_t i) const {
    return {data.data() + bodies * kBodyFeatures + i * kDofFeatures, kDofFeatures};
  }
  std::span<const double> terrain_features() const {
    return {data.data() + bodies * kBodyFeatures + dofs * kDofFeatures, terrain};
  }
};

struct TerrainSampling {
  std::size_t samples = 10;
  double spacing = 0.2;  // offsets 0, spacing, ..., (samples-1)*spacing ahead of the root
  friend bool operator==(const TerrainSampling&, const TerrainSampling&) = default;
};

Observation observe(const SimWorld& world, const TerrainSpec& terrain, const TerrainSampling& sampling = {});

struct RewardWeights {
  double progress = 1.0;
  double upright = 0.05;
  double heading = 0.05;
  double torque = 0.005;
  double energy = 0.001;
  double joint_limit = 0.1;
  friend bool operator==(const RewardWeights&, const RewardWeights&) = default;
};

struct DofInfo {
  double lo, hi, max_torque;
};
std::vector<DofInfo> dof_info(const SimWorld& world);

struct RewardTerms {
  double progress = 0, upright = 0, heading = 0, torque = 0, energy = 0, joint_limit = 0;
  double total = 0;
};

// Raw terms (before weighting) and the weighted total for one control step of length dt.
RewardTerms reward_terms(const StateSummary& prev, const StateSummary& next, std::span<const double> torques,
                         const std::vector<DofInfo>& dofs, const RewardWeights& w, double dt);
double reward(const StateSummary& prev, const StateSummary& next, std::span<const double> torques,
              const std::vector<DofInfo>& dofs, const RewardWeights& w, double dt);

struct FallCriteria {
  double max_pitch = 1.2;
  double min_height_fraction = 0.25;
  friend bool operator==(const FallCriteria&, const FallCriteria&) = default;
};

bool terminated(const SimWorld& world, const FallCriteria& fall = {});

struct EnvConfig {
  TerrainKind terrain = TerrainKind::flat;
  TerrainConfig terrain_config;
  SimParams sim;
  RewardWeights weights;
  FallCriteria fall;
  TerrainSampling sampling;
  int action_repeat = 2;
  int horizon = 1000;  // control steps per episode
  friend bool operator==(const EnvConfig&, const EnvConfig&) = default;
};

struct Transition {
  double reward = 0.0;
  bool terminated = false;  // fell or diverged
  bool truncated = false;   // reached the horizon
  bool diverged = false;
  RewardTerms terms;
};

// One design on a terrain, with action repeat, fall detection and a horizon.
class Environment {
 public:
  Environment(const grammar::DesignGraph& design, const EnvConfig& cfg);

  // Starts an episode on terrain generated from `terrain_seed`.
  void reset(std::uint64_t terrain_seed);
  // torques: per DoF, |tau| <= max-torque.
  Transition step(std::span<const double> torques);
  Observation observe() const;

  const SimWorld& world() const noexcept { return world_; }
  const TerrainSpec& terrain() const noexcept { return terrain_; }
  const EnvConfig& config() const noexcept { return cfg_; }
  std::size_t num_dofs() const noexcept { return world_.num_dofs(); }
  std::vector<double> max_torques() const;
  int episode_steps() const noexcept { return steps_; }
  double control_dt() const noexcept { return cfg_.sim.dt * cfg_.action_repeat; }

 private:
  grammar::DesignGraph design_;
  EnvConfig cfg_;
  TerrainSpec terrain_;
  SimWorld world_;
  std::vector<DofInfo> dofs_;
  int steps_ = 0;
};

// Line-delimited trajectory records for replay and debugging.
class TrajectoryWriter {
 public:
  explicit TrajectoryWriter(const std::string& path);
  void write(const SimWorld& world, std::span<const double> torques, double reward, bool terminated);

 private:
  std::ofstream out_;
};

}  // namespace nlimb::sim
