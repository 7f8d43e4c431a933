#include "simulator/env.hpp"

#include <cmath>
#include <numbers>

#include <json.hpp>

#include "common/error.hpp"

namespace nlimb::sim {

const std::vector<std::string>& body_feature_names() {
  static const std::vector<std::string> names = {
      "height", "sin_pitch", "cos_pitch", "length", "radius", "offset_x", "offset_z", "offset_pitch", "mirrored",
      "mass",   "inertia",   "vel_x_body", "vel_z_body", "angular_vel"};
  return names;
}

const std::vector<std::string>& dof_feature_names() {
  static const std::vector<std::string> names = {"angle",     "angular_vel", "type_ball", "type_pitch",
                                                 "type_yaw",  "type_knee",   "type_fixed", "limit_lo",
                                                 "limit_hi",  "max_torque",  "gear"};
  return names;
}

Observation observe(const SimWorld& world, const TerrainSpec& terrain, const TerrainSampling& sampling) {
  Observation o;
  o.bodies = world.bodies.size();
  o.dofs = world.num_dofs();
  o.terrain = sampling.samples;
  o.data.reserve(o.bodies * kBodyFeatures + o.dofs * kDofFeatures + o.terrain);
  for (const Body& b : world.bodies) {
    const double c = std::cos(b.theta), s = std::sin(b.theta);
    double ox = 0, oz = 0, op = 0;
    if (b.joint >= 0) {
      const Joint& J = world.joints[static_cast<std::size_t>(b.joint)];
      const Body& p = world.bodies[static_cast<std::size_t>(J.parent)];
      ox = (J.pax + 0.5 * p.length) / p.length;
      oz = J.paz;
      op = J.rest;
    }
    const double f = b.mirrored ? 2.0 : 1.0;
    const double geom[kGeomFeatures] = {b.z, s, c, b.length, b.radius, ox, oz, op, b.mirrored ? 1.0 : 0.0};
    // Velocity in the body frame, per-copy mass and inertia.
    const double inertial[kInertialFeatures] = {b.mass / f, b.inertia / f, c * b.vx + s * b.vz, -s * b.vx + c * b.vz,
                                                b.omega};
    o.data.insert(o.data.end(), geom, geom + kGeomFeatures);
    o.data.insert(o.data.end(), inertial, inertial + kInertialFeatures);
    o.body_dof.push_back(b.joint >= 0 ? world.joints[static_cast<std::size_t>(b.joint)].dof : -1);
  }
  for (std::size_t d = 0; d < o.dofs; ++d) {
    const int j = world.dof_joint[d];
    const Joint& J = world.joints[static_cast<std::size_t>(j)];
    double f[kDofFeatures] = {world.joint_angle(j), world.joint_velocity(j), 0, 0, 0, 0, 0,
                              J.attrs.lo,           J.attrs.hi,              J.attrs.max_torque, J.attrs.gear};
    f[2 + static_cast<int>(J.attrs.type)] = 1.0;
    o.data.insert(o.data.end(), f, f + kDofFeatures);
  }
  const Body& root = world.bodies[0];
  for (std::size_t k = 0; k < sampling.samples; ++k) {
    o.data.push_back(ground_height(terrain, root.x + static_cast<double>(k) * sampling.spacing) - root.z);
  }
  return o;
}

std::vector<DofInfo> dof_info(const SimWorld& world) {
  std::vector<DofInfo> out;
  for (int j : world.dof_joint) {
    const auto& a = world.joints[static_cast<std::size_t>(j)].attrs;
    out.push_back({a.lo, a.hi, a.max_torque});
  }
  return out;
}

RewardTerms reward_terms(const StateSummary& prev, const StateSummary& next, std::span<const double> torques,
                         const std::vector<DofInfo>& dofs, const RewardWeights& w, double dt) {
  if (torques.size() != dofs.size() || next.q.size() != dofs.size()) throw ShapeError("reward: DoF count mismatch");
  RewardTerms t;
  t.progress = (next.root_x - prev.root_x) / dt;
  t.upright = std::cos(next.root_pitch);
  t.heading = std::abs(next.root_pitch) < std::numbers::pi / 2 ? 1.0 : 0.0;
  for (std::size_t i = 0; i < dofs.size(); ++i) {
    const double u = torques[i] / dofs[i].max_torque;
    t.torque += u * u;
    t.energy += std::abs(torques[i] * next.qdot[i]) * dt;
    const double margin = 0.025 * (dofs[i].hi - dofs[i].lo);
    const double over = std::max(0.0, next.q[i] - (dofs[i].hi - margin)) + std::max(0.0, (dofs[i].lo + margin) - next.q[i]);
    t.joint_limit += over * over;
  }
  t.total = w.progress * t.progress + w.upright * t.upright + w.heading * t.heading - w.torque * t.torque -
            w.energy * t.energy - w.joint_limit * t.joint_limit;
  return t;
}

double reward(const StateSummary& prev, const StateSummary& next, std::span<const double> torques,
              const std::vector<DofInfo>& dofs, const RewardWeights& w, double dt) {
  return reward_terms(prev, next, torques, dofs, w, dt).total;
}

bool terminated(const SimWorld& world, const FallCriteria& fall) {
  if (world.diverged) return true;
  const StateSummary s = world.summary();
  return std::abs(s.root_pitch) > fall.max_pitch || s.root_z < fall.min_height_fraction * world.spawn_root_z;
}

Environment::Environment(const grammar::DesignGraph& design, const EnvConfig& cfg) : design_(design), cfg_(cfg) {
  if (cfg_.action_repeat < 1 || cfg_.horizon < 1) throw ConfigError("action_repeat and horizon must be >= 1");
  reset(0);
  dofs_ = dof_info(world_);
}

void Environment::reset(std::uint64_t terrain_seed) {
  terrain_ = generate_terrain(cfg_.terrain, terrain_seed, cfg_.terrain_config);
  world_ = build_world(design_, terrain_, cfg_.sim);
  steps_ = 0;
}

Observation Environment::observe() const { return sim::observe(world_, terrain_, cfg_.sampling); }

std::vector<double> Environment::max_torques() const {
  std::vector<double> out;
  for (const auto& d : dofs_) out.push_back(d.max_torque);
  return out;
}

Transition Environment::step(std::span<const double> torques) {
  const StateSummary prev = world_.summary();
  Transition tr;
  for (int k = 0; k < cfg_.action_repeat; ++k) {
    const StepResult r = sim::step(world_, torques);
    tr.diverged = r.diverged;
    if (sim::terminated(world_, cfg_.fall)) {
      tr.terminated = true;
      break;
    }
  }
  ++steps_;
  const StateSummary next = world_.summary();
  if (tr.diverged) {
    // Divergent states carry no meaningful reward.
    tr.reward = 0.0;
  } else {
    tr.terms = reward_terms(prev, next, torques, dofs_, cfg_.weights, control_dt());
    tr.reward = tr.terms.total;
  }
  tr.truncated = !tr.terminated && steps_ >= cfg_.horizon;
  return tr;
}

TrajectoryWriter::TrajectoryWriter(const std::string& path) : out_(path, std::ios::binary | std::ios::trunc) {
  if (!out_) throw IoError("cannot open trajectory file '" + path + "'");
}

void TrajectoryWriter::write(const SimWorld& world, std::span<const double> torques, double reward, bool terminated) {
  nlohmann::json j;
  j["time"] = world.time;
  auto bodies = nlohmann::json::array();
  for (const Body& b : world.bodies) bodies.push_back({b.x, b.z, b.theta, b.vx, b.vz, b.omega});
  j["bodies"] = std::move(bodies);
  j["torques"] = std::vector<double>(torques.begin(), torques.end());
  j["reward"] = reward;
  j["terminated"] = terminated;
  out_ << j.dump() << '\n';
  out_.flush();
}

}  // namespace nlimb::sim
