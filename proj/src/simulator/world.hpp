#pragma once

#include <span>
#include <string>
#include <vector>

#include "grammar/grammar.hpp"
#include "simulator/terrain.hpp"

namespace nlimb::sim {

struct SimParams {
  double gravity = 9.81;
  double dt = 0.01;
  int substeps = 5;
  int solver_iterations = 8;
  double contact_stiffness = 2.0e4;  // N/m per contact point
  double contact_damping = 60.0;     // N s/m per contact point
  double friction = 0.9;
  double baumgarte = 0.2;
  double limit_stiffness = 1.0e3;  // N m/rad
  double limit_damping = 10.0;     // N m s/rad
  double joint_damping = 0.5;      // N m s/rad, viscous friction in every free joint
  double divergence_speed = 1.0e3;
  friend bool operator==(const SimParams&, const SimParams&) = default;
};

struct Body {
  int node = -1;    // design node id
  int parent = -1;  // body index
  int joint = -1;   // incoming joint index
  double length = 0.0, radius = 0.0;
  double mass = 0.0, inertia = 0.0;  // after sagittal merging of mirrored pairs
  bool mirrored = false;
  double x = 0.0, z = 0.0, theta = 0.0;
  double vx = 0.0, vz = 0.0, omega = 0.0;
};

struct Joint {
  int parent = -1, child = -1;
  double pax = 0.0, paz = 0.0;  // anchor in the parent frame
  double cax = 0.0, caz = 0.0;  // anchor in the child frame
  double rest = 0.0;            // child angle relative to the parent at q = 0
  grammar::JointAttributes attrs;
  int dof = -1;  // index into the action vector; -1 for fixed joints
  double torque_scale = 1.0;  // gear times the number of merged copies
};

struct StateSummary {
  double time = 0.0;
  double root_x = 0.0, root_z = 0.0, root_pitch = 0.0;  // pitch wrapped to (-pi, pi]
  std::vector<double> q, qdot;  // per DoF
};

struct StepResult {
  StateSummary state;
  bool diverged = false;
  int contacts = 0;
  std::vector<double> applied;  // joint torques applied to the bodies, per DoF
};

class SimWorld {
 public:
  std::vector<Body> bodies;    // flatten_dfs order; bodies[0] is the root
  std::vector<Joint> joints;   // one per non-root body, in body order
  std::vector<int> dof_joint;  // DoF index -> joint index
  std::vector<Box> boxes;
  SimParams params;
  double time = 0.0;
  double spawn_root_z = 0.0;
  bool diverged = false;

  std::size_t num_dofs() const noexcept { return dof_joint.size(); }
  double total_mass() const;
  double joint_angle(int j) const;
  double joint_velocity(int j) const;
  StateSummary summary() const;
  double kinetic_energy() const;
  double potential_energy() const;
  void linear_momentum(double& px, double& pz) const;
};

// Sagittal realization of a complete design: each mirrored limb becomes one
// planar body with doubled mass, inertia, contact stiffness and torque.
SimWorld build_world(const grammar::DesignGraph& design, const TerrainSpec& terrain, const SimParams& params = {});

// Advances by one world dt with the given per-DoF torques (|tau| <= max-torque).
StepResult step(SimWorld& world, std::span<const double> torques);

// Capsule inertia about its center for rotation in the plane.
double capsule_inertia(double mass, double length, double radius);

}  // namespace nlimb::sim
