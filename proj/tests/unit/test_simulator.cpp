#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "common/error.hpp"
#include "doctest.h"
#include "helpers.hpp"
#include "simulator/env.hpp"

using namespace nlimb;
using namespace nlimb::sim;
using grammar::DesignGraph;

namespace {

DesignGraph only_design(const std::string& text) {
  static std::vector<std::unique_ptr<grammar::Grammar>> keep;
  keep.push_back(std::make_unique<grammar::Grammar>(grammar::parse_grammar(text)));
  Rng rng(0);
  return test::random_derivation(*keep.back(), rng);
}

const char* kHeader = R"(
symbol R nonterminal
symbol torso terminal
symbol leg terminal
attr torso length=0.4 radius=0.05 mass=2
attr leg length=0.2 radius=0.04 mass=0.5
start R
)";

DesignGraph torso_only() { return only_design(std::string(kHeader) + "rule R -> t:torso\n"); }

// Four rigid legs under the torso ends (two mirrored pairs).
DesignGraph table() {
  return only_design(std::string(kHeader) +
                     "rule R -> @t:torso f:leg[x=1 pitch=-pi/2 mirrored=1] b:leg[x=0 pitch=-pi/2 mirrored=1] "
                     "t->f[type=fixed torque=1] t->b[type=fixed torque=1]\n");
}

// One actuated mirrored leg pair on a pitch joint with gear 2.
DesignGraph one_leg() {
  return only_design(std::string(kHeader) +
                     "rule R -> @t:torso f:leg[x=1 pitch=-pi/2 mirrored=1] t->f[type=pitch lo=-0.8 hi=0.8 torque=10 "
                     "gear=2]\n");
}

TerrainSpec flat() { return generate_terrain(TerrainKind::flat, 0); }

void lift(SimWorld& w, double dz) {
  for (Body& b : w.bodies) b.z += dz;
}

std::vector<double> random_torques(const SimWorld& w, Rng& rng) {
  std::vector<double> t;
  for (int j : w.dof_joint) t.push_back(rng.uniform(-1.0, 1.0) * w.joints[static_cast<std::size_t>(j)].attrs.max_torque);
  return t;
}

}  // namespace

TEST_CASE("ballistic flight matches the semi-implicit closed form") {
  SimWorld w = build_world(torso_only(), flat());
  lift(w, 50.0);
  const double z0 = w.bodies[0].z, x0 = w.bodies[0].x;
  const double v0 = 1.3, vx = 0.7;
  w.bodies[0].vz = v0;
  w.bodies[0].vx = vx;
  const double g = w.params.gravity, h = w.params.dt / w.params.substeps;
  for (int n = 1; n <= 100; ++n) {
    const StepResult r = step(w, {});
    CHECK(r.contacts == 0);
    const double t = n * w.params.dt;
    const double expected = v0 * t - 0.5 * g * t * t - 0.5 * g * h * t;
    CHECK(std::abs((w.bodies[0].z - z0) - expected) < 1e-6);
    CHECK(std::abs((w.bodies[0].x - x0) - vx * t) < 1e-9);
  }
}

TEST_CASE("zero gravity: internal torques conserve linear momentum") {
  const auto& g = grammar::default_grammar();
  Rng rng(4);
  for (int k = 0; k < 5; ++k) {
    SimParams p;
    p.gravity = 0.0;
    SimWorld w = build_world(test::random_derivation(g, rng), flat(), p);
    lift(w, 20.0);
    double px0, pz0;
    w.linear_momentum(px0, pz0);
    for (int s = 0; s < 200; ++s) {
      step(w, random_torques(w, rng));
      double px, pz;
      w.linear_momentum(px, pz);
      CHECK(std::abs(px - px0) < 1e-8);
      CHECK(std::abs(pz - pz0) < 1e-8);
      px0 = px;
      pz0 = pz;
    }
    CHECK_FALSE(w.diverged);
  }
}

TEST_CASE("resting robot settles without sinking, launching or gaining energy") {
  SimWorld w = build_world(table(), flat());
  const double z0 = w.bodies[0].z;
  const std::vector<double> none;
  for (int s = 0; s < 200; ++s) {
    step(w, none);
    CHECK(std::abs(w.bodies[0].z - z0) < 0.02);
  }
  double ke = w.kinetic_energy();
  for (int s = 0; s < 200; ++s) {
    step(w, none);
    const double next = w.kinetic_energy();
    CHECK(next - ke < 1e-3);
    ke = next;
  }
  CHECK(std::abs(w.bodies[0].z - z0) < 0.02);
  CHECK(std::abs(w.bodies[0].x) < 1e-3);
}

TEST_CASE("sagittal realization keeps body, joint and mass bookkeeping") {
  SimWorld single = build_world(torso_only(), flat());
  CHECK(single.bodies.size() == 1);
  CHECK(single.joints.empty());
  CHECK(single.num_dofs() == 0);
  CHECK(single.total_mass() == doctest::Approx(2.0));

  const auto& g = grammar::default_grammar();
  Rng rng(7);
  for (int k = 0; k < 300; ++k) {
    const DesignGraph d = test::random_derivation(g, rng);
    const SimWorld w = build_world(d, flat());
    double mass = 0.0;
    std::size_t actuated = 0;
    for (const auto& [id, n] : d.nodes()) {
      mass += n.limb->mass * (n.limb->mirrored ? 2.0 : 1.0);
      if (n.joint && n.joint->actuated()) ++actuated;
    }
    REQUIRE(w.bodies.size() == d.size());
    CHECK(w.joints.size() == d.size() - 1);
    CHECK(w.num_dofs() == actuated);
    CHECK(std::abs(w.total_mass() - mass) < 1e-12);
    CHECK(w.total_mass() > 0.0);
    // Lowest point 1 cm above the ground.
    double lowest = INFINITY;
    for (const Body& b : w.bodies) lowest = std::min(lowest, b.z - std::abs(std::sin(b.theta)) * b.length / 2 - b.radius);
    CHECK(std::abs(lowest - 0.01) < 1e-9);
  }
}

TEST_CASE("mirrored limbs carry doubled torque and gear") {
  SimWorld w = build_world(one_leg(), flat());
  REQUIRE(w.num_dofs() == 1);
  const std::vector<double> tau{7.5};
  const StepResult r = step(w, tau);
  CHECK(r.applied[0] == doctest::Approx(7.5 * 2.0 * 2.0));
}

TEST_CASE("step is deterministic for identical inputs") {
  const auto& g = grammar::default_grammar();
  Rng drng(9);
  const DesignGraph d = test::random_derivation(g, drng);
  const TerrainSpec t = generate_terrain(TerrainKind::gaps, 3);
  auto run = [&] {
    SimWorld w = build_world(d, t);
    Rng rng(11);
    std::vector<double> trace;
    for (int s = 0; s < 150; ++s) {
      step(w, random_torques(w, rng));
      for (const Body& b : w.bodies) trace.insert(trace.end(), {b.x, b.z, b.theta, b.vx, b.vz, b.omega});
    }
    return trace;
  };
  CHECK(run() == run());
}

TEST_CASE("random torques never blow up the simulation") {
  const auto& g = grammar::default_grammar();
  Rng rng(12);
  int diverged = 0;
  for (int k = 0; k < 30; ++k) {
    const DesignGraph d = test::random_derivation(g, rng);
    const TerrainSpec t = generate_terrain(static_cast<TerrainKind>(k % 3), static_cast<std::uint64_t>(k));
    SimWorld w = build_world(d, t);
    for (int s = 0; s < 400; ++s) step(w, random_torques(w, rng));
    diverged += w.diverged;
    // Joint anchors stay together.
    for (const Joint& J : w.joints) {
      const Body& a = w.bodies[static_cast<std::size_t>(J.parent)];
      const Body& b = w.bodies[static_cast<std::size_t>(J.child)];
      const double ax = a.x + std::cos(a.theta) * J.pax - std::sin(a.theta) * J.paz;
      const double az = a.z + std::sin(a.theta) * J.pax + std::cos(a.theta) * J.paz;
      const double bx = b.x + std::cos(b.theta) * J.cax - std::sin(b.theta) * J.caz;
      const double bz = b.z + std::sin(b.theta) * J.cax + std::cos(b.theta) * J.caz;
      CHECK(std::hypot(ax - bx, az - bz) < 5e-3);
    }
    for (int dof = 0; dof < static_cast<int>(w.num_dofs()); ++dof) {
      const Joint& J = w.joints[static_cast<std::size_t>(w.dof_joint[static_cast<std::size_t>(dof)])];
      const double q = w.joint_angle(w.dof_joint[static_cast<std::size_t>(dof)]);
      CHECK(q < J.attrs.hi + 0.3);
      CHECK(q > J.attrs.lo - 0.3);
    }
  }
  CHECK(diverged == 0);
}

TEST_CASE("divergence is flagged and terminates") {
  SimWorld w = build_world(one_leg(), flat());
  w.bodies[0].vx = 5e3;
  const StepResult r = step(w, std::vector<double>{0.0});
  CHECK(r.diverged);
  CHECK(terminated(w));
  const double x = w.bodies[0].x;
  step(w, std::vector<double>{0.0});
  CHECK(w.bodies[0].x == x);
}

TEST_CASE("step rejects bad torques and configurations") {
  SimWorld w = build_world(one_leg(), flat());
  CHECK_THROWS_AS(step(w, std::vector<double>{NAN}), NumericError);
  CHECK_THROWS_AS(step(w, std::vector<double>{INFINITY}), NumericError);
  CHECK_THROWS_AS(step(w, std::vector<double>{}), ShapeError);
  CHECK_THROWS_AS(step(w, std::vector<double>{10.5}), InvalidArgument);
  SimParams p;
  p.dt = 0.03;
  CHECK_THROWS_AS(build_world(one_leg(), flat(), p), ConfigError);
  p.dt = 0.0;
  CHECK_THROWS_AS(build_world(one_leg(), flat(), p), ConfigError);
  CHECK_THROWS_AS(build_world(grammar::default_grammar().start(), flat()), InvalidArgument);
}

TEST_CASE("terrain generation is seeded and respects its ranges") {
  const TerrainConfig cfg;
  CHECK(terrain_to_json(generate_terrain(TerrainKind::gaps, 5)) == terrain_to_json(generate_terrain(TerrainKind::gaps, 5)));
  CHECK(terrain_to_json(generate_terrain(TerrainKind::gaps, 5)) != terrain_to_json(generate_terrain(TerrainKind::gaps, 6)));
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    const TerrainSpec g = generate_terrain(TerrainKind::gaps, seed);
    REQUIRE(g.segments.size() > 1);
    for (std::size_t i = 1; i < g.segments.size(); ++i) {
      const double width = g.segments[i].x0 - g.segments[i - 1].x1;
      CHECK(width >= cfg.gap_min);
      CHECK(width <= cfg.gap_max);
    }
    const TerrainSpec wl = generate_terrain(TerrainKind::walls, seed);
    for (const Wall& wall : wl.walls) {
      CHECK(wall.height >= cfg.wall_min);
      CHECK(wall.height <= cfg.wall_max);
    }
    for (double x = -cfg.spawn_half_width; x <= cfg.spawn_half_width; x += 0.05) {
      CHECK(ground_height(g, x) == 0.0);
      CHECK(ground_height(wl, x) == 0.0);
    }
  }
  const TerrainSpec g = generate_terrain(TerrainKind::gaps, 77);
  CHECK(terrain_to_json(terrain_from_json(terrain_to_json(g))) == terrain_to_json(g));
  const double mid = 0.5 * (g.segments[0].x1 + g.segments[1].x0);
  CHECK(ground_height(g, mid) == -g.gap_depth);
}

TEST_CASE("observation layout follows the feature manifest") {
  CHECK(body_feature_names().size() == kBodyFeatures);
  CHECK(dof_feature_names().size() == kDofFeatures);
  const auto& g = grammar::default_grammar();
  Rng rng(21);
  for (int k = 0; k < 50; ++k) {
    const DesignGraph d = test::random_derivation(g, rng);
    const TerrainSpec t = flat();
    const SimWorld w = build_world(d, t);
    const Observation o = observe(w, t);
    std::size_t actuated = 0;
    for (const auto& [id, n] : d.nodes()) actuated += n.joint && n.joint->actuated();
    CHECK(o.data.size() == d.size() * kBodyFeatures + actuated * kDofFeatures + 10);
    for (double v : o.terrain_features()) CHECK(v == -w.bodies[0].z);
    for (std::size_t b = 0; b < o.bodies; ++b) {
      for (std::size_t f = kGeomFeatures + 2; f < kBodyFeatures; ++f) CHECK(o.body(b)[f] == 0.0);
    }
    for (std::size_t i = 0; i < o.dofs; ++i) {
      double hot = 0;
      for (std::size_t f = 2; f < 7; ++f) hot += o.dof(i)[f];
      CHECK(hot == 1.0);
    }
  }
  // A gap ahead reports the drop below the root.
  const TerrainSpec gaps = generate_terrain(TerrainKind::gaps, 1);
  SimWorld w = build_world(one_leg(), gaps);
  const double gap_x = 0.5 * (gaps.segments[0].x1 + gaps.segments[1].x0);
  const double shift = gap_x - 0.2 * 5 - w.bodies[0].x;
  for (Body& b : w.bodies) b.x += shift;
  const Observation o = observe(w, gaps);
  CHECK(o.terrain_features()[5] == doctest::Approx(-gaps.gap_depth - w.bodies[0].z));
}

TEST_CASE("reward: upright and still earns exactly the posture terms") {
  const SimWorld w = build_world(table(), flat());
  const StateSummary s = w.summary();
  const RewardWeights weights;
  const double r = reward(s, s, {}, dof_info(w), weights, 0.02);
  CHECK(r == weights.upright + weights.heading);
}

TEST_CASE("reward: doubling torques quadruples the torque penalty") {
  const SimWorld w = build_world(one_leg(), flat());
  const StateSummary s = w.summary();
  const auto dofs = dof_info(w);
  const RewardWeights weights;
  const std::vector<double> t1{3.0}, t2{6.0};
  const RewardTerms a = reward_terms(s, s, t1, dofs, weights, 0.02);
  const RewardTerms b = reward_terms(s, s, t2, dofs, weights, 0.02);
  CHECK(b.torque == doctest::Approx(4.0 * a.torque).epsilon(1e-14));
  CHECK(a.torque == doctest::Approx(0.09));
}

TEST_CASE("reward: environment reward agrees with a direct recomputation") {
  const auto& g = grammar::default_grammar();
  Rng rng(31);
  for (int k = 0; k < 5; ++k) {
    const DesignGraph d = test::random_derivation(g, rng);
    EnvConfig cfg;
    Environment env(d, cfg);
    env.reset(static_cast<std::uint64_t>(k));
    for (int s = 0; s < 10; ++s) {
      const SimWorld before = env.world();
      const auto tau = random_torques(before, rng);
      const Transition tr = env.step(tau);
      if (tr.terminated) break;
      const SimWorld& after = env.world();
      // Written from raw body states.
      const double dt = cfg.sim.dt * cfg.action_repeat;
      const double pitch = std::atan2(std::sin(after.bodies[0].theta), std::cos(after.bodies[0].theta));
      double torque = 0, energy = 0, limit = 0;
      for (std::size_t i = 0; i < tau.size(); ++i) {
        const Joint& J = after.joints[static_cast<std::size_t>(after.dof_joint[i])];
        const Body& p = after.bodies[static_cast<std::size_t>(J.parent)];
        const Body& c = after.bodies[static_cast<std::size_t>(J.child)];
        const double q = J.attrs.axis * (c.theta - p.theta - J.rest);
        const double qd = J.attrs.axis * (c.omega - p.omega);
        torque += std::pow(tau[i] / J.attrs.max_torque, 2);
        energy += std::abs(tau[i] * qd) * dt;
        const double span = J.attrs.hi - J.attrs.lo;
        const double lo = J.attrs.lo + 0.025 * span, hi = J.attrs.hi - 0.025 * span;
        if (q > hi) limit += (q - hi) * (q - hi);
        if (q < lo) limit += (lo - q) * (lo - q);
      }
      const double expected = cfg.weights.progress * (after.bodies[0].x - before.bodies[0].x) / dt +
                              cfg.weights.upright * std::cos(pitch) +
                              cfg.weights.heading * (std::abs(pitch) < std::numbers::pi / 2) -
                              cfg.weights.torque * torque - cfg.weights.energy * energy -
                              cfg.weights.joint_limit * limit;
      CHECK(tr.reward == doctest::Approx(expected).epsilon(1e-12));
    }
  }
}

TEST_CASE("termination flips at the first violating state") {
  SimWorld w = build_world(one_leg(), flat());
  int first = -1;
  // Dyadic pitch increments so the crossing is exact: 38/32 < 1.2 < 39/32.
  for (int k = 0; k < 60; ++k) {
    w.bodies[0].theta = k / 32.0;
    if (terminated(w) && first < 0) first = k;
  }
  CHECK(first == 39);
  w.bodies[0].theta = std::numbers::pi;
  CHECK(terminated(w));
  w.bodies[0].theta = 0.0;
  w.bodies[0].z = 0.24 * w.spawn_root_z;
  CHECK(terminated(w));
  w.bodies[0].z = 0.26 * w.spawn_root_z;
  CHECK_FALSE(terminated(w));
}

TEST_CASE("environment: action repeat, horizon and trajectory dump") {
  EnvConfig cfg;
  cfg.horizon = 5;
  Environment env(table(), cfg);
  env.reset(0);
  const auto path = std::filesystem::temp_directory_path() / "nlimb_traj_test.jsonl";
  {
    TrajectoryWriter out(path.string());
    for (int s = 0; s < 5; ++s) {
      const Transition tr = env.step({});
      CHECK(tr.truncated == (s == 4));
      CHECK_FALSE(tr.terminated);
      out.write(env.world(), {}, tr.reward, tr.terminated);
    }
  }
  CHECK(env.world().time == doctest::Approx(0.1));
  std::ifstream in(path);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("bodies").size() == 3);
    ++lines;
  }
  CHECK(lines == 5);
  std::filesystem::remove(path);
  cfg.action_repeat = 0;
  CHECK_THROWS_AS(Environment(table(), cfg), ConfigError);
}
