#include "simulator/world.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

#include "common/error.hpp"

namespace nlimb::sim {
namespace {

struct Vec2 {
  double x, z;
};

inline Vec2 rotate(double theta, double x, double z) {
  const double c = std::cos(theta), s = std::sin(theta);
  return {c * x - s * z, s * x + c * z};
}

inline double cross(Vec2 a, Vec2 b) { return a.x * b.z - a.z * b.x; }

struct Contact {
  int body;
  Vec2 r;  // contact point relative to the body center
  Vec2 n;  // unit normal pointing out of the terrain
  double depth;
  double normal = 0.0;    // accumulated normal impulse
  double friction = 0.0;  // accumulated friction impulse
};

// One-sided angular row on a joint: gap = sign * (q - bound), kept >= 0.
struct LimitRow {
  int joint;
  double sign, gap;
  double impulse = 0.0;
};

struct JointFrame {
  Vec2 ra, rb;  // anchors relative to each body center
  Vec2 error;   // child anchor minus parent anchor
  double k11, k12, k22;
};

double wrap_angle(double a) {
  a = std::remainder(a, 2.0 * std::numbers::pi);
  if (a <= -std::numbers::pi) a += 2.0 * std::numbers::pi;
  return a;
}

double mirror_factor(const Body& b) { return b.mirrored ? 2.0 : 1.0; }

// Sphere (center c, radius r) against a box; returns penetration depth > 0 on contact.
bool sphere_box(Vec2 c, double r, const Box& box, Vec2& normal, double& depth) {
  const double qx = std::clamp(c.x, box.x0, box.x1);
  const double qz = std::clamp(c.z, box.z0, box.z1);
  const double dx = c.x - qx, dz = c.z - qz;
  const double d2 = dx * dx + dz * dz;
  if (d2 > 0.0) {
    if (d2 >= r * r) return false;
    const double d = std::sqrt(d2);
    normal = {dx / d, dz / d};
    depth = r - d;
    return true;
  }
  // Center inside the box: push out through the nearest face.
  const double faces[4] = {c.x - box.x0, box.x1 - c.x, c.z - box.z0, box.z1 - c.z};
  const Vec2 normals[4] = {{-1, 0}, {1, 0}, {0, -1}, {0, 1}};
  int best = 3;
  for (int i = 0; i < 4; ++i) {
    if (faces[i] < faces[best]) best = i;
  }
  normal = normals[best];
  depth = r + faces[best];
  return true;
}

void gather_contacts(const SimWorld& w, int bi, std::vector<Contact>& out) {
  const Body& b = w.bodies[static_cast<std::size_t>(bi)];
  const Vec2 half = rotate(b.theta, 0.5 * b.length, 0.0);
  const Vec2 ends[2] = {{b.x - half.x, b.z - half.z}, {b.x + half.x, b.z + half.z}};
  const double lo = std::min(ends[0].x, ends[1].x) - b.radius;
  const double hi = std::max(ends[0].x, ends[1].x) + b.radius;
  const double seg_len2 = 4.0 * (half.x * half.x + half.z * half.z);
  for (const Box& box : w.boxes) {
    if (box.x0 > hi) break;
    if (box.x1 < lo) continue;
    for (const Vec2& e : ends) {
      Vec2 n;
      double depth;
      if (sphere_box(e, b.radius, box, n, depth)) {
        const Vec2 p{e.x - n.x * b.radius, e.z - n.z * b.radius};
        out.push_back({bi, {p.x - b.x, p.z - b.z}, n, depth});
      }
    }
    // Upper box corners against the interior of the capsule's segment.
    const Vec2 corners[2] = {{box.x0, box.z1}, {box.x1, box.z1}};
    for (const Vec2& c : corners) {
      const double t = ((c.x - ends[0].x) * 2.0 * half.x + (c.z - ends[0].z) * 2.0 * half.z) / seg_len2;
      if (!(t > 0.0 && t < 1.0)) continue;
      const Vec2 s{ends[0].x + t * 2.0 * half.x, ends[0].z + t * 2.0 * half.z};
      const double dx = s.x - c.x, dz = s.z - c.z;
      const double d = std::sqrt(dx * dx + dz * dz);
      if (d >= b.radius || d == 0.0) continue;
      // Only corners that poke into the capsule from outside the box's top face.
      const Vec2 n{dx / d, dz / d};
      if (n.z < 0.0) continue;
      out.push_back({bi, {c.x - b.x, c.z - b.z}, n, b.radius - d});
    }
  }
}

// Penalty spring-damper integrated implicitly as an impulse row. With gap x
// (negative when penetrating) and row velocity v, the impulse over h is
// lambda = -h k x - h (c + h k) v(lambda); solved by Gauss-Seidel with an
// accumulated impulse so that one-sided rows can be clamped at zero.
inline double soft_row(double k, double c, double h, double x, double v, double meff, double acc) {
  const double gamma = h * (c + h * k);
  return (-h * k * x - gamma * v - acc) / (1.0 + gamma / meff);
}

void apply_angular(SimWorld& w, const Joint& J, double l) {
  Body& a = w.bodies[static_cast<std::size_t>(J.parent)];
  Body& b = w.bodies[static_cast<std::size_t>(J.child)];
  a.omega -= l / a.inertia;
  b.omega += l / b.inertia;
}

void substep(SimWorld& w, std::span<const double> torques, double h, int& contact_count) {
  const std::size_t nb = w.bodies.size();
  const SimParams& P = w.params;

  for (std::size_t i = 0; i < nb; ++i) w.bodies[i].vz -= h * P.gravity;
  for (const Joint& J : w.joints) {
    if (J.dof < 0) continue;
    const double tau = torques[static_cast<std::size_t>(J.dof)] * J.torque_scale * J.attrs.axis;
    apply_angular(w, J, h * tau);
  }

  std::vector<Contact> contacts;
  for (std::size_t i = 0; i < nb; ++i) gather_contacts(w, static_cast<int>(i), contacts);
  contact_count = static_cast<int>(contacts.size());

  std::vector<LimitRow> limits;
  for (std::size_t j = 0; j < w.joints.size(); ++j) {
    const Joint& J = w.joints[j];
    if (J.attrs.type == grammar::JointType::fixed) continue;
    const double q = w.joint_angle(static_cast<int>(j));
    if (q > J.attrs.hi) limits.push_back({static_cast<int>(j), -1.0, J.attrs.hi - q});
    if (q < J.attrs.lo) limits.push_back({static_cast<int>(j), 1.0, q - J.attrs.lo});
  }

  std::vector<JointFrame> frames(w.joints.size());
  for (std::size_t j = 0; j < w.joints.size(); ++j) {
    const Joint& J = w.joints[j];
    const Body& a = w.bodies[static_cast<std::size_t>(J.parent)];
    const Body& b = w.bodies[static_cast<std::size_t>(J.child)];
    JointFrame& F = frames[j];
    F.ra = rotate(a.theta, J.pax, J.paz);
    F.rb = rotate(b.theta, J.cax, J.caz);
    F.error = {(b.x + F.rb.x) - (a.x + F.ra.x), (b.z + F.rb.z) - (a.z + F.ra.z)};
    const double im = 1.0 / a.mass + 1.0 / b.mass;
    const double ia = 1.0 / a.inertia, ib = 1.0 / b.inertia;
    // K = im I + ia perp(ra) perp(ra)^T + ib perp(rb) perp(rb)^T, perp(r) = (-r.z, r.x)
    F.k11 = im + ia * F.ra.z * F.ra.z + ib * F.rb.z * F.rb.z;
    F.k12 = -ia * F.ra.z * F.ra.x - ib * F.rb.z * F.rb.x;
    F.k22 = im + ia * F.ra.x * F.ra.x + ib * F.rb.x * F.rb.x;
  }
  std::vector<double> damping(w.joints.size(), 0.0);

  const double bias = P.baumgarte / h;
  for (int it = 0; it < P.solver_iterations; ++it) {
    for (std::size_t j = 0; j < w.joints.size(); ++j) {
      const Joint& J = w.joints[j];
      Body& a = w.bodies[static_cast<std::size_t>(J.parent)];
      Body& b = w.bodies[static_cast<std::size_t>(J.child)];
      const JointFrame& F = frames[j];
      const double rvx = (b.vx - b.omega * F.rb.z) - (a.vx - a.omega * F.ra.z) + bias * F.error.x;
      const double rvz = (b.vz + b.omega * F.rb.x) - (a.vz + a.omega * F.ra.x) + bias * F.error.z;
      const double det = F.k11 * F.k22 - F.k12 * F.k12;
      const double px = -(F.k22 * rvx - F.k12 * rvz) / det;
      const double pz = -(-F.k12 * rvx + F.k11 * rvz) / det;
      a.vx -= px / a.mass;
      a.vz -= pz / a.mass;
      a.omega -= cross(F.ra, {px, pz}) / a.inertia;
      b.vx += px / b.mass;
      b.vz += pz / b.mass;
      b.omega += cross(F.rb, {px, pz}) / b.inertia;
      const double meff = 1.0 / (1.0 / a.inertia + 1.0 / b.inertia);
      if (J.attrs.type == grammar::JointType::fixed) {
        const double err = b.theta - a.theta - J.rest;
        apply_angular(w, J, -(b.omega - a.omega + bias * err) * meff);
      } else if (P.joint_damping > 0.0) {
        const double f = mirror_factor(b);
        const double l = soft_row(0.0, f * P.joint_damping, h, 0.0, b.omega - a.omega, meff, damping[j]);
        damping[j] += l;
        apply_angular(w, J, l);
      }
    }
    for (LimitRow& L : limits) {
      const Joint& J = w.joints[static_cast<std::size_t>(L.joint)];
      const Body& a = w.bodies[static_cast<std::size_t>(J.parent)];
      const Body& b = w.bodies[static_cast<std::size_t>(J.child)];
      const double f = mirror_factor(b);
      const double s = L.sign * J.attrs.axis;
      const double meff = 1.0 / (1.0 / a.inertia + 1.0 / b.inertia);
      const double v = s * (b.omega - a.omega);
      const double next = std::max(0.0, L.impulse + soft_row(f * P.limit_stiffness, f * P.limit_damping, h, L.gap, v,
                                                             meff, L.impulse));
      apply_angular(w, J, s * (next - L.impulse));
      L.impulse = next;
    }
    for (Contact& ct : contacts) {
      Body& b = w.bodies[static_cast<std::size_t>(ct.body)];
      const double f = mirror_factor(b);
      const double rn = cross(ct.r, ct.n);
      const double vn = (b.vx - b.omega * ct.r.z) * ct.n.x + (b.vz + b.omega * ct.r.x) * ct.n.z;
      const double mn = 1.0 / (1.0 / b.mass + rn * rn / b.inertia);
      const double next = std::max(
          0.0, ct.normal + soft_row(f * P.contact_stiffness, f * P.contact_damping, h, -ct.depth, vn, mn, ct.normal));
      const double ln = next - ct.normal;
      ct.normal = next;
      b.vx += ln * ct.n.x / b.mass;
      b.vz += ln * ct.n.z / b.mass;
      b.omega += ln * rn / b.inertia;

      const Vec2 t{-ct.n.z, ct.n.x};
      const double vt = (b.vx - b.omega * ct.r.z) * t.x + (b.vz + b.omega * ct.r.x) * t.z;
      const double rt = cross(ct.r, t);
      const double mt = 1.0 / (1.0 / b.mass + rt * rt / b.inertia);
      const double bound = P.friction * ct.normal;
      const double old = ct.friction;
      ct.friction = std::clamp(old - vt * mt, -bound, bound);
      const double lt = ct.friction - old;
      b.vx += lt * t.x / b.mass;
      b.vz += lt * t.z / b.mass;
      b.omega += lt * rt / b.inertia;
    }
  }

  for (Body& b : w.bodies) {
    b.x += h * b.vx;
    b.z += h * b.vz;
    b.theta += h * b.omega;
  }
}

}  // namespace

double capsule_inertia(double mass, double length, double radius) {
  const double vc = std::numbers::pi * radius * radius * length;
  const double vs = 4.0 / 3.0 * std::numbers::pi * radius * radius * radius;
  const double mc = mass * vc / (vc + vs);
  const double ms = mass - mc;
  // Cylinder about a transverse axis plus two hemispheres offset along the axis.
  return mc * (length * length / 12.0 + radius * radius / 4.0) +
         ms * (2.0 * radius * radius / 5.0 + length * length / 4.0 + 3.0 * length * radius / 8.0);
}

double SimWorld::total_mass() const {
  double m = 0.0;
  for (const Body& b : bodies) m += b.mass;
  return m;
}

double SimWorld::joint_angle(int j) const {
  const Joint& J = joints[static_cast<std::size_t>(j)];
  return J.attrs.axis * (bodies[static_cast<std::size_t>(J.child)].theta -
                         bodies[static_cast<std::size_t>(J.parent)].theta - J.rest);
}

double SimWorld::joint_velocity(int j) const {
  const Joint& J = joints[static_cast<std::size_t>(j)];
  return J.attrs.axis * (bodies[static_cast<std::size_t>(J.child)].omega -
                         bodies[static_cast<std::size_t>(J.parent)].omega);
}

StateSummary SimWorld::summary() const {
  StateSummary s;
  s.time = time;
  s.root_x = bodies[0].x;
  s.root_z = bodies[0].z;
  s.root_pitch = wrap_angle(bodies[0].theta);
  s.q.reserve(dof_joint.size());
  s.qdot.reserve(dof_joint.size());
  for (int j : dof_joint) {
    s.q.push_back(joint_angle(j));
    s.qdot.push_back(joint_velocity(j));
  }
  return s;
}

double SimWorld::kinetic_energy() const {
  double e = 0.0;
  for (const Body& b : bodies) e += 0.5 * b.mass * (b.vx * b.vx + b.vz * b.vz) + 0.5 * b.inertia * b.omega * b.omega;
  return e;
}

double SimWorld::potential_energy() const {
  double e = 0.0;
  for (const Body& b : bodies) e += b.mass * params.gravity * b.z;
  return e;
}

void SimWorld::linear_momentum(double& px, double& pz) const {
  px = pz = 0.0;
  for (const Body& b : bodies) {
    px += b.mass * b.vx;
    pz += b.mass * b.vz;
  }
}

SimWorld build_world(const grammar::DesignGraph& design, const TerrainSpec& terrain, const SimParams& params) {
  if (!grammar::is_complete(design)) throw InvalidArgument("build_world: design is not complete");
  grammar::validate_design(design);
  if (!(params.dt > 0.0 && params.dt <= 0.02)) throw ConfigError("simulator dt must lie in (0, 0.02]");
  if (params.substeps < 1 || params.solver_iterations < 1) throw ConfigError("simulator substeps and iterations must be >= 1");
  validate_terrain(terrain);

  SimWorld w;
  w.params = params;
  const std::vector<int> order = grammar::flatten_dfs(design);
  std::map<int, int> index;
  for (std::size_t i = 0; i < order.size(); ++i) index[order[i]] = static_cast<int>(i);

  for (std::size_t i = 0; i < order.size(); ++i) {
    const grammar::DesignNode& n = design.node(order[i]);
    const grammar::LimbAttributes& l = *n.limb;
    Body b;
    b.node = n.id;
    b.length = l.length;
    b.radius = l.radius;
    b.mirrored = l.mirrored;
    b.mass = mirror_factor(b) * l.mass;
    b.inertia = mirror_factor(b) * capsule_inertia(l.mass, l.length, l.radius);
    if (n.parent >= 0) {
      const int pi = index.at(n.parent);
      const Body& p = w.bodies[static_cast<std::size_t>(pi)];
      Joint J;
      J.parent = pi;
      J.child = static_cast<int>(i);
      J.pax = -0.5 * p.length + l.offset.x * p.length;
      J.paz = l.offset.z;
      J.cax = -0.5 * l.length;
      J.caz = 0.0;
      J.rest = l.offset.pitch;
      J.attrs = *n.joint;
      J.torque_scale = J.attrs.gear * mirror_factor(b);
      if (J.attrs.actuated()) {
        J.dof = static_cast<int>(w.dof_joint.size());
        w.dof_joint.push_back(static_cast<int>(w.joints.size()));
      }
      b.parent = pi;
      b.theta = p.theta + J.rest;
      const Vec2 pa = rotate(p.theta, J.pax, J.paz);
      const Vec2 cb = rotate(b.theta, J.cax, J.caz);
      b.x = p.x + pa.x - cb.x;
      b.z = p.z + pa.z - cb.z;
      b.joint = static_cast<int>(w.joints.size());
      w.joints.push_back(J);
    }
    w.bodies.push_back(b);
  }

  double lowest = INFINITY;
  for (const Body& b : w.bodies) {
    const Vec2 half = rotate(b.theta, 0.5 * b.length, 0.0);
    lowest = std::min({lowest, b.z - std::abs(half.z) - b.radius});
  }
  const double shift = ground_height(terrain, 0.0) + 0.01 - lowest;
  for (Body& b : w.bodies) b.z += shift;
  w.boxes = terrain_boxes(terrain);
  w.spawn_root_z = w.bodies[0].z;
  return w;
}

StepResult step(SimWorld& world, std::span<const double> torques) {
  if (torques.size() != world.num_dofs()) {
    throw ShapeError("step: expected " + std::to_string(world.num_dofs()) + " torques, got " +
                     std::to_string(torques.size()));
  }
  for (std::size_t d = 0; d < torques.size(); ++d) {
    if (!std::isfinite(torques[d])) throw NumericError("step: non-finite torque for DoF " + std::to_string(d));
    const double max = world.joints[static_cast<std::size_t>(world.dof_joint[d])].attrs.max_torque;
    if (std::abs(torques[d]) > max * (1.0 + 1e-12)) {
      throw InvalidArgument("step: torque for DoF " + std::to_string(d) + " exceeds its max-torque");
    }
  }
  StepResult r;
  if (!world.diverged) {
    const double h = world.params.dt / world.params.substeps;
    for (int s = 0; s < world.params.substeps; ++s) substep(world, torques, h, r.contacts);
    world.time += world.params.dt;
    const double lim = world.params.divergence_speed;
    for (const Body& b : world.bodies) {
      const bool finite = std::isfinite(b.x) && std::isfinite(b.z) && std::isfinite(b.theta) && std::isfinite(b.vx) &&
                          std::isfinite(b.vz) && std::isfinite(b.omega);
      if (!finite || std::abs(b.vx) > lim || std::abs(b.vz) > lim || std::abs(b.omega) > lim) world.diverged = true;
    }
  }
  r.diverged = world.diverged;
  r.state = world.summary();
  r.applied.resize(torques.size());
  for (std::size_t d = 0; d < torques.size(); ++d) {
    r.applied[d] = torques[d] * world.joints[static_cast<std::size_t>(world.dof_joint[d])].torque_scale;
  }
  return r;
}

}  // namespace nlimb::sim
