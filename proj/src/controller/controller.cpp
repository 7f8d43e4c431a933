#include "controller/controller.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "common/error.hpp"

namespace nlimb::control {

using ad::BoundParams;
using ad::ParamSet;
using ad::Shape;
using ad::Tensor;
using ad::Var;
namespace nn = ad::nn;

namespace {

const std::string kGeom = "controller/geom";
const std::string kDof = "controller/dof";
const std::string kInertial = "controller/inertial";
const std::string kNullDof = "controller/null_dof";
const std::string kPos = "controller/pos_emb";
const std::string kEncoder = "controller/encoder";
const std::string kTerrain = "controller/terrain";
const std::string kValue = "controller/value";
const std::string kAction = "controller/action";

const double kHalfLog2Pi = 0.5 * std::log(2.0 * std::numbers::pi);

nn::TransformerShape shape_of(const ControllerConfig& c) { return {c.layers, c.heads, c.width, c.ffn_width}; }

}  // namespace

void validate(const ControllerConfig& c) {
  if (c.width < 4 || c.heads == 0 || c.width % c.heads != 0) {
    throw ConfigError("controller width must be >= 4 and divisible by heads");
  }
  if (c.layers == 0 || c.ffn_width == 0 || c.encoder_hidden == 0 || c.terrain_hidden == 0 || c.terrain_width == 0 ||
      c.decoder_hidden == 0 || c.max_bodies == 0) {
    throw ConfigError("controller layer sizes must be positive");
  }
  if (!(c.init_std > 1e-3 && std::isfinite(c.init_std))) throw ConfigError("controller init_std must exceed 1e-3");
}

DesignLayout layout_of(const grammar::DesignGraph& design) {
  DesignLayout l;
  for (int id : grammar::flatten_dfs(design)) {
    const auto& n = design.node(id);
    if (n.joint && n.joint->actuated()) {
      l.body_dof.push_back(static_cast<int>(l.dofs++));
    } else {
      l.body_dof.push_back(-1);
    }
  }
  l.bodies = l.body_dof.size();
  return l;
}

RunningStat::RunningStat(std::size_t dim) : mean_(dim, 0.0), m2_(dim, 0.0) {}

void RunningStat::update(std::span<const double> rows) {
  const std::size_t d = dim();
  if (d == 0 || rows.empty()) return;
  if (rows.size() % d != 0) throw ShapeError("RunningStat: row data is not a multiple of the feature count");
  const double n = static_cast<double>(rows.size() / d);
  for (std::size_t f = 0; f < d; ++f) {
    double bm = 0.0;
    for (std::size_t r = f; r < rows.size(); r += d) bm += rows[r];
    bm /= n;
    double bm2 = 0.0;
    for (std::size_t r = f; r < rows.size(); r += d) bm2 += (rows[r] - bm) * (rows[r] - bm);
    const double total = count_ + n;
    const double delta = bm - mean_[f];
    mean_[f] += delta * n / total;
    m2_[f] += bm2 + delta * delta * count_ * n / total;
  }
  count_ += n;
}

void RunningStat::normalize(std::span<const double> in, double* out) const {
  const std::size_t d = dim();
  if (count_ < 2.0) {
    std::copy(in.begin(), in.end(), out);
    return;
  }
  for (std::size_t i = 0; i < in.size(); ++i) {
    const std::size_t f = i % d;
    const double sd = std::sqrt(m2_[f] / count_ + 1e-8);
    out[i] = std::clamp((in[i] - mean_[f]) / sd, -10.0, 10.0);
  }
}

void RunningStat::set(double count, std::vector<double> mean, std::vector<double> m2) {
  if (mean.size() != m2.size()) throw ShapeError("RunningStat: mean and m2 sizes differ");
  count_ = count;
  mean_ = std::move(mean);
  m2_ = std::move(m2);
}

void ObsNormalizer::update(const sim::Observation& obs) {
  const std::size_t nb = obs.bodies * sim::kBodyFeatures, nd = obs.dofs * sim::kDofFeatures;
  body.update(std::span<const double>(obs.data.data(), nb));
  dof.update(std::span<const double>(obs.data.data() + nb, nd));
  terrain.update(obs.terrain_features());
}

ParamSet ObsNormalizer::to_params() const {
  ParamSet ps;
  auto put = [&](const std::string& name, const RunningStat& s) {
    ps.add("controller_norm/" + name + ".count", Tensor(Shape{1}, s.count()));
    ps.add("controller_norm/" + name + ".mean", Tensor(Shape{s.dim()}, s.mean()));
    ps.add("controller_norm/" + name + ".m2", Tensor(Shape{s.dim()}, s.m2()));
  };
  put("body", body);
  put("dof", dof);
  put("terrain", terrain);
  return ps;
}

void ObsNormalizer::load(const ParamSet& ps) {
  auto get = [&](const std::string& name, RunningStat& s) {
    const std::string p = "controller_norm/" + name;
    const Tensor& m = ps.at(p + ".mean");
    const Tensor& m2 = ps.at(p + ".m2");
    s.set(ps.at(p + ".count")[0], {m.values().begin(), m.values().end()}, {m2.values().begin(), m2.values().end()});
  };
  get("body", body);
  get("dof", dof);
  get("terrain", terrain);
}

Controller::Controller(ControllerConfig cfg) : cfg_(cfg) {
  validate(cfg_);
  geom_width_ = cfg_.width / 2;
  dof_width_ = cfg_.width / 4;
  inertial_width_ = cfg_.width - geom_width_ - dof_width_;
}

void Controller::init(ParamSet& theta, Rng& rng) const {
  const std::size_t h = cfg_.encoder_hidden;
  nn::init_mlp(theta, kGeom, {sim::kGeomFeatures, h, geom_width_}, rng);
  nn::init_mlp(theta, kDof, {sim::kDofFeatures, h, dof_width_}, rng);
  nn::init_mlp(theta, kInertial, {sim::kInertialFeatures, h, inertial_width_}, rng);
  Tensor null_dof(Shape{1, dof_width_});
  for (double& v : null_dof.values()) v = 0.5 * rng.normal();
  theta.add(kNullDof, std::move(null_dof));
  Tensor pos(Shape{cfg_.max_bodies, cfg_.width});
  for (double& v : pos.values()) v = 0.1 * rng.normal();
  theta.add(kPos, std::move(pos));
  nn::init_transformer(theta, kEncoder, shape_of(cfg_), rng);
  nn::init_mlp(theta, kTerrain, {cfg_.terrain_samples, cfg_.terrain_hidden, cfg_.terrain_hidden, cfg_.terrain_width},
               rng);
  const std::size_t fused = cfg_.width + cfg_.terrain_width;
  nn::init_mlp(theta, kValue, {fused, cfg_.decoder_hidden, 1}, rng);
  nn::init_mlp(theta, kAction, {fused, cfg_.decoder_hidden, 2}, rng, 0.01);
  // Pre-std bias so that softplus(b) + 1e-3 equals init_std.
  const double y = cfg_.init_std - 1e-3;
  Tensor& b = theta.at(kAction + ".l1.b");
  b[1] = y + std::log(-std::expm1(-y));
}

void Controller::check(const PolicyInput& in) const {
  const DesignLayout& l = *in.layout;
  const sim::Observation& o = *in.obs;
  if (o.bodies != l.bodies || o.dofs != l.dofs) {
    throw ShapeError("observation has " + std::to_string(o.bodies) + " bodies and " + std::to_string(o.dofs) +
                     " DoFs but the design has " + std::to_string(l.bodies) + " bodies and " +
                     std::to_string(l.dofs) + " DoFs");
  }
  if (o.terrain != cfg_.terrain_samples) {
    throw ShapeError("observation has " + std::to_string(o.terrain) + " terrain samples, controller expects " +
                     std::to_string(cfg_.terrain_samples));
  }
  if (l.bodies == 0 || l.bodies > cfg_.max_bodies) {
    throw ShapeError("design has " + std::to_string(l.bodies) + " bodies; the controller supports 1.." +
                     std::to_string(cfg_.max_bodies));
  }
  if (o.data.size() != o.bodies * sim::kBodyFeatures + o.dofs * sim::kDofFeatures + o.terrain) {
    throw ShapeError("observation data length does not match its counts");
  }
  for (double v : o.data) {
    if (!std::isfinite(v)) throw NumericError("observation contains a non-finite value");
  }
}

namespace {

// Normalized per-row inputs of a batch, with pads at the end of each item.
struct Packed {
  std::size_t items = 0, seq = 0, dofs = 0;
  Tensor geom, inertial, dof, terrain, mask;
  std::vector<std::size_t> dof_select;  // per padded row: DoF row or `dofs` for the null encoding
  std::vector<std::size_t> positions;   // per padded row
  std::vector<std::size_t> item_of_row;
  std::vector<std::size_t> valid_rows, valid_item;
  std::vector<std::size_t> dof_rows, dof_item, dof_offset;
};

Packed pack(const std::vector<PolicyInput>& batch, const ObsNormalizer& norm, std::size_t terrain_samples) {
  Packed p;
  p.items = batch.size();
  for (const auto& in : batch) {
    p.seq = std::max(p.seq, in.layout->bodies);
    p.dofs += in.layout->dofs;
  }
  const std::size_t rows = p.items * p.seq;
  p.geom = Tensor(Shape{rows, sim::kGeomFeatures});
  p.inertial = Tensor(Shape{rows, sim::kInertialFeatures});
  p.dof = Tensor(Shape{p.dofs, sim::kDofFeatures});
  p.terrain = Tensor(Shape{p.items, terrain_samples});
  p.mask = Tensor(Shape{p.items, p.seq}, -std::numeric_limits<double>::infinity());
  p.dof_select.assign(rows, p.dofs);
  p.positions.resize(rows);
  p.item_of_row.resize(rows);
  std::vector<double> body(sim::kBodyFeatures);
  std::size_t dof_base = 0;
  p.dof_offset.push_back(0);
  for (std::size_t b = 0; b < p.items; ++b) {
    const DesignLayout& l = *batch[b].layout;
    const sim::Observation& o = *batch[b].obs;
    for (std::size_t i = 0; i < p.seq; ++i) {
      const std::size_t r = b * p.seq + i;
      p.positions[r] = i;
      p.item_of_row[r] = b;
      if (i >= l.bodies) continue;
      p.mask.at(b, i) = 0.0;
      norm.body.normalize(o.body(i), body.data());
      std::copy_n(body.data(), sim::kGeomFeatures, p.geom.data() + r * sim::kGeomFeatures);
      std::copy_n(body.data() + sim::kGeomFeatures, sim::kInertialFeatures,
                  p.inertial.data() + r * sim::kInertialFeatures);
      p.valid_rows.push_back(r);
      p.valid_item.push_back(b);
      if (l.body_dof[i] >= 0) {
        const std::size_t d = dof_base + static_cast<std::size_t>(l.body_dof[i]);
        p.dof_select[r] = d;
      }
    }
    // DoF rows in action order.
    for (std::size_t k = 0; k < l.dofs; ++k) {
      norm.dof.normalize(o.dof(k), p.dof.data() + (dof_base + k) * sim::kDofFeatures);
    }
    std::vector<std::size_t> row_of_dof(l.dofs);
    for (std::size_t i = 0; i < l.bodies; ++i) {
      if (l.body_dof[i] >= 0) row_of_dof[static_cast<std::size_t>(l.body_dof[i])] = b * p.seq + i;
    }
    for (std::size_t k = 0; k < l.dofs; ++k) {
      p.dof_rows.push_back(row_of_dof[k]);
      p.dof_item.push_back(b);
    }
    norm.terrain.normalize(o.terrain_features(), p.terrain.data() + b * terrain_samples);
    dof_base += l.dofs;
    p.dof_offset.push_back(dof_base);
  }
  return p;
}

}  // namespace

Var Controller::encode_bodies(const BoundParams& theta, const PolicyInput& in, const ObsNormalizer& norm) const {
  check(in);
  ad::Tape& tape = *theta.tape();
  const Packed p = pack({in}, norm, cfg_.terrain_samples);
  Var ge = nn::mlp(theta, kGeom, tape.constant(p.geom));
  Var ie = nn::mlp(theta, kInertial, tape.constant(p.inertial));
  Var table = theta[kNullDof];
  if (p.dofs > 0) table = ad::concat({nn::mlp(theta, kDof, tape.constant(p.dof)), table}, 0);
  Var de = ad::take_rows(table, p.dof_select);
  return ad::concat({ge, de, ie}, 1);
}

PolicyOutput Controller::forward(const BoundParams& theta, const std::vector<PolicyInput>& batch,
                                 const ObsNormalizer& norm, const ForwardOptions& opt) const {
  if (batch.empty()) throw InvalidArgument("policy forward: empty batch");
  for (const auto& in : batch) check(in);
  ad::Tape& tape = *theta.tape();
  const Packed p = pack(batch, norm, cfg_.terrain_samples);

  Var ge = nn::mlp(theta, kGeom, tape.constant(p.geom));
  Var ie = nn::mlp(theta, kInertial, tape.constant(p.inertial));
  Var table = theta[kNullDof];
  if (p.dofs > 0) table = ad::concat({nn::mlp(theta, kDof, tape.constant(p.dof)), table}, 0);
  Var x = ad::concat({ge, ad::take_rows(table, p.dof_select), ie}, 1);
  x = ad::add(x, ad::take_rows(theta[kPos], p.positions));
  Var h = nn::transformer(theta, kEncoder, shape_of(cfg_), x, p.items, p.seq, &p.mask);

  // Terrain joins after attention.
  Var te = nn::mlp(theta, kTerrain, tape.constant(p.terrain));
  if (opt.zero_terrain) te = ad::scale(te, 0.0);
  Var fused = ad::concat({h, ad::take_rows(te, p.item_of_row)}, 1);

  PolicyOutput out;
  Var v = nn::mlp(theta, kValue, ad::take_rows(fused, p.valid_rows));
  out.value = ad::segment_mean(v, p.valid_item, p.items);
  if (p.dofs > 0) {
    Var a = nn::mlp(theta, kAction, ad::take_rows(fused, p.dof_rows));
    out.mean = ad::reshape(ad::slice(a, 1, 0, 1), Shape{p.dofs});
    out.std = ad::shift(ad::softplus(ad::reshape(ad::slice(a, 1, 1, 2), Shape{p.dofs})), 1e-3);
  } else {
    out.mean = tape.constant(Tensor(Shape{0}));
    out.std = tape.constant(Tensor(Shape{0}));
  }
  out.dof_item = p.dof_item;
  out.dof_offset = p.dof_offset;
  return out;
}

LogProbEntropy action_log_prob_entropy(Var mean, Var std, Var action, const std::vector<std::size_t>& dof_item,
                                       std::size_t items) {
  if (mean.shape() != std.shape() || mean.shape() != action.shape() || mean.size() != dof_item.size()) {
    throw ShapeError("action_log_prob_entropy: mean " + ad::to_string(mean.shape()) + ", std " +
                     ad::to_string(std.shape()) + ", action " + ad::to_string(action.shape()) + ", " +
                     std::to_string(dof_item.size()) + " DoF ids");
  }
  for (double s : std.value().values()) {
    if (!(s > 0.0)) throw InvalidArgument("action_log_prob_entropy: std must be positive");
  }
  LogProbEntropy r;
  ad::Tape& tape = *mean.tape();
  if (mean.size() == 0) {
    r.log_prob = tape.constant(Tensor(Shape{items}));
    r.entropy = tape.constant(Tensor(Shape{items}));
    return r;
  }
  Var log_std = ad::log(std);
  Var z = ad::div(ad::sub(action, mean), std);
  Var lp = ad::shift(ad::sub(ad::scale(ad::square(z), -0.5), log_std), -kHalfLog2Pi);
  r.log_prob = ad::segment_sum(lp, dof_item, items);
  r.entropy = ad::segment_sum(ad::shift(log_std, 0.5 + kHalfLog2Pi), dof_item, items);
  return r;
}

double gaussian_log_prob(std::span<const double> mean, std::span<const double> std, std::span<const double> action) {
  if (mean.size() != std.size() || mean.size() != action.size()) throw ShapeError("gaussian_log_prob: size mismatch");
  double lp = 0.0;
  for (std::size_t i = 0; i < mean.size(); ++i) {
    if (!(std[i] > 0.0)) throw InvalidArgument("gaussian_log_prob: std must be positive");
    const double z = (action[i] - mean[i]) / std[i];
    lp += -0.5 * z * z - std::log(std[i]) - kHalfLog2Pi;
  }
  return lp;
}

double gaussian_entropy(std::span<const double> std) {
  double e = 0.0;
  for (double s : std) e += 0.5 + kHalfLog2Pi + std::log(s);
  return e;
}

}  // namespace nlimb::control
