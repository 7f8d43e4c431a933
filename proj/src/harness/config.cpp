#include "harness/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "common/error.hpp"
#include "json.hpp"

namespace nlimb::harness {

using nlohmann::json;

const char* to_string(Algorithm a) {
  switch (a) {
    case Algorithm::nlimb: return "nlimb";
    case Algorithm::random_search: return "random-search";
    case Algorithm::ablation: return "ablation";
  }
  return "?";
}

namespace {

static_assert(std::is_same_v<std::size_t, std::uint64_t>, "size_t fields are visited as uint64");

struct EnumInfo {
  std::vector<std::string> names;
};

// One walk over the config drives parsing, writing and the schema.
class Visitor {
 public:
  virtual ~Visitor() = default;
  virtual void section(const std::string& name, const std::function<void()>& body) = 0;
  virtual void field(const std::string& name, double& v) = 0;
  virtual void field(const std::string& name, std::uint64_t& v) = 0;
  virtual void field(const std::string& name, bool& v) = 0;
  virtual void field(const std::string& name, std::string& v) = 0;
  virtual void choice(const std::string& name, std::string& v, const EnumInfo& e) = 0;

  void field(const std::string& name, int& v) {
    std::uint64_t x = static_cast<std::uint64_t>(v);
    field(name, x);
    v = static_cast<int>(x);
  }
};

const EnumInfo kTasks{{"flat", "gaps", "walls"}};
const EnumInfo kAlgorithms{{"nlimb", "random-search", "ablation"}};

void visit(ExperimentConfig& c, Visitor& v, bool hashing = false) {
  std::string task = sim::to_string(c.task);
  v.choice("task", task, kTasks);
  c.task = *sim::terrain_kind_from_string(task);
  v.field("grammar", c.grammar);
  std::string algo = to_string(c.algorithm);
  v.choice("algorithm", algo, kAlgorithms);
  c.algorithm = algo == "nlimb" ? Algorithm::nlimb : algo == "ablation" ? Algorithm::ablation : Algorithm::random_search;
  v.field("seed", c.seed);
  if (!hashing) v.field("output", c.output);
  v.field("eval_episodes", c.eval_episodes);

  v.section("train", [&] {
    auto& t = c.train;
    v.field("budget", t.budget);
    v.field("warmup", t.warmup);
    v.field("designs_per_iter", t.designs_per_iter);
    v.field("steps_per_design", t.steps_per_design);
    v.field("gamma", t.gamma);
    v.field("lambda", t.lambda);
    v.field("clip", t.clip);
    v.field("epochs", t.epochs);
    v.field("minibatch", t.minibatch);
    v.field("lr_theta", t.lr_theta);
    v.field("lr_phi", t.lr_phi);
    v.field("entropy_coef", t.entropy_coef);
    v.field("value_coef", t.value_coef);
    v.field("max_grad_norm", t.max_grad_norm);
    if (!hashing) {
      v.field("workers", t.workers);
      v.field("checkpoint_every", t.checkpoint_every);
    }
  });
  v.section("baseline", [&] {
    auto& b = c.baseline;
    v.field("designs", b.designs);
    v.field("pretrain_fraction", b.pretrain_fraction);
    v.field("candidates", b.candidates);
    v.field("finetune_top", b.finetune_top);
    v.field("rank_episodes", b.rank_episodes);
    v.field("eval_episodes", b.eval_episodes);
  });
  v.section("controller", [&] {
    auto& k = c.controller;
    v.field("layers", k.layers);
    v.field("heads", k.heads);
    v.field("width", k.width);
    v.field("ffn_width", k.ffn_width);
    v.field("encoder_hidden", k.encoder_hidden);
    v.field("terrain_hidden", k.terrain_hidden);
    v.field("terrain_width", k.terrain_width);
    v.field("decoder_hidden", k.decoder_hidden);
    v.field("max_bodies", k.max_bodies);
    v.field("init_std", k.init_std);
  });
  v.section("design_model", [&] {
    auto& d = c.design_model;
    v.field("layers", d.layers);
    v.field("heads", d.heads);
    v.field("width", d.width);
    v.field("ffn_width", d.ffn_width);
    v.field("max_seq", d.max_seq);
  });
  v.section("env", [&] {
    auto& e = c.env;
    v.field("horizon", e.horizon);
    v.field("action_repeat", e.action_repeat);
    v.field("terrain_samples", e.sampling.samples);
    v.field("terrain_spacing", e.sampling.spacing);
    v.section("reward", [&] {
      v.field("progress", e.weights.progress);
      v.field("upright", e.weights.upright);
      v.field("heading", e.weights.heading);
      v.field("torque", e.weights.torque);
      v.field("energy", e.weights.energy);
      v.field("joint_limit", e.weights.joint_limit);
    });
    v.section("fall", [&] {
      v.field("max_pitch", e.fall.max_pitch);
      v.field("min_height_fraction", e.fall.min_height_fraction);
    });
    v.section("sim", [&] {
      auto& s = e.sim;
      v.field("gravity", s.gravity);
      v.field("dt", s.dt);
      v.field("substeps", s.substeps);
      v.field("solver_iterations", s.solver_iterations);
      v.field("contact_stiffness", s.contact_stiffness);
      v.field("contact_damping", s.contact_damping);
      v.field("friction", s.friction);
      v.field("baumgarte", s.baumgarte);
      v.field("limit_stiffness", s.limit_stiffness);
      v.field("limit_damping", s.limit_damping);
      v.field("joint_damping", s.joint_damping);
      v.field("divergence_speed", s.divergence_speed);
    });
    v.section("terrain", [&] {
      auto& t = e.terrain_config;
      v.field("course_start", t.course_start);
      v.field("course_end", t.course_end);
      v.field("spawn_half_width", t.spawn_half_width);
      v.field("gap_min", t.gap_min);
      v.field("gap_max", t.gap_max);
      v.field("spacing_min", t.spacing_min);
      v.field("spacing_max", t.spacing_max);
      v.field("wall_min", t.wall_min);
      v.field("wall_max", t.wall_max);
      v.field("wall_thickness", t.wall_thickness);
      v.field("gap_depth", t.gap_depth);
    });
  });
  v.section("generalization", [&] {
    auto& g = c.generalization;
    v.field("enabled", g.enabled);
    v.field("designs", g.designs);
    v.field("specialist_budget", g.specialist_budget);
    v.field("eval_episodes", g.eval_episodes);
  });
  c.train.seed = c.seed;
  c.env.terrain = c.task;
  c.controller.terrain_samples = c.env.sampling.samples;
}

std::string join(const std::vector<std::string>& path, const std::string& leaf) {
  std::string s;
  for (const auto& p : path) s += p + ".";
  return s + leaf;
}

class Parser : public Visitor {
 public:
  explicit Parser(const json& root) { stack_.push_back(&root); }

  void section(const std::string& name, const std::function<void()>& body) override {
    const json* obj = lookup(name);
    if (!obj) return body_with(nullptr, name, body);
    if (!obj->is_object()) fail(name, "must be an object");
    body_with(obj, name, body);
  }
  void field(const std::string& name, double& v) override {
    if (const json* j = lookup(name)) {
      if (!j->is_number()) fail(name, "must be a number");
      v = j->get<double>();
    }
  }
  void field(const std::string& name, std::uint64_t& v) override {
    if (const json* j = lookup(name)) {
      if (!j->is_number_integer() || (!j->is_number_unsigned() && j->get<std::int64_t>() < 0)) {
        fail(name, "must be a non-negative integer");
      }
      v = j->get<std::uint64_t>();
    }
  }
  void field(const std::string& name, bool& v) override {
    if (const json* j = lookup(name)) {
      if (!j->is_boolean()) fail(name, "must be true or false");
      v = j->get<bool>();
    }
  }
  void field(const std::string& name, std::string& v) override {
    if (const json* j = lookup(name)) {
      if (!j->is_string()) fail(name, "must be a string");
      v = j->get<std::string>();
    }
  }
  void choice(const std::string& name, std::string& v, const EnumInfo& e) override {
    if (const json* j = lookup(name)) {
      if (!j->is_string()) fail(name, "must be a string");
      const auto s = j->get<std::string>();
      if (std::find(e.names.begin(), e.names.end(), s) == e.names.end()) {
        std::string all;
        for (const auto& n : e.names) all += (all.empty() ? "" : ", ") + n;
        fail(name, "must be one of " + all + " (got \"" + s + "\")");
      }
      v = s;
    }
  }

  // Keys present in the document but never visited.
  void check_unknown(const json& obj, const std::vector<std::string>& path) const {
    for (auto it = obj.begin(); it != obj.end(); ++it) {
      const std::string full = join(path, it.key());
      if (!seen_.count(full)) throw ConfigError("config: unknown key '" + full + "'");
      if (it->is_object() && sections_.count(full)) {
        auto p = path;
        p.push_back(it.key());
        check_unknown(*it, p);
      }
    }
  }

 private:
  const json* lookup(const std::string& name) {
    seen_.insert(join(path_, name));
    const json* top = stack_.back();
    if (!top) return nullptr;
    auto it = top->find(name);
    return it == top->end() ? nullptr : &*it;
  }
  void body_with(const json* obj, const std::string& name, const std::function<void()>& body) {
    sections_.insert(join(path_, name));
    stack_.push_back(obj);
    path_.push_back(name);
    body();
    path_.pop_back();
    stack_.pop_back();
  }
  [[noreturn]] void fail(const std::string& name, const std::string& what) const {
    throw ConfigError("config: '" + join(path_, name) + "' " + what);
  }

  std::vector<const json*> stack_;
  std::vector<std::string> path_;
  std::set<std::string> seen_, sections_;
};

class Writer : public Visitor {
 public:
  json root = json::object();
  Writer() { stack_.push_back(&root); }
  void section(const std::string& name, const std::function<void()>& body) override {
    json& obj = (*stack_.back())[name] = json::object();
    stack_.push_back(&obj);
    body();
    stack_.pop_back();
  }
  void field(const std::string& name, double& v) override { (*stack_.back())[name] = v; }
  void field(const std::string& name, std::uint64_t& v) override { (*stack_.back())[name] = v; }
  void field(const std::string& name, bool& v) override { (*stack_.back())[name] = v; }
  void field(const std::string& name, std::string& v) override { (*stack_.back())[name] = v; }
  void choice(const std::string& name, std::string& v, const EnumInfo&) override { (*stack_.back())[name] = v; }

 private:
  std::vector<json*> stack_;
};

class SchemaWriter : public Visitor {
 public:
  json root = object();
  SchemaWriter() { stack_.push_back(&root); }
  void section(const std::string& name, const std::function<void()>& body) override {
    json& obj = (*stack_.back())["properties"][name] = object();
    stack_.push_back(&obj);
    body();
    stack_.pop_back();
  }
  void field(const std::string& name, double& v) override { put(name, {{"type", "number"}, {"default", v}}); }
  void field(const std::string& name, std::uint64_t& v) override {
    put(name, {{"type", "integer"}, {"minimum", 0}, {"default", v}});
  }
  void field(const std::string& name, bool& v) override { put(name, {{"type", "boolean"}, {"default", v}}); }
  void field(const std::string& name, std::string& v) override { put(name, {{"type", "string"}, {"default", v}}); }
  void choice(const std::string& name, std::string& v, const EnumInfo& e) override {
    put(name, {{"type", "string"}, {"enum", e.names}, {"default", v}});
  }

 private:
  static json object() { return {{"type", "object"}, {"additionalProperties", false}, {"properties", json::object()}}; }
  void put(const std::string& name, json j) { (*stack_.back())["properties"][name] = std::move(j); }
  std::vector<json*> stack_;
};

void validate(const ExperimentConfig& c) {
  train::validate(c.train);
  control::validate(c.controller);
  const auto& d = c.design_model;
  if (d.layers == 0 || d.heads == 0 || d.width == 0 || d.width % d.heads != 0 || d.ffn_width == 0 || d.max_seq == 0) {
    throw ConfigError("config: design_model sizes must be positive with width divisible by heads");
  }
  const auto& e = c.env;
  if (e.horizon <= 0 || e.action_repeat <= 0) throw ConfigError("config: env horizon and action_repeat must be positive");
  if (e.sampling.samples == 0 || !(e.sampling.spacing > 0.0)) {
    throw ConfigError("config: env terrain_samples and terrain_spacing must be positive");
  }
  const auto& s = e.sim;
  if (!(s.dt > 0.0) || s.substeps <= 0 || s.solver_iterations <= 0 || !(s.gravity >= 0.0)) {
    throw ConfigError("config: env.sim dt, substeps, solver_iterations must be positive and gravity non-negative");
  }
  if (!(s.friction >= 0.0) || !(s.contact_stiffness > 0.0) || !(s.divergence_speed > 0.0)) {
    throw ConfigError("config: env.sim friction, contact_stiffness and divergence_speed out of range");
  }
  if (c.eval_episodes == 0) throw ConfigError("config: eval_episodes must be positive");
  if (c.generalization.enabled && (c.generalization.designs == 0 || c.generalization.eval_episodes == 0)) {
    throw ConfigError("config: generalization needs designs and eval_episodes");
  }
}

}  // namespace

ExperimentConfig parse_config(const std::string& text) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  if (!root.is_object()) throw ConfigError("config: top level must be an object");
  ExperimentConfig c;
  Parser p(root);
  visit(c, p);
  p.check_unknown(root, {});
  validate(c);
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

void set_config_value(ExperimentConfig& c, const std::string& path, const std::string& json_value) {
  json value;
  try {
    value = json::parse(json_value);
  } catch (const json::parse_error&) {
    throw ConfigError("config: value for '" + path + "' is not valid JSON: " + json_value);
  }
  json root = json::parse(config_to_json(c));
  json* node = &root;
  std::size_t start = 0;
  for (;;) {
    const std::size_t dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (key.empty() || !node->is_object() || !node->contains(key)) throw ConfigError("config: unknown key '" + path + "'");
    node = &(*node)[key];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  if (node->is_object()) throw ConfigError("config: '" + path + "' is a section, not a field");
  *node = std::move(value);
  c = parse_config(root.dump());
}

std::string config_to_json(const ExperimentConfig& c) {
  ExperimentConfig copy = c;
  Writer w;
  visit(copy, w);
  return w.root.dump(2);
}

std::string config_hash(const ExperimentConfig& c) {
  ExperimentConfig copy = c;
  Writer w;
  visit(copy, w, true);
  const std::string text = w.root.dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : text) h = (h ^ ch) * 0x100000001b3ULL;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

const std::string& config_schema() {
  static const std::string schema = [] {
    ExperimentConfig c;
    SchemaWriter w;
    visit(c, w);
    w.root["$schema"] = "https://json-schema.org/draft/2020-12/schema";
    w.root["title"] = "experiment config";
    return w.root.dump(2);
  }();
  return schema;
}

}  // namespace nlimb::harness
