#include <cmath>
#include <cstring>
#include <filesystem>
#include <set>
#include <sstream>
#include <fstream>
#include <unistd.h>

#include "common/error.hpp"
#include "doctest.h"
#include "harness/config.hpp"
#include "harness/design_doc.hpp"
#include "harness/metrics.hpp"
#include "harness/plot.hpp"
#include "harness/run.hpp"
#include "json.hpp"

using namespace nlimb;
using namespace nlimb::harness;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name)
      : path(fs::temp_directory_path() / ("nlimb_harness_" + std::to_string(::getpid()) + "_" + name)) {
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

const char* kToyGrammar = R"(
symbol Robot nonterminal
symbol torso terminal
symbol stub terminal
symbol leg terminal
attr torso length=0.6 radius=0.04 mass=1.5
attr stub length=0.01 radius=0.02 mass=0.05
attr leg length=0.2 radius=0.03 mass=0.4
start Robot
rule Robot -> @b:torso f:stub[x=0.9 pitch=-pi/2 mirrored=1] h:stub[x=0.1 pitch=-pi/2 mirrored=1] b->f[type=pitch lo=-0.5 hi=0.5 torque=25] b->h[type=pitch lo=-0.5 hi=0.5 torque=25]
rule Robot -> @b:torso f:leg[x=0.9 pitch=-pi/2 mirrored=1] h:leg[x=0.1 pitch=-pi/2 mirrored=1] b->f[type=pitch lo=-0.5 hi=0.5 torque=25] b->h[type=pitch lo=-0.5 hi=0.5 torque=25]
)";

// A config small enough to train in well under a second.
ExperimentConfig toy_config(const fs::path& dir, const fs::path& out) {
  const fs::path g = dir / "toy.grammar";
  if (!fs::exists(g)) std::ofstream(g) << kToyGrammar;
  ExperimentConfig c = parse_config(R"({
    "seed": 5, "eval_episodes": 2,
    "train": {"budget": 1600, "warmup": 400, "designs_per_iter": 2, "steps_per_design": 100,
              "minibatch": 64, "epochs": 2, "checkpoint_every": 2},
    "controller": {"layers": 1, "heads": 2, "width": 8, "ffn_width": 8, "encoder_hidden": 4,
                   "terrain_hidden": 4, "terrain_width": 4, "decoder_hidden": 4},
    "design_model": {"layers": 1, "heads": 2, "width": 8, "ffn_width": 8, "max_seq": 16},
    "env": {"horizon": 40}
  })");
  c.grammar = g.string();
  c.output = out.string();
  return c;
}

train::IterationMetrics record(std::uint64_t i, double v) {
  train::IterationMetrics m;
  m.iteration = i;
  m.T = 100 * i;
  m.mean_return = v;
  m.std_return = v / 3.0;
  m.phi_entropy = std::log(2.0);
  m.approx_kl = 1e-310;  // subnormal
  m.histogram["ab12"] = 3;
  return m;
}

bool same_bits(double a, double b) { return std::memcmp(&a, &b, sizeof a) == 0; }

void expect_same(const train::IterationMetrics& a, const train::IterationMetrics& b) {
  CHECK(a.iteration == b.iteration);
  CHECK(a.T == b.T);
  for (auto [x, y] : {std::pair{a.mean_return, b.mean_return}, {a.std_return, b.std_return},
                      {a.phi_entropy, b.phi_entropy}, {a.grad_norm_theta, b.grad_norm_theta},
                      {a.grad_norm_phi, b.grad_norm_phi}, {a.policy_loss, b.policy_loss}, {a.value_loss, b.value_loss},
                      {a.entropy, b.entropy}, {a.approx_kl, b.approx_kl}, {a.clip_fraction, b.clip_fraction},
                      {a.wall_clock, b.wall_clock}}) {
    CHECK(same_bits(x, y));
  }
  CHECK(a.phi_updated == b.phi_updated);
  CHECK(a.ppo_aborted == b.ppo_aborted);
  CHECK(a.flagged_designs == b.flagged_designs);
  CHECK(a.divergences == b.divergences);
  CHECK(a.histogram == b.histogram);
}

std::string without_wall_clock(const std::string& text) {
  std::string out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    auto j = json::parse(line);
    j.erase("wall_clock");
    out += j.dump() + "\n";
  }
  return out;
}

// Every leaf of a JSON object as a dotted path.
void leaves(const json& j, const std::string& prefix, std::vector<std::string>& out) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string p = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (it->is_object()) leaves(*it, p, out);
    else out.push_back(p);
  }
}

json& at_path(json& j, const std::string& path) {
  json* n = &j;
  std::size_t s = 0;
  for (;;) {
    const auto d = path.find('.', s);
    n = &(*n)[path.substr(s, d == std::string::npos ? std::string::npos : d - s)];
    if (d == std::string::npos) return *n;
    s = d + 1;
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

TEST_CASE("empty config gives the defaults") {
  const auto c = parse_config("{}");
  CHECK(c.algorithm == Algorithm::nlimb);
  CHECK(c.task == sim::TerrainKind::flat);
  CHECK(c.train == train::TrainConfig{});
  CHECK(c.eval_episodes == 32);
}

TEST_CASE("unknown keys are rejected with their path") {
  auto message = [](const std::string& text) {
    try {
      parse_config(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message(R"({"budget": 5})").find("'budget'") != std::string::npos);
  CHECK(message(R"({"env": {"reward": {"speed": 1}}})").find("'env.reward.speed'") != std::string::npos);
  CHECK(message(R"({"train": {"budget": -1}})").find("'train.budget' must be a non-negative integer") !=
        std::string::npos);
  CHECK(message(R"({"train": {"gamma": "0.9"}})").find("'train.gamma' must be a number") != std::string::npos);
  CHECK(message(R"({"task": "ice"})").find("must be one of flat, gaps, walls") != std::string::npos);
  CHECK(message(R"({"train": 3})").find("'train' must be an object") != std::string::npos);
  CHECK(message(R"({"train": {"budget": 1.5}})").find("non-negative integer") != std::string::npos);
  CHECK(message("{oops").find("invalid JSON") != std::string::npos);
  CHECK(message(R"({"train": {"gamma": 1.5}})").find("gamma") != std::string::npos);
}

TEST_CASE("config JSON round-trips") {
  auto c = parse_config(R"({"task": "gaps", "algorithm": "random-search", "seed": 9, "train": {"budget": 1234567}})");
  const auto text = config_to_json(c);
  const auto back = parse_config(text);
  CHECK(config_to_json(back) == text);
  CHECK(back.train.budget == 1234567);
  CHECK(back.train.seed == 9);
  CHECK(back.env.terrain == sim::TerrainKind::gaps);
}

TEST_CASE("schema lists every field and forbids extra keys") {
  json s = json::parse(config_schema());
  CHECK(s["additionalProperties"] == false);
  CHECK(s["properties"]["train"]["additionalProperties"] == false);
  CHECK(s["properties"]["train"]["properties"]["budget"]["type"] == "integer");
  CHECK(s["properties"]["task"]["enum"] == json({"flat", "gaps", "walls"}));
  std::vector<std::string> fields;
  leaves(json::parse(config_to_json(ExperimentConfig{})), "", fields);
  for (const auto& f : fields) {
    json* n = &s;
    std::size_t st = 0;
    for (;;) {
      const auto d = f.find('.', st);
      n = &(*n)["properties"][f.substr(st, d == std::string::npos ? std::string::npos : d - st)];
      if (d == std::string::npos) break;
      st = d + 1;
    }
    CHECK_MESSAGE(n->contains("default"), f);
  }
}

TEST_CASE("config hash changes iff a semantic field changes") {
  const ExperimentConfig base;
  const std::string h0 = config_hash(base);
  const json j0 = json::parse(config_to_json(base));
  std::vector<std::string> fields;
  leaves(j0, "", fields);
  const std::set<std::string> inert = {"output", "train.workers", "train.checkpoint_every"};
  int checked = 0;
  for (const auto& f : fields) {
    json j = j0;
    json& v = at_path(j, f);
    std::vector<json> candidates;
    if (v.is_boolean()) candidates = {!v.get<bool>()};
    else if (v.is_number_unsigned()) candidates = {v.get<std::uint64_t>() + 1, v.get<std::uint64_t>() * 2, 3};
    else if (v.is_number()) candidates = {v.get<double>() * 0.5, v.get<double>() + 0.25};
    else if (f == "task") candidates = {"gaps"};
    else if (f == "algorithm") candidates = {"ablation"};
    else candidates = {v.get<std::string>() + "x"};
    bool done = false;
    for (const auto& cand : candidates) {
      v = cand;
      ExperimentConfig c;
      try {
        c = parse_config(j.dump());
      } catch (const ConfigError&) {
        continue;
      }
      if (inert.count(f)) CHECK_MESSAGE(config_hash(c) == h0, f);
      else CHECK_MESSAGE(config_hash(c) != h0, f);
      done = true;
      break;
    }
    CHECK_MESSAGE(done, f);
    checked += done ? 1 : 0;
  }
  CHECK(checked > 60);
  CHECK(config_hash(parse_config(config_to_json(base))) == h0);
}

TEST_CASE("set_config_value") {
  ExperimentConfig c;
  set_config_value(c, "train.budget", "0");
  CHECK(c.train.budget == 0);
  set_config_value(c, "task", "\"walls\"");
  CHECK(c.env.terrain == sim::TerrainKind::walls);
  CHECK_THROWS_AS(set_config_value(c, "train.nope", "1"), ConfigError);
  CHECK_THROWS_AS(set_config_value(c, "train", "1"), ConfigError);
  CHECK_THROWS_AS(set_config_value(c, "train.gamma", "\"x\""), ConfigError);
  CHECK(c.train.budget == 0);
}

// ---------------------------------------------------------------------------
// Metrics

TEST_CASE("metrics: three records round-trip") {
  TempDir t("metrics3");
  const auto path = (t.path / "m.jsonl").string();
  {
    MetricsWriter w(path);
    for (int i = 1; i <= 3; ++i) w.write(record(i, 1.5 * i));
  }
  const auto log = read_metrics(path);
  REQUIRE(log.records.size() == 3);
  CHECK(log.warnings.empty());
  for (int i = 0; i < 3; ++i) expect_same(log.records[i], record(i + 1, 1.5 * (i + 1)));
}

TEST_CASE("metrics: torn final line is dropped with a warning") {
  TempDir t("torn");
  const auto path = (t.path / "m.jsonl").string();
  {
    MetricsWriter w(path);
    for (int i = 1; i <= 3; ++i) w.write(record(i, i));
  }
  const auto size = fs::file_size(path);
  fs::resize_file(path, size - 25);
  const auto log = read_metrics(path);
  CHECK(log.records.size() == 2);
  REQUIRE(log.warnings.size() == 1);
  CHECK(log.warnings[0].find("torn") != std::string::npos);
}

TEST_CASE("metrics: corrupt middle line fails with its line number") {
  TempDir t("corrupt");
  const auto path = (t.path / "m.jsonl").string();
  std::ofstream(path) << metrics_to_line(record(1, 1)) << "\n{\"iteration\": oops\n" << metrics_to_line(record(3, 3))
                      << "\n";
  try {
    read_metrics(path);
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
  // A complete but malformed final line (newline present) is still a torn record.
  std::ofstream(path) << metrics_to_line(record(1, 1)) << "\n{\"iteration\": 2";
  CHECK(read_metrics(path).records.size() == 1);
}

TEST_CASE("metrics: 10,000 records round-trip bit-exact") {
  TempDir t("big");
  const auto path = (t.path / "m.jsonl").string();
  Rng rng(77);
  std::vector<train::IterationMetrics> in;
  auto any_double = [&] {
    for (;;) {
      const std::uint64_t bits = rng.next_u64();
      double d;
      std::memcpy(&d, &bits, sizeof d);
      if (std::isfinite(d)) return d;
    }
  };
  {
    MetricsWriter w(path);
    for (int i = 0; i < 10000; ++i) {
      train::IterationMetrics m;
      m.iteration = static_cast<std::uint64_t>(i);
      m.T = rng.next_u64() >> 1;
      m.mean_return = any_double();
      m.std_return = rng.normal() * 1e3;
      m.phi_entropy = any_double();
      m.grad_norm_theta = rng.uniform();
      m.grad_norm_phi = any_double();
      m.policy_loss = any_double();
      m.value_loss = rng.uniform() * 1e-300;
      m.entropy = any_double();
      m.approx_kl = any_double();
      m.clip_fraction = rng.uniform();
      m.wall_clock = any_double();
      m.phi_updated = i % 2 == 0;
      m.divergences = i % 7;
      if (i % 10 == 0) m.histogram["d" + std::to_string(i)] = i;
      w.write(m);
      in.push_back(m);
    }
  }
  const auto log = read_metrics(path);
  REQUIRE(log.records.size() == in.size());
  for (std::size_t i = 0; i < in.size(); ++i) expect_same(log.records[i], in[i]);
}

TEST_CASE("metrics: non-finite values survive") {
  auto m = record(1, std::numeric_limits<double>::quiet_NaN());
  m.std_return = -std::numeric_limits<double>::infinity();
  const auto back = metrics_from_line(metrics_to_line(m));
  CHECK(std::isnan(back.mean_return));
  CHECK(back.std_return == -std::numeric_limits<double>::infinity());
}

TEST_CASE("metrics: truncate keeps the first records") {
  TempDir t("trunc");
  const auto path = (t.path / "m.jsonl").string();
  {
    MetricsWriter w(path);
    for (int i = 1; i <= 5; ++i) w.write(record(i, i));
  }
  truncate_metrics(path, 3);
  const auto log = read_metrics(path);
  REQUIRE(log.records.size() == 3);
  CHECK(log.records.back().iteration == 3);
}

// ---------------------------------------------------------------------------
// Design documents and plots

TEST_CASE("design documents replay through the grammar") {
  const auto& g = grammar::default_grammar();
  Rng rng(4);
  std::vector<grammar::Expansion> choices;
  const auto d = grammar::sample_uniform_design(g, rng, &choices);
  const auto text = design_document(g, d, choices, -3.5);
  const auto doc = parse_design_document(text);
  CHECK(doc.choices == choices);
  CHECK(grammar::design_signature(rebuild_design(g, doc), g) == grammar::design_signature(d, g));
  CHECK(json::parse(text)["log_prob"] == -3.5);

  auto tampered = doc;
  tampered.signature += "x";
  CHECK_THROWS_AS(rebuild_design(g, tampered), InvalidArgument);
  auto other = doc;
  other.grammar = "0000000000000000";
  CHECK_THROWS_AS(rebuild_design(g, other), InvalidArgument);
  auto partial = doc;
  partial.choices.pop_back();
  CHECK_THROWS(rebuild_design(g, partial));
  CHECK_THROWS_AS(parse_design_document("{\"choices\": 1}"), ParseError);
}

TEST_CASE("plots refuse empty metrics and draw otherwise") {
  CHECK_THROWS_WITH_AS(reward_svg({{"run", {}}}), doctest::Contains("no iterations"), InvalidArgument);
  const auto svg = reward_svg({{"run", {record(1, 1), record(2, 4), record(3, 2)}}});
  CHECK(svg.rfind("<svg", 0) == 0);
  CHECK(svg.find("<polyline") != std::string::npos);
  CHECK(svg.find("<polygon") != std::string::npos);
  const auto g = generalization_svg({{"u", {100, 200}, {0.4, 0.6}}});
  CHECK(g.find("stroke-dasharray") != std::string::npos);
  CHECK(reward_svg({{"run", {record(1, 1), record(2, 4)}}}) == reward_svg({{"run", {record(1, 1), record(2, 4)}}}));
}

// ---------------------------------------------------------------------------
// Run directories

TEST_CASE("train writes the manifest before training and completes the run") {
  TempDir t("run");
  const auto c = toy_config(t.path, t.path / "run");
  bool checked = false;
  TrainOptions opt;
  opt.log = [&](const std::string&) {
    if (checked) return;
    const auto m = read_manifest(t.path / "run");
    CHECK_FALSE(m.completed);
    CHECK(m.config_hash == config_hash(c));
    checked = true;
  };
  const auto sum = train_run(c, opt);
  CHECK(checked);
  CHECK(sum.completed);
  CHECK(sum.T == 1600);
  const auto m = read_manifest(sum.dir);
  CHECK(m.completed);
  CHECK(config_to_json(m.config) == config_to_json(c));
  CHECK(read_metrics(metrics_path(sum.dir).string()).records.size() == sum.iterations);
  CHECK(fs::exists(plots_dir(sum.dir) / "reward.svg"));
  CHECK(fs::exists(designs_dir(sum.dir) / "final.json"));
  CHECK(fs::exists(results_path(sum.dir)));
  CHECK(list_checkpoints(sum.dir).back().first == sum.iterations);

  // Completed runs are immutable.
  const auto before = read_file(manifest_path(sum.dir).string());
  try {
    train_run(c);
    FAIL("expected refusal");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::runtime);
  }
  CHECK(read_file(manifest_path(sum.dir).string()) == before);

  // Read-only subcommands are idempotent.
  const auto e1 = eval_run(sum.dir, "", "", 2, 3);
  const auto e2 = eval_run(sum.dir, "", "", 2, 3);
  CHECK(e1.result.returns == e2.result.returns);
  const auto exp = make_experiment(c);
  const auto phi = load_phi(exp, sum.dir, "");
  CHECK(export_greedy(exp, phi) == export_greedy(exp, phi));
  CHECK(sample_designs(exp, phi, 4, 1) == sample_designs(exp, phi, 4, 1));
  const auto files = plot_runs({sum.dir}, t.path / "p1");
  CHECK(read_file(files[0].string()) == read_file((plots_dir(sum.dir) / "reward.svg").string()));
}

TEST_CASE("budget 0 gives a manifest and empty metrics") {
  TempDir t("zero");
  auto c = toy_config(t.path, t.path / "run");
  c.train.budget = 0;
  const auto sum = train_run(c);
  CHECK(sum.iterations == 0);
  CHECK(fs::exists(manifest_path(sum.dir)));
  CHECK(fs::file_size(metrics_path(sum.dir)) == 0);
  CHECK_THROWS_WITH(plot_runs({sum.dir}, t.path / "p"), doctest::Contains("no iterations"));
}

TEST_CASE("resumed runs reproduce the uninterrupted metrics stream") {
  TempDir t("resume");
  const auto full = train_run(toy_config(t.path, t.path / "full"));

  const auto c = toy_config(t.path, t.path / "part");
  TrainOptions stop;
  stop.stop_after_iterations = 3;
  const auto first = train_run(c, stop);
  CHECK_FALSE(first.completed);
  CHECK_FALSE(read_manifest(first.dir).completed);
  // Simulate a crash that left an extra record and a torn line behind.
  std::ofstream(metrics_path(first.dir), std::ios::app) << metrics_to_line(record(4, 1)) << "\n{\"iter";
  const auto second = train_run(c);
  CHECK(second.resumed);
  CHECK(second.completed);
  CHECK(without_wall_clock(read_file(metrics_path(full.dir).string())) ==
        without_wall_clock(read_file(metrics_path(second.dir).string())));
  CHECK(read_file(results_path(full.dir).string()) == read_file(results_path(second.dir).string()));
}

TEST_CASE("train refuses foreign directories and changed configs") {
  TempDir t("refuse");
  std::ofstream(t.path / "notes.txt") << "hello";
  CHECK_THROWS_AS(train_run(toy_config(t.path, t.path)), IoError);

  auto c = toy_config(t.path, t.path / "run");
  TrainOptions stop;
  stop.stop_after_iterations = 1;
  train_run(c, stop);
  c.train.lr_theta *= 2;
  CHECK_THROWS_AS(train_run(c), ConfigError);
  c = toy_config(t.path, t.path / "run");
  c.train.workers = 2;  // not semantic: resuming is allowed
  CHECK(train_run(c).completed);
}

TEST_CASE("default output root comes from the environment") {
  TempDir t("root");
  ::setenv("NLIMB_OUTPUT_ROOT", t.path.c_str(), 1);
  ExperimentConfig c;
  CHECK(run_directory(c).parent_path() == t.path);
  CHECK(run_directory(c).filename().string().rfind("nlimb-flat-seed0-", 0) == 0);
  ::unsetenv("NLIMB_OUTPUT_ROOT");
  CHECK(run_directory(c).parent_path() == fs::path("runs"));
}

TEST_CASE("baseline runs through the harness") {
  TempDir t("baseline");
  auto c = toy_config(t.path, t.path / "run");
  c.algorithm = Algorithm::random_search;
  c.baseline.designs = 2;
  const auto sum = train_run(c);
  CHECK(sum.completed);
  CHECK(sum.T <= c.train.budget);
  const auto r = json::parse(read_file(results_path(sum.dir).string()));
  CHECK(r["candidate_returns"].size() == 2);
  const auto ev = eval_run(sum.dir, "", "", 2, std::nullopt);
  CHECK(std::isfinite(ev.result.mean));
  const auto exp = make_experiment(c);
  CHECK_THROWS_AS(load_phi(exp, sum.dir, ""), InvalidArgument);
}

TEST_CASE("eval reports missing checkpoints by path") {
  TempDir t("missing");
  auto c = toy_config(t.path, t.path / "run");
  c.train.budget = 0;
  const auto sum = train_run(c);
  CHECK_THROWS_WITH_AS(eval_run(sum.dir, (t.path / "nope.ckpt").string(), "", 2, std::nullopt),
                       doctest::Contains("nope.ckpt"), IoError);
  CHECK_THROWS_AS(eval_run(t.path / "elsewhere", "", "", 2, std::nullopt), IoError);
}
