#include "harness/run.hpp"

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <regex>

#include "autodiff/checkpoint.hpp"
#include "common/error.hpp"
#include "common/rng.hpp"
#include "harness/design_doc.hpp"
#include "harness/metrics.hpp"
#include "json.hpp"

#ifndef NLIMB_CODE_VERSION
#define NLIMB_CODE_VERSION "unknown"
#endif

namespace nlimb::harness {

using nlohmann::json;

namespace {

constexpr std::uint64_t kHarnessTag = 20;
constexpr const char* kManifestFormat = "nlimb-run-1";

std::string fmt_return(double mean, double sd) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.3f +- %.3f", mean, sd);
  return buf;
}

void write_manifest(const fs::path& dir, const ExperimentConfig& c, bool completed) {
  json m;
  m["format"] = kManifestFormat;
  m["config"] = json::parse(config_to_json(c));
  m["config_hash"] = config_hash(c);
  m["code_version"] = code_version();
  m["seeds"] = {{"run", c.seed}};
  m["status"] = completed ? "completed" : "running";
  write_file_atomic(manifest_path(dir).string(), m.dump(2) + "\n");
}

fs::path checkpoint_file(const fs::path& dir, std::uint64_t iteration) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "iter_%08llu.ckpt", static_cast<unsigned long long>(iteration));
  return checkpoint_dir(dir) / buf;
}

train::RunState load_state(const Experiment& e, const fs::path& path) {
  return train::unpack_state(ad::load_checkpoint(path), e.config.train, e.config.env.sampling.samples);
}

fs::path resolve_checkpoint(const fs::path& run_dir, const std::string& checkpoint) {
  if (!checkpoint.empty()) {
    if (!fs::exists(checkpoint)) throw IoError("checkpoint not found: " + checkpoint);
    return checkpoint;
  }
  const auto all = list_checkpoints(run_dir);
  if (all.empty()) throw IoError("checkpoint not found: no checkpoints in " + checkpoint_dir(run_dir).string());
  return all.back().second;
}

json eval_json(const train::EvalResult& r, const std::string& signature) {
  return {{"mean", r.mean}, {"std", r.std}, {"episodes", r.returns.size()}, {"divergences", r.divergences},
          {"design_signature", signature}};
}

void run_generalization(const Experiment& e, const fs::path& dir, const LogFn& log) {
  const auto& c = e.config;
  std::vector<train::RunState> cps;
  std::vector<std::uint64_t> iters;
  for (const auto& [it, path] : list_checkpoints(dir)) {
    auto st = load_state(e, path);
    if (st.T > 0 && st.T <= c.train.warmup) {
      iters.push_back(it);
      cps.push_back(std::move(st));
    }
  }
  if (cps.empty()) {
    if (log) log("generalization: no checkpoints inside the warmup window; skipped");
    return;
  }
  const auto phi0 = train::init_state(e.setup, e.controller, &e.model).phi;
  train::GeneralizationConfig g{c.generalization.designs, c.generalization.specialist_budget,
                                c.generalization.eval_episodes};
  const auto r = train::eval_generalization(e.setup, e.controller, e.model, phi0, cps, g);
  json out;
  out["specialist"] = r.specialist;
  out["excluded"] = r.excluded;
  json docs = json::array();
  for (const auto& d : r.designs) docs.push_back(grammar::design_signature(d, e.grammar));
  out["designs"] = docs;
  json arr = json::array();
  for (std::size_t i = 0; i < cps.size(); ++i) {
    json f = std::isfinite(r.fractions[i]) ? json(r.fractions[i]) : json(nullptr);
    arr.push_back({{"iteration", iters[i]}, {"T", cps[i].T}, {"fraction", f}, {"universal", r.universal[i]}});
    if (log) log("generalization: T=" + std::to_string(cps[i].T) + " fraction " + f.dump());
  }
  out["checkpoints"] = arr;
  write_file_atomic(generalization_path(dir).string(), out.dump(2) + "\n");
}

}  // namespace

const char* code_version() { return NLIMB_CODE_VERSION; }

Experiment make_experiment(const ExperimentConfig& c) {
  auto g = grammar::resolve_grammar(c.grammar);
  design::DesignModel model(g, c.design_model);
  train::Setup setup{c.train, c.env, c.controller, c.design_model};
  return Experiment{c, std::move(g), setup, control::Controller(c.controller), std::move(model)};
}

fs::path default_output_root() {
  const char* env = std::getenv("NLIMB_OUTPUT_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

fs::path run_directory(const ExperimentConfig& c) {
  if (!c.output.empty()) return c.output;
  return default_output_root() / (std::string(to_string(c.algorithm)) + "-" + sim::to_string(c.task) + "-seed" +
                                  std::to_string(c.seed) + "-" + config_hash(c).substr(0, 8));
}

Manifest read_manifest(const fs::path& dir) {
  const fs::path p = manifest_path(dir);
  if (!fs::exists(p)) throw IoError("not a run directory (no manifest): " + dir.string());
  Manifest m;
  try {
    const json j = json::parse(read_file(p.string()));
    if (j.at("format").get<std::string>() != kManifestFormat) throw IoError("unsupported manifest format in " + p.string());
    m.config = parse_config(j.at("config").dump());
    m.config_hash = j.at("config_hash").get<std::string>();
    m.code_version = j.at("code_version").get<std::string>();
    m.completed = j.at("status").get<std::string>() == "completed";
  } catch (const json::exception& e) {
    throw IoError("corrupt manifest " + p.string() + ": " + e.what());
  }
  return m;
}

std::vector<std::pair<std::uint64_t, fs::path>> list_checkpoints(const fs::path& dir) {
  std::vector<std::pair<std::uint64_t, fs::path>> out;
  if (!fs::is_directory(checkpoint_dir(dir))) return out;
  static const std::regex re("iter_([0-9]+)\\.ckpt");
  for (const auto& entry : fs::directory_iterator(checkpoint_dir(dir))) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (std::regex_match(name, m, re)) out.emplace_back(std::stoull(m[1].str()), entry.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

TrainSummary train_run(const ExperimentConfig& c, const TrainOptions& opt) {
  const LogFn log = opt.log ? opt.log : [](const std::string&) {};
  const Experiment e = make_experiment(c);
  const fs::path dir = run_directory(c);
  TrainSummary sum;
  sum.dir = dir;

  if (fs::exists(manifest_path(dir))) {
    const Manifest m = read_manifest(dir);
    if (m.completed) {
      throw Error(ErrorCode::runtime, "run directory " + dir.string() + " holds a completed run; choose another output");
    }
    if (m.config_hash != config_hash(c)) {
      throw ConfigError("run directory " + dir.string() + " was started with a different config (hash " +
                        m.config_hash + ", this config " + config_hash(c) + ")");
    }
    sum.resumed = true;
  } else if (fs::exists(dir) && !fs::is_empty(dir)) {
    throw IoError(dir.string() + " exists and is not a run directory");
  }
  for (const auto& d : {dir, checkpoint_dir(dir), designs_dir(dir), plots_dir(dir)}) fs::create_directories(d);
  if (!sum.resumed) {
    write_manifest(dir, c, false);
    write_file_atomic(metrics_path(dir).string(), "");
  }
  const std::string mpath = metrics_path(dir).string();
  const auto seed = c.seed;
  json results;
  results["algorithm"] = to_string(c.algorithm);

  if (c.algorithm == Algorithm::nlimb) {
    train::RunState st = train::init_state(e.setup, e.controller, &e.model);
    if (sum.resumed) {
      const auto cps = list_checkpoints(dir);
      if (!cps.empty()) {
        st = load_state(e, cps.back().second);
        log("resuming from " + cps.back().second.string() + " (iteration " + std::to_string(st.iteration) + ")");
      } else {
        log("no checkpoint yet; restarting from iteration 0");
      }
      // Records past the checkpoint are replayed by the resumed loop.
      if (fs::exists(mpath)) truncate_metrics(mpath, st.iteration);
      const auto kept = read_metrics(mpath);
      if (kept.records.size() != st.iteration) {
        throw IoError("metrics log has " + std::to_string(kept.records.size()) + " records but the checkpoint is at iteration " +
                      std::to_string(st.iteration));
      }
    }

    MetricsWriter writer(mpath);
    std::uint64_t ran = 0;
    train::Hooks hooks;
    hooks.on_metrics = [&](const train::IterationMetrics& m) {
      writer.write(m);
      char buf[200];
      std::snprintf(buf, sizeof buf, "iter %llu  T %llu  return %s  H(phi) %.4f%s",
                    static_cast<unsigned long long>(m.iteration), static_cast<unsigned long long>(m.T),
                    fmt_return(m.mean_return, m.std_return).c_str(), m.phi_entropy, m.phi_updated ? "" : "  (warmup)");
      log(buf);
    };
    hooks.on_checkpoint = [&](const train::RunState& s) {
      ad::save_checkpoint(checkpoint_file(dir, s.iteration), train::pack_state(s));
    };
    hooks.stop = [&](const train::RunState& s) {
      if (opt.stop_after_iterations == 0 || ++ran < opt.stop_after_iterations) return false;
      ad::save_checkpoint(checkpoint_file(dir, s.iteration), train::pack_state(s));
      return true;
    };
    train::run_nlimb(e.setup, e.controller, e.model, st, hooks);
    sum.iterations = st.iteration;
    sum.T = st.T;
    const bool finished = st.T >= c.train.budget || c.train.budget - st.T < c.train.designs_per_iter;
    if (!finished) {
      log("stopped at iteration " + std::to_string(st.iteration) + "; run left incomplete");
      return sum;
    }

    const auto greedy = design::greedy_design(e.model, st.phi);
    write_file_atomic((designs_dir(dir) / "final.json").string(),
                      design_document(e.grammar, greedy.design, greedy.choices, greedy.log_prob) + "\n");
    write_file_atomic((designs_dir(dir) / "samples.json").string(),
                      sample_designs(e, st.phi, 8, derive_seed(seed, kHarnessTag, 1)) + "\n");
    results["iterations"] = st.iteration;
    results["T"] = st.T;
    if (st.iteration > 0) {
      const train::PolicyRef pol{&e.controller, &st.theta, &st.norm};
      const auto ev = train::evaluate(pol, greedy.design, c.env, c.eval_episodes, derive_seed(seed, kHarnessTag, 2),
                                      c.train.workers);
      results["eval"] = eval_json(ev, grammar::design_signature(greedy.design, e.grammar));
      log("greedy design: " + fmt_return(ev.mean, ev.std) + " over " + std::to_string(ev.returns.size()) + " episodes");
      if (c.generalization.enabled) run_generalization(e, dir, log);
    }
  } else {
    if (sum.resumed) {
      log("baseline runs do not checkpoint mid-way; restarting from scratch");
      write_file_atomic(mpath, "");
      for (const auto& [it, path] : list_checkpoints(dir)) fs::remove(path);
    }
    MetricsWriter writer(mpath);
    std::uint64_t count = 0;
    train::Hooks hooks;
    hooks.on_metrics = [&](const train::IterationMetrics& m) {
      writer.write(m);
      ++count;
      log("iter " + std::to_string(m.iteration) + "  T " + std::to_string(m.T) + "  return " +
          fmt_return(m.mean_return, m.std_return));
    };
    const auto kind =
        c.algorithm == Algorithm::random_search ? train::BaselineKind::random_search : train::BaselineKind::ablation;
    auto b = c.baseline;
    b.eval_episodes = c.eval_episodes;
    const auto r = train::run_baseline(kind, e.setup, e.controller, e.grammar, b, hooks);
    train::RunState st{r.theta, {}, r.norm, control::RunningStat(1), ad::Adam(c.train.lr_theta),
                       ad::Adam(c.train.lr_phi), r.consumed, count};
    ad::save_checkpoint(checkpoint_file(dir, count), train::pack_state(st));
    write_file_atomic((designs_dir(dir) / "final.json").string(),
                      design_document(e.grammar, r.design, r.choices) + "\n");
    sum.iterations = count;
    sum.T = r.consumed;
    results["iterations"] = count;
    results["T"] = r.consumed;
    results["candidate_returns"] = r.candidate_returns;
    results["eval"] = {{"mean", r.eval_return}, {"episodes", c.eval_episodes},
                       {"design_signature", grammar::design_signature(r.design, e.grammar)}};
    log("best design: " + std::to_string(r.eval_return) + " over " + std::to_string(c.eval_episodes) + " episodes");
  }

  write_file_atomic(results_path(dir).string(), results.dump(2) + "\n");
  const auto logged = read_metrics(mpath);
  for (const auto& w : logged.warnings) sum.warnings.push_back(w);
  if (!logged.records.empty()) plot_runs({dir}, plots_dir(dir));
  write_manifest(dir, c, true);
  sum.completed = true;
  return sum;
}

EvalSummary eval_run(const fs::path& run_dir, const std::string& checkpoint, const std::string& design_file,
                     std::size_t episodes, std::optional<std::uint64_t> seed) {
  if (episodes == 0) throw InvalidArgument("eval needs at least one episode");
  const Manifest m = read_manifest(run_dir);
  const Experiment e = make_experiment(m.config);
  EvalSummary out;
  out.checkpoint = resolve_checkpoint(run_dir, checkpoint);
  const auto st = load_state(e, out.checkpoint);

  grammar::DesignGraph design;
  const fs::path final_doc = designs_dir(run_dir) / "final.json";
  if (!design_file.empty()) {
    design = rebuild_design(e.grammar, parse_design_document(read_file(design_file)));
  } else if (fs::exists(final_doc)) {
    design = rebuild_design(e.grammar, parse_design_document(read_file(final_doc.string())));
  } else if (st.phi.size() > 0) {
    design = design::greedy_design(e.model, st.phi).design;
  } else {
    throw InvalidArgument("no design to evaluate: pass a design document");
  }
  out.signature = grammar::design_signature(design, e.grammar);
  const train::PolicyRef pol{&e.controller, &st.theta, &st.norm};
  out.result = train::evaluate(pol, design, m.config.env, episodes,
                               derive_seed(seed.value_or(m.config.seed), kHarnessTag, 2), m.config.train.workers);
  return out;
}

ad::ParamSet load_phi(const Experiment& e, const fs::path& run_dir, const std::string& checkpoint) {
  if (run_dir.empty() && checkpoint.empty()) return train::init_state(e.setup, e.controller, &e.model).phi;
  const auto st = load_state(e, resolve_checkpoint(run_dir, checkpoint));
  if (st.phi.size() == 0) throw InvalidArgument("checkpoint has no design distribution (baseline run?)");
  return st.phi;
}

std::string sample_designs(const Experiment& e, const ad::ParamSet& phi, std::size_t k, std::uint64_t seed) {
  Rng rng(derive_seed(seed, kHarnessTag, 3));
  std::string out = "{\n\"designs\": [\n";
  for (std::size_t i = 0; i < k; ++i) {
    const auto s = e.model.sample(phi, rng);
    out += design_document(e.grammar, s.design, s.choices, s.log_prob);
    out += i + 1 < k ? ",\n" : "\n";
  }
  return out + "]\n}";
}

std::string export_greedy(const Experiment& e, const ad::ParamSet& phi) {
  const auto g = design::greedy_design(e.model, phi);
  return design_document(e.grammar, g.design, g.choices, g.log_prob);
}

std::vector<fs::path> plot_runs(const std::vector<fs::path>& runs, const fs::path& out_dir) {
  if (runs.empty()) throw InvalidArgument("plot: no run directories given");
  std::vector<RunMetrics> rm;
  std::vector<GeneralizationCurve> gc;
  for (const auto& dir : runs) {
    const Manifest m = read_manifest(dir);
    const auto log = read_metrics(metrics_path(dir).string());
    std::string label = runs.size() == 1 ? std::string(to_string(m.config.algorithm))
                                         : fs::absolute(dir).lexically_normal().filename().string();
    if (label.empty()) label = dir.string();
    rm.push_back({label, log.records});
    if (fs::exists(generalization_path(dir))) {
      const json g = json::parse(read_file(generalization_path(dir).string()));
      GeneralizationCurve c{label, {}, {}};
      for (const auto& cp : g.at("checkpoints")) {
        c.T.push_back(cp.at("T").get<double>());
        c.fraction.push_back(cp.at("fraction").is_number() ? cp.at("fraction").get<double>() : NAN);
      }
      if (!c.T.empty()) gc.push_back(std::move(c));
    }
  }
  const std::string svg = reward_svg(rm);  // throws before anything is written
  fs::create_directories(out_dir);
  std::vector<fs::path> written{out_dir / "reward.svg"};
  write_file_atomic(written.back().string(), svg);
  if (!gc.empty()) {
    written.push_back(out_dir / "generalization.svg");
    write_file_atomic(written.back().string(), generalization_svg(gc));
  }
  return written;
}

sim::Environment make_environment(const Experiment& e, const std::string& design_document_text) {
  const auto design = rebuild_design(e.grammar, parse_design_document(design_document_text));
  return sim::Environment(design, e.config.env);
}

}  // namespace nlimb::harness
