#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <exception>
#include <memory>
#include <string>

#include "common/error.hpp"
#include "harness/metrics.hpp"
#include "harness/run.hpp"
#include "json.hpp"
#include "nlimb/nlimb.h"

struct nlimb_config {
  nlimb::harness::ExperimentConfig cfg;
};

struct nlimb_env {
  std::unique_ptr<nlimb::sim::Environment> env;
};

namespace {

thread_local std::string g_error;

template <class F>
nlimb_status guard(F&& f) {
  try {
    f();
    g_error.clear();
    return NLIMB_OK;
  } catch (const nlimb::Error& e) {
    g_error = e.what();
    return static_cast<nlimb_status>(e.code());
  } catch (const std::filesystem::filesystem_error& e) {
    g_error = e.what();
    return NLIMB_IO_ERROR;
  } catch (const std::exception& e) {
    g_error = e.what();
    return NLIMB_RUNTIME;
  } catch (...) {
    g_error = "unknown error";
    return NLIMB_RUNTIME;
  }
}

char* dup(const std::string& s) {
  char* p = static_cast<char*>(std::malloc(s.size() + 1));
  if (!p) throw std::bad_alloc();
  std::memcpy(p, s.c_str(), s.size() + 1);
  return p;
}

void need(const void* p, const char* what) {
  if (!p) throw nlimb::InvalidArgument(std::string(what) + " must not be NULL");
}

std::string str(const char* s) { return s ? s : ""; }

nlimb::harness::ExperimentConfig config_or_default(const nlimb_config* c) {
  return c ? c->cfg : nlimb::harness::ExperimentConfig{};
}

}  // namespace

extern "C" {

const char* nlimb_version(void) { return nlimb::harness::code_version(); }
const char* nlimb_last_error(void) { return g_error.c_str(); }
void nlimb_string_free(char* s) { std::free(s); }

nlimb_status nlimb_count_designs(const char* grammar, char** out) {
  return guard([&] {
    need(grammar, "grammar");
    need(out, "out");
    *out = dup(nlimb::grammar::count_designs(nlimb::grammar::resolve_grammar(grammar)).str());
  });
}

nlimb_status nlimb_config_default(nlimb_config** out) {
  return guard([&] {
    need(out, "out");
    *out = new nlimb_config{};
  });
}

nlimb_status nlimb_config_parse(const char* json_text, nlimb_config** out) {
  return guard([&] {
    need(json_text, "json_text");
    need(out, "out");
    *out = new nlimb_config{nlimb::harness::parse_config(json_text)};
  });
}

nlimb_status nlimb_config_load(const char* path, nlimb_config** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    *out = new nlimb_config{nlimb::harness::load_config(path)};
  });
}

void nlimb_config_free(nlimb_config* cfg) { delete cfg; }

nlimb_status nlimb_config_set(nlimb_config* cfg, const char* key_path, const char* json_value) {
  return guard([&] {
    need(cfg, "cfg");
    need(key_path, "key_path");
    need(json_value, "json_value");
    auto copy = cfg->cfg;
    nlimb::harness::set_config_value(copy, key_path, json_value);
    cfg->cfg = std::move(copy);
  });
}

nlimb_status nlimb_config_to_json(const nlimb_config* cfg, char** out) {
  return guard([&] {
    need(cfg, "cfg");
    need(out, "out");
    *out = dup(nlimb::harness::config_to_json(cfg->cfg));
  });
}

nlimb_status nlimb_config_hash(const nlimb_config* cfg, char** out) {
  return guard([&] {
    need(cfg, "cfg");
    need(out, "out");
    *out = dup(nlimb::harness::config_hash(cfg->cfg));
  });
}

const char* nlimb_config_schema(void) { return nlimb::harness::config_schema().c_str(); }

nlimb_status nlimb_train(const nlimb_config* cfg, uint64_t stop_after_iterations, nlimb_log_fn log, void* user,
                         char** out_run_dir) {
  return guard([&] {
    need(cfg, "cfg");
    nlimb::harness::TrainOptions opt;
    opt.stop_after_iterations = stop_after_iterations;
    if (log) opt.log = [log, user](const std::string& line) { log(line.c_str(), user); };
    const auto sum = nlimb::harness::train_run(cfg->cfg, opt);
    if (log) {
      for (const auto& w : sum.warnings) log(("warning: " + w).c_str(), user);
    }
    if (out_run_dir) *out_run_dir = dup(sum.dir.string());
  });
}

nlimb_status nlimb_eval(const char* run_dir, const char* checkpoint, const char* design_file, uint64_t episodes,
                        int has_seed, uint64_t seed, nlimb_eval_result* out) {
  return guard([&] {
    need(run_dir, "run_dir");
    need(out, "out");
    std::optional<std::uint64_t> s;
    if (has_seed) s = seed;
    const auto r = nlimb::harness::eval_run(run_dir, str(checkpoint), str(design_file), episodes, s);
    *out = {r.result.mean, r.result.std, r.result.returns.size(), r.result.divergences};
  });
}

nlimb_status nlimb_sample_designs(const nlimb_config* cfg, const char* run_dir, const char* checkpoint, uint64_t k,
                                  uint64_t seed, char** out_json) {
  return guard([&] {
    need(out_json, "out_json");
    auto c = run_dir ? nlimb::harness::read_manifest(run_dir).config : config_or_default(cfg);
    const auto e = nlimb::harness::make_experiment(c);
    const auto phi = nlimb::harness::load_phi(e, str(run_dir), str(checkpoint));
    *out_json = dup(nlimb::harness::sample_designs(e, phi, k, seed));
  });
}

nlimb_status nlimb_export_design(const nlimb_config* cfg, const char* run_dir, const char* checkpoint,
                                 char** out_json) {
  return guard([&] {
    need(out_json, "out_json");
    auto c = run_dir ? nlimb::harness::read_manifest(run_dir).config : config_or_default(cfg);
    const auto e = nlimb::harness::make_experiment(c);
    const auto phi = nlimb::harness::load_phi(e, str(run_dir), str(checkpoint));
    *out_json = dup(nlimb::harness::export_greedy(e, phi));
  });
}

nlimb_status nlimb_plot(const char* const* run_dirs, size_t n_runs, const char* out_dir, char** out_files) {
  return guard([&] {
    need(run_dirs, "run_dirs");
    need(out_dir, "out_dir");
    std::vector<std::filesystem::path> runs;
    for (size_t i = 0; i < n_runs; ++i) {
      need(run_dirs[i], "run_dirs[i]");
      runs.emplace_back(run_dirs[i]);
    }
    const auto files = nlimb::harness::plot_runs(runs, out_dir);
    if (out_files) {
      nlohmann::json j = nlohmann::json::array();
      for (const auto& f : files) j.push_back(f.string());
      *out_files = dup(j.dump());
    }
  });
}

nlimb_status nlimb_metrics_count(const char* path, uint64_t* out_records, char** out_warnings) {
  return guard([&] {
    need(path, "path");
    need(out_records, "out_records");
    const auto log = nlimb::harness::read_metrics(path);
    *out_records = log.records.size();
    if (out_warnings) *out_warnings = dup(nlohmann::json(log.warnings).dump());
  });
}

nlimb_status nlimb_env_create(const nlimb_config* cfg, const char* design_json, nlimb_env** out) {
  return guard([&] {
    need(design_json, "design_json");
    need(out, "out");
    const auto e = nlimb::harness::make_experiment(config_or_default(cfg));
    auto env = std::make_unique<nlimb::sim::Environment>(nlimb::harness::make_environment(e, design_json));
    *out = new nlimb_env{std::move(env)};
  });
}

void nlimb_env_free(nlimb_env* env) { delete env; }

nlimb_status nlimb_env_reset(nlimb_env* env, uint64_t terrain_seed) {
  return guard([&] {
    need(env, "env");
    env->env->reset(terrain_seed);
  });
}

nlimb_status nlimb_env_num_dofs(const nlimb_env* env, size_t* out) {
  return guard([&] {
    need(env, "env");
    need(out, "out");
    *out = env->env->num_dofs();
  });
}

nlimb_status nlimb_env_step(nlimb_env* env, const double* torques, size_t n, double* out_reward, int* out_terminated,
                            int* out_truncated) {
  return guard([&] {
    need(env, "env");
    if (n > 0) need(torques, "torques");
    if (n != env->env->num_dofs()) {
      throw nlimb::ShapeError("expected " + std::to_string(env->env->num_dofs()) + " torques, got " +
                              std::to_string(n));
    }
    const auto t = env->env->step({torques, n});
    if (out_reward) *out_reward = t.reward;
    if (out_terminated) *out_terminated = t.terminated ? 1 : 0;
    if (out_truncated) *out_truncated = t.truncated ? 1 : 0;
  });
}

nlimb_status nlimb_env_observe(const nlimb_env* env, double* buf, size_t cap, size_t* out_len) {
  return guard([&] {
    need(env, "env");
    const auto obs = env->env->observe();
    if (out_len) *out_len = obs.data.size();
    if (cap > 0) {
      need(buf, "buf");
      std::memcpy(buf, obs.data.data(), std::min(cap, obs.data.size()) * sizeof(double));
    }
  });
}

}  // extern "C"
