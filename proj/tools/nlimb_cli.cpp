// Command-line front end over the C API.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "nlimb/nlimb.h"

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

struct Failure {
  int code;
};

int exit_code(nlimb_status s) {
  return s == NLIMB_CONFIG_ERROR ? kExitConfig : kExitRuntime;
}

void check(nlimb_status s) {
  if (s == NLIMB_OK) return;
  std::cerr << "error: " << nlimb_last_error() << "\n";
  throw Failure{exit_code(s)};
}

// Owns a C string from the library.
struct Str {
  char* p = nullptr;
  ~Str() { nlimb_string_free(p); }
  std::string get() const { return p ? p : ""; }
};

struct Config {
  nlimb_config* p = nullptr;
  ~Config() { nlimb_config_free(p); }
};

void write_out(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    if (!text.empty() && text.back() != '\n') std::cout << "\n";
    return;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text << (text.empty() || text.back() == '\n' ? "" : "\n");
  if (!out) {
    std::cerr << "error: cannot write " << path << "\n";
    throw Failure{kExitRuntime};
  }
}

std::string json_string(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out += '\\';
    out += c;
  }
  return out + "\"";
}

// Config from --config, else defaults, with --grammar applied on top.
void load(Config& cfg, const std::string& config_path, const std::string& grammar) {
  check(config_path.empty() ? nlimb_config_default(&cfg.p) : nlimb_config_load(config_path.c_str(), &cfg.p));
  if (!grammar.empty()) {
    check(nlimb_config_set(cfg.p, "grammar", json_string(grammar).c_str()));
  }
}

const char* opt(const std::string& s) { return s.empty() ? nullptr : s.c_str(); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Grammar-based morphology and controller co-optimization"};
  app.require_subcommand(1);
  app.set_version_flag("--version", nlimb_version());

  // train
  auto* train = app.add_subcommand("train", "run the configured algorithm into a run directory");
  std::string train_config, train_output;
  std::optional<std::uint64_t> train_budget, train_seed;
  std::vector<std::string> overrides;
  std::uint64_t stop_after = 0;
  bool quiet = false;
  train->add_option("--config", train_config, "experiment config (JSON)")->required()->check(CLI::ExistingFile);
  train->add_option("--budget", train_budget, "override train.budget (env steps)");
  train->add_option("--seed", train_seed, "override the run seed");
  train->add_option("--output", train_output, "run directory (default: $NLIMB_OUTPUT_ROOT or ./runs)");
  train->add_option("--set", overrides, "override a field: key.path=json");
  train->add_option("--stop-after", stop_after, "stop after this many iterations, leaving the run resumable");
  train->add_flag("-q,--quiet", quiet, "no progress output");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on seeded episodes");
  std::string eval_run, eval_ckpt, eval_design;
  std::uint64_t eval_episodes = 32;
  std::optional<std::uint64_t> eval_seed;
  eval->add_option("--run", eval_run, "run directory")->required();
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file (default: latest in the run)");
  eval->add_option("--design", eval_design, "design document (default: the run's final design)");
  eval->add_option("--episodes", eval_episodes, "episodes")->check(CLI::PositiveNumber);
  eval->add_option("--seed", eval_seed, "evaluation seed (default: the run seed)");

  // sample-designs / export-design
  auto* sample = app.add_subcommand("sample-designs", "sample designs from a design distribution");
  auto* exportd = app.add_subcommand("export-design", "write the greedy (most probable) design");
  std::string d_run, d_ckpt, d_config, d_grammar, d_out;
  std::uint64_t k = 1, sample_seed = 0;
  for (auto* sc : {sample, exportd}) {
    sc->add_option("--run", d_run, "run directory (latest checkpoint)");
    sc->add_option("--checkpoint", d_ckpt, "checkpoint file");
    sc->add_option("--config", d_config, "config for the initial distribution when no checkpoint is given");
    sc->add_option("--grammar", d_grammar, "grammar: default or a file");
    sc->add_option("-o,--out", d_out, "output file (default: stdout)");
  }
  sample->add_option("--k", k, "number of designs")->check(CLI::PositiveNumber);
  sample->add_option("--seed", sample_seed, "sampling seed");

  // plot
  auto* plot = app.add_subcommand("plot", "render reward and generalization figures (SVG)");
  std::vector<std::string> plot_runs;
  std::string plot_out;
  plot->add_option("--run", plot_runs, "run directories (repeatable)")->required();
  plot->add_option("-o,--out", plot_out, "output directory (default: <run>/plots for one run, ./plots otherwise)");

  // count-designs
  auto* count = app.add_subcommand("count-designs", "exact number of designs in a grammar");
  std::string count_grammar = "default";
  count->add_option("--grammar", count_grammar, "default or a grammar file");

  auto* schema = app.add_subcommand("schema", "print the config JSON Schema");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*train) {
      Config cfg;
      check(nlimb_config_load(train_config.c_str(), &cfg.p));
      if (train_budget) check(nlimb_config_set(cfg.p, "train.budget", std::to_string(*train_budget).c_str()));
      if (train_seed) check(nlimb_config_set(cfg.p, "seed", std::to_string(*train_seed).c_str()));
      if (!train_output.empty()) {
        check(nlimb_config_set(cfg.p, "output", json_string(train_output).c_str()));
      }
      for (const auto& o : overrides) {
        const auto eq = o.find('=');
        if (eq == std::string::npos) {
          std::cerr << "error: --set expects key.path=value, got '" << o << "'\n";
          return kExitConfig;
        }
        check(nlimb_config_set(cfg.p, o.substr(0, eq).c_str(), o.substr(eq + 1).c_str()));
      }
      Str dir;
      auto log = [](const char* line, void*) { std::cerr << line << "\n"; };
      check(nlimb_train(cfg.p, stop_after, quiet ? nullptr : +log, nullptr, &dir.p));
      std::cout << dir.get() << "\n";
    } else if (*eval) {
      nlimb_eval_result r{};
      check(nlimb_eval(eval_run.c_str(), opt(eval_ckpt), opt(eval_design), eval_episodes, eval_seed.has_value(),
                       eval_seed.value_or(0), &r));
      std::printf("return %.4f +- %.4f over %llu episodes", r.mean, r.std, static_cast<unsigned long long>(r.episodes));
      if (r.divergences > 0) std::printf(" (%d diverged)", r.divergences);
      std::printf("\n");
    } else if (*sample || *exportd) {
      Config cfg;
      if (d_run.empty()) load(cfg, d_config, d_grammar);
      Str out;
      if (*sample) {
        check(nlimb_sample_designs(cfg.p, opt(d_run), opt(d_ckpt), k, sample_seed, &out.p));
      } else {
        check(nlimb_export_design(cfg.p, opt(d_run), opt(d_ckpt), &out.p));
      }
      write_out(d_out, out.get());
    } else if (*plot) {
      std::vector<const char*> runs;
      for (const auto& r : plot_runs) runs.push_back(r.c_str());
      if (plot_out.empty()) plot_out = plot_runs.size() == 1 ? plot_runs[0] + "/plots" : "plots";
      Str files;
      check(nlimb_plot(runs.data(), runs.size(), plot_out.c_str(), &files.p));
      std::cout << files.get() << "\n";
    } else if (*count) {
      Str n;
      check(nlimb_count_designs(count_grammar.c_str(), &n.p));
      std::cout << n.get() << "\n";
    } else if (*schema) {
      std::cout << nlimb_config_schema() << "\n";
    }
  } catch (const Failure& f) {
    return f.code;
  }
  return 0;
}
