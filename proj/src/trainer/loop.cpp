#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <thread>

#include "common/error.hpp"
#include "common/rng.hpp"
#include "trainer/trainer.hpp"

namespace nlimb::train {

namespace {

constexpr std::uint64_t kInitTag = 1;
constexpr std::uint64_t kSampleTag = 2;
constexpr std::uint64_t kRolloutTag = 3;
constexpr std::uint64_t kPpoTag = 4;
constexpr std::uint64_t kBaselineTag = 5;
constexpr std::uint64_t kGenTag = 6;
constexpr std::uint64_t kEvalTag = 7;
constexpr std::size_t kEnumerableDesigns = 4096;

std::string digest(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) h = (h ^ c) * 0x100000001b3ULL;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void mean_std(const std::vector<double>& x, double& mean, double& sd) {
  mean = sd = 0.0;
  if (x.empty()) return;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  for (double v : x) sd += (v - mean) * (v - mean);
  sd = std::sqrt(sd / static_cast<double>(x.size()));
}

void check_setup(const Setup& s, const control::Controller& controller) {
  validate(s.train);
  if (controller.config().terrain_samples != s.env.sampling.samples) {
    throw ConfigError("controller terrain_samples must match the environment's terrain sampling");
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

struct IterationOutcome {
  RolloutBatch batch;
  PpoStats ppo;
  std::vector<double> returns;
};

// Collect on `designs`, PPO on theta, then fold the new observations into the
// normalizer (after the update, so stored log-probs stay consistent with it).
IterationOutcome train_iteration(const Setup& s, const control::Controller& controller, RunState& st,
                                 const std::vector<grammar::DesignGraph>& designs, std::size_t t) {
  IterationOutcome o;
  const PolicyRef pol{&controller, &st.theta, &st.norm};
  o.batch = collect_rollouts(pol, designs, s.env, t, derive_seed(s.train.seed, kRolloutTag, st.iteration),
                             s.train.workers);
  o.ppo = ppo_update(controller, st.theta, st.adam_theta, st.norm, o.batch, s.train,
                     derive_seed(s.train.seed, kPpoTag, st.iteration), reward_scale(st.returns));
  update_return_stat(st.returns, o.batch, s.train.gamma);
  for (const auto& d : o.batch.designs) {
    for (const auto& step : d.steps) st.norm.update(step.obs);
    o.returns.push_back(d.mean_return);
  }
  st.T += o.batch.timesteps;
  return o;
}

void fill_common(IterationMetrics& m, const IterationOutcome& o, const RunState& st) {
  m.iteration = st.iteration;
  m.T = st.T;
  mean_std(o.returns, m.mean_return, m.std_return);
  m.grad_norm_theta = o.ppo.grad_norm;
  m.policy_loss = o.ppo.policy_loss;
  m.value_loss = o.ppo.value_loss;
  m.entropy = o.ppo.entropy;
  m.approx_kl = o.ppo.approx_kl;
  m.clip_fraction = o.ppo.clip_fraction;
  m.ppo_aborted = o.ppo.aborted;
  for (const auto& d : o.batch.designs) {
    m.flagged_designs += d.flagged ? 1 : 0;
    m.divergences += d.divergences;
  }
}

// Returns true when the loop should stop.
bool after_iteration(const Setup& s, const RunState& st, const IterationMetrics& m, const Hooks& hooks) {
  if (hooks.on_metrics) hooks.on_metrics(m);
  if (hooks.on_checkpoint && s.train.checkpoint_every > 0 && st.iteration % s.train.checkpoint_every == 0) {
    hooks.on_checkpoint(st);
  }
  return hooks.stop && hooks.stop(st);
}

std::size_t steps_this_iteration(const TrainConfig& c, std::uint64_t T, std::uint64_t budget, std::size_t n) {
  if (T >= budget) return 0;
  return static_cast<std::size_t>(std::min<std::uint64_t>(c.steps_per_design, (budget - T) / n));
}

}  // namespace

RunState init_state(const Setup& s, const control::Controller& controller, const design::DesignModel* model) {
  RunState st{{}, {}, control::ObsNormalizer(s.env.sampling.samples), control::RunningStat(1), ad::Adam(s.train.lr_theta),
              ad::Adam(s.train.lr_phi), 0, 0};
  Rng rng(derive_seed(s.train.seed, kInitTag));
  controller.init(st.theta, rng);
  if (model) st.phi = model->init(rng);
  return st;
}

double design_entropy(const design::DesignModel& model, const ad::ParamSet& phi,
                      const std::vector<design::DesignSample>& samples) {
  if (grammar::count_designs(model.grammar()) <= kEnumerableDesigns) {
    if (auto all = design::enumerate_derivations(model, phi, 4 * kEnumerableDesigns)) {
      std::map<std::string, double> p;
      for (const auto& d : *all) p[grammar::design_signature(d.design, model.grammar())] += std::exp(d.log_prob);
      double h = 0.0;
      for (const auto& [sig, q] : p) {
        if (q > 0.0) h -= q * std::log(q);
      }
      return h;
    }
  }
  // Monte Carlo estimate of the derivation entropy (an upper bound on the
  // design entropy when several derivations give one design).
  if (samples.empty()) return std::numeric_limits<double>::quiet_NaN();
  double h = 0.0;
  for (const auto& d : samples) h -= d.log_prob;
  return h / static_cast<double>(samples.size());
}

void run_nlimb(const Setup& s, const control::Controller& controller, const design::DesignModel& model,
               RunState& st, const Hooks& hooks) {
  check_setup(s, controller);
  const auto& c = s.train;
  const auto t0 = std::chrono::steady_clock::now();
  for (;;) {
    const std::size_t t = steps_this_iteration(c, st.T, c.budget, c.designs_per_iter);
    if (t == 0) break;
    Rng srng(derive_seed(c.seed, kSampleTag, st.iteration));
    std::vector<design::DesignSample> samples;
    std::vector<grammar::DesignGraph> designs;
    for (std::size_t i = 0; i < c.designs_per_iter; ++i) {
      samples.push_back(model.sample(st.phi, srng));
      designs.push_back(samples.back().design);
    }

    const auto o = train_iteration(s, controller, st, designs, t);
    IterationMetrics m;
    if (st.T > c.warmup) {
      const auto r = design::design_distribution_step(model, st.phi, st.adam_phi, samples, o.returns);
      m.grad_norm_phi = r.grad_norm;
      m.phi_updated = true;
    }
    ++st.iteration;
    fill_common(m, o, st);
    m.phi_entropy = design_entropy(model, st.phi, samples);
    if (st.iteration % 10 == 0) {
      for (const auto& d : designs) ++m.histogram[digest(grammar::design_signature(d, model.grammar()))];
    }
    m.wall_clock = seconds_since(t0);
    if (after_iteration(s, st, m, hooks)) return;
  }
  if (hooks.on_checkpoint) hooks.on_checkpoint(st);
}

void run_fixed(const Setup& s, const control::Controller& controller, const DesignSource& source,
               std::uint64_t budget, RunState& st, const Hooks& hooks) {
  check_setup(s, controller);
  const auto& c = s.train;
  const auto t0 = std::chrono::steady_clock::now();
  for (;;) {
    const std::size_t t = steps_this_iteration(c, st.T, budget, c.designs_per_iter);
    if (t == 0) break;
    const auto designs = source(st.iteration, c.designs_per_iter);
    if (designs.size() != c.designs_per_iter) throw InvalidArgument("design source returned the wrong count");
    const auto o = train_iteration(s, controller, st, designs, t);
    ++st.iteration;
    IterationMetrics m;
    fill_common(m, o, st);
    m.wall_clock = seconds_since(t0);
    if (after_iteration(s, st, m, hooks)) return;
  }
  if (hooks.on_checkpoint) hooks.on_checkpoint(st);
}

// ---------------------------------------------------------------------------

namespace {

void eval_block(const PolicyRef& pol, const grammar::DesignGraph& design, const sim::EnvConfig& env,
                std::uint64_t seed, bool mean_action, std::size_t begin, std::size_t end, std::vector<double>& returns,
                std::vector<int>& diverged, std::vector<std::uint64_t>& lengths) {
  const auto layout = control::layout_of(design);
  std::vector<sim::Environment> envs;
  std::vector<Rng> noise;
  std::vector<std::size_t> live;
  for (std::size_t e = begin; e < end; ++e) {
    noise.emplace_back(derive_seed(seed, kEvalTag + 1, e));
    envs.emplace_back(design, env);
    envs.back().reset(derive_seed(seed, kEvalTag, e));
    live.push_back(e - begin);
  }
  const auto maxt = envs.empty() ? std::vector<double>{} : envs.front().max_torques();
  while (!live.empty()) {
    std::vector<sim::Observation> obs(live.size());
    std::vector<control::PolicyInput> in(live.size());
    for (std::size_t i = 0; i < live.size(); ++i) {
      obs[i] = envs[live[i]].observe();
      in[i] = {&layout, &obs[i]};
    }
    ad::Tape tape(false);
    const auto theta = tape.bind(*pol.theta);
    const auto po = pol.controller->forward(theta, in, *pol.norm);
    std::vector<std::size_t> next;
    for (std::size_t i = 0; i < live.size(); ++i) {
      std::vector<double> torque(layout.dofs);
      for (std::size_t j = 0; j < layout.dofs; ++j) {
        const std::size_t row = po.dof_offset[i] + j;
        double a = po.mean.value()[row];
        if (!mean_action) a += po.std.value()[row] * noise[live[i]].normal();
        torque[j] = std::tanh(a) * maxt[j];
      }
      const auto tr = envs[live[i]].step(torque);
      returns[begin + live[i]] += tr.reward;
      if (tr.diverged) diverged[begin + live[i]] = 1;
      ++lengths[begin + live[i]];
      if (!tr.terminated && !tr.truncated) next.push_back(live[i]);
    }
    live = std::move(next);
  }
}

}  // namespace

EvalResult evaluate(const PolicyRef& pol, const grammar::DesignGraph& design, const sim::EnvConfig& env,
                    std::size_t episodes, std::uint64_t seed, std::size_t workers, bool mean_action) {
  EvalResult r;
  if (episodes == 0) return r;
  r.returns.assign(episodes, 0.0);
  std::vector<int> diverged(episodes, 0);
  std::vector<std::uint64_t> lengths(episodes, 0);
  const std::size_t w = std::clamp<std::size_t>(workers, 1, episodes);
  if (w == 1) {
    eval_block(pol, design, env, seed, mean_action, 0, episodes, r.returns, diverged, lengths);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(w);
    const std::size_t per = episodes / w, extra = episodes % w;
    std::size_t begin = 0;
    for (std::size_t i = 0; i < w; ++i) {
      const std::size_t end = begin + per + (i < extra ? 1 : 0);
      pool.emplace_back([&, i, begin, end] {
        try {
          eval_block(pol, design, env, seed, mean_action, begin, end, r.returns, diverged, lengths);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      });
      begin = end;
    }
    for (auto& th : pool) th.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }
  for (int d : diverged) r.divergences += d;
  for (auto n : lengths) r.steps += n;
  mean_std(r.returns, r.mean, r.std);
  return r;
}

namespace {

DesignSource repeat(const grammar::DesignGraph& d) {
  return [d](std::uint64_t, std::size_t n) { return std::vector<grammar::DesignGraph>(n, d); };
}

Setup reseeded(const Setup& s, std::uint64_t a, std::uint64_t b) {
  Setup out = s;
  out.train.seed = derive_seed(s.train.seed, a, b);
  return out;
}

struct Trained {
  RunState state;
  double last_return = -std::numeric_limits<double>::infinity();
  int divergences = 0;
};

Trained train_on(const Setup& s, const control::Controller& controller, const DesignSource& source,
                 std::uint64_t budget, RunState state, const Hooks& hooks) {
  Trained out{std::move(state)};
  Hooks h = hooks;
  h.on_metrics = [&](const IterationMetrics& m) {
    out.last_return = m.mean_return;
    out.divergences += m.divergences;
    if (hooks.on_metrics) hooks.on_metrics(m);
  };
  h.on_checkpoint = nullptr;
  run_fixed(s, controller, source, budget, out.state, h);
  return out;
}

}  // namespace

BaselineResult run_baseline(BaselineKind kind, const Setup& s, const control::Controller& controller,
                            const grammar::Grammar& grammar, const BaselineConfig& b, const Hooks& hooks) {
  check_setup(s, controller);
  const std::uint64_t budget = s.train.budget;
  BaselineResult res;
  struct Final {
    grammar::DesignGraph design;
    std::vector<grammar::Expansion> choices;
    Trained tr;
  };
  std::vector<Final> finals;

  if (kind == BaselineKind::random_search) {
    if (b.designs == 0) throw ConfigError("random search needs at least one design");
    const std::uint64_t per = budget / b.designs;
    for (std::size_t i = 0; i < b.designs; ++i) {
      Rng rng(derive_seed(s.train.seed, kBaselineTag, 0, i));
      std::vector<grammar::Expansion> choices;
      auto design = grammar::sample_uniform_design(grammar, rng, &choices);
      const Setup si = reseeded(s, kBaselineTag + 100, i);
      auto tr = train_on(si, controller, repeat(design), per, init_state(si, controller, nullptr), hooks);
      res.consumed += tr.state.T;
      res.candidate_returns.push_back(tr.last_return);
      finals.push_back({std::move(design), std::move(choices), std::move(tr)});
    }
  } else {
    if (!(b.pretrain_fraction > 0.0 && b.pretrain_fraction < 1.0)) {
      throw ConfigError("ablation pretrain_fraction must be in (0, 1)");
    }
    if (b.candidates == 0 || b.finetune_top == 0) throw ConfigError("ablation needs candidates and finetune_top");
    const auto pre = static_cast<std::uint64_t>(std::floor(static_cast<double>(budget) * b.pretrain_fraction));
    const Setup su = reseeded(s, kBaselineTag + 200, 0);
    const std::uint64_t seed = s.train.seed;
    DesignSource uniform = [&grammar, seed](std::uint64_t it, std::size_t n) {
      Rng rng(derive_seed(seed, kBaselineTag, 1, it));
      std::vector<grammar::DesignGraph> out;
      for (std::size_t i = 0; i < n; ++i) out.push_back(grammar::sample_uniform_design(grammar, rng));
      return out;
    };
    auto universal = train_on(su, controller, uniform, pre, init_state(su, controller, nullptr), hooks);
    res.consumed += universal.state.T;

    // Rank candidates with the universal controller; those episodes count against the budget.
    struct Ranked {
      double score;
      grammar::DesignGraph design;
      std::vector<grammar::Expansion> choices;
    };
    std::vector<Ranked> ranked;
    const PolicyRef pol{&controller, &universal.state.theta, &universal.state.norm};
    for (std::size_t i = 0; i < b.candidates; ++i) {
      Rng rng(derive_seed(s.train.seed, kBaselineTag, 2, i));
      std::vector<grammar::Expansion> choices;
      auto design = grammar::sample_uniform_design(grammar, rng, &choices);
      const auto ev = evaluate(pol, design, s.env, b.rank_episodes, derive_seed(s.train.seed, kBaselineTag, 3, i),
                               s.train.workers);
      res.consumed += ev.steps;
      ranked.push_back({ev.mean, std::move(design), std::move(choices)});
    }
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& c) { return a.score > c.score; });
    for (const auto& r : ranked) res.candidate_returns.push_back(r.score);

    const std::size_t top = std::min(b.finetune_top, ranked.size());
    const std::uint64_t rest = budget > res.consumed ? budget - res.consumed : 0;
    for (std::size_t i = 0; i < top; ++i) {
      const Setup sf = reseeded(s, kBaselineTag + 300, i);
      RunState st = universal.state;
      st.T = 0;
      st.iteration = 0;
      auto tr = train_on(sf, controller, repeat(ranked[i].design), rest / top, std::move(st), hooks);
      res.consumed += tr.state.T;
      if (tr.state.T == 0) tr.last_return = ranked[i].score;
      finals.push_back({ranked[i].design, ranked[i].choices, std::move(tr)});
    }
  }

  std::size_t best = 0;
  for (std::size_t i = 1; i < finals.size(); ++i) {
    if (finals[i].tr.last_return > finals[best].tr.last_return) best = i;
  }
  auto& [design, choices, tr] = finals[best];
  const PolicyRef pol{&controller, &tr.state.theta, &tr.state.norm};
  res.eval_return =
      evaluate(pol, design, s.env, b.eval_episodes, derive_seed(s.train.seed, kEvalTag, 99), s.train.workers).mean;
  res.design = design;
  res.choices = choices;
  res.theta = tr.state.theta;
  res.norm = tr.state.norm;
  return res;
}

double relative_fraction(const std::vector<double>& universal, const std::vector<double>& specialist) {
  if (universal.size() != specialist.size() || universal.empty()) {
    throw InvalidArgument("relative_fraction: need matching non-empty return lists");
  }
  double u = 0.0, sp = 0.0;
  for (std::size_t i = 0; i < universal.size(); ++i) {
    u += universal[i];
    sp += specialist[i];
  }
  // A non-positive specialist mean makes the ratio meaningless.
  if (!(sp > 0.0)) return std::numeric_limits<double>::quiet_NaN();
  return u / sp;
}

GeneralizationResult eval_generalization(const Setup& s, const control::Controller& controller,
                                         const design::DesignModel& model, const ad::ParamSet& phi0,
                                         const std::vector<RunState>& checkpoints, const GeneralizationConfig& g) {
  if (checkpoints.empty()) throw InvalidArgument("eval_generalization: no checkpoints");
  if (g.designs == 0) throw InvalidArgument("eval_generalization: no designs");
  check_setup(s, controller);
  GeneralizationResult res;
  Rng rng(derive_seed(s.train.seed, kGenTag, 0));
  std::vector<grammar::DesignGraph> designs;
  for (std::size_t i = 0; i < g.designs; ++i) designs.push_back(model.sample(phi0, rng).design);

  res.designs = designs;
  std::vector<bool> keep(g.designs, true);
  for (std::size_t i = 0; i < g.designs; ++i) {
    const Setup si = reseeded(s, kGenTag + 100, i);
    auto tr = train_on(si, controller, repeat(designs[i]), g.specialist_budget, init_state(si, controller, nullptr),
                       {});
    const PolicyRef pol{&controller, &tr.state.theta, &tr.state.norm};
    const auto ev = evaluate(pol, designs[i], s.env, g.eval_episodes, derive_seed(s.train.seed, kGenTag, 1, i),
                             s.train.workers);
    res.specialist.push_back(ev.mean);
    res.specialists.push_back(tr.state);
    if (tr.divergences > 0 || ev.divergences > 0 || !std::isfinite(ev.mean)) {
      keep[i] = false;
      res.excluded.push_back(i);
    }
  }
  for (const auto& cp : checkpoints) {
    std::vector<double> u, us, sp;
    const PolicyRef pol{&controller, &cp.theta, &cp.norm};
    for (std::size_t i = 0; i < g.designs; ++i) {
      const auto ev = evaluate(pol, designs[i], s.env, g.eval_episodes, derive_seed(s.train.seed, kGenTag, 1, i),
                               s.train.workers);
      u.push_back(ev.mean);
      if (keep[i]) {
        us.push_back(ev.mean);
        sp.push_back(res.specialist[i]);
      }
    }
    res.universal.push_back(u);
    res.fractions.push_back(us.empty() ? std::numeric_limits<double>::quiet_NaN() : relative_fraction(us, sp));
  }
  return res;
}

ad::ParamSet pack_state(const RunState& s) {
  ad::ParamSet out = s.theta;
  out.merge(s.phi);
  out.merge(s.norm.to_params());
  out.merge(s.adam_theta.state("adam_theta/"));
  out.merge(s.adam_phi.state("adam_phi/"));
  out.add("run/returns.count", ad::Tensor::scalar(s.returns.count()));
  out.add("run/returns.mean", ad::Tensor::vector(s.returns.mean()));
  out.add("run/returns.m2", ad::Tensor::vector(s.returns.m2()));
  out.add("run/T", ad::Tensor::scalar(static_cast<double>(s.T)));
  out.add("run/iteration", ad::Tensor::scalar(static_cast<double>(s.iteration)));
  return out;
}

RunState unpack_state(const ad::ParamSet& tensors, const TrainConfig& cfg, std::size_t terrain_samples) {
  for (const char* k : {"run/T", "run/iteration"}) {
    if (!tensors.contains(k)) throw InvalidArgument(std::string("checkpoint is missing ") + k);
  }
  RunState st{tensors.with_prefix("controller/"), tensors.with_prefix("design_model/"),
              control::ObsNormalizer(terrain_samples), control::RunningStat(1), ad::Adam(cfg.lr_theta),
              ad::Adam(cfg.lr_phi), 0, 0};
  if (st.theta.size() == 0) throw InvalidArgument("checkpoint has no controller parameters");
  st.norm.load(tensors);
  st.adam_theta.load_state(tensors, "adam_theta/");
  st.adam_phi.load_state(tensors, "adam_phi/");
  if (tensors.contains("run/returns.count")) {
    const auto& m = tensors.at("run/returns.mean");
    const auto& m2 = tensors.at("run/returns.m2");
    st.returns.set(tensors.at("run/returns.count").item(), {m.values().begin(), m.values().end()},
                   {m2.values().begin(), m2.values().end()});
  }
  st.T = static_cast<std::uint64_t>(tensors.at("run/T").item());
  st.iteration = static_cast<std::uint64_t>(tensors.at("run/iteration").item());
  return st;
}

}  // namespace nlimb::train
