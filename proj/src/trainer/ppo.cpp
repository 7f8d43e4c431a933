#include <algorithm>
#include <cmath>
#include <numeric>

#include "common/error.hpp"
#include "common/rng.hpp"
#include "trainer/trainer.hpp"

namespace nlimb::train {

void validate(const TrainConfig& c) {
  if (!(c.gamma > 0.0 && c.gamma <= 1.0)) throw ConfigError("gamma must be in (0, 1]");
  if (!(c.lambda >= 0.0 && c.lambda <= 1.0)) throw ConfigError("lambda must be in [0, 1]");
  if (!(c.clip > 0.0 && c.clip < 1.0)) throw ConfigError("clip must be in (0, 1)");
  if (c.budget > 0 && c.warmup >= c.budget) throw ConfigError("warmup must be below the budget");
  if (c.designs_per_iter < 2) throw ConfigError("designs_per_iter must be at least 2");
  if (c.steps_per_design == 0) throw ConfigError("steps_per_design must be positive");
  if (c.epochs == 0 || c.minibatch == 0) throw ConfigError("epochs and minibatch must be positive");
  if (!(c.lr_theta > 0.0) || !(c.lr_phi > 0.0)) throw ConfigError("learning rates must be positive");
  if (!(c.entropy_coef >= 0.0) || !(c.value_coef >= 0.0)) throw ConfigError("loss coefficients must be non-negative");
  if (!(c.max_grad_norm > 0.0)) throw ConfigError("max_grad_norm must be positive");
  if (c.workers == 0) throw ConfigError("workers must be positive");
}

void compute_gae(const std::vector<double>& rewards, const std::vector<double>& values,
                 const std::vector<bool>& terminated, const std::vector<bool>& truncated,
                 const std::vector<double>& bootstrap, double gamma, double lambda, std::vector<double>& advantages,
                 std::vector<double>& targets) {
  const std::size_t n = rewards.size();
  if (values.size() != n || terminated.size() != n || truncated.size() != n || bootstrap.size() != n) {
    throw ShapeError("compute_gae: per-step arrays differ in length");
  }
  if (n > 0 && !terminated[n - 1] && !truncated[n - 1]) {
    throw InvalidArgument("compute_gae: the last step must close its episode");
  }
  advantages.assign(n, 0.0);
  targets.assign(n, 0.0);
  double next_adv = 0.0;
  for (std::size_t k = n; k-- > 0;) {
    double next_value;
    bool boundary = true;
    if (terminated[k]) {
      next_value = 0.0;
    } else if (truncated[k]) {
      next_value = bootstrap[k];
    } else {
      next_value = values[k + 1];
      boundary = false;
    }
    const double delta = rewards[k] + gamma * next_value - values[k];
    next_adv = delta + (boundary ? 0.0 : gamma * lambda * next_adv);
    advantages[k] = next_adv;
    targets[k] = next_adv + values[k];
  }
}

double clipped_objective(double ratio, double advantage, double eps) {
  return std::min(ratio * advantage, std::clamp(ratio, 1.0 - eps, 1.0 + eps) * advantage);
}

ad::Var ppo_loss(const control::Controller& controller, const ad::BoundParams& theta,
                 const control::ObsNormalizer& norm, const std::vector<PpoSample>& samples, const TrainConfig& cfg,
                 PpoStats* stats) {
  if (samples.empty()) throw InvalidArgument("ppo_loss: no samples");
  ad::Tape& tape = *theta.tape();
  const std::size_t m = samples.size();
  std::vector<control::PolicyInput> in;
  in.reserve(m);
  std::vector<double> act, old_lp(m), adv(m), tgt(m);
  for (std::size_t i = 0; i < m; ++i) {
    in.push_back({samples[i].layout, samples[i].obs});
    act.insert(act.end(), samples[i].action.begin(), samples[i].action.end());
    old_lp[i] = samples[i].old_log_prob;
    adv[i] = samples[i].advantage;
    tgt[i] = samples[i].target;
  }
  const auto po = controller.forward(theta, in, norm);
  const auto le = control::action_log_prob_entropy(po.mean, po.std, tape.constant(ad::Tensor::vector(act)),
                                                   po.dof_item, m);
  ad::Var A = tape.constant(ad::Tensor::vector(adv));
  ad::Var ratio = ad::exp(ad::sub(le.log_prob, tape.constant(ad::Tensor::vector(old_lp))));
  ad::Var surr = ad::minimum(ad::mul(ratio, A), ad::mul(ad::clamp(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip), A));
  ad::Var policy = ad::neg(ad::mean(surr));
  ad::Var value = ad::mean(ad::square(ad::sub(po.value, tape.constant(ad::Tensor::vector(tgt)))));
  ad::Var entropy = ad::mean(le.entropy);
  ad::Var loss = ad::sub(ad::add(policy, ad::scale(value, cfg.value_coef)), ad::scale(entropy, cfg.entropy_coef));

  if (stats) {
    const auto& r = ratio.value();
    double kl = 0.0, clipped = 0.0, dev = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
      const double lr = std::log(r[i]);
      kl += (r[i] - 1.0) - lr;
      if (std::abs(r[i] - 1.0) > cfg.clip) clipped += 1.0;
      dev = std::max(dev, std::abs(r[i] - 1.0));
    }
    stats->policy_loss = policy.item();
    stats->value_loss = value.item();
    stats->entropy = entropy.item();
    stats->approx_kl = kl / static_cast<double>(m);
    stats->clip_fraction = clipped / static_cast<double>(m);
    stats->first_ratio_deviation = dev;
  }
  return loss;
}

double reward_scale(const control::RunningStat& returns) {
  if (returns.count() < 2.0) return 1.0;
  const double var = returns.m2()[0] / returns.count();
  return 1.0 / std::sqrt(var + 1e-8);
}

void update_return_stat(control::RunningStat& returns, const RolloutBatch& batch, double gamma) {
  for (const auto& d : batch.designs) {
    std::vector<double> g;
    g.reserve(d.steps.size());
    double acc = 0.0;
    for (const auto& st : d.steps) {
      acc = acc * gamma + st.reward;
      g.push_back(acc);
      if (st.terminated || st.truncated) acc = 0.0;
    }
    returns.update(g);
  }
}

PpoStats ppo_update(const control::Controller& controller, ad::ParamSet& theta, ad::Adam& adam,
                    const control::ObsNormalizer& norm, const RolloutBatch& batch, const TrainConfig& cfg,
                    std::uint64_t seed, double scale) {
  struct Ref {
    std::size_t d, s;
  };
  std::vector<Ref> refs;
  std::vector<std::vector<double>> adv(batch.designs.size()), tgt(batch.designs.size());
  for (std::size_t d = 0; d < batch.designs.size(); ++d) {
    const auto& steps = batch.designs[d].steps;
    std::vector<double> r, v, b;
    std::vector<bool> term, trunc;
    for (const auto& st : steps) {
      r.push_back(st.reward * scale);
      v.push_back(st.value);
      b.push_back(st.bootstrap);
      term.push_back(st.terminated);
      trunc.push_back(st.truncated);
    }
    compute_gae(r, v, term, trunc, b, cfg.gamma, cfg.lambda, adv[d], tgt[d]);
    for (std::size_t s = 0; s < steps.size(); ++s) refs.push_back({d, s});
  }
  if (refs.empty()) throw InvalidArgument("ppo_update: empty batch");

  // Advantages normalized over the whole update.
  double mu = 0.0;
  for (const auto& rf : refs) mu += adv[rf.d][rf.s];
  mu /= static_cast<double>(refs.size());
  double var = 0.0;
  for (const auto& rf : refs) var += (adv[rf.d][rf.s] - mu) * (adv[rf.d][rf.s] - mu);
  const double sd = std::sqrt(var / static_cast<double>(refs.size()));

  const ad::ParamSet theta0 = theta;
  const ad::Adam adam0 = adam;
  PpoStats total;
  Rng rng(seed);
  std::vector<std::size_t> order(refs.size());
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t lo = 0; lo < order.size(); lo += cfg.minibatch) {
      const std::size_t hi = std::min(order.size(), lo + cfg.minibatch);
      std::vector<PpoSample> mb;
      mb.reserve(hi - lo);
      for (std::size_t i = lo; i < hi; ++i) {
        const auto& rf = refs[order[i]];
        const auto& dr = batch.designs[rf.d];
        const auto& st = dr.steps[rf.s];
        const double a = sd > 1e-12 ? (adv[rf.d][rf.s] - mu) / sd : adv[rf.d][rf.s] - mu;
        mb.push_back({&dr.layout, &st.obs, st.action, st.log_prob, a, tgt[rf.d][rf.s]});
      }
      ad::Tape tape;
      const auto bound = tape.bind(theta);
      PpoStats s;
      ad::ParamSet g;
      double gn = 0.0;
      bool finite = true;
      try {
        ad::Var loss = ppo_loss(controller, bound, norm, mb, cfg, &s);
        g = ad::grad(loss, bound);
        gn = ad::clip_grad_norm(g, cfg.max_grad_norm);
        finite = std::isfinite(loss.item()) && std::isfinite(gn);
      } catch (const NumericError&) {
        finite = false;
      }
      if (!finite) {
        theta = theta0;
        adam = adam0;
        total.aborted = true;
        return total;
      }
      adam.step(theta, g);
      if (total.minibatches == 0) total.first_ratio_deviation = s.first_ratio_deviation;
      total.policy_loss += s.policy_loss;
      total.value_loss += s.value_loss;
      total.entropy += s.entropy;
      total.approx_kl += s.approx_kl;
      total.clip_fraction += s.clip_fraction;
      total.grad_norm += gn;
      ++total.minibatches;
    }
  }
  const double k = static_cast<double>(total.minibatches);
  total.policy_loss /= k;
  total.value_loss /= k;
  total.entropy /= k;
  total.approx_kl /= k;
  total.clip_fraction /= k;
  total.grad_norm /= k;
  return total;
}

}  // namespace nlimb::train
