#include <algorithm>
#include <cmath>
#include <thread>

#include "common/error.hpp"
#include "common/rng.hpp"
#include "trainer/trainer.hpp"

namespace nlimb::train {

namespace {

constexpr std::uint64_t kTerrainTag = 11;
constexpr std::uint64_t kNoiseTag = 12;

struct Slot {
  sim::Environment env;
  Rng noise;
  std::vector<double> max_torque;
  std::uint64_t episode = 0;
  double running = 0.0;
};

// Values of a batch of observations under a frozen policy.
std::vector<double> values_of(const PolicyRef& pol, const std::vector<control::PolicyInput>& in) {
  if (in.empty()) return {};
  ad::Tape tape(false);
  const auto theta = tape.bind(*pol.theta);
  const auto out = pol.controller->forward(theta, in, *pol.norm);
  const auto& v = out.value.value();
  return {v.values().begin(), v.values().end()};
}

void run_block(const PolicyRef& pol, const std::vector<grammar::DesignGraph>& designs, const sim::EnvConfig& env,
               std::size_t t, std::uint64_t seed, std::size_t begin, std::size_t end,
               std::vector<DesignRollout>& out) {
  std::vector<Slot> slots;
  slots.reserve(end - begin);
  for (std::size_t d = begin; d < end; ++d) {
    Slot s{sim::Environment(designs[d], env), Rng(derive_seed(seed, kNoiseTag, d)), {}, 0, 0.0};
    s.env.reset(derive_seed(seed, kTerrainTag, d, 0));
    s.max_torque = s.env.max_torques();
    slots.push_back(std::move(s));
    auto& r = out[d];
    r.design = d;
    r.layout = control::layout_of(designs[d]);
    r.steps.reserve(t);
  }
  const std::size_t k = end - begin;

  for (std::size_t step = 0; step < t; ++step) {
    std::vector<sim::Observation> obs(k);
    std::vector<control::PolicyInput> in(k);
    for (std::size_t i = 0; i < k; ++i) {
      obs[i] = slots[i].env.observe();
      in[i] = {&out[begin + i].layout, &obs[i]};
    }

    ad::Tape tape(false);
    const auto theta = tape.bind(*pol.theta);
    const auto po = pol.controller->forward(theta, in, *pol.norm);
    const auto& mean = po.mean.value();
    const auto& stdv = po.std.value();
    ad::Tensor action(mean.shape());
    for (std::size_t i = 0; i < k; ++i) {
      for (std::size_t j = po.dof_offset[i]; j < po.dof_offset[i + 1]; ++j) {
        action[j] = mean[j] + stdv[j] * slots[i].noise.normal();
      }
    }
    // Same primitive the update uses, so the stored log-probs match it exactly.
    const auto lp = control::action_log_prob_entropy(po.mean, po.std, tape.constant(action), po.dof_item, k);

    std::vector<control::PolicyInput> boot_in;
    std::vector<sim::Observation> boot_obs;
    std::vector<std::size_t> boot_slot;
    boot_obs.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
      auto& s = slots[i];
      auto& r = out[begin + i];
      Step st;
      st.obs = std::move(obs[i]);
      st.action.assign(action.data() + po.dof_offset[i], action.data() + po.dof_offset[i + 1]);
      st.log_prob = lp.log_prob.value()[i];
      st.value = po.value.value()[i];

      std::vector<double> torque(st.action.size());
      for (std::size_t j = 0; j < torque.size(); ++j) torque[j] = std::tanh(st.action[j]) * s.max_torque[j];
      const auto tr = s.env.step(torque);
      st.reward = tr.reward;
      st.terminated = tr.terminated;
      st.truncated = !tr.terminated && (tr.truncated || step + 1 == t);
      s.running += tr.reward;
      if (tr.diverged) ++r.divergences;

      if (st.truncated) {
        boot_obs.push_back(s.env.observe());
        boot_slot.push_back(i);
      }
      if (tr.terminated || tr.truncated) {
        r.episode_returns.push_back(s.running);
        s.running = 0.0;
        if (step + 1 < t) s.env.reset(derive_seed(seed, kTerrainTag, begin + i, ++s.episode));
      }
      r.steps.push_back(std::move(st));
    }
    for (std::size_t b = 0; b < boot_slot.size(); ++b) boot_in.push_back({&out[begin + boot_slot[b]].layout, &boot_obs[b]});
    const auto bv = values_of(pol, boot_in);
    for (std::size_t b = 0; b < boot_slot.size(); ++b) out[begin + boot_slot[b]].steps.back().bootstrap = bv[b];
  }

  for (std::size_t i = 0; i < k; ++i) {
    auto& r = out[begin + i];
    r.partial_return = slots[i].running;  // 0 when the last episode closed on the final step
    if (!r.episode_returns.empty()) {
      double sum = 0.0;
      for (double x : r.episode_returns) sum += x;
      r.mean_return = sum / static_cast<double>(r.episode_returns.size());
    } else {
      r.flagged = true;
      r.mean_return = r.partial_return;
    }
  }
}

}  // namespace

RolloutBatch collect_rollouts(const PolicyRef& pol, const std::vector<grammar::DesignGraph>& designs,
                              const sim::EnvConfig& env, std::size_t t, std::uint64_t seed, std::size_t workers) {
  RolloutBatch batch;
  if (t == 0 || designs.empty()) return batch;
  if (!pol.controller || !pol.theta || !pol.norm) throw InvalidArgument("collect_rollouts: incomplete policy");
  batch.designs.resize(designs.size());

  const std::size_t w = std::clamp<std::size_t>(workers, 1, designs.size());
  if (w == 1) {
    run_block(pol, designs, env, t, seed, 0, designs.size(), batch.designs);
  } else {
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(w);
    const std::size_t per = designs.size() / w, extra = designs.size() % w;
    std::size_t begin = 0;
    for (std::size_t i = 0; i < w; ++i) {
      const std::size_t end = begin + per + (i < extra ? 1 : 0);
      pool.emplace_back([&, i, begin, end] {
        try {
          run_block(pol, designs, env, t, seed, begin, end, batch.designs);
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
  batch.timesteps = static_cast<std::uint64_t>(designs.size()) * t;
  return batch;
}

}  // namespace nlimb::train
