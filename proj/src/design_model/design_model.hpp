#pragma once

#include <optional>
#include <string>
#include <vector>

#include "autodiff/nn.hpp"
#include "autodiff/optim.hpp"
#include "autodiff/tape.hpp"
#include "common/rng.hpp"
#include "grammar/grammar.hpp"

namespace nlimb::design {

struct DesignModelConfig {
  std::size_t layers = 2;
  std::size_t heads = 4;
  std::size_t width = 64;
  std::size_t ffn_width = 128;
  std::size_t max_seq = 64;
};

struct DesignSample {
  grammar::DesignGraph design;
  std::vector<grammar::Expansion> choices;
  double log_prob = 0.0;
};

struct ExpansionProb {
  grammar::Expansion expansion;
  double prob = 0.0;
};

struct DistributionStepResult {
  double grad_norm = 0.0;
  double baseline = 0.0;
  double objective = 0.0;  // surrogate value before the step
};

// p_phi over designs: an encoder over the DFS-flattened partial graph scores
// every applicable (node, rule) pair by h_node . e_rule, normalized jointly.
// Parameters are named under "design_model/".
class DesignModel {
 public:
  DesignModel(grammar::Grammar grammar, DesignModelConfig cfg);

  const grammar::Grammar& grammar() const noexcept { return grammar_; }
  const DesignModelConfig& config() const noexcept { return cfg_; }

  // Rule embeddings start at zero, so the initial distribution is uniform.
  ad::ParamSet init(Rng& rng) const;

  // Raw logits aligned with applicable_expansions(g).
  std::vector<double> logits(const grammar::DesignGraph& g, const ad::ParamSet& phi) const;
  std::vector<ExpansionProb> rule_distribution(const grammar::DesignGraph& g, const ad::ParamSet& phi) const;

  DesignSample sample(const ad::ParamSet& phi, Rng& rng) const;

  // Log-probability of a derivation, recorded on the tape of `phi`.
  ad::Var log_prob(const ad::BoundParams& phi, const std::vector<grammar::Expansion>& choices) const;
  double log_prob_value(const ad::ParamSet& phi, const std::vector<grammar::Expansion>& choices) const;

  // Replays choices from the start graph (throws at the first invalid step).
  grammar::DesignGraph replay(const std::vector<grammar::Expansion>& choices) const;

 private:
  // Per-pair log-softmax over applicable expansions of g.
  ad::Var step_log_probs(const ad::BoundParams& phi, const grammar::DesignGraph& g,
                         const std::vector<grammar::Expansion>& exp) const;
  ad::Var step_logits(const ad::BoundParams& phi, const grammar::DesignGraph& g,
                      const std::vector<grammar::Expansion>& exp) const;

  grammar::Grammar grammar_;
  DesignModelConfig cfg_;
  ad::nn::TransformerShape shape_;
};

// Every derivation with its log-probability, or nullopt past `cap` derivations.
std::optional<std::vector<DesignSample>> enumerate_derivations(const DesignModel& model, const ad::ParamSet& phi,
                                                               std::size_t cap);

// Most probable expansion at every step (first one on ties).
DesignSample greedy_design(const DesignModel& model, const ad::ParamSet& phi);

// One ascent step on sum_i log p(w_i) (R_i - mean R) / (n - 1). With the
// batch mean as baseline the 1/(n-1) scale makes the estimator unbiased for
// grad sum_w p(w) R_w.
DistributionStepResult design_distribution_step(const DesignModel& model, ad::ParamSet& phi, ad::Adam& opt,
                                                 const std::vector<DesignSample>& samples,
                                                 const std::vector<double>& returns);

// The gradient used by design_distribution_step (no update).
ad::ParamSet design_gradient(const DesignModel& model, const ad::ParamSet& phi,
                             const std::vector<DesignSample>& samples, const std::vector<double>& returns,
                             double* baseline = nullptr, double* objective = nullptr);

}  // namespace nlimb::design
