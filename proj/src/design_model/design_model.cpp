#include "design_model/design_model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>

#include "common/error.hpp"

namespace nlimb::design {

using ad::BoundParams;
using ad::ParamSet;
using ad::Tape;
using ad::Tensor;
using ad::Var;
using grammar::DesignGraph;
using grammar::Expansion;

namespace {

const std::string kSym = "design_model/sym_emb";
const std::string kPos = "design_model/pos_emb";
const std::string kRule = "design_model/rule_emb";
const std::string kEncoder = "design_model/encoder";

std::size_t find_choice(const std::vector<Expansion>& exp, const Expansion& c) {
  for (std::size_t i = 0; i < exp.size(); ++i) {
    if (exp[i] == c) return i;
  }
  return exp.size();
}

}  // namespace

DesignModel::DesignModel(grammar::Grammar grammar, DesignModelConfig cfg) : grammar_(std::move(grammar)), cfg_(cfg) {
  if (cfg_.width == 0 || cfg_.heads == 0 || cfg_.width % cfg_.heads != 0) {
    throw ConfigError("design model width must be a positive multiple of heads");
  }
  if (cfg_.layers == 0 || cfg_.max_seq == 0 || cfg_.ffn_width == 0) {
    throw ConfigError("design model layers, ffn width and max sequence length must be positive");
  }
  shape_ = {cfg_.layers, cfg_.heads, cfg_.width, cfg_.ffn_width};
}

ParamSet DesignModel::init(Rng& rng) const {
  ParamSet ps;
  Tensor sym({grammar_.symbols().size(), cfg_.width});
  for (double& v : sym.values()) v = 0.5 * rng.normal();
  ps.add(kSym, std::move(sym));
  Tensor pos({cfg_.max_seq, cfg_.width});
  for (double& v : pos.values()) v = 0.5 * rng.normal();
  ps.add(kPos, std::move(pos));
  ad::nn::init_transformer(ps, kEncoder, shape_, rng);
  ps.add(kRule, Tensor({grammar_.rules().size(), cfg_.width}));
  return ps;
}

Var DesignModel::step_logits(const BoundParams& phi, const DesignGraph& g, const std::vector<Expansion>& exp) const {
  const std::vector<int> order = grammar::flatten_dfs(g);
  const std::size_t n = order.size();
  if (n > cfg_.max_seq) {
    throw InvalidArgument("design sequence length " + std::to_string(n) + " exceeds the model's maximum of " +
                          std::to_string(cfg_.max_seq));
  }
  std::vector<std::size_t> symbols(n);
  std::map<int, std::size_t> position;
  for (std::size_t i = 0; i < n; ++i) {
    symbols[i] = static_cast<std::size_t>(g.node(order[i]).symbol);
    position[order[i]] = i;
  }
  Var x = take_rows(phi[kSym], symbols) + slice(phi[kPos], 0, 0, n);
  Var h = ad::nn::transformer(phi, kEncoder, shape_, x, 1, n, nullptr);
  std::vector<std::size_t> rows(exp.size());
  std::vector<std::size_t> rules(exp.size());
  for (std::size_t i = 0; i < exp.size(); ++i) {
    rows[i] = position.at(exp[i].node);
    rules[i] = static_cast<std::size_t>(exp[i].rule);
  }
  return sum(take_rows(h, rows) * take_rows(phi[kRule], rules), 1);
}

Var DesignModel::step_log_probs(const BoundParams& phi, const DesignGraph& g, const std::vector<Expansion>& exp) const {
  Var z = step_logits(phi, g, exp);
  return z - logsumexp(z);
}

std::vector<double> DesignModel::logits(const DesignGraph& g, const ParamSet& phi) const {
  const auto exp = grammar::applicable_expansions(g, grammar_);
  if (exp.empty()) throw InvalidArgument("rule_distribution: design is already complete");
  Tape tape(false);
  const BoundParams p = tape.bind(phi);
  const auto v = step_logits(p, g, exp).value().values();
  return {v.begin(), v.end()};
}

std::vector<ExpansionProb> DesignModel::rule_distribution(const DesignGraph& g, const ParamSet& phi) const {
  const auto exp = grammar::applicable_expansions(g, grammar_);
  if (exp.empty()) throw InvalidArgument("rule_distribution: design is already complete");
  Tape tape(false);
  const BoundParams p = tape.bind(phi);
  const Tensor lp = step_log_probs(p, g, exp).value();
  std::vector<ExpansionProb> out(exp.size());
  for (std::size_t i = 0; i < exp.size(); ++i) out[i] = {exp[i], std::exp(lp[i])};
  return out;
}

DesignSample DesignModel::sample(const ParamSet& phi, Rng& rng) const {
  DesignSample s;
  s.design = grammar_.start();
  Tape tape(false);
  const BoundParams p = tape.bind(phi);
  bool first = true;
  for (;;) {
    const auto exp = grammar::applicable_expansions(s.design, grammar_);
    if (exp.empty()) break;
    const Tensor lp = step_log_probs(p, s.design, exp).value();
    const double u = rng.uniform();
    std::size_t pick = exp.size() - 1;
    double cum = 0.0;
    for (std::size_t i = 0; i < exp.size(); ++i) {
      cum += std::exp(lp[i]);
      if (u < cum) {
        pick = i;
        break;
      }
    }
    // Guard against the tail of a rounding shortfall landing on a zero-probability pair.
    while (pick > 0 && std::exp(lp[pick]) == 0.0) --pick;
    s.log_prob = first ? lp[pick] : s.log_prob + lp[pick];
    first = false;
    s.choices.push_back(exp[pick]);
    s.design = grammar::apply_rule(s.design, grammar_, exp[pick].node, exp[pick].rule);
  }
  return s;
}

Var DesignModel::log_prob(const BoundParams& phi, const std::vector<Expansion>& choices) const {
  Tape& tape = *phi.tape();
  DesignGraph g = grammar_.start();
  std::optional<Var> acc;
  for (std::size_t k = 0; k < choices.size(); ++k) {
    const auto exp = grammar::applicable_expansions(g, grammar_);
    const std::size_t idx = find_choice(exp, choices[k]);
    if (idx == exp.size()) {
      throw InvalidArgument("invalid derivation at step " + std::to_string(k) + ": (node " +
                            std::to_string(choices[k].node) + ", rule " + std::to_string(choices[k].rule) +
                            ") is not applicable");
    }
    Var lp = sum(slice(step_log_probs(phi, g, exp), 0, idx, idx + 1));
    acc = acc ? *acc + lp : lp;
    g = grammar::apply_rule(g, grammar_, choices[k].node, choices[k].rule);
  }
  if (!grammar::is_complete(g)) throw InvalidArgument("derivation ends before the design is complete");
  return acc ? *acc : tape.constant(Tensor::scalar(0.0));
}

double DesignModel::log_prob_value(const ParamSet& phi, const std::vector<Expansion>& choices) const {
  Tape tape(false);
  return log_prob(tape.bind(phi), choices).item();
}

DesignGraph DesignModel::replay(const std::vector<Expansion>& choices) const {
  DesignGraph g = grammar_.start();
  for (std::size_t k = 0; k < choices.size(); ++k) {
    const auto exp = grammar::applicable_expansions(g, grammar_);
    if (find_choice(exp, choices[k]) == exp.size()) {
      throw InvalidArgument("invalid derivation at step " + std::to_string(k));
    }
    g = grammar::apply_rule(g, grammar_, choices[k].node, choices[k].rule);
  }
  return g;
}

ParamSet design_gradient(const DesignModel& model, const ParamSet& phi, const std::vector<DesignSample>& samples,
                         const std::vector<double>& returns, double* baseline, double* objective) {
  const std::size_t n = samples.size();
  if (n < 2) throw InvalidArgument("design update needs at least 2 samples for the baseline");
  if (returns.size() != n) throw InvalidArgument("design update: one return per sample required");
  for (double r : returns) {
    if (!std::isfinite(r)) throw NumericError("design update: non-finite return");
  }
  const bool all_equal = std::all_of(returns.begin(), returns.end(), [&](double r) { return r == returns[0]; });
  double b = returns[0];
  if (!all_equal) {
    b = 0.0;
    for (double r : returns) b += r;
    b /= static_cast<double>(n);
  }
  Tape tape(true);
  const BoundParams p = tape.bind(phi);
  std::optional<Var> total;
  for (std::size_t i = 0; i < n; ++i) {
    const double adv = (returns[i] - b) / static_cast<double>(n - 1);
    Var term = scale(model.log_prob(p, samples[i].choices), adv);
    total = total ? *total + term : term;
  }
  if (baseline) *baseline = b;
  if (objective) *objective = total->item();
  // Minimize the negated objective.
  return ad::grad(neg(*total), p);
}

DistributionStepResult design_distribution_step(const DesignModel& model, ParamSet& phi, ad::Adam& opt,
                                                const std::vector<DesignSample>& samples,
                                                const std::vector<double>& returns) {
  DistributionStepResult r;
  const ParamSet g = design_gradient(model, phi, samples, returns, &r.baseline, &r.objective);
  r.grad_norm = ad::global_norm(g);
  opt.step(phi, g);
  return r;
}

namespace {

bool enumerate_into(const DesignModel& m, const ParamSet& phi, DesignSample& cur, std::size_t cap,
                    std::vector<DesignSample>& out) {
  const auto dist = m.rule_distribution(cur.design, phi);
  for (const auto& e : dist) {
    DesignSample next = cur;
    next.design = grammar::apply_rule(cur.design, m.grammar(), e.expansion.node, e.expansion.rule);
    next.choices.push_back(e.expansion);
    next.log_prob += std::log(e.prob);
    if (grammar::is_complete(next.design)) {
      if (out.size() >= cap) return false;
      out.push_back(std::move(next));
    } else if (!enumerate_into(m, phi, next, cap, out)) {
      return false;
    }
  }
  return true;
}

}  // namespace

std::optional<std::vector<DesignSample>> enumerate_derivations(const DesignModel& model, const ParamSet& phi,
                                                               std::size_t cap) {
  DesignSample root;
  root.design = model.grammar().start();
  std::vector<DesignSample> out;
  if (grammar::is_complete(root.design)) {
    out.push_back(root);
    return out;
  }
  if (!enumerate_into(model, phi, root, cap, out)) return std::nullopt;
  return out;
}

DesignSample greedy_design(const DesignModel& model, const ParamSet& phi) {
  DesignSample s;
  s.design = model.grammar().start();
  while (!grammar::is_complete(s.design)) {
    const auto dist = model.rule_distribution(s.design, phi);
    std::size_t best = 0;
    for (std::size_t i = 1; i < dist.size(); ++i) {
      if (dist[i].prob > dist[best].prob) best = i;
    }
    s.choices.push_back(dist[best].expansion);
    s.log_prob += std::log(dist[best].prob);
    s.design = grammar::apply_rule(s.design, model.grammar(), dist[best].expansion.node, dist[best].expansion.rule);
  }
  return s;
}

}  // namespace nlimb::design
