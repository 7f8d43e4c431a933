#include <cmath>
#include <functional>
#include <map>

#include "autodiff/gradcheck.hpp"
#include "common/error.hpp"
#include "design_model/design_model.hpp"
#include "doctest.h"
#include "helpers.hpp"

using namespace nlimb;
using namespace nlimb::design;
using namespace nlimb::grammar;
using ad::ParamSet;
using ad::Tape;
using ad::Var;

namespace {

const DesignModelConfig kTiny{1, 2, 8, 8, 16};

Grammar two_designs() {
  return parse_grammar(R"(
symbol S nonterminal
symbol a terminal
symbol b terminal
attr a length=1 radius=0.1 mass=1
attr b length=2 radius=0.1 mass=1
start S
rule S -> t:a
rule S -> t:b
)");
}

Grammar deterministic() {
  return parse_grammar(R"(
symbol S nonterminal
symbol A nonterminal
symbol t terminal
attr t length=1 radius=0.1 mass=1
start S
rule S -> @r:t a:A r->a[type=pitch torque=1]
rule A -> @x:t y:t x->y[type=knee torque=2]
)");
}

// Four designs, two steps each, with one open node at a time.
Grammar four_designs() {
  return parse_grammar(R"(
symbol S nonterminal
symbol A nonterminal
symbol t terminal
symbol u terminal
attr t length=1 radius=0.1 mass=1
attr u length=2 radius=0.1 mass=1
start S
rule S -> @r:t a:A r->a[type=pitch torque=1]
rule S -> @r:u a:A r->a[type=pitch torque=1]
rule A -> x:t ^[type=knee torque=2]
rule A -> x:u ^[type=yaw torque=2]
)");
}

// Default vocabulary cut down to 36 designs, with several open nodes at once.
Grammar truncated_default() {
  return parse_grammar(R"(
symbol Robot nonterminal
symbol Segment nonterminal
symbol LegPair nonterminal
symbol Link nonterminal
symbol body_small terminal
symbol body_large terminal
symbol leg_short terminal
symbol leg_long terminal
attr body_small length=0.20 radius=0.04 mass=0.6367
attr body_large length=0.35 radius=0.04 mass=1.0137
attr leg_short length=0.12 radius=0.04 mass=0.4356
attr leg_long length=0.24 radius=0.04 mass=0.7372
start Robot
rule Robot -> @a:Segment b:Segment[x=1] a->b[type=ball torque=40]
rule Segment -> @s:body_small l:LegPair[x=0.5 pitch=-pi/2 mirrored=1] s->l
rule Segment -> @s:body_large l:LegPair[x=0.5 pitch=-pi/2 mirrored=1] s->l
rule LegPair -> @a:Link
rule Link -> @l:leg_short ^[type=pitch torque=25]
rule Link -> @l:leg_long ^[type=knee lo=0 hi=pi torque=25]
rule Link -> @l:leg_long ^[type=yaw torque=25 gear=1.5]
)");
}

void randomize(ParamSet& phi, Rng& rng, double s = 0.7) {
  for (std::size_t i = 0; i < phi.size(); ++i) {
    for (double& v : phi.at(i).values()) v += s * rng.normal();
  }
}

// Visits every derivation trajectory with its per-step probabilities.
void trajectories(const DesignModel& m, const ParamSet& phi, const DesignGraph& g, double p,
                  std::vector<Expansion>& path, const std::function<void(const std::vector<Expansion>&, double)>& fn) {
  if (is_complete(g)) {
    fn(path, p);
    return;
  }
  for (const auto& ep : m.rule_distribution(g, phi)) {
    path.push_back(ep.expansion);
    trajectories(m, phi, apply_rule(g, m.grammar(), ep.expansion.node, ep.expansion.rule), p * ep.prob, path, fn);
    path.pop_back();
  }
}

}  // namespace

TEST_CASE("single applicable rule has probability one") {
  const DesignModel m(deterministic(), kTiny);
  Rng rng(1);
  ParamSet phi = m.init(rng);
  randomize(phi, rng);
  const auto d = m.rule_distribution(m.grammar().start(), phi);
  REQUIRE(d.size() == 1);
  CHECK(d[0].prob == 1.0);
}

TEST_CASE("zero rule embeddings give a uniform distribution") {
  const DesignModel m(default_grammar(), DesignModelConfig{});
  Rng rng(2);
  const ParamSet phi = m.init(rng);
  DesignGraph g = m.grammar().start();
  for (int step = 0; step < 6 && !is_complete(g); ++step) {
    const auto d = m.rule_distribution(g, phi);
    for (const auto& ep : d) CHECK(ep.prob == doctest::Approx(1.0 / static_cast<double>(d.size())).epsilon(1e-14));
    for (double z : m.logits(g, phi)) CHECK(z == 0.0);
    g = apply_rule(g, m.grammar(), d.back().expansion.node, d.back().expansion.rule);
  }
}

TEST_CASE("rule distribution matches an independent softmax of its logits") {
  const DesignModel m(default_grammar(), DesignModelConfig{});
  Rng rng(3);
  ParamSet phi = m.init(rng);
  randomize(phi, rng, 0.3);
  for (int trial = 0; trial < 10; ++trial) {
    DesignGraph g = m.grammar().start();
    const int depth = static_cast<int>(rng.below(8));
    for (int k = 0; k < depth && !is_complete(g); ++k) {
      const auto exp = applicable_expansions(g, m.grammar());
      const auto e = exp[rng.below(exp.size())];
      g = apply_rule(g, m.grammar(), e.node, e.rule);
    }
    if (is_complete(g)) continue;
    const auto z = m.logits(g, phi);
    const auto d = m.rule_distribution(g, phi);
    REQUIRE(z.size() == d.size());
    REQUIRE(d.size() == applicable_expansions(g, m.grammar()).size());
    long double mx = z[0];
    for (double v : z) mx = std::max<long double>(mx, v);
    long double s = 0.0L;
    for (double v : z) s += std::exp(static_cast<long double>(v) - mx);
    double total = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double want = static_cast<double>(std::exp(static_cast<long double>(z[i]) - mx) / s);
      CHECK(std::abs(d[i].prob - want) < 1e-12);
      total += d[i].prob;
    }
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
}

TEST_CASE("rule distribution rejects complete graphs and long sequences") {
  const DesignModel m(default_grammar(), DesignModelConfig{2, 4, 16, 16, 4});
  Rng rng(4);
  const ParamSet phi = m.init(rng);
  CHECK_THROWS_AS(m.sample(phi, rng), InvalidArgument);
  try {
    Rng r2(4);
    m.sample(phi, r2);
  } catch (const InvalidArgument& e) {
    CHECK(std::string(e.what()).find("exceeds the model's maximum of 4") != std::string::npos);
  }
  const DesignModel big(default_grammar(), DesignModelConfig{});
  const ParamSet phi2 = big.init(rng);
  const DesignSample s = big.sample(phi2, rng);
  CHECK_THROWS_AS(big.rule_distribution(s.design, phi2), InvalidArgument);
}

TEST_CASE("deterministic grammar has zero log-probability and zero gradient") {
  const DesignModel m(deterministic(), kTiny);
  Rng rng(5);
  ParamSet phi = m.init(rng);
  randomize(phi, rng);
  const DesignSample s = m.sample(phi, rng);
  CHECK(s.log_prob == 0.0);
  CHECK(s.choices.size() == 2);
  Tape tape(true);
  auto p = tape.bind(phi);
  Var lp = m.log_prob(p, s.choices);
  CHECK(lp.item() == 0.0);
  const ParamSet g = ad::grad(lp, p);
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (double v : g.at(i).values()) CHECK(v == 0.0);
  }
}

TEST_CASE("two-rule log-probability is a minus logsumexp and passes finite differences") {
  const DesignModel m(two_designs(), kTiny);
  Rng rng(6);
  ParamSet phi = m.init(rng);
  randomize(phi, rng);
  const auto z = m.logits(m.grammar().start(), phi);
  REQUIRE(z.size() == 2);
  const std::vector<Expansion> choose_first = {{m.grammar().start().root(), 0}};
  const double want = z[0] - std::log(std::exp(z[0]) + std::exp(z[1]));
  CHECK(std::abs(m.log_prob_value(phi, choose_first) - want) < 1e-12);
  const auto res = ad::finite_diff_check(
      [&](Tape&, const ad::BoundParams& p) { return m.log_prob(p, choose_first); }, phi);
  CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("zero-init sampling is uniform over two designs") {
  const DesignModel m(two_designs(), kTiny);
  Rng rng(7);
  const ParamSet phi = m.init(rng);
  int first = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) first += m.sample(phi, rng).choices[0].rule == 0;
  const double sigma = std::sqrt(0.25 / n);
  CHECK(std::abs(first / static_cast<double>(n) - 0.5) < 3 * sigma);
}

TEST_CASE("probabilities over all derivations sum to one") {
  const DesignModel m(truncated_default(), kTiny);
  Rng rng(8);
  ParamSet phi = m.init(rng);
  randomize(phi, rng);
  double total = 0.0;
  std::map<std::string, int> designs;
  std::size_t paths = 0;
  std::vector<Expansion> path;
  trajectories(m, phi, m.grammar().start(), 1.0, path, [&](const std::vector<Expansion>& c, double p) {
    total += p;
    ++paths;
    ++designs[design_signature(m.replay(c), m.grammar())];
    // Autoregressive consistency against the differentiable path.
    CHECK(std::abs(std::exp(m.log_prob_value(phi, c)) - p) < 1e-12);
  });
  CHECK(designs.size() == 36);
  CHECK(static_cast<std::size_t>(count_designs(m.grammar())) == designs.size());
  CHECK(paths > designs.size());
  CHECK(std::abs(total - 1.0) < 1e-9);
}

TEST_CASE("sampling is seed-deterministic and replays bit-identically") {
  const DesignModel m(default_grammar(), DesignModelConfig{});
  Rng init(9);
  ParamSet phi = m.init(init);
  randomize(phi, init, 0.2);
  Rng a(123), b(123);
  for (int i = 0; i < 100; ++i) {
    const DesignSample s = m.sample(phi, a);
    const DesignSample t = m.sample(phi, b);
    CHECK(s.choices == t.choices);
    CHECK(s.log_prob == t.log_prob);
    CHECK(s.log_prob <= 0.0);
    CHECK(m.log_prob_value(phi, s.choices) == s.log_prob);
    CHECK(m.replay(s.choices) == s.design);
  }
}

TEST_CASE("invalid derivation is rejected at the offending step") {
  const DesignModel m(four_designs(), kTiny);
  Rng rng(10);
  const ParamSet phi = m.init(rng);
  DesignSample s = m.sample(phi, rng);
  s.choices[1].rule = 0;  // an S rule applied to an A node
  try {
    m.log_prob_value(phi, s.choices);
    FAIL("expected rejection");
  } catch (const InvalidArgument& e) {
    CHECK(std::string(e.what()).find("step 1") != std::string::npos);
  }
}

TEST_CASE("equal returns leave the parameters unchanged") {
  const DesignModel m(four_designs(), kTiny);
  Rng rng(11);
  ParamSet phi = m.init(rng);
  randomize(phi, rng);
  std::vector<DesignSample> samples;
  for (int i = 0; i < 4; ++i) samples.push_back(m.sample(phi, rng));
  const ParamSet before = phi;
  ad::Adam opt(0.1);
  const auto r = design_distribution_step(m, phi, opt, samples, {0.1, 0.1, 0.1, 0.1});
  CHECK(r.grad_norm == 0.0);
  CHECK(phi == before);
  CHECK_THROWS_AS(design_distribution_step(m, phi, opt, {samples[0]}, {1.0}), InvalidArgument);
}

TEST_CASE("bandit step raises the probability of the better design") {
  const DesignModel m(two_designs(), kTiny);
  Rng rng(12);
  ParamSet phi = m.init(rng);
  randomize(phi, rng, 0.3);
  const int root = m.grammar().start().root();
  const std::vector<DesignSample> samples = {DesignSample{{}, {{root, 0}}, 0.0}, DesignSample{{}, {{root, 1}}, 0.0}};
  const double before = m.rule_distribution(m.grammar().start(), phi)[1].prob;
  ad::Adam opt(1e-2);
  design_distribution_step(m, phi, opt, samples, {0.0, 1.0});
  const double after = m.rule_distribution(m.grammar().start(), phi)[1].prob;
  CHECK(after > before);
}

TEST_CASE("constant return offsets do not change the update") {
  const DesignModel m(four_designs(), kTiny);
  Rng rng(13);
  ParamSet phi = m.init(rng);
  randomize(phi, rng);
  std::vector<DesignSample> samples;
  for (int i = 0; i < 5; ++i) samples.push_back(m.sample(phi, rng));
  const std::vector<double> r = {0.3, -1.0, 2.0, 0.5, 0.0};
  std::vector<double> shifted = r;
  for (double& v : shifted) v += 100.0;
  const ParamSet g1 = design_gradient(m, phi, samples, r);
  const ParamSet g2 = design_gradient(m, phi, samples, shifted);
  for (std::size_t i = 0; i < g1.size(); ++i) {
    for (std::size_t k = 0; k < g1.at(i).size(); ++k) CHECK(std::abs(g1.at(i)[k] - g2.at(i)[k]) < 1e-9);
  }
}

TEST_CASE("score-function estimator matches the exact expected-return gradient") {
  const DesignModel m(four_designs(), kTiny);
  Rng rng(14);
  ParamSet phi = m.init(rng);
  randomize(phi, rng);
  auto design_return = [&](const DesignGraph& d) {
    double r = 0.0;
    for (const auto& [id, n] : d.nodes()) r += n.limb->length * (id + 1);
    return r;
  };

  // Exact gradient of sum_w p(w) R(w) by enumeration, on the tape.
  std::vector<std::pair<std::vector<Expansion>, double>> all;
  std::vector<Expansion> path;
  trajectories(m, phi, m.grammar().start(), 1.0, path,
               [&](const std::vector<Expansion>& c, double) { all.emplace_back(c, design_return(m.replay(c))); });
  REQUIRE(all.size() == 4);
  Tape tape(true);
  auto p = tape.bind(phi);
  std::optional<Var> j;
  for (const auto& [c, r] : all) {
    Var t = scale(exp(m.log_prob(p, c)), r);
    j = j ? *j + t : t;
  }
  const ParamSet exact = ad::grad(*j, p);

  // Fixed probe directions: the exact gradient and three random ones.
  std::vector<ParamSet> dirs = {exact};
  for (int k = 0; k < 3; ++k) {
    ParamSet d = exact.zeros_like();
    randomize(d, rng, 1.0);
    dirs.push_back(d);
  }
  auto project = [](const ParamSet& a, const ParamSet& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      for (std::size_t k = 0; k < a.at(i).size(); ++k) s += a.at(i)[k] * b.at(i)[k];
    }
    return s;
  };

  const int resamples = 10000;
  std::vector<double> sum(dirs.size(), 0.0), sum2(dirs.size(), 0.0);
  for (int t = 0; t < resamples; ++t) {
    std::vector<DesignSample> batch;
    std::vector<double> returns;
    for (int i = 0; i < 3; ++i) {
      batch.push_back(m.sample(phi, rng));
      returns.push_back(design_return(batch.back().design));
    }
    // design_gradient returns the gradient of the loss (negated objective).
    const ParamSet g = design_gradient(m, phi, batch, returns);
    for (std::size_t k = 0; k < dirs.size(); ++k) {
      const double v = -project(g, dirs[k]);
      sum[k] += v;
      sum2[k] += v * v;
    }
  }
  for (std::size_t k = 0; k < dirs.size(); ++k) {
    const double mean = sum[k] / resamples;
    const double var = sum2[k] / resamples - mean * mean;
    const double se = std::sqrt(var / resamples);
    const double want = project(exact, dirs[k]);
    CHECK(std::abs(mean - want) < 3 * se);
  }
}
