#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

#include <json.hpp>

#include "common/error.hpp"
#include "doctest.h"
#include "grammar/grammar.hpp"
#include "helpers.hpp"

using namespace nlimb;
using namespace nlimb::grammar;

namespace {

const char* kOneRule = R"(
symbol S nonterminal
symbol torso terminal
attr torso length=0.3 radius=0.05 mass=2
start S
rule S -> t:torso
)";

ParseError parse_error_of(const std::string& text) {
  try {
    parse_grammar(text);
  } catch (const ParseError& e) {
    return e;
  }
  FAIL("expected a parse error");
  return ParseError("", 0, 0);
}

// Every complete design reachable by always expanding the first open node.
void enumerate(const DesignGraph& d, const Grammar& g, std::set<std::string>& out, std::size_t& derivations) {
  const auto exp = applicable_expansions(d, g);
  if (exp.empty()) {
    out.insert(design_signature(d, g));
    ++derivations;
    return;
  }
  const int node = exp.front().node;
  for (const auto& e : exp) {
    if (e.node == node) enumerate(apply_rule(d, g, e.node, e.rule), g, out, derivations);
  }
}

// Small random acyclic grammar: nonterminal i may only reference j > i.
std::string random_grammar_text(Rng& rng) {
  const int nn = 1 + static_cast<int>(rng.below(4));
  const int nt = 1 + static_cast<int>(rng.below(3));
  std::ostringstream s;
  for (int i = 0; i < nn; ++i) s << "symbol N" << i << " nonterminal\n";
  for (int i = 0; i < nt; ++i) {
    s << "symbol t" << i << " terminal\n";
    s << "attr t" << i << " length=" << 0.1 + 0.05 * i << " radius=0.03 mass=1\n";
  }
  s << "start N0\n";
  for (int i = 0; i < nn; ++i) {
    const int nr = 1 + static_cast<int>(rng.below(3));
    for (int r = 0; r < nr; ++r) {
      s << "rule N" << i << " -> @a:t" << rng.below(static_cast<std::uint64_t>(nt)) << "[x=" << r << "]";
      const int kids = static_cast<int>(rng.below(3));
      for (int k = 0; k < kids; ++k) {
        const bool nonterm = i + 1 < nn && rng.below(2) == 0;
        if (nonterm) {
          s << " c" << k << ":N" << i + 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(nn - i - 1)));
        } else {
          s << " c" << k << ":t" << rng.below(static_cast<std::uint64_t>(nt));
        }
      }
      for (int k = 0; k < kids; ++k) s << " a->c" << k << "[type=pitch torque=" << k + 1 << "]";
      s << "\n";
    }
  }
  return s.str();
}

}  // namespace

TEST_CASE("one-rule grammar parses, derives and counts") {
  const Grammar g = parse_grammar(kOneRule);
  CHECK(g.num_nonterminals() == 1);
  CHECK(g.num_terminals() == 1);
  CHECK(g.rules().size() == 1);
  CHECK_FALSE(is_complete(g.start()));
  const DesignGraph d = apply_rule(g.start(), g, g.start().root(), 0);
  CHECK(is_complete(d));
  CHECK(d.size() == 1);
  CHECK(applicable_expansions(d, g).empty());
  CHECK(d.node(d.root()).limb->mass == 2.0);
  CHECK(count_designs(g) == 1);
  validate_design(d);
}

TEST_CASE("two all-terminal rules count as two designs") {
  const Grammar g = parse_grammar(std::string(kOneRule) + "rule S -> t:torso[length=0.5]\n");
  CHECK(count_designs(g) == 2);
}

TEST_CASE("undeclared symbol is reported with its location") {
  const std::string text =
      "symbol S nonterminal\n"
      "symbol torso terminal\n"
      "attr torso length=1 radius=0.1 mass=1\n"
      "start S\n"
      "rule S -> @t:torso l:Leg t->l[type=pitch torque=1]\n";
  const ParseError e = parse_error_of(text);
  CHECK(std::string(e.what()).find("'Leg'") != std::string::npos);
  CHECK(e.line() == 5);
  CHECK(e.column() == 22);
}

TEST_CASE("grammar errors carry locations") {
  SUBCASE("nonterminal without rules") {
    const ParseError e = parse_error_of("symbol S nonterminal\nsymbol A nonterminal\nsymbol t terminal\n"
                                        "attr t length=1 radius=1 mass=1\nstart S\nrule S -> t:t\n");
    CHECK(std::string(e.what()).find("'A' has no rules") != std::string::npos);
    CHECK(e.line() == 2);
  }
  SUBCASE("recursive cycle") {
    const ParseError e = parse_error_of("symbol S nonterminal\nsymbol A nonterminal\nsymbol t terminal\n"
                                        "attr t length=1 radius=1 mass=1\nstart S\n"
                                        "rule S -> @x:t a:A x->a[type=pitch torque=1]\n"
                                        "rule A -> @x:t s:S x->s[type=pitch torque=1]\n");
    CHECK(std::string(e.what()).find("cycle") != std::string::npos);
    CHECK(e.line() >= 6);
  }
  SUBCASE("malformed attribute") {
    const ParseError e = parse_error_of("symbol S nonterminal\nsymbol t terminal\n"
                                        "attr t length=abc radius=1 mass=1\nstart S\nrule S -> t:t\n");
    CHECK(std::string(e.what()).find("malformed attribute") != std::string::npos);
    CHECK(e.line() == 3);
    CHECK(e.column() == 8);
  }
  SUBCASE("knee limits must span a half turn") {
    const ParseError e = parse_error_of("symbol S nonterminal\nsymbol t terminal\n"
                                        "attr t length=1 radius=1 mass=1\nstart S\n"
                                        "rule S -> @a:t b:t a->b[type=knee lo=0 hi=1 torque=1]\n");
    CHECK(std::string(e.what()).find("knee") != std::string::npos);
  }
  SUBCASE("unlabeled edge to a terminal") {
    const ParseError e = parse_error_of("symbol S nonterminal\nsymbol t terminal\n"
                                        "attr t length=1 radius=1 mass=1\nstart S\nrule S -> @a:t b:t a->b\n");
    CHECK(std::string(e.what()).find("no joint") != std::string::npos);
  }
  SUBCASE("terminal lacking geometry") {
    const ParseError e = parse_error_of("symbol S nonterminal\nsymbol t terminal\nstart S\nrule S -> t:t\n");
    CHECK(std::string(e.what()).find("has no length") != std::string::npos);
    CHECK(e.line() == 4);
  }
}

TEST_CASE("default grammar round-trips through serialization") {
  const Grammar& g = default_grammar();
  const std::string text = serialize_grammar(g);
  const Grammar again = parse_grammar(text);
  CHECK(again == g);
  CHECK(serialize_grammar(again) == text);
}

TEST_CASE("default grammar file on disk matches the embedded copy") {
  std::ifstream in(NLIMB_DEFAULT_GRAMMAR_PATH);
  REQUIRE(in);
  std::ostringstream ss;
  ss << in.rdbuf();
  CHECK(ss.str() == default_grammar_text());
}

TEST_CASE("start graph expansions equal the start symbol's rules in the file") {
  const Grammar& g = default_grammar();
  // Independent count straight from the source text.
  std::istringstream in(default_grammar_text());
  std::string line;
  std::string start;
  std::map<std::string, int> per_lhs;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string head, name;
    ls >> head >> name;
    if (head == "start") start = name;
    if (head == "rule") ++per_lhs[name];
  }
  const auto exp = applicable_expansions(g.start(), g);
  CHECK(exp.size() == static_cast<std::size_t>(per_lhs[start]));
  CHECK_FALSE(is_complete(g.start()));
  for (std::size_t i = 0; i < exp.size(); ++i) CHECK(exp[i].rule == g.rules_for(g.start_symbol())[i]);
}

TEST_CASE("expansions are ordered by DFS position then declaration") {
  const Grammar g = parse_grammar(R"(
symbol S nonterminal
symbol A nonterminal
symbol B nonterminal
symbol t terminal
attr t length=1 radius=0.1 mass=1
start S
rule S -> @r:t a:A b:B r->a[type=pitch torque=1] r->b[type=pitch torque=1]
rule B -> t:t
rule A -> t:t
rule B -> t:t[length=2]
rule A -> t:t[length=3]
rule B -> t:t[length=4]
)");
  const DesignGraph d = apply_rule(g.start(), g, g.start().root(), 0);
  const auto exp = applicable_expansions(d, g);
  REQUIRE(exp.size() == 5);
  const auto order = flatten_dfs(d);
  const int a = order[1];
  const int b = order[2];
  const std::vector<Expansion> want = {{a, 2}, {a, 4}, {b, 1}, {b, 3}, {b, 5}};
  CHECK(exp == want);
}

TEST_CASE("flatten is preorder in child order") {
  const Grammar g = parse_grammar(R"(
symbol S nonterminal
symbol A nonterminal
symbol root terminal
symbol a terminal
symbol b terminal
symbol c terminal
attr root length=1 radius=0.1 mass=1
attr a length=1 radius=0.1 mass=1
attr b length=1 radius=0.1 mass=1
attr c length=1 radius=0.1 mass=1
start S
rule S -> @r:root x:A y:b r->x[type=pitch torque=1] r->y[type=pitch torque=1]
rule A -> @p:a q:c p->q[type=knee torque=1]
)");
  DesignGraph d = apply_rule(g.start(), g, g.start().root(), 0);
  d = apply_rule(d, g, applicable_expansions(d, g).front().node, 1);
  std::vector<std::string> names;
  for (int id : flatten_dfs(d)) names.push_back(g.symbol(d.node(id).symbol).name);
  CHECK(names == std::vector<std::string>{"root", "a", "c", "b"});
  CHECK(flatten_dfs(g.start()) == std::vector<int>{g.start().root()});
}

TEST_CASE("apply_rule rejects an inapplicable pair") {
  const Grammar& g = default_grammar();
  const int link_rule = g.rules_for(g.symbol_index("Link")).front();
  try {
    apply_rule(g.start(), g, g.start().root(), link_rule);
    FAIL("expected rejection");
  } catch (const InvalidArgument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("'Link'") != std::string::npos);
    CHECK(msg.find("'Robot'") != std::string::npos);
  }
}

TEST_CASE("derivations keep the bookkeeping identity and leave inputs untouched") {
  const Grammar& g = default_grammar();
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    DesignGraph d = g.start();
    for (;;) {
      const auto exp = applicable_expansions(d, g);
      if (exp.empty()) break;
      const Expansion e = exp[rng.below(exp.size())];
      const DesignGraph before = d;
      const std::size_t edges_before = d.edges().size();
      const ProductionRule& r = g.rule(e.rule);
      DesignGraph after = apply_rule(d, g, e.node, e.rule);
      CHECK(d == before);
      CHECK(after.size() == before.size() - 1 + r.nodes.size());
      CHECK(after.edges().size() == edges_before + r.edges.size());
      CHECK(after.edges().size() + 1 == after.size());
      for (const auto& [id, n] : before.nodes()) {
        if (id != e.node) CHECK(after.has_node(id));
      }
      d = std::move(after);
    }
  }
}

TEST_CASE("1000 seeded derivations satisfy the design invariants") {
  const Grammar& g = default_grammar();
  Rng rng(2024);
  int hexapods = 0;
  for (int i = 0; i < 1000; ++i) {
    const DesignGraph d = test::random_derivation(g, rng);
    REQUIRE(is_complete(d));
    CHECK(applicable_expansions(d, g).empty());
    validate_design(d);
    for (const auto& e : d.edges()) REQUIRE(e.joint.has_value());
    const int legs = test::leg_count(d, g);
    CHECK((legs == 4 || legs == 6));
    hexapods += legs == 6;
    // Mirrored chains are one node per link, so both sides share every attribute.
    for (const auto& [id, n] : d.nodes()) {
      const bool is_body = g.symbol(n.symbol).name.rfind("body", 0) == 0;
      CHECK(n.limb->mirrored == !is_body);
    }
  }
  CHECK(hexapods > 0);
}

TEST_CASE("three-segment derivation is a hexapod") {
  const Grammar& g = default_grammar();
  const int robot = g.symbol_index("Robot");
  int three = -1;
  for (int r : g.rules_for(robot)) {
    int segs = 0;
    for (const auto& n : g.rule(r).nodes) segs += g.symbol(n.symbol).name == "Segment";
    if (segs == 3) three = r;
  }
  REQUIRE(three >= 0);
  Rng rng(5);
  DesignGraph d = apply_rule(g.start(), g, g.start().root(), three);
  while (true) {
    const auto exp = applicable_expansions(d, g);
    if (exp.empty()) break;
    d = apply_rule(d, g, exp.front().node, exp.front().rule);
  }
  CHECK(test::leg_count(d, g) == 6);
}

TEST_CASE("flatten is injective on sampled designs") {
  const Grammar& g = default_grammar();
  Rng rng(77);
  std::map<std::string, std::string> by_sequence;
  for (int i = 0; i < 500; ++i) {
    const DesignGraph d = test::random_derivation(g, rng);
    std::ostringstream seq;
    seq.precision(17);
    for (int id : flatten_dfs(d)) {
      const auto& n = d.node(id);
      const auto& l = *n.limb;
      seq << n.symbol << ' ' << l.length << ' ' << l.offset.x << ' ' << l.offset.pitch << ' ';
      seq << (n.joint ? static_cast<int>(n.joint->type) : -1) << '|';
    }
    const std::string sig = design_signature(d, g);
    auto [it, inserted] = by_sequence.emplace(seq.str(), sig);
    if (!inserted) CHECK(it->second == sig);
  }
}

TEST_CASE("DP count matches exhaustive enumeration") {
  SUBCASE("truncated default grammar") {
    const Grammar g = parse_grammar(R"(
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
rule LegPair -> @a:Link b:Link[x=1] a->b
rule Link -> @l:leg_short ^[type=pitch torque=25]
rule Link -> @l:leg_long ^[type=knee lo=0 hi=pi torque=25]
)");
    std::set<std::string> designs;
    std::size_t derivations = 0;
    enumerate(g.start(), g, designs, derivations);
    CHECK(count_designs(g) == designs.size());
    CHECK(derivations == designs.size());
    CHECK(designs.size() == 64);
  }
  SUBCASE("random acyclic grammars") {
    Rng rng(9);
    int checked = 0;
    for (int trial = 0; trial < 60; ++trial) {
      const Grammar g = parse_grammar(random_grammar_text(rng));
      if (count_designs(g) > 5000) continue;
      std::set<std::string> designs;
      std::size_t derivations = 0;
      enumerate(g.start(), g, designs, derivations);
      CHECK(count_designs(g) == derivations);
      ++checked;
    }
    CHECK(checked > 20);
  }
}

TEST_CASE("default grammar spans more than 2.5M designs") {
  const Grammar& g = default_grammar();
  const BigCount n = count_designs(g);
  CHECK(n > 2500000);
  // Closed form for the shipped rule set: links 9, leg pairs 9^2 + 9^3,
  // segments 2 sizes, bodies of 2 segments (2 joints) or 3 (4 joint pairs).
  const BigCount pair = BigCount(81) + 729;
  const BigCount seg = 2 * pair;
  CHECK(n == 2 * seg * seg + 4 * seg * seg * seg);
  CHECK(n.str() == "17011360800");
}

TEST_CASE("count_completions shrinks as choices are made") {
  const Grammar& g = default_grammar();
  DesignGraph d = g.start();
  BigCount prev = count_completions(d, g);
  while (!is_complete(d)) {
    const auto e = applicable_expansions(d, g).front();
    d = apply_rule(d, g, e.node, e.rule);
    const BigCount cur = count_completions(d, g);
    CHECK(cur <= prev);
    prev = cur;
  }
  CHECK(prev == 1);
}

TEST_CASE("design export carries nodes, edges and root") {
  const Grammar& g = default_grammar();
  Rng rng(1);
  const DesignGraph d = test::random_derivation(g, rng);
  const auto doc = nlohmann::json::parse(design_to_json(d, g));
  CHECK(doc["root"] == d.root());
  CHECK(doc["nodes"].size() == d.size());
  CHECK(doc["edges"].size() == d.size() - 1);
  for (const auto& e : doc["edges"]) {
    CHECK(e["limits"].size() == 2);
    CHECK(e["limits"][0].get<double>() < e["limits"][1].get<double>());
    CHECK(e["max_torque"].get<double>() > 0);
    CHECK(e.contains("axis"));
    CHECK(e.contains("gear"));
    CHECK(e["joint_type"].is_string());
  }
  for (const auto& n : doc["nodes"]) {
    CHECK(n["geometry"]["length"].get<double>() > 0);
    CHECK(n["mass"].get<double>() > 0);
    CHECK(n.contains("offset"));
  }
  CHECK(design_to_json(d, g) == design_to_json(d, g));
}

TEST_CASE("legs point down from the middle of each segment") {
  const Grammar& g = default_grammar();
  Rng rng(4);
  const DesignGraph d = test::random_derivation(g, rng);
  for (const auto& [id, n] : d.nodes()) {
    if (n.parent < 0) continue;
    const auto& parent = d.node(n.parent);
    if (!parent.limb->mirrored && n.limb->mirrored) {
      CHECK(n.limb->offset.x == 0.5);
      CHECK(n.limb->offset.pitch == doctest::Approx(-std::numbers::pi / 2));
    }
  }
}

TEST_CASE("uniform design sampling weights rules by their completions") {
  const Grammar g = parse_grammar(R"(
symbol S nonterminal
symbol X nonterminal
symbol a terminal
symbol b terminal
symbol c terminal
symbol d terminal
attr a length=1 radius=0.1 mass=1
attr b length=2 radius=0.1 mass=1
attr c length=3 radius=0.1 mass=1
attr d length=4 radius=0.1 mass=1
start S
rule S -> t:a
rule S -> t:X
rule X -> t:b
rule X -> t:c
rule X -> t:d
)");
  Rng rng(5);
  std::map<double, int> freq;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const DesignGraph d = sample_uniform_design(g, rng);
    REQUIRE(is_complete(d));
    ++freq[d.node(d.root()).limb->length];
  }
  REQUIRE(freq.size() == 4);
  const double sigma = std::sqrt(0.25 * 0.75 / n);
  for (const auto& [len, k] : freq) CHECK(std::abs(k / static_cast<double>(n) - 0.25) < 4 * sigma);
}
