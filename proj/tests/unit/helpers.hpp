#pragma once

#include <string>

#include "common/rng.hpp"
#include "grammar/grammar.hpp"

namespace nlimb::test {

// Expands the first open node with a uniformly chosen rule until complete.
inline grammar::DesignGraph random_derivation(const grammar::Grammar& g, Rng& rng) {
  grammar::DesignGraph d = g.start();
  for (;;) {
    const auto exp = grammar::applicable_expansions(d, g);
    if (exp.empty()) return d;
    const int node = exp.front().node;
    const auto& rules = g.rules_for(d.node(node).symbol);
    d = grammar::apply_rule(d, g, node, rules[rng.below(rules.size())]);
  }
}

// Legs attached directly to body segments, counting a mirrored leg twice.
inline int leg_count(const grammar::DesignGraph& d, const grammar::Grammar& g) {
  int legs = 0;
  for (const auto& [id, n] : d.nodes()) {
    if (n.parent < 0) continue;
    const std::string& self = g.symbol(n.symbol).name;
    const std::string& parent = g.symbol(d.node(n.parent).symbol).name;
    if (self.rfind("leg", 0) == 0 && parent.rfind("body", 0) == 0) legs += n.limb && n.limb->mirrored ? 2 : 1;
  }
  return legs;
}

}  // namespace nlimb::test
