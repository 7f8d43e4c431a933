#pragma once

#include <optional>
#include <string>
#include <vector>

#include "grammar/grammar.hpp"

namespace nlimb::grammar::detail {

void apply_limb_attrs(LimbAttributes& limb, const AttrMap& attrs);
const std::vector<std::string>& node_attr_keys();
// A nonterminal dependency cycle as a symbol path (first == last), if any.
std::optional<std::vector<int>> find_cycle(const std::vector<Symbol>& symbols, const std::vector<ProductionRule>& rules);

}  // namespace nlimb::grammar::detail
