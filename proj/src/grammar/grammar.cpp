#include "grammar/grammar.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include <json.hpp>

#include "common/error.hpp"
#include "grammar/grammar_internal.hpp"

namespace nlimb::grammar {

const char* to_string(JointType t) {
  switch (t) {
    case JointType::ball: return "ball";
    case JointType::pitch: return "pitch";
    case JointType::yaw: return "yaw";
    case JointType::knee: return "knee";
    case JointType::fixed: return "fixed";
  }
  return "?";
}

std::optional<JointType> joint_type_from_string(const std::string& s) {
  if (s == "ball") return JointType::ball;
  if (s == "pitch") return JointType::pitch;
  if (s == "yaw") return JointType::yaw;
  if (s == "knee") return JointType::knee;
  if (s == "fixed") return JointType::fixed;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// DesignGraph

const DesignNode& DesignGraph::node(int id) const {
  auto it = nodes_.find(id);
  if (it == nodes_.end()) throw InvalidArgument("design has no node " + std::to_string(id));
  return it->second;
}

DesignNode& DesignGraph::mutable_node(int id) {
  auto it = nodes_.find(id);
  if (it == nodes_.end()) throw InvalidArgument("design has no node " + std::to_string(id));
  return it->second;
}

int DesignGraph::add_node(DesignNode n) {
  n.id = next_id_++;
  const int id = n.id;
  nodes_.emplace(id, std::move(n));
  return id;
}

std::vector<DesignEdge> DesignGraph::edges() const {
  std::vector<DesignEdge> out;
  for (int id : flatten_dfs(*this)) {
    const DesignNode& n = node(id);
    for (int c : n.children) out.push_back({id, c, node(c).joint});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Limb attributes from attribute maps

namespace detail {

void apply_limb_attrs(LimbAttributes& limb, const AttrMap& attrs) {
  for (const auto& [k, v] : attrs) {
    if (k == "length") limb.length = v;
    else if (k == "radius") limb.radius = v;
    else if (k == "mass") limb.mass = v;
    else if (k == "x") limb.offset.x = v;
    else if (k == "z") limb.offset.z = v;
    else if (k == "pitch") limb.offset.pitch = v;
    else if (k == "mirrored") limb.mirrored = v != 0.0;
  }
}

const std::vector<std::string>& node_attr_keys() {
  static const std::vector<std::string> keys = {"length", "radius", "mass", "x", "z", "pitch", "mirrored"};
  return keys;
}

std::optional<std::vector<int>> find_cycle(const std::vector<Symbol>& symbols, const std::vector<ProductionRule>& rules) {
  const std::size_t n = symbols.size();
  std::vector<std::vector<int>> deps(n);
  for (const auto& r : rules) {
    for (const auto& rn : r.nodes) {
      if (symbols[static_cast<std::size_t>(rn.symbol)].kind == SymbolKind::nonterminal) {
        deps[static_cast<std::size_t>(r.lhs)].push_back(rn.symbol);
      }
    }
  }
  std::vector<int> state(n, 0);
  std::vector<int> stack;
  std::optional<std::vector<int>> cycle;
  std::function<bool(int)> visit = [&](int s) {
    state[static_cast<std::size_t>(s)] = 1;
    stack.push_back(s);
    for (int d : deps[static_cast<std::size_t>(s)]) {
      if (state[static_cast<std::size_t>(d)] == 1) {
        std::vector<int> c;
        bool on = false;
        for (int x : stack) {
          if (x == d) on = true;
          if (on) c.push_back(x);
        }
        c.push_back(d);
        cycle = c;
        return true;
      }
      if (state[static_cast<std::size_t>(d)] == 0 && visit(d)) return true;
    }
    stack.pop_back();
    state[static_cast<std::size_t>(s)] = 2;
    return false;
  };
  for (std::size_t s = 0; s < n; ++s) {
    if (state[s] == 0 && visit(static_cast<int>(s))) return cycle;
  }
  return std::nullopt;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Grammar

Grammar::Grammar(std::vector<Symbol> symbols, std::map<int, AttrMap> terminal_attrs, std::vector<ProductionRule> rules,
                 int start_symbol, AttrMap start_attrs)
    : symbols_(std::move(symbols)),
      terminal_attrs_(std::move(terminal_attrs)),
      rules_(std::move(rules)),
      start_symbol_(start_symbol),
      start_attrs_(std::move(start_attrs)) {
  const int ns = static_cast<int>(symbols_.size());
  for (std::size_t i = 0; i < symbols_.size(); ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      if (symbols_[i].name == symbols_[j].name) throw InvalidArgument("duplicate symbol '" + symbols_[i].name + "'");
    }
  }
  if (start_symbol_ < 0 || start_symbol_ >= ns) throw InvalidArgument("grammar has no valid start symbol");
  rules_for_.assign(symbols_.size(), {});
  for (std::size_t i = 0; i < rules_.size(); ++i) {
    ProductionRule& r = rules_[i];
    r.id = static_cast<int>(i);
    if (r.lhs < 0 || r.lhs >= ns || is_terminal(r.lhs)) throw InvalidArgument("rule " + std::to_string(i) + ": lhs must be a nonterminal");
    if (r.nodes.empty()) throw InvalidArgument("rule " + std::to_string(i) + ": empty right-hand side");
    if (r.attachment < 0 || r.attachment >= static_cast<int>(r.nodes.size())) {
      throw InvalidArgument("rule " + std::to_string(i) + ": attachment out of range");
    }
    for (const auto& rn : r.nodes) {
      if (rn.symbol < 0 || rn.symbol >= ns) throw InvalidArgument("rule " + std::to_string(i) + ": unknown symbol");
    }
    // rhs must be a tree rooted at the attachment node
    std::vector<int> parent(r.nodes.size(), -1);
    for (const auto& e : r.edges) {
      if (e.parent < 0 || e.child < 0 || e.parent >= static_cast<int>(r.nodes.size()) ||
          e.child >= static_cast<int>(r.nodes.size())) {
        throw InvalidArgument("rule " + std::to_string(i) + ": edge endpoint out of range");
      }
      if (e.child == r.attachment) throw InvalidArgument("rule " + std::to_string(i) + ": attachment node cannot have a parent");
      if (parent[static_cast<std::size_t>(e.child)] != -1) {
        throw InvalidArgument("rule " + std::to_string(i) + ": node with two parents");
      }
      parent[static_cast<std::size_t>(e.child)] = e.parent;
    }
    for (std::size_t k = 0; k < r.nodes.size(); ++k) {
      int cur = static_cast<int>(k);
      std::size_t steps = 0;
      while (cur != r.attachment) {
        cur = parent[static_cast<std::size_t>(cur)];
        if (cur == -1 || ++steps > r.nodes.size()) {
          throw InvalidArgument("rule " + std::to_string(i) + ": right-hand side is not a tree rooted at the attachment");
        }
      }
    }
    rules_for_[static_cast<std::size_t>(r.lhs)].push_back(r.id);
  }
  for (int s = 0; s < ns; ++s) {
    if (!is_terminal(s) && rules_for_[static_cast<std::size_t>(s)].empty()) {
      throw InvalidArgument("nonterminal '" + symbols_[static_cast<std::size_t>(s)].name + "' has no rules");
    }
  }
  if (auto cycle = detail::find_cycle(symbols_, rules_)) {
    std::string path;
    for (int s : *cycle) path += (path.empty() ? "" : " -> ") + symbols_[static_cast<std::size_t>(s)].name;
    throw InvalidArgument("recursive nonterminal cycle: " + path);
  }

  DesignNode root;
  root.symbol = start_symbol_;
  root.terminal = is_terminal(start_symbol_);
  if (root.terminal) {
    LimbAttributes limb;
    detail::apply_limb_attrs(limb, this->terminal_attrs(start_symbol_));
    detail::apply_limb_attrs(limb, start_attrs_);
    root.limb = limb;
  } else {
    root.carried = start_attrs_;
  }
  start_.set_root(start_.add_node(std::move(root)));
}

int Grammar::symbol_index(const std::string& name) const {
  for (std::size_t i = 0; i < symbols_.size(); ++i) {
    if (symbols_[i].name == name) return static_cast<int>(i);
  }
  return -1;
}

const AttrMap& Grammar::terminal_attrs(int symbol) const {
  static const AttrMap empty;
  auto it = terminal_attrs_.find(symbol);
  return it == terminal_attrs_.end() ? empty : it->second;
}

std::size_t Grammar::num_nonterminals() const {
  std::size_t n = 0;
  for (const auto& s : symbols_) n += s.kind == SymbolKind::nonterminal;
  return n;
}

std::size_t Grammar::num_terminals() const { return symbols_.size() - num_nonterminals(); }

// ---------------------------------------------------------------------------
// Derivation

std::vector<int> flatten_dfs(const DesignGraph& g) {
  std::vector<int> out;
  if (g.root() < 0) return out;
  out.reserve(g.size());
  std::vector<int> stack = {g.root()};
  while (!stack.empty()) {
    const int id = stack.back();
    stack.pop_back();
    out.push_back(id);
    const auto& ch = g.node(id).children;
    for (auto it = ch.rbegin(); it != ch.rend(); ++it) stack.push_back(*it);
  }
  return out;
}

bool is_complete(const DesignGraph& g) {
  for (const auto& [id, n] : g.nodes()) {
    if (!n.terminal) return false;
  }
  return true;
}

std::vector<Expansion> applicable_expansions(const DesignGraph& g, const Grammar& grammar) {
  std::vector<Expansion> out;
  for (int id : flatten_dfs(g)) {
    const DesignNode& n = g.node(id);
    if (n.terminal) continue;
    for (int r : grammar.rules_for(n.symbol)) out.push_back({id, r});
  }
  return out;
}

DesignGraph apply_rule(const DesignGraph& g, const Grammar& grammar, int node_id, int rule_id) {
  if (!g.has_node(node_id)) throw InvalidArgument("apply_rule: design has no node " + std::to_string(node_id));
  if (rule_id < 0 || rule_id >= static_cast<int>(grammar.rules().size())) {
    throw InvalidArgument("apply_rule: no rule " + std::to_string(rule_id));
  }
  const DesignNode& target = g.node(node_id);
  const ProductionRule& rule = grammar.rule(rule_id);
  if (target.terminal || target.symbol != rule.lhs) {
    throw InvalidArgument("apply_rule: rule " + std::to_string(rule_id) + " has lhs '" + grammar.symbol(rule.lhs).name +
                          "' but node " + std::to_string(node_id) + " has symbol '" +
                          grammar.symbol(target.symbol).name + "'");
  }

  DesignGraph out = g;
  const bool mirrored = [&] {
    auto it = target.carried.find("mirrored");
    return it != target.carried.end() && it->second != 0.0;
  }();

  std::vector<int> ids(rule.nodes.size());
  for (std::size_t i = 0; i < rule.nodes.size(); ++i) {
    const RhsNode& rn = rule.nodes[i];
    const bool is_attach = static_cast<int>(i) == rule.attachment;
    DesignNode n;
    n.symbol = rn.symbol;
    n.terminal = grammar.is_terminal(rn.symbol);
    AttrMap attrs = rn.attrs;
    if (is_attach) {
      for (const auto& [k, v] : target.carried) attrs[k] = v;
    }
    if (mirrored) attrs["mirrored"] = 1.0;
    if (n.terminal) {
      LimbAttributes limb;
      detail::apply_limb_attrs(limb, grammar.terminal_attrs(rn.symbol));
      detail::apply_limb_attrs(limb, attrs);
      n.limb = limb;
    } else {
      n.carried = std::move(attrs);
    }
    ids[i] = out.add_node(std::move(n));
  }
  for (const RhsEdge& e : rule.edges) {
    const int p = ids[static_cast<std::size_t>(e.parent)];
    const int c = ids[static_cast<std::size_t>(e.child)];
    out.mutable_node(p).children.push_back(c);
    DesignNode& child = out.mutable_node(c);
    child.parent = p;
    child.joint = e.joint;
  }

  const int attach = ids[static_cast<std::size_t>(rule.attachment)];
  DesignNode& a = out.mutable_node(attach);
  a.parent = target.parent;
  if (target.parent < 0) a.joint.reset();
  else a.joint = rule.incoming ? rule.incoming : target.joint;
  for (int c : target.children) {
    a.children.push_back(c);
    out.mutable_node(c).parent = attach;
  }
  if (target.parent >= 0) {
    for (int& c : out.mutable_node(target.parent).children) {
      if (c == node_id) c = attach;
    }
  } else {
    out.set_root(attach);
  }
  out.erase_node(node_id);
  return out;
}

void validate_design(const DesignGraph& g) {
  if (g.size() == 0) throw InvalidArgument("design is empty");
  if (!g.has_node(g.root())) throw InvalidArgument("design root is missing");
  const DesignNode& root = g.node(g.root());
  if (root.parent != -1) throw InvalidArgument("design root has a parent edge");
  if (root.joint) throw InvalidArgument("design root has an incoming joint");
  std::map<int, int> seen;
  std::vector<int> stack = {g.root()};
  while (!stack.empty()) {
    const int id = stack.back();
    stack.pop_back();
    if (++seen[id] > 1) throw InvalidArgument("design contains a cycle at node " + std::to_string(id));
    const DesignNode& n = g.node(id);
    if (n.id != id) throw InvalidArgument("node id mismatch at " + std::to_string(id));
    if (n.terminal) {
      if (!n.limb) throw InvalidArgument("terminal node " + std::to_string(id) + " has no limb attributes");
      const auto& l = *n.limb;
      if (!(l.length > 0.0) || !(l.radius > 0.0) || !(l.mass > 0.0)) {
        throw InvalidArgument("terminal node " + std::to_string(id) + " needs positive length, radius and mass");
      }
    }
    for (int c : n.children) {
      if (!g.has_node(c)) throw InvalidArgument("node " + std::to_string(id) + " has a missing child");
      const DesignNode& ch = g.node(c);
      if (ch.parent != id) throw InvalidArgument("node " + std::to_string(c) + " has an inconsistent parent");
      if (ch.joint) {
        const auto& j = *ch.joint;
        if (j.type != JointType::fixed && !(j.lo < j.hi)) {
          throw InvalidArgument("joint into node " + std::to_string(c) + " has lo >= hi");
        }
        if (!(j.max_torque > 0.0)) throw InvalidArgument("joint into node " + std::to_string(c) + " has no torque");
      } else if (ch.terminal && is_complete(g)) {
        throw InvalidArgument("edge into node " + std::to_string(c) + " was never labeled");
      }
      if (n.limb && n.limb->mirrored && ch.limb && !ch.limb->mirrored) {
        throw InvalidArgument("node " + std::to_string(c) + " hangs off a mirrored limb but is not mirrored");
      }
      stack.push_back(c);
    }
  }
  if (seen.size() != g.size()) throw InvalidArgument("design is not connected");
}

// ---------------------------------------------------------------------------
// Counting

namespace {

class Counter {
 public:
  explicit Counter(const Grammar& g) : g_(g), memo_(g.symbols().size()) {}

  const BigCount& count(int s) {
    auto& slot = memo_[static_cast<std::size_t>(s)];
    if (slot) return *slot;
    BigCount total = 0;
    if (g_.is_terminal(s)) {
      total = 1;
    } else {
      for (int r : g_.rules_for(s)) {
        BigCount prod = 1;
        for (const RhsNode& rn : g_.rule(r).nodes) {
          if (!g_.is_terminal(rn.symbol)) prod *= count(rn.symbol);
        }
        total += prod;
      }
    }
    slot = total;
    return *slot;
  }

 private:
  const Grammar& g_;
  std::vector<std::optional<BigCount>> memo_;
};

}  // namespace

BigCount count_designs(const Grammar& g) { return count_completions(g.start(), g); }

BigCount count_completions(const DesignGraph& g, const Grammar& grammar) {
  // Grammar construction already rejected cycles, so the recursion terminates.
  Counter counter(grammar);
  BigCount total = 1;
  for (const auto& [id, n] : g.nodes()) {
    if (!n.terminal) total *= counter.count(n.symbol);
  }
  return total;
}

DesignGraph sample_uniform_design(const Grammar& grammar, Rng& rng, std::vector<Expansion>* choices) {
  Counter counter(grammar);
  if (choices) choices->clear();
  DesignGraph g = grammar.start();
  for (;;) {
    const auto exp = applicable_expansions(g, grammar);
    if (exp.empty()) return g;
    const int node = exp.front().node;
    const int symbol = g.node(node).symbol;
    const auto& rules = grammar.rules_for(symbol);
    std::vector<BigCount> weight;
    for (int r : rules) {
      BigCount prod = 1;
      for (const RhsNode& rn : grammar.rule(r).nodes) {
        if (!grammar.is_terminal(rn.symbol)) prod *= counter.count(rn.symbol);
      }
      weight.push_back(prod);
    }
    const BigCount& total = counter.count(symbol);
    // 64 spare bits make the modulo bias negligible.
    BigCount x = 0;
    const std::size_t bits = boost::multiprecision::msb(total) + 65;
    for (std::size_t b = 0; b < bits; b += 64) x = (x << 64) + BigCount(rng.next_u64());
    x %= total;
    std::size_t k = 0;
    while (x >= weight[k]) x -= weight[k++];
    if (choices) choices->push_back({node, rules[k]});
    g = apply_rule(g, grammar, node, rules[k]);
  }
}

// ---------------------------------------------------------------------------
// Signatures and export

namespace {

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string joint_sig(const std::optional<JointAttributes>& j) {
  if (!j) return "~";
  return std::string(to_string(j->type)) + "," + std::to_string(j->axis) + "," + num(j->lo) + "," + num(j->hi) + "," +
         num(j->max_torque) + "," + num(j->gear);
}

void signature_into(const DesignGraph& g, const Grammar& grammar, int id, std::string& out) {
  const DesignNode& n = g.node(id);
  out += grammar.symbol(n.symbol).name;
  out += '{';
  if (n.limb) {
    const auto& l = *n.limb;
    out += num(l.length) + "," + num(l.radius) + "," + num(l.mass) + "," + num(l.offset.x) + "," + num(l.offset.z) +
           "," + num(l.offset.pitch) + "," + (l.mirrored ? "m" : "s");
  } else {
    for (const auto& [k, v] : n.carried) out += k + "=" + num(v) + ";";
  }
  out += '}';
  out += '(';
  for (int c : n.children) {
    out += '<' + joint_sig(g.node(c).joint) + '>';
    signature_into(g, grammar, c, out);
    out += ';';
  }
  out += ')';
}

}  // namespace

std::string design_signature(const DesignGraph& g, const Grammar& grammar) {
  std::string out;
  if (g.root() >= 0) signature_into(g, grammar, g.root(), out);
  return out;
}

std::string design_to_json(const DesignGraph& g, const Grammar& grammar) {
  using nlohmann::ordered_json;
  ordered_json nodes = ordered_json::array();
  for (int id : flatten_dfs(g)) {
    const DesignNode& n = g.node(id);
    ordered_json jn;
    jn["id"] = id;
    jn["symbol"] = grammar.symbol(n.symbol).name;
    if (n.limb) {
      jn["geometry"] = {{"shape", "capsule"}, {"length", n.limb->length}, {"radius", n.limb->radius}};
      jn["mass"] = n.limb->mass;
      jn["offset"] = {{"x", n.limb->offset.x}, {"z", n.limb->offset.z}, {"pitch", n.limb->offset.pitch}};
      jn["mirrored"] = n.limb->mirrored;
    } else {
      jn["geometry"] = nullptr;
      jn["mass"] = nullptr;
      jn["offset"] = nullptr;
      jn["mirrored"] = nullptr;
    }
    nodes.push_back(std::move(jn));
  }
  ordered_json edges = ordered_json::array();
  for (const DesignEdge& e : g.edges()) {
    ordered_json je;
    je["parent"] = e.parent;
    je["child"] = e.child;
    if (e.joint) {
      je["joint_type"] = to_string(e.joint->type);
      je["axis"] = e.joint->axis;
      je["limits"] = {e.joint->lo, e.joint->hi};
      je["max_torque"] = e.joint->max_torque;
      je["gear"] = e.joint->gear;
    } else {
      je["joint_type"] = nullptr;
    }
    edges.push_back(std::move(je));
  }
  ordered_json doc;
  doc["root"] = g.root();
  doc["nodes"] = std::move(nodes);
  doc["edges"] = std::move(edges);
  return doc.dump(2) + "\n";
}

}  // namespace nlimb::grammar
