#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "common/rng.hpp"

namespace nlimb::grammar {

using BigCount = boost::multiprecision::cpp_int;

enum class SymbolKind { terminal, nonterminal };

struct Symbol {
  std::string name;
  SymbolKind kind = SymbolKind::terminal;
  friend bool operator==(const Symbol&, const Symbol&) = default;
};

// Attachment of a limb in its parent's frame. `x` is measured along the
// parent's axis as a fraction of the parent's length (0 = proximal end,
// 1 = distal end); `z` is a perpendicular offset in meters; `pitch` is the
// rest angle of the limb relative to the parent's axis.
struct Pose2 {
  double x = 0.0;
  double z = 0.0;
  double pitch = 0.0;
  friend bool operator==(const Pose2&, const Pose2&) = default;
};

// A capsule limb. A mirrored limb stands for a left/right pair of identical
// limbs sharing every attribute.
struct LimbAttributes {
  double length = 0.0;
  double radius = 0.0;
  double mass = 0.0;
  Pose2 offset;
  bool mirrored = false;
  friend bool operator==(const LimbAttributes&, const LimbAttributes&) = default;
};

enum class JointType { ball, pitch, yaw, knee, fixed };

const char* to_string(JointType t);
std::optional<JointType> joint_type_from_string(const std::string& s);

struct JointAttributes {
  JointType type = JointType::pitch;
  int axis = 1;  // sign of positive rotation about the lateral axis
  double lo = 0.0;
  double hi = 0.0;
  double max_torque = 0.0;
  double gear = 1.0;
  bool actuated() const noexcept { return type != JointType::fixed; }
  friend bool operator==(const JointAttributes&, const JointAttributes&) = default;
};

// Partially specified node attributes (keys: length radius mass x z pitch
// mirrored), ordered by key.
using AttrMap = std::map<std::string, double>;

struct DesignNode {
  int id = -1;
  int symbol = -1;
  bool terminal = false;
  std::optional<LimbAttributes> limb;  // set iff terminal
  AttrMap carried;                     // nonterminals: overrides for the node that replaces them
  int parent = -1;
  std::vector<int> children;             // ordered
  std::optional<JointAttributes> joint;  // incoming edge; empty for the root or an unlabeled edge
  friend bool operator==(const DesignNode&, const DesignNode&) = default;
};

struct DesignEdge {
  int parent;
  int child;
  std::optional<JointAttributes> joint;
};

// A (possibly partial) design: a tree of symbols rooted at `root`.
class DesignGraph {
 public:
  DesignGraph() = default;

  const std::map<int, DesignNode>& nodes() const noexcept { return nodes_; }
  const DesignNode& node(int id) const;
  bool has_node(int id) const { return nodes_.count(id) != 0; }
  int root() const noexcept { return root_; }
  int next_id() const noexcept { return next_id_; }
  std::size_t size() const noexcept { return nodes_.size(); }
  std::vector<DesignEdge> edges() const;

  // Mutators used by grammar operations.
  DesignNode& mutable_node(int id);
  int add_node(DesignNode n);  // assigns the next id
  void erase_node(int id) { nodes_.erase(id); }
  void set_root(int id) { root_ = id; }

  friend bool operator==(const DesignGraph&, const DesignGraph&) = default;

 private:
  std::map<int, DesignNode> nodes_;
  int root_ = -1;
  int next_id_ = 0;
};

struct RhsNode {
  std::string local_id;
  int symbol = -1;
  AttrMap attrs;
  friend bool operator==(const RhsNode&, const RhsNode&) = default;
};

struct RhsEdge {
  int parent = -1;  // indices into ProductionRule::nodes
  int child = -1;
  std::optional<JointAttributes> joint;  // empty: labeled later by the child's expansion
  friend bool operator==(const RhsEdge&, const RhsEdge&) = default;
};

struct ProductionRule {
  int id = -1;
  int lhs = -1;
  std::vector<RhsNode> nodes;
  std::vector<RhsEdge> edges;  // a tree rooted at `attachment`, in child-stub order
  int attachment = 0;
  std::optional<JointAttributes> incoming;  // relabels the inherited parent edge
  int line = 0;
  friend bool operator==(const ProductionRule& a, const ProductionRule& b) {
    return a.id == b.id && a.lhs == b.lhs && a.nodes == b.nodes && a.edges == b.edges &&
           a.attachment == b.attachment && a.incoming == b.incoming;
  }
};

// A context-free graph grammar (N, T, R, S).
class Grammar {
 public:
  Grammar(std::vector<Symbol> symbols, std::map<int, AttrMap> terminal_attrs, std::vector<ProductionRule> rules,
          int start_symbol, AttrMap start_attrs);

  const std::vector<Symbol>& symbols() const noexcept { return symbols_; }
  const std::vector<ProductionRule>& rules() const noexcept { return rules_; }
  const ProductionRule& rule(int id) const { return rules_.at(static_cast<std::size_t>(id)); }
  const Symbol& symbol(int i) const { return symbols_.at(static_cast<std::size_t>(i)); }
  int symbol_index(const std::string& name) const;  // -1 if absent
  bool is_terminal(int symbol) const { return symbols_.at(static_cast<std::size_t>(symbol)).kind == SymbolKind::terminal; }
  const std::vector<int>& rules_for(int symbol) const { return rules_for_.at(static_cast<std::size_t>(symbol)); }
  const AttrMap& terminal_attrs(int symbol) const;
  const std::map<int, AttrMap>& all_terminal_attrs() const noexcept { return terminal_attrs_; }
  int start_symbol() const noexcept { return start_symbol_; }
  const AttrMap& start_attrs() const noexcept { return start_attrs_; }
  const DesignGraph& start() const noexcept { return start_; }
  std::size_t num_nonterminals() const;
  std::size_t num_terminals() const;

  friend bool operator==(const Grammar& a, const Grammar& b) {
    return a.symbols_ == b.symbols_ && a.terminal_attrs_ == b.terminal_attrs_ && a.rules_ == b.rules_ &&
           a.start_symbol_ == b.start_symbol_ && a.start_attrs_ == b.start_attrs_;
  }

 private:
  std::vector<Symbol> symbols_;
  std::map<int, AttrMap> terminal_attrs_;
  std::vector<ProductionRule> rules_;
  int start_symbol_;
  AttrMap start_attrs_;
  std::vector<std::vector<int>> rules_for_;
  DesignGraph start_;
};

// ---------------------------------------------------------------------------
// Grammar definition language.

Grammar parse_grammar(const std::string& text);
Grammar load_grammar(const std::string& path);
std::string serialize_grammar(const Grammar& g);

// The built-in quadruped/hexapod grammar.
const std::string& default_grammar_text();
const Grammar& default_grammar();
// "default" or a path.
Grammar resolve_grammar(const std::string& name_or_path);

// ---------------------------------------------------------------------------
// Derivation.

struct Expansion {
  int node = -1;
  int rule = -1;
  friend bool operator==(const Expansion&, const Expansion&) = default;
};

std::vector<Expansion> applicable_expansions(const DesignGraph& g, const Grammar& grammar);
DesignGraph apply_rule(const DesignGraph& g, const Grammar& grammar, int node, int rule);
bool is_complete(const DesignGraph& g);
std::vector<int> flatten_dfs(const DesignGraph& g);
// Throws InvalidArgument describing the first violated invariant.
void validate_design(const DesignGraph& g);

// Number of distinct complete derivations. Throws on cyclic grammars.
BigCount count_designs(const Grammar& g);
// Complete designs reachable from `g` (same DP, rooted at its open nodes).
BigCount count_completions(const DesignGraph& g, const Grammar& grammar);

// Uniform over complete designs: each rule for the first open node is chosen
// in proportion to the number of designs it leads to.
DesignGraph sample_uniform_design(const Grammar& grammar, Rng& rng, std::vector<Expansion>* choices = nullptr);

// Canonical text of a design's structure and attributes, independent of node
// ids; equal iff the designs are the same robot.
std::string design_signature(const DesignGraph& g, const Grammar& grammar);

// JSON export: {nodes: [...], edges: [...], root}.
std::string design_to_json(const DesignGraph& g, const Grammar& grammar);

}  // namespace nlimb::grammar
