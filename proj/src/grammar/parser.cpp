// Grammar definition language: a line-oriented format.
//
//   symbol <name> terminal|nonterminal
//   attr <terminal> key=value ...
//   start <symbol>[key=value ...]
//   rule <lhs> -> <items>
//
// Rule items: nodes `id:symbol[attrs]` (prefix `@` marks the attachment),
// edges `parent->child[joint attrs]` (an edge without attrs is labeled later
// by the child's own expansion), and `^[joint attrs]`, which relabels the
// edge the attachment node inherits. `#` starts a comment.

#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <numbers>
#include <set>
#include <sstream>

#include "common/error.hpp"
#include "grammar/grammar.hpp"
#include "grammar/grammar_internal.hpp"

namespace nlimb::grammar {
namespace {

struct Token {
  std::string text;
  int col = 0;
};

struct Line {
  int number = 0;
  std::vector<Token> tokens;
};

std::vector<Line> tokenize(const std::string& text) {
  std::vector<Line> lines;
  std::istringstream in(text);
  std::string raw;
  int number = 0;
  while (std::getline(in, raw)) {
    ++number;
    if (!raw.empty() && raw.back() == '\r') raw.pop_back();
    Line line{number, {}};
    Token cur;
    int depth = 0;
    auto flush = [&] {
      if (!cur.text.empty()) line.tokens.push_back(cur);
      cur = Token{};
    };
    for (std::size_t i = 0; i < raw.size(); ++i) {
      const char c = raw[i];
      const int col = static_cast<int>(i) + 1;
      if (c == '#' && depth == 0) break;
      if (c == '[') ++depth;
      if (c == ']') {
        if (depth == 0) throw ParseError("unmatched ']'", number, col);
        --depth;
      }
      if (depth == 0 && (c == ' ' || c == '\t') ) {
        flush();
        continue;
      }
      if (cur.text.empty()) cur.col = col;
      cur.text += c;
    }
    if (depth != 0) throw ParseError("unterminated '['", number, static_cast<int>(raw.size()));
    flush();
    if (!line.tokens.empty()) lines.push_back(std::move(line));
  }
  return lines;
}

bool is_identifier(const std::string& s) {
  if (s.empty() || !(std::isalpha(static_cast<unsigned char>(s[0])) || s[0] == '_')) return false;
  for (char c : s) {
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_')) return false;
  }
  return true;
}

// Number, or [-]pi[/d] / [-][k*]pi.
std::optional<double> parse_value(const std::string& s) {
  std::string t = s;
  double sign = 1.0;
  if (!t.empty() && t[0] == '-' && t.find("pi") != std::string::npos) {
    sign = -1.0;
    t = t.substr(1);
  }
  const auto pi_at = t.find("pi");
  if (pi_at != std::string::npos) {
    double factor = 1.0;
    if (pi_at > 0) {
      if (t[pi_at - 1] != '*') return std::nullopt;
      auto f = parse_value(t.substr(0, pi_at - 1));
      if (!f) return std::nullopt;
      factor = *f;
    }
    std::string rest = t.substr(pi_at + 2);
    double div = 1.0;
    if (!rest.empty()) {
      if (rest[0] != '/') return std::nullopt;
      auto d = parse_value(rest.substr(1));
      if (!d || *d == 0.0) return std::nullopt;
      div = *d;
    }
    return sign * factor * std::numbers::pi / div;
  }
  double v = 0.0;
  const char* b = t.data();
  const char* e = t.data() + t.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || p != e || !std::isfinite(v)) return std::nullopt;
  return v;
}

struct KeyValue {
  std::string key;
  std::string value;
  int col = 0;
};

// Splits "k=v k=v" (the inside of brackets) into pairs.
std::vector<KeyValue> split_pairs(const std::string& body, int line, int col0) {
  std::vector<KeyValue> out;
  std::size_t i = 0;
  while (i < body.size()) {
    while (i < body.size() && (body[i] == ' ' || body[i] == ',' || body[i] == '\t')) ++i;
    if (i >= body.size()) break;
    const std::size_t start = i;
    while (i < body.size() && body[i] != ' ' && body[i] != ',' && body[i] != '\t') ++i;
    const std::string item = body.substr(start, i - start);
    const int col = col0 + static_cast<int>(start);
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0 || eq + 1 == item.size()) {
      throw ParseError("malformed attribute '" + item + "' (expected key=value)", line, col);
    }
    out.push_back({item.substr(0, eq), item.substr(eq + 1), col});
  }
  return out;
}

struct Bracketed {
  std::string head;
  std::string body;
  bool has_body = false;
  int body_col = 0;
};

Bracketed split_brackets(const Token& tok, int line) {
  Bracketed b;
  const auto open = tok.text.find('[');
  if (open == std::string::npos) {
    b.head = tok.text;
    return b;
  }
  if (tok.text.back() != ']') throw ParseError("text after ']' in '" + tok.text + "'", line, tok.col);
  b.head = tok.text.substr(0, open);
  b.body = tok.text.substr(open + 1, tok.text.size() - open - 2);
  b.has_body = true;
  b.body_col = tok.col + static_cast<int>(open) + 1;
  return b;
}

AttrMap parse_node_attrs(const std::string& body, int line, int col0) {
  AttrMap out;
  const auto& keys = detail::node_attr_keys();
  for (const auto& kv : split_pairs(body, line, col0)) {
    if (std::find(keys.begin(), keys.end(), kv.key) == keys.end()) {
      throw ParseError("malformed attribute: unknown node attribute '" + kv.key + "'", line, kv.col);
    }
    auto v = parse_value(kv.value);
    if (!v) throw ParseError("malformed attribute: bad value '" + kv.value + "' for '" + kv.key + "'", line, kv.col);
    if ((kv.key == "length" || kv.key == "radius" || kv.key == "mass") && !(*v > 0.0)) {
      throw ParseError("malformed attribute: '" + kv.key + "' must be positive", line, kv.col);
    }
    if (kv.key == "mirrored" && *v != 0.0 && *v != 1.0) {
      throw ParseError("malformed attribute: 'mirrored' must be 0 or 1", line, kv.col);
    }
    if (out.count(kv.key)) throw ParseError("malformed attribute: '" + kv.key + "' given twice", line, kv.col);
    out[kv.key] = *v;
  }
  return out;
}

JointAttributes joint_defaults(JointType t) {
  JointAttributes j;
  j.type = t;
  switch (t) {
    case JointType::ball: j.lo = -std::numbers::pi / 2; j.hi = std::numbers::pi / 2; break;
    case JointType::pitch: j.lo = -0.8; j.hi = 0.8; break;
    case JointType::yaw: j.lo = -0.4; j.hi = 0.4; j.gear = 1.5; break;
    case JointType::knee: j.lo = 0.0; j.hi = std::numbers::pi; break;
    case JointType::fixed: j.lo = 0.0; j.hi = 0.0; break;
  }
  return j;
}

JointAttributes parse_joint_attrs(const std::string& body, int line, int col0) {
  const auto pairs = split_pairs(body, line, col0);
  std::optional<JointType> type;
  for (const auto& kv : pairs) {
    if (kv.key == "type") {
      type = joint_type_from_string(kv.value);
      if (!type) throw ParseError("malformed attribute: unknown joint type '" + kv.value + "'", line, kv.col);
    }
  }
  if (!type) throw ParseError("malformed attribute: joint needs a type", line, col0);
  JointAttributes j = joint_defaults(*type);
  bool torque = false;
  std::set<std::string> seen;
  for (const auto& kv : pairs) {
    if (!seen.insert(kv.key).second) throw ParseError("malformed attribute: '" + kv.key + "' given twice", line, kv.col);
    if (kv.key == "type") continue;
    auto v = parse_value(kv.value);
    if (!v) throw ParseError("malformed attribute: bad value '" + kv.value + "' for '" + kv.key + "'", line, kv.col);
    if (kv.key == "axis") {
      if (*v != 1.0 && *v != -1.0) throw ParseError("malformed attribute: axis must be 1 or -1", line, kv.col);
      j.axis = static_cast<int>(*v);
    } else if (kv.key == "lo") {
      j.lo = *v;
    } else if (kv.key == "hi") {
      j.hi = *v;
    } else if (kv.key == "torque") {
      if (!(*v > 0.0)) throw ParseError("malformed attribute: torque must be positive", line, kv.col);
      j.max_torque = *v;
      torque = true;
    } else if (kv.key == "gear") {
      if (!(*v > 0.0)) throw ParseError("malformed attribute: gear must be positive", line, kv.col);
      j.gear = *v;
    } else {
      throw ParseError("malformed attribute: unknown joint attribute '" + kv.key + "'", line, kv.col);
    }
  }
  if (!torque) throw ParseError("malformed attribute: joint needs a torque", line, col0);
  if (j.type != JointType::fixed && !(j.lo < j.hi)) throw ParseError("malformed attribute: joint needs lo < hi", line, col0);
  if (j.type == JointType::knee && (j.lo != 0.0 || std::abs(j.hi - std::numbers::pi) > 1e-9)) {
    throw ParseError("malformed attribute: knee limits must span [0, pi]", line, col0);
  }
  return j;
}

struct SymbolTable {
  std::vector<Symbol> symbols;
  std::vector<std::pair<int, int>> where;  // declaration line, column

  int lookup(const std::string& name, int line, int col) const {
    for (std::size_t i = 0; i < symbols.size(); ++i) {
      if (symbols[i].name == name) return static_cast<int>(i);
    }
    throw ParseError("unknown symbol '" + name + "'", line, col);
  }
};

ProductionRule parse_rule(const Line& ln, const SymbolTable& table) {
  const auto& tk = ln.tokens;
  if (tk.size() < 4 || tk[2].text != "->") throw ParseError("expected 'rule <lhs> -> <rhs>'", ln.number, tk[0].col);
  ProductionRule r;
  r.line = ln.number;
  r.lhs = table.lookup(tk[1].text, ln.number, tk[1].col);
  if (table.symbols[static_cast<std::size_t>(r.lhs)].kind != SymbolKind::nonterminal) {
    throw ParseError("rule lhs '" + tk[1].text + "' is not a nonterminal", ln.number, tk[1].col);
  }
  int attachment = -1;
  struct PendingEdge {
    Token parent, child;
    std::optional<JointAttributes> joint;
  };
  std::vector<PendingEdge> edges;
  for (std::size_t i = 3; i < tk.size(); ++i) {
    const Token& t = tk[i];
    const Bracketed b = split_brackets(t, ln.number);
    if (b.head == "^") {
      if (!b.has_body) throw ParseError("'^' needs joint attributes", ln.number, t.col);
      if (r.incoming) throw ParseError("rule has two '^' labels", ln.number, t.col);
      r.incoming = parse_joint_attrs(b.body, ln.number, b.body_col);
      continue;
    }
    const auto arrow = b.head.find("->");
    if (arrow != std::string::npos) {
      PendingEdge e;
      e.parent = {b.head.substr(0, arrow), t.col};
      e.child = {b.head.substr(arrow + 2), t.col + static_cast<int>(arrow) + 2};
      if (b.has_body) e.joint = parse_joint_attrs(b.body, ln.number, b.body_col);
      edges.push_back(std::move(e));
      continue;
    }
    std::string head = b.head;
    int col = t.col;
    bool attach = false;
    if (!head.empty() && head[0] == '@') {
      attach = true;
      head = head.substr(1);
      ++col;
    }
    const auto colon = head.find(':');
    if (colon == std::string::npos) throw ParseError("expected node 'id:symbol', got '" + t.text + "'", ln.number, t.col);
    RhsNode node;
    node.local_id = head.substr(0, colon);
    if (!is_identifier(node.local_id)) throw ParseError("bad node id '" + node.local_id + "'", ln.number, col);
    for (const auto& other : r.nodes) {
      if (other.local_id == node.local_id) throw ParseError("duplicate node id '" + node.local_id + "'", ln.number, col);
    }
    const std::string sym = head.substr(colon + 1);
    node.symbol = table.lookup(sym, ln.number, col + static_cast<int>(colon) + 1);
    if (b.has_body) node.attrs = parse_node_attrs(b.body, ln.number, b.body_col);
    if (attach) {
      if (attachment >= 0) throw ParseError("rule marks two attachment nodes", ln.number, t.col);
      attachment = static_cast<int>(r.nodes.size());
    }
    r.nodes.push_back(std::move(node));
  }
  if (r.nodes.empty()) throw ParseError("rule has an empty right-hand side", ln.number, tk[2].col);
  if (attachment < 0) {
    if (r.nodes.size() != 1) throw ParseError("rule with several nodes needs an '@' attachment", ln.number, tk[3].col);
    attachment = 0;
  }
  r.attachment = attachment;
  auto local = [&](const Token& t) {
    for (std::size_t k = 0; k < r.nodes.size(); ++k) {
      if (r.nodes[k].local_id == t.text) return static_cast<int>(k);
    }
    throw ParseError("edge refers to unknown node '" + t.text + "'", ln.number, t.col);
  };
  std::vector<int> parent(r.nodes.size(), -1);
  for (const auto& e : edges) {
    RhsEdge re{local(e.parent), local(e.child), e.joint};
    if (re.child == r.attachment) throw ParseError("attachment node cannot be an edge child", ln.number, e.child.col);
    if (parent[static_cast<std::size_t>(re.child)] >= 0) {
      throw ParseError("node '" + e.child.text + "' has two parents", ln.number, e.child.col);
    }
    parent[static_cast<std::size_t>(re.child)] = re.parent;
    r.edges.push_back(re);
  }
  for (std::size_t k = 0; k < r.nodes.size(); ++k) {
    int cur = static_cast<int>(k);
    std::size_t steps = 0;
    while (cur != r.attachment) {
      cur = parent[static_cast<std::size_t>(cur)];
      if (cur < 0 || ++steps > r.nodes.size()) {
        throw ParseError("node '" + r.nodes[k].local_id + "' is not connected to the attachment", ln.number, tk[0].col);
      }
    }
  }
  return r;
}

std::string fmt(double v) {
  std::array<char, 64> buf{};
  auto [p, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  (void)ec;
  return std::string(buf.data(), p);
}

std::string fmt_attrs(const AttrMap& attrs) {
  if (attrs.empty()) return "";
  std::string out = "[";
  bool first = true;
  for (const auto& [k, v] : attrs) {
    if (!first) out += ' ';
    first = false;
    out += k + "=" + fmt(v);
  }
  return out + "]";
}

std::string fmt_joint(const JointAttributes& j) {
  return "[type=" + std::string(to_string(j.type)) + " axis=" + std::to_string(j.axis) + " lo=" + fmt(j.lo) +
         " hi=" + fmt(j.hi) + " torque=" + fmt(j.max_torque) + " gear=" + fmt(j.gear) + "]";
}

}  // namespace

Grammar parse_grammar(const std::string& text) {
  const std::vector<Line> lines = tokenize(text);

  SymbolTable table;
  for (const Line& ln : lines) {
    if (ln.tokens[0].text != "symbol") continue;
    if (ln.tokens.size() != 3) throw ParseError("expected 'symbol <name> terminal|nonterminal'", ln.number, ln.tokens[0].col);
    const Token& name = ln.tokens[1];
    const Token& kind = ln.tokens[2];
    if (!is_identifier(name.text)) throw ParseError("bad symbol name '" + name.text + "'", ln.number, name.col);
    for (std::size_t i = 0; i < table.symbols.size(); ++i) {
      if (table.symbols[i].name == name.text) {
        throw ParseError("symbol '" + name.text + "' declared twice (first on line " +
                             std::to_string(table.where[i].first) + ")",
                         ln.number, name.col);
      }
    }
    SymbolKind k;
    if (kind.text == "terminal") k = SymbolKind::terminal;
    else if (kind.text == "nonterminal") k = SymbolKind::nonterminal;
    else throw ParseError("symbol kind must be 'terminal' or 'nonterminal', got '" + kind.text + "'", ln.number, kind.col);
    table.symbols.push_back({name.text, k});
    table.where.emplace_back(ln.number, name.col);
  }

  std::map<int, AttrMap> terminal_attrs;
  std::vector<ProductionRule> rules;
  std::optional<int> start;
  AttrMap start_attrs;
  int start_line = 0;
  for (const Line& ln : lines) {
    const Token& head = ln.tokens[0];
    if (head.text == "symbol") continue;
    if (head.text == "attr") {
      if (ln.tokens.size() < 3) throw ParseError("expected 'attr <terminal> key=value ...'", ln.number, head.col);
      const int s = table.lookup(ln.tokens[1].text, ln.number, ln.tokens[1].col);
      if (table.symbols[static_cast<std::size_t>(s)].kind != SymbolKind::terminal) {
        throw ParseError("'attr' applies to terminals; '" + ln.tokens[1].text + "' is a nonterminal", ln.number,
                         ln.tokens[1].col);
      }
      if (terminal_attrs.count(s)) throw ParseError("attributes for '" + ln.tokens[1].text + "' given twice", ln.number, head.col);
      std::string body;
      for (std::size_t i = 2; i < ln.tokens.size(); ++i) body += (i > 2 ? " " : "") + ln.tokens[i].text;
      terminal_attrs[s] = parse_node_attrs(body, ln.number, ln.tokens[2].col);
    } else if (head.text == "start") {
      if (ln.tokens.size() != 2) throw ParseError("expected 'start <symbol>'", ln.number, head.col);
      if (start) throw ParseError("start given twice", ln.number, head.col);
      const Bracketed b = split_brackets(ln.tokens[1], ln.number);
      start = table.lookup(b.head, ln.number, ln.tokens[1].col);
      if (b.has_body) start_attrs = parse_node_attrs(b.body, ln.number, b.body_col);
      start_line = ln.number;
    } else if (head.text == "rule") {
      rules.push_back(parse_rule(ln, table));
    } else {
      throw ParseError("unknown directive '" + head.text + "'", ln.number, head.col);
    }
  }
  if (table.symbols.empty()) throw ParseError("grammar declares no symbols", 1, 1);
  if (!start) throw ParseError("grammar has no 'start' line", lines.empty() ? 1 : lines.back().number, 1);

  // Every nonterminal needs a rule.
  std::vector<int> nrules(table.symbols.size(), 0);
  for (const auto& r : rules) ++nrules[static_cast<std::size_t>(r.lhs)];
  for (std::size_t s = 0; s < table.symbols.size(); ++s) {
    if (table.symbols[s].kind == SymbolKind::nonterminal && nrules[s] == 0) {
      throw ParseError("nonterminal '" + table.symbols[s].name + "' has no rules", table.where[s].first, table.where[s].second);
    }
  }
  if (auto cycle = detail::find_cycle(table.symbols, rules)) {
    std::string path;
    for (int s : *cycle) path += (path.empty() ? "" : " -> ") + table.symbols[static_cast<std::size_t>(s)].name;
    int line = 0;
    for (const auto& r : rules) {
      if (r.lhs == (*cycle)[0]) {
        for (const auto& rn : r.nodes) {
          if (rn.symbol == (*cycle)[1] && line == 0) line = r.line;
        }
      }
    }
    throw ParseError("recursive nonterminal cycle: " + path, line, 1);
  }

  // Terminal occurrences must end up with positive length, radius and mass.
  auto check_terminal = [&](int symbol, const AttrMap& attrs, int line) {
    if (table.symbols[static_cast<std::size_t>(symbol)].kind != SymbolKind::terminal) return;
    AttrMap merged = terminal_attrs.count(symbol) ? terminal_attrs[symbol] : AttrMap{};
    for (const auto& [k, v] : attrs) merged[k] = v;
    for (const char* key : {"length", "radius", "mass"}) {
      if (!merged.count(key)) {
        throw ParseError("malformed attribute: terminal '" + table.symbols[static_cast<std::size_t>(symbol)].name +
                             "' has no " + key,
                         line, 1);
      }
    }
  };
  check_terminal(*start, start_attrs, start_line);
  for (const auto& r : rules) {
    for (const auto& rn : r.nodes) check_terminal(rn.symbol, rn.attrs, r.line);
  }

  // An unlabeled edge must be labeled by every expansion of its child.
  std::map<int, bool> labels;
  std::function<bool(int)> always_labels = [&](int s) -> bool {
    if (table.symbols[static_cast<std::size_t>(s)].kind == SymbolKind::terminal) return false;
    auto it = labels.find(s);
    if (it != labels.end()) return it->second;
    bool ok = true;
    for (const auto& r : rules) {
      if (r.lhs != s || r.incoming) continue;
      ok = ok && always_labels(r.nodes[static_cast<std::size_t>(r.attachment)].symbol);
    }
    labels[s] = ok;
    return ok;
  };
  for (const auto& r : rules) {
    for (const auto& e : r.edges) {
      if (e.joint) continue;
      const int cs = r.nodes[static_cast<std::size_t>(e.child)].symbol;
      if (!always_labels(cs)) {
        throw ParseError("edge into '" + r.nodes[static_cast<std::size_t>(e.child)].local_id +
                             "' has no joint and not every expansion of '" +
                             table.symbols[static_cast<std::size_t>(cs)].name + "' supplies one",
                         r.line, 1);
      }
    }
  }

  try {
    return Grammar(std::move(table.symbols), std::move(terminal_attrs), std::move(rules), *start, std::move(start_attrs));
  } catch (const InvalidArgument& e) {
    throw ParseError(e.what(), 1, 1);
  }
}

Grammar load_grammar(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open grammar file '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_grammar(ss.str());
}

std::string serialize_grammar(const Grammar& g) {
  std::ostringstream out;
  for (const auto& s : g.symbols()) {
    out << "symbol " << s.name << ' ' << (s.kind == SymbolKind::terminal ? "terminal" : "nonterminal") << '\n';
  }
  for (const auto& [s, attrs] : g.all_terminal_attrs()) {
    out << "attr " << g.symbol(s).name;
    for (const auto& [k, v] : attrs) out << ' ' << k << '=' << fmt(v);
    out << '\n';
  }
  out << "start " << g.symbol(g.start_symbol()).name << fmt_attrs(g.start_attrs()) << '\n';
  for (const auto& r : g.rules()) {
    out << "rule " << g.symbol(r.lhs).name << " ->";
    auto local = [&](std::size_t k) {
      return r.nodes[k].local_id.empty() ? "n" + std::to_string(k) : r.nodes[k].local_id;
    };
    for (std::size_t k = 0; k < r.nodes.size(); ++k) {
      out << ' ' << (static_cast<int>(k) == r.attachment ? "@" : "") << local(k) << ':'
          << g.symbol(r.nodes[k].symbol).name << fmt_attrs(r.nodes[k].attrs);
    }
    for (const auto& e : r.edges) {
      out << ' ' << local(static_cast<std::size_t>(e.parent)) << "->" << local(static_cast<std::size_t>(e.child));
      if (e.joint) out << fmt_joint(*e.joint);
    }
    if (r.incoming) out << " ^" << fmt_joint(*r.incoming);
    out << '\n';
  }
  return out.str();
}

Grammar resolve_grammar(const std::string& name_or_path) {
  if (name_or_path.empty() || name_or_path == "default") return default_grammar();
  return load_grammar(name_or_path);
}

const Grammar& default_grammar() {
  static const Grammar g = parse_grammar(default_grammar_text());
  return g;
}

}  // namespace nlimb::grammar
