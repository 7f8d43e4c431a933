#include "harness/design_doc.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "common/error.hpp"
#include "json.hpp"

namespace nlimb::harness {

using nlohmann::json;

std::string grammar_digest(const grammar::Grammar& g) {
  const std::string text = grammar::serialize_grammar(g);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) h = (h ^ c) * 0x100000001b3ULL;
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string design_document(const grammar::Grammar& g, const grammar::DesignGraph& design,
                            const std::vector<grammar::Expansion>& choices, std::optional<double> log_prob) {
  json doc;
  doc["grammar"] = grammar_digest(g);
  doc["signature"] = grammar::design_signature(design, g);
  json c = json::array();
  for (const auto& e : choices) c.push_back({{"node", e.node}, {"rule", e.rule}});
  doc["choices"] = std::move(c);
  if (log_prob) doc["log_prob"] = *log_prob;
  doc["design"] = json::parse(grammar::design_to_json(design, g));
  return doc.dump(2);
}

DesignDocument parse_design_document(const std::string& text) {
  DesignDocument d;
  try {
    const json j = json::parse(text);
    d.grammar = j.at("grammar").get<std::string>();
    d.signature = j.at("signature").get<std::string>();
    for (const auto& c : j.at("choices")) d.choices.push_back({c.at("node").get<int>(), c.at("rule").get<int>()});
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("design document: ") + e.what(), 1, static_cast<int>(e.byte));
  } catch (const json::exception& e) {
    throw ParseError(std::string("design document: ") + e.what(), 1, 1);
  }
  return d;
}

grammar::DesignGraph rebuild_design(const grammar::Grammar& g, const DesignDocument& doc) {
  if (doc.grammar != grammar_digest(g)) {
    throw InvalidArgument("design document was made with a different grammar (" + doc.grammar + ")");
  }
  grammar::DesignGraph d = g.start();
  for (const auto& e : doc.choices) d = grammar::apply_rule(d, g, e.node, e.rule);
  if (!grammar::is_complete(d)) throw InvalidArgument("design document: derivation is incomplete");
  if (grammar::design_signature(d, g) != doc.signature) {
    throw InvalidArgument("design document: signature does not match the replayed derivation");
  }
  return d;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file_atomic(const std::string& path, const std::string& text) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write '" + tmp + "'");
    out << text;
    out.flush();
    if (!out) throw IoError("write failed for '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move '" + tmp + "' into place: " + ec.message());
}

}  // namespace nlimb::harness
