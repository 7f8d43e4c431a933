#pragma once

#include <optional>
#include <string>
#include <vector>

#include "design_model/design_model.hpp"
#include "grammar/grammar.hpp"

namespace nlimb::harness {

// A design document records the derivation (so the design can be rebuilt
// from the grammar), the canonical signature and the exported graph.
std::string grammar_digest(const grammar::Grammar& g);

std::string design_document(const grammar::Grammar& g, const grammar::DesignGraph& design,
                            const std::vector<grammar::Expansion>& choices,
                            std::optional<double> log_prob = std::nullopt);

struct DesignDocument {
  std::vector<grammar::Expansion> choices;
  std::string signature;
  std::string grammar;
};

DesignDocument parse_design_document(const std::string& text);

// Replays the derivation and checks the grammar digest and the signature.
grammar::DesignGraph rebuild_design(const grammar::Grammar& g, const DesignDocument& doc);

std::string read_file(const std::string& path);
// Writes via a temporary file and rename.
void write_file_atomic(const std::string& path, const std::string& text);

}  // namespace nlimb::harness
