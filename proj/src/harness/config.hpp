#pragma once

#include <string>

#include "trainer/trainer.hpp"

namespace nlimb::harness {

enum class Algorithm { nlimb, random_search, ablation };

const char* to_string(Algorithm a);

struct GeneralizationSettings {
  bool enabled = false;
  std::size_t designs = 8;
  std::uint64_t specialist_budget = 200'000;
  std::size_t eval_episodes = 8;
  friend bool operator==(const GeneralizationSettings&, const GeneralizationSettings&) = default;
};

struct ExperimentConfig {
  sim::TerrainKind task = sim::TerrainKind::flat;
  std::string grammar = "default";  // "default" or a grammar file path
  Algorithm algorithm = Algorithm::nlimb;
  std::uint64_t seed = 0;
  std::string output;  // run directory; empty means $NLIMB_OUTPUT_ROOT (or ./runs) plus a generated name
  train::TrainConfig train;
  train::BaselineConfig baseline;
  control::ControllerConfig controller;
  design::DesignModelConfig design_model;
  sim::EnvConfig env;
  GeneralizationSettings generalization;
  std::size_t eval_episodes = 32;
};

// Strict parse: unknown keys and wrong types are rejected with the JSON path
// of the offending entry (ConfigError). Missing keys keep their defaults.
ExperimentConfig parse_config(const std::string& json_text);
ExperimentConfig load_config(const std::string& path);

// Sets one field by dotted path ("train.budget") from a JSON value and
// revalidates, e.g. set_config_value(c, "train.budget", "0").
void set_config_value(ExperimentConfig& c, const std::string& path, const std::string& json_value);

// Every field, defaults filled in, keys sorted.
std::string config_to_json(const ExperimentConfig& c);

// Hash of the canonical JSON without fields that cannot change results
// (output directory, worker count, checkpoint cadence).
std::string config_hash(const ExperimentConfig& c);

// The JSON Schema the parser enforces.
const std::string& config_schema();

}  // namespace nlimb::harness
