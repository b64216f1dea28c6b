#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "dcrn/eval/evaluation.hpp"
#include "dcrn/model/config.hpp"
#include "dcrn/sim/pkpd.hpp"
#include "dcrn/training/train.hpp"

namespace dcrn::cli {

/// Parse or validation failure; the message starts with the key path.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Everything a pipeline needs. `seed` overrides sim.seed and train.seed.
struct RunConfig {
  std::uint64_t seed = 42;
  sim::SimConfig sim;
  model::ModelConfig model;
  train::TrainConfig train;
  eval::AblationConfig eval;
  std::size_t search_trials = 20;  // eval.search_trials

  /// Pushes `seed` into the sim and train sections.
  void apply_seed();
  /// Validates every section; throws ConfigError.
  void validate() const;
};

bool operator==(const RunConfig& a, const RunConfig& b);

/// YAML text with optional sections seed/sim/model/train/eval. Absent fields
/// keep their defaults; unknown keys and type mismatches throw ConfigError.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);

/// Every field, in the same layout parse_config reads.
std::string dump_config(const RunConfig& config);
nlohmann::ordered_json config_to_json(const RunConfig& config);
/// SHA-256 of the canonical JSON form; equal configs hash equally.
std::string config_hash(const RunConfig& config);

}  // namespace dcrn::cli
