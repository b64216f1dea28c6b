#pragma once

#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "dcrn/autodiff/graph.hpp"

namespace dcrn::ad {

inline constexpr int kCheckpointFormatVersion = 1;

/// Parameters plus an arbitrary header object (used for model config).
struct Checkpoint {
  ParameterStore params;
  nlohmann::ordered_json header = nlohmann::ordered_json::object();
};

/// {"format_version", "header", "parameters": {name: {"shape", "values"}}}
nlohmann::ordered_json checkpoint_to_json(const ParameterStore& params,
                                          const nlohmann::ordered_json& header = {});
Checkpoint checkpoint_from_json(const nlohmann::ordered_json& doc);

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& params,
                     const nlohmann::ordered_json& header = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// SHA-256 over parameter names, shapes, and value bytes in registry order.
std::string parameter_checksum(const ParameterStore& params, const std::string& prefix = {});

}  // namespace dcrn::ad
