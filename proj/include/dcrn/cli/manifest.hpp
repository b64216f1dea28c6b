#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcrn/cli/run_config.hpp"

namespace dcrn::cli {

/// Hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  RunConfig config;
  std::vector<std::filesystem::path> inputs;
  std::vector<std::filesystem::path> outputs;
  /// Pipeline-specific figures (metrics, counts).
  nlohmann::ordered_json summary = nlohmann::ordered_json::object();
  std::string started_at, finished_at;  // UTC, ISO 8601

  /// Checksums are computed when serialized, so every listed file must exist.
  nlohmann::ordered_json to_json() const;
};

/// UTC wall-clock time as 2026-01-31T12:00:00Z.
std::string utc_timestamp();

void write_manifest(const std::filesystem::path& path, const RunManifest& manifest);

}  // namespace dcrn::cli
