#pragma once

// Batch experiment runner behind the command-line tool: one JSON config in,
// summary.json plus CSV files out.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mmbsde/config.hpp"

namespace mmbsde {

const std::vector<std::string>& experiment_kinds();

/// Parameter schema with defaults and units; throws UnknownKind.
std::string describe_kind(const std::string& kind);

/// Parses a config file; syntax errors become ConfigInvalid with the
/// line and column.
Json load_config(const std::filesystem::path& file);

struct RunOptions {
  std::optional<std::uint64_t> seed;            // overrides the config's seed
  std::optional<std::filesystem::path> output;  // overrides the config's output
};

struct RunResult {
  Json summary;
  std::filesystem::path output;
  std::vector<std::string> files;  // written CSVs, relative to output
  bool passed = false;

  int exit_code() const { return passed ? 0 : 2; }
};

/// Validates the whole config, runs the experiment and writes its files.
/// Errors propagate as mmbsde::Error (exit code 1 in the tool).
RunResult run_experiment(const Json& config, const RunOptions& options = {});

}  // namespace mmbsde
