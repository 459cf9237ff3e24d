#pragma once

// Runs one configured experiment into a fresh directory with a manifest that
// is enough to reproduce it.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "scaling_lab/config.hpp"

namespace scaling_lab::runner {

std::string tool_version();

struct RunOptions {
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::optional<std::filesystem::path> out;
  bool no_plots = false;
};

/// Flag, else SCALING_LAB_JOBS, else 1. Throws ConfigError on a bad value.
int resolve_jobs(std::optional<int> flag);

/// One line per issue: "path: message".
std::string format_issues(const std::vector<config::Issue>& issues);

/// Loads a config or manifest and throws ConfigError listing every issue.
config::ExperimentConfig load_or_throw(const std::filesystem::path& path);

/// `<base>/<kind>-<YYYYMMDD-HHMMSS>`, with a -N suffix when taken. Never
/// reuses an existing directory.
std::filesystem::path make_run_dir(const std::filesystem::path& base, const std::string& kind);

/// Derived seeds of every unit of work, keyed for the manifest.
nlohmann::ordered_json seed_table(const config::ExperimentConfig& config);

struct RunResult {
  std::filesystem::path run_dir;
  std::vector<std::string> files;
  nlohmann::ordered_json manifest;
};

/// Applies overrides, validates (PlanError), runs and writes every output.
/// Failures inside the experiment surface as ExperimentError; file problems
/// as IoError.
RunResult run(config::ExperimentConfig config, const RunOptions& options);

/// Writes the SVG plots of an existing run directory.
std::vector<std::string> render_plots(const std::filesystem::path& run_dir);

}  // namespace scaling_lab::runner
