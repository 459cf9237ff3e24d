#pragma once

// Experiment configs: YAML in, fully resolved JSON out. The resolved form is
// itself a valid config, which is how manifests are replayed.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "scaling_lab/biasvar.hpp"
#include "scaling_lab/cltlab.hpp"
#include "scaling_lab/emergence.hpp"
#include "scaling_lab/nanoformer.hpp"
#include "scaling_lab/sources.hpp"

namespace scaling_lab::config {

enum class Kind { clt, biasvar, emergence, assumptions };
std::string to_string(Kind k);

/// Assumption checks on one model, optionally trained first.
struct AssumptionsPlan {
  nanoformer::ModelConfig model;
  sources::Source source = sources::Source::uniform(4);
  std::uint64_t model_seed = 0;
  /// 0 checks the untrained model.
  std::int64_t train_tokens = 0;
  nanoformer::TrainHyper hyper;
  double epochs = 4.0;
  int batch_sequences = 8;
  std::size_t seq_len = 64;
  int pairs = 2000;
  std::uint64_t seed = 0;

  void validate() const;
};

struct ExperimentConfig {
  Kind kind = Kind::clt;
  std::uint64_t seed = 0;
  std::string output_dir = "runs";
  bool plots = true;
  cltlab::CltPlan clt;
  biasvar::BiasVarPlan biasvar;
  emergence::SweepPlan emergence;
  AssumptionsPlan assumptions;

  /// Copies the master seed and job count into the active plan.
  void apply(std::uint64_t master_seed, int jobs);
};

struct Issue {
  /// Dotted key path, e.g. "clt.replicates".
  std::string path;
  std::string message;
};

struct LoadResult {
  std::optional<ExperimentConfig> config;
  std::vector<Issue> issues;
  /// True when the input was a run manifest rather than a config.
  bool from_manifest = false;
  bool ok() const { return config.has_value() && issues.empty(); }
};

/// Parses and validates without running anything. Every violation found is
/// listed; plan invariants are checked once the fields themselves are sound.
LoadResult parse_config(const std::string& text);

/// Throws IoError when the file cannot be read.
LoadResult load_config(const std::filesystem::path& path);

nlohmann::ordered_json to_json(const ExperimentConfig& config);
nlohmann::ordered_json to_json(const sources::Source& source);
nlohmann::ordered_json to_json(const nanoformer::ModelConfig& model);

/// Edit distance, used for key suggestions.
std::size_t levenshtein(const std::string& a, const std::string& b);

}  // namespace scaling_lab::config
