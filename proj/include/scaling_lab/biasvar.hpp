#pragma once

// Loss split into bias (capacity limit), variance (finite data) and the
// source's entropy rate over a grid of capacities and data sizes.

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "scaling_lab/nanoformer.hpp"
#include "scaling_lab/sources.hpp"
#include "scaling_lab/stats.hpp"

namespace scaling_lab::biasvar {

struct BiasVarPlan {
  /// Increasing parameter count.
  std::vector<nanoformer::ModelConfig> capacities;
  std::vector<std::int64_t> data_sizes;
  /// Stand-in for unlimited data; at least 10x the largest D.
  std::int64_t reference_size = 0;
  int seeds = 5;
  /// Reference models per capacity; their mean loss is L_approx.
  int reference_seeds = 1;
  sources::Source source = sources::Source::markov({{0.9, 0.1}, {0.1, 0.9}});
  nanoformer::TrainHyper hyper;
  /// Passes over each dataset, the reference one included.
  double epochs = 4.0;
  std::int64_t eval_tokens = 100000;
  std::uint64_t seed = 0;
  int jobs = 1;

  /// Throws PlanError naming the violated invariant.
  void validate() const;
};

struct Run {
  int seed_index = 0;
  std::uint64_t seed = 0;
  std::int64_t steps = 0;
  bool failed = false;
  std::string failure;
  /// Loss on the shared evaluation stream.
  double loss = 0.0;
  double bias = 0.0;
  double variance = 0.0;
  double residual = 0.0;
};

struct CapacityResult {
  std::size_t parameter_count = 0;
  std::vector<Run> reference_runs;
  /// Mean reference loss; NaN when every reference run failed.
  double approx_loss = 0.0;
  double reference_seed_sd = 0.0;
  double bias = 0.0;
};

struct Cell {
  std::size_t capacity_index = 0;
  std::int64_t data_size = 0;
  std::vector<Run> runs;
  std::size_t failed_runs = 0;
  double mean_loss = 0.0;
  double seed_sd = 0.0;
  double bias = 0.0;
  /// mean_loss - approx_loss; negative values are kept and flagged.
  double variance = 0.0;
  bool negative_variance = false;
  /// mean_loss - (bias + variance + epsilon).
  double residual = 0.0;
  bool usable = true;
};

struct BiasVarianceReport {
  double epsilon = 0.0;
  std::int64_t reference_size = 0;
  std::int64_t eval_tokens = 0;
  std::vector<CapacityResult> capacities;
  std::vector<Cell> cells;
  std::size_t total_runs = 0;
  std::size_t failed_runs = 0;
  double max_abs_residual = 0.0;
  /// Smallest measured loss minus epsilon over every run.
  double min_excess_loss = 0.0;
};

/// Trains every reference and grid run, evaluates all of them on one shared
/// stream and fills the split. Throws ExperimentError when more than 20% of
/// runs fail.
BiasVarianceReport run_decomposition(const BiasVarPlan& plan);

/// Recomputes bias, variance and residuals from the run losses.
void assemble(BiasVarianceReport& report);

std::uint64_t run_seed(std::uint64_t master, std::size_t capacity_index, std::size_t data_index, int seed_index);

enum class Direction { decreasing, none, increasing };
std::string to_string(Direction d);

struct Trend {
  std::string subject;
  double spearman = 0.0;
  Direction direction = Direction::none;
  bool pass = false;
};

/// |rho| below this reads as no trend.
inline constexpr double kTrendBand = 0.3;

struct MonotonicityReport {
  /// One per capacity; passes when decreasing.
  std::vector<Trend> variance_vs_data;
  /// Passes unless increasing.
  Trend bias_vs_capacity;
};

MonotonicityReport monotonicity_diagnostics(const BiasVarianceReport& report);

struct OrthogonalityReport {
  std::size_t cells = 0;
  double correlation = 0.0;
  stats::Interval ci;
  /// Share of the variance of V explained by a linear fit on B.
  double explained = 0.0;
  /// |correlation| above the advisory 0.5.
  bool flagged = false;
  std::string note;
};

OrthogonalityReport orthogonality_diagnostics(const BiasVarianceReport& report, int bootstrap_reps = 1000,
                                              std::uint64_t seed = 0);

}  // namespace scaling_lab::biasvar
