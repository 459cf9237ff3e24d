#pragma once

// Context-size scaling of representation noise and the diagnostics behind it:
// projection normality tests, attention concentration against the
// Hoeffding-form bound, block partial sums and the FFN variance mapping.
//
// Every measurement reads the query at the last position (i = n) of fresh
// contexts; replicate r at context size n always uses the same derived seed,
// so growing R only appends contexts.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "scaling_lab/nanoformer.hpp"
#include "scaling_lab/sources.hpp"
#include "scaling_lab/stats.hpp"

namespace scaling_lab::cltlab {

using nanoformer::Matrix;
using nanoformer::Vector;

struct CltPlan {
  nanoformer::ModelConfig model;
  std::uint64_t model_seed = 0;
  /// Zero every W_Q so each attention row is exactly uniform.
  bool uniform_attention = false;
  sources::Source source = sources::Source::uniform(4);
  std::vector<std::size_t> contexts;
  int replicates = 256;
  /// Layers whose noise is measured; empty means all.
  std::vector<int> layers;
  /// Layer used for attention and block diagnostics.
  int diagnostic_layer = 0;
  int block_width = 16;
  int bootstrap_reps = 500;
  int projections = 50;
  int lilliefors_resamples = 2000;
  double alpha = 0.01;
  std::vector<double> epsilons = {0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5};
  double kappa = 1.0;
  std::uint64_t seed = 0;
  int jobs = 1;

  /// Throws PlanError naming the violated invariant.
  void validate() const;
  std::vector<int> measured_layers() const;
};

nanoformer::Model build_model(const CltPlan& plan);

/// Raw per-replicate measurements at one context size.
struct ContextSamples {
  std::size_t n = 0;
  std::vector<int> layers;
  /// Per measured layer, R x d.
  std::vector<Matrix> repr;
  std::vector<Matrix> pre_ffn;
  std::vector<Matrix> ffn_out;
  /// R x n attention rows of the diagnostic layer.
  Matrix attention;
  /// Per replicate, raw block sums T_m = sum_{k in B_m} a_k V_k (M x d) of
  /// the diagnostic layer; the remainder folds into the last block.
  std::vector<Matrix> block_sums;
  /// R x d pre-FFN vectors of the diagnostic layer.
  Matrix diagnostic_pre;
};

ContextSamples collect_samples(const CltPlan& plan, const nanoformer::Model& model, std::size_t n);

struct VariancePoint {
  int layer = 0;
  std::size_t n = 0;
  double variance = 0.0;
  stats::Interval ci;
  double reject_frac = 0.0;
  int projections_tested = 0;
  int projections_skipped = 0;
};

struct LayerScaling {
  int layer = 0;
  std::optional<stats::PowerLawFit> fit;
  stats::Interval exponent_ci;
  /// Variance never rises by more than 2 bootstrap standard errors per step.
  bool monotone = true;
  std::string note;
};

struct GaussianitySummary {
  double reject_frac = 0.0;
  int tested = 0;
  int skipped = 0;
};

/// Standardises coordinates, projects on random unit directions and runs a
/// Lilliefors test per projection. Directions with no spread are skipped.
GaussianitySummary projection_ks(const Matrix& samples, int projections, const stats::LillieforsNull& null,
                                 double alpha, std::uint64_t seed);

struct ConcentrationRow {
  double epsilon = 0.0;
  double empirical = 0.0;
  double std_error = 0.0;
  double bound = 0.0;
  bool violated = false;
};

struct ConcentrationTable {
  std::size_t n = 0;
  double block_size = 0.0;
  double m_prime = 0.0;
  double kappa = 1.0;
  std::vector<ConcentrationRow> rows;
  bool any_violation = false;
};

/// Tail frequency of |a_nk - mean_r a_nk| > eps pooled over k, against
/// hoeffding_tail(eps, w = n, M', kappa). Standard errors come from the
/// per-replicate frequencies.
ConcentrationTable concentration_table(const Matrix& attention, const std::vector<double>& epsilons,
                                       double m_prime, double kappa);

struct BlockSumDiagnostic {
  std::size_t n = 0;
  int width = 0;
  int blocks = 0;
  /// Max over replicates of |sum_m S_m + sum_k mean(a_k V_k) - r~|_inf.
  double max_reconstruction_error = 0.0;
  double reconstruction_pass_frac = 0.0;
  double mean_abs_cross_corr = 0.0;
  stats::KsResult normalized_total;
};

BlockSumDiagnostic block_diagnostic(const ContextSamples& samples, int width, const stats::LillieforsNull& null,
                                    std::uint64_t seed);

struct FfnMappingPoint {
  int layer = 0;
  std::size_t n = 0;
  double pre_variance = 0.0;
  double post_variance = 0.0;
  double ratio = 0.0;
  double bound = 0.0;
  /// Bootstrap standard error of post - L^2 pre.
  double std_error = 0.0;
  bool holds = true;
};

/// post <= L^2 pre + 3 SE, one point per layer.
std::vector<FfnMappingPoint> ffn_mapping(const ContextSamples& samples, const std::vector<double>& lipschitz,
                                         int bootstrap_reps, std::uint64_t seed);

struct NoiseScalingReport {
  std::vector<VariancePoint> points;
  std::vector<LayerScaling> fits;
};

struct CltReport {
  std::string logit_scale;
  bool uniform_attention = false;
  NoiseScalingReport noise;
  std::vector<ConcentrationTable> concentration;
  std::string concentration_note;
  std::vector<BlockSumDiagnostic> blocks;
  std::string block_note;
  std::vector<double> lipschitz;
  std::vector<FfnMappingPoint> ffn;
  bool ffn_all_hold = true;
  nanoformer::AssumptionReport assumptions;
};

/// Variance per (layer, n) with bootstrap intervals, power-law fit per layer
/// and a joint-bootstrap interval on each exponent.
NoiseScalingReport measure_representation_noise(const CltPlan& plan);

/// Rejection fraction per (layer, n).
std::vector<VariancePoint> gaussianity_sweep(const CltPlan& plan);

/// Needs enforce_bounds (otherwise PlanError).
std::vector<ConcentrationTable> attention_concentration(const CltPlan& plan);

/// Needs an iid or block-stationary source and n >= 2w (otherwise PlanError).
std::vector<BlockSumDiagnostic> block_sum_diagnostics(const CltPlan& plan);

/// Everything above from one pass over the contexts.
CltReport run_clt(const CltPlan& plan);

}  // namespace scaling_lab::cltlab
