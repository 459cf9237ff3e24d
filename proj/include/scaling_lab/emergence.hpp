#pragma once

// Signal/noise split of representations on the planted-copy task, the
// capability probe, sigmoid threshold detection and the SNR scaling fit.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "scaling_lab/nanoformer.hpp"
#include "scaling_lab/sources.hpp"
#include "scaling_lab/stats.hpp"

namespace scaling_lab::emergence {

using nanoformer::Matrix;
using nanoformer::Vector;

struct SnrEstimate {
  double signal_power = 0.0;
  double noise_power = 0.0;
  double snr = 0.0;
  /// Samples used per class label (0 for dropped classes).
  std::vector<std::size_t> class_counts;
  std::vector<int> dropped_classes;
  stats::Interval ci;
};

/// Pure estimator on labelled representations (rows). Signal is the
/// count-weighted mean of ||mu_c - mu||^2, noise the mean of ||h - mu_c||^2.
/// Classes with fewer than `min_class` rows are dropped. Throws
/// EstimationError when nothing is left or the noise power is zero.
/// bootstrap_reps = 0 skips the interval.
SnrEstimate snr_from_samples(const Matrix& reps, std::span<const int> labels, int num_classes,
                             int bootstrap_reps, std::uint64_t seed, std::size_t min_class = 10);

struct SnrOptions {
  /// Target samples per planted class.
  int per_class = 100;
  std::size_t context_len = 32;
  /// Layer whose last-position representation is read; -1 is the last layer.
  int layer = -1;
  int bootstrap_reps = 200;
  std::size_t min_class = 10;
};

/// Draws fresh contexts until every class (the token the next position would
/// copy) has `per_class` samples or a draw budget runs out.
SnrEstimate estimate_signal_noise(const nanoformer::Model& model, const sources::Source& source,
                                  const SnrOptions& options, std::uint64_t seed);

/// Row t holds scores (e.g. log-probabilities) for the token at t + 1.
using Predictor = std::function<Matrix(std::span<const int>)>;

Predictor model_predictor(const nanoformer::Model& model);
/// Exact conditional law of the source.
Predictor oracle_predictor(const sources::Source& source);

struct Accuracy {
  std::size_t hits = 0;
  std::size_t positions = 0;
  double accuracy = 0.0;
  stats::Interval ci;
};

/// Argmax accuracy at planted copy positions over at least `min_positions`
/// positions of fresh length-`seq_len` sequences. Ties go to the lowest token.
Accuracy capability_probe(const Predictor& predictor, const sources::Source& source,
                          std::size_t min_positions, std::size_t seq_len, std::uint64_t seed);

struct SigmoidFit {
  bool converged = false;
  double lower = 0.0;
  double upper = 1.0;
  double midpoint = 0.0;
  double slope = 1.0;
  double r_squared = 0.0;
  std::vector<double> residuals;
};

double sigmoid(const SigmoidFit& fit, double x);

struct SigmoidOptions {
  std::optional<double> fixed_lower;
  std::optional<double> fixed_upper;
  /// Free asymptotes that land outside these bounds are pinned to the bound
  /// and the fit is repeated.
  double min_asymptote = -std::numeric_limits<double>::infinity();
  double max_asymptote = std::numeric_limits<double>::infinity();
};

/// Least squares fit of y = lower + (upper - lower) / (1 + exp(-slope (x - midpoint))).
SigmoidFit fit_sigmoid(std::span<const double> xs, std::span<const double> ys,
                       const SigmoidOptions& options = {});

struct Threshold {
  bool detected = false;
  double theta = 0.0;
  double ln_theta = 0.0;
  double criterion_accuracy = 0.0;
  std::string reason;
};

/// Point where the fit crosses chance + criterion * (upper - chance), with x
/// in ln SNR. Requires a converged increasing fit with a real rise above
/// chance and a crossing within one unit of the observed x range.
Threshold detect_threshold(const SigmoidFit& fit, double chance, double criterion,
                           std::span<const double> xs);

struct ScalingFit {
  double alpha = 0.0;
  double alpha_stderr = 0.0;
  /// Per-capacity offsets in ascending capacity order.
  std::vector<double> offsets;
  std::vector<std::size_t> capacities;
  bool offsets_nondecreasing = true;
  /// exp(-offset of the smallest capacity), i.e. Phi normalised to 1 there.
  double sigma2 = 0.0;
  double residual_variance = 0.0;
  std::size_t count = 0;
};

/// OLS of ln SNR on ln D with one intercept per distinct capacity.
ScalingFit snr_scaling_fit(std::span<const std::size_t> capacity, std::span<const double> data_size,
                           std::span<const double> snr);

/// Differentiable probe used by the Taylor diagnostic.
struct Probe {
  std::function<double(const Vector&, int)> value;
  std::function<Vector(const Vector&, int)> gradient;
};

struct DominanceReport {
  bool available = false;
  std::string note;
  std::size_t samples = 0;
  /// Fraction with |f(S)| > |grad f(S) . N|.
  double fraction = 0.0;
  /// Mean of |f(S)| over mean of |grad f(S) . N|.
  double mean_ratio = 0.0;
  double surrogate_accuracy = 0.0;
};

/// S is the class mean of each sample's class, N = h - S.
DominanceReport taylor_dominance(const Probe& probe, const Matrix& reps, std::span<const int> labels,
                                 int num_classes);

/// Softmax-regression readout trained on (reps, labels); f is the probability
/// of the sample's own class.
struct LogisticSurrogate {
  Matrix weights;  // d x C
  Vector bias;     // C
  bool converged = false;
  double train_accuracy = 0.0;

  Vector probabilities(const Vector& h) const;
  Probe probe() const;
};

LogisticSurrogate fit_logistic(const Matrix& reps, std::span<const int> labels, int num_classes,
                               int iterations = 500, double l2 = 1e-4);

/// Samples representations like estimate_signal_noise, fits the surrogate on
/// one half and measures dominance on the other.
DominanceReport taylor_dominance_diagnostic(const nanoformer::Model& model,
                                            const sources::Source& source,
                                            const SnrOptions& options, std::uint64_t seed);

struct Cell {
  std::size_t capacity_index = 0;
  std::int64_t data_size = 0;
  int seed_index = 0;
  std::uint64_t seed = 0;
  std::size_t parameter_count = 0;
  std::int64_t steps = 0;
  bool failed = false;
  std::string failure;
  double final_loss = 0.0;
  SnrEstimate snr;
  Accuracy accuracy;
  DominanceReport dominance;
};

struct SweepPlan {
  std::vector<nanoformer::ModelConfig> capacities;
  std::vector<std::int64_t> data_sizes;
  int seeds = 3;
  sources::Source source = sources::Source::planted_copy(1, 0.5, {0.25, 0.25, 0.25, 0.25});
  nanoformer::TrainHyper hyper;
  /// Passes over each D-token dataset; steps = epochs * D / (batch * seq_len).
  double epochs = 4.0;
  SnrOptions snr;
  std::size_t eval_positions = 2000;
  double criterion = 0.5;
  bool dominance = true;
  std::uint64_t seed = 0;
  int jobs = 1;

  /// Throws PlanError describing the first violated precondition.
  void validate() const;
};

struct EmergenceCurve {
  std::vector<Cell> cells;
  double chance = 0.0;
  double criterion = 0.5;
  SigmoidFit sigmoid;
  Threshold threshold;
  double spearman = 0.0;
  std::optional<ScalingFit> scaling;
  std::string scaling_note;
  /// Correlation of dominance fraction with accuracy across cells.
  double dominance_accuracy_corr = 0.0;
};

/// Derived seed of one cell.
std::uint64_t cell_seed(std::uint64_t master, std::size_t capacity_index, std::size_t data_index,
                        int seed_index);

EmergenceCurve emergence_sweep(const SweepPlan& plan);

/// Fits and threshold on an existing cell table (cells marked failed are skipped).
void analyze_curve(EmergenceCurve& curve);

}  // namespace scaling_lab::emergence
