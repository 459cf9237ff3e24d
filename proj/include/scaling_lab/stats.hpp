#pragma once

// Statistical machinery shared by the experiment drivers.

#include <Eigen/Dense>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace scaling_lab::stats {

struct MomentSummary {
  std::size_t count = 0;
  Eigen::VectorXd mean;
  Eigen::MatrixXd covariance;
  /// Unbiased trace statistic sum ||v - mean||^2 / (R - 1).
  double noise_variance = 0.0;
};

/// Rows of `samples` are the R observations.
MomentSummary moments(const Eigen::Ref<const Eigen::MatrixXd>& samples);

/// Same trace statistic without forming the covariance.
double noise_variance(const Eigen::Ref<const Eigen::MatrixXd>& samples);

struct PowerLawFit {
  double exponent = 0.0;
  double log_intercept = 0.0;
  double r_squared = 0.0;
  double slope_stderr = 0.0;
  std::size_t count = 0;
};

/// Ordinary least squares of ln y on ln x.
PowerLawFit power_law_fit(std::span<const double> xs, std::span<const double> ys);

enum class KsCalibration { asymptotic, monte_carlo };

struct KsResult {
  double statistic = 0.0;
  double p_value = 1.0;
  KsCalibration calibration = KsCalibration::asymptotic;
};

/// A reference CDF. `left` gives F(x-) and may be left empty for continuous
/// references. Discontinuous references may only jump at sample points.
struct Cdf {
  std::function<double(double)> at;
  std::function<double(double)> left;
};

Cdf standard_normal_cdf();
Cdf uniform_cdf(double lo, double hi);
Cdf empirical_cdf(std::span<const double> sample);

/// sup |F_n - F| evaluated exactly at the jump points of F_n.
double ks_statistic(std::span<const double> sample, const Cdf& reference);

/// Asymptotic Kolmogorov tail probability P(K > sqrt(n) D) with Stephens'
/// small-sample correction.
double kolmogorov_p_value(std::size_t n, double statistic);

/// Monte Carlo null distribution of the KS statistic for a standard normal
/// reference whose mean and scale are estimated from the same sample
/// (Lilliefors). Depends only on the sample size, so one table serves many
/// tests.
class LillieforsNull {
 public:
  LillieforsNull(std::size_t sample_size, int resamples, std::uint64_t seed);

  std::size_t sample_size() const noexcept { return sample_size_; }
  int resamples() const noexcept { return static_cast<int>(sorted_.size()); }
  /// (1 + #{null >= d}) / (1 + resamples).
  double p_value(double statistic) const;

 private:
  std::size_t sample_size_;
  std::vector<double> sorted_;
};

KsResult ks_test(std::span<const double> sample, const Cdf& reference);

/// Standardises with the sample mean and standard deviation, then tests
/// against N(0,1) with Monte Carlo calibrated p-value.
KsResult lilliefors_test(std::span<const double> sample, const LillieforsNull& null);

/// min(1, 2 exp(-w eps^2 / (2 kappa^2 M'^2))).
double hoeffding_tail(double epsilon, double block_size, double m_prime, double kappa);

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  double estimate = 0.0;
  /// Standard deviation of the bootstrap replicates.
  double std_error = 0.0;
};

using IndexStatistic = std::function<double(std::span<const std::size_t>)>;

/// Percentile bootstrap over resampled index sets of a size-n sample.
Interval bootstrap_ci(std::size_t n, const IndexStatistic& statistic, double level, int reps,
                      std::uint64_t seed);

Interval bootstrap_ci(std::span<const double> data,
                      const std::function<double(std::span<const double>)>& statistic,
                      double level, int reps, std::uint64_t seed);

double mean(std::span<const double> xs);
/// Unbiased sample variance.
double variance(std::span<const double> xs);
double pearson(std::span<const double> xs, std::span<const double> ys);
/// Average ranks for ties; returns 0 when either side is constant.
double spearman(std::span<const double> xs, std::span<const double> ys);
std::vector<double> ranks(std::span<const double> xs);
/// Linear interpolation between order statistics (type 7).
double quantile_sorted(std::span<const double> sorted, double q);
double normal_quantile(double p);

/// Wilson score interval for a binomial proportion.
Interval wilson_interval(std::size_t successes, std::size_t trials, double level);

}  // namespace scaling_lab::stats
