#include "scaling_lab/stats.hpp"

#include <algorithm>
#include <boost/math/distributions/normal.hpp>
#include <cmath>
#include <numbers>
#include <memory>
#include <numeric>

#include "scaling_lab/errors.hpp"
#include "scaling_lab/rng.hpp"

namespace scaling_lab::stats {

MomentSummary moments(const Eigen::Ref<const Eigen::MatrixXd>& samples) {
  const auto r = samples.rows();
  if (r < 2) throw InsufficientSamplesError("moments need at least 2 samples");
  MomentSummary out;
  out.count = static_cast<std::size_t>(r);
  // Shift by the first row before averaging so identical rows give exactly 0.
  const Eigen::RowVectorXd first = samples.row(0);
  const Eigen::MatrixXd shifted = samples.rowwise() - first;
  const Eigen::RowVectorXd shift_mean = shifted.colwise().mean();
  out.mean = (first + shift_mean).transpose();
  const Eigen::MatrixXd centered = shifted.rowwise() - shift_mean;
  out.covariance = (centered.transpose() * centered) / static_cast<double>(r - 1);
  // Symmetrise exactly.
  out.covariance = 0.5 * (out.covariance + out.covariance.transpose()).eval();
  out.noise_variance = centered.squaredNorm() / static_cast<double>(r - 1);
  return out;
}

double noise_variance(const Eigen::Ref<const Eigen::MatrixXd>& samples) {
  const auto r = samples.rows();
  if (r < 2) throw InsufficientSamplesError("noise variance needs at least 2 samples");
  const Eigen::MatrixXd shifted = samples.rowwise() - Eigen::RowVectorXd(samples.row(0));
  const Eigen::RowVectorXd mu = shifted.colwise().mean();
  return (shifted.rowwise() - mu).squaredNorm() / static_cast<double>(r - 1);
}

PowerLawFit power_law_fit(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw UsageError("power_law_fit: xs and ys differ in length");
  if (xs.size() < 3) throw InsufficientSamplesError("power_law_fit needs at least 3 points");
  const std::size_t n = xs.size();
  std::vector<double> lx(n), ly(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (!(xs[i] > 0.0) || !(ys[i] > 0.0)) {
      throw DomainError("power_law_fit requires strictly positive x and y");
    }
    lx[i] = std::log(xs[i]);
    ly[i] = std::log(ys[i]);
  }
  const double mx = mean(lx), my = mean(ly);
  double sxx = 0.0, sxy = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
    syy += (ly[i] - my) * (ly[i] - my);
  }
  if (sxx == 0.0) throw DomainError("power_law_fit needs at least two distinct x values");
  PowerLawFit fit;
  fit.count = n;
  fit.exponent = sxy / sxx;
  fit.log_intercept = my - fit.exponent * mx;
  double sse = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double resid = ly[i] - (fit.log_intercept + fit.exponent * lx[i]);
    sse += resid * resid;
  }
  fit.r_squared = syy > 0.0 ? std::clamp(1.0 - sse / syy, 0.0, 1.0) : 1.0;
  fit.slope_stderr = n > 2 ? std::sqrt(sse / static_cast<double>(n - 2) / sxx) : 0.0;
  return fit;
}

Cdf standard_normal_cdf() {
  return {[](double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }, {}};
}

Cdf uniform_cdf(double lo, double hi) {
  if (!(hi > lo)) throw UsageError("uniform_cdf requires hi > lo");
  return {[lo, hi](double x) { return std::clamp((x - lo) / (hi - lo), 0.0, 1.0); }, {}};
}

Cdf empirical_cdf(std::span<const double> sample) {
  auto sorted = std::make_shared<std::vector<double>>(sample.begin(), sample.end());
  std::sort(sorted->begin(), sorted->end());
  const auto n = static_cast<double>(sorted->size());
  Cdf cdf;
  cdf.at = [sorted, n](double x) {
    return static_cast<double>(std::upper_bound(sorted->begin(), sorted->end(), x) - sorted->begin()) / n;
  };
  cdf.left = [sorted, n](double x) {
    return static_cast<double>(std::lower_bound(sorted->begin(), sorted->end(), x) - sorted->begin()) / n;
  };
  return cdf;
}

double ks_statistic(std::span<const double> sample, const Cdf& reference) {
  if (sample.empty()) throw UsageError("ks_statistic on empty sample");
  std::vector<double> x(sample.begin(), sample.end());
  std::sort(x.begin(), x.end());
  const auto n = static_cast<double>(x.size());
  double d = 0.0;
  double prev_f = -1.0;
  for (std::size_t i = 0; i < x.size();) {
    std::size_t j = i;
    while (j < x.size() && x[j] == x[i]) ++j;
    const double f = reference.at(x[i]);
    const double f_left = reference.left ? reference.left(x[i]) : f;
    if (!(f >= 0.0 && f <= 1.0) || f_left > f || f_left < prev_f) {
      throw UsageError("reference CDF is not monotone with values in [0,1]");
    }
    prev_f = f;
    const double ecdf_left = static_cast<double>(i) / n;
    const double ecdf = static_cast<double>(j) / n;
    d = std::max({d, std::abs(ecdf - f), std::abs(ecdf_left - f_left)});
    i = j;
  }
  return std::min(d, 1.0);
}

double kolmogorov_p_value(std::size_t n, double statistic) {
  const double sn = std::sqrt(static_cast<double>(n));
  const double lambda = (sn + 0.12 + 0.11 / sn) * statistic;
  if (lambda <= 0.0) return 1.0;
  if (lambda < 1.18) {
    // Jacobi-theta form converges fast for small lambda.
    const double factor = std::sqrt(2.0 * std::numbers::pi) / lambda;
    const double w = std::numbers::pi * std::numbers::pi / (8.0 * lambda * lambda);
    double sum = 0.0;
    for (int j = 1; j <= 7; j += 2) sum += std::exp(-static_cast<double>(j * j) * w);
    return std::clamp(1.0 - factor * sum, 0.0, 1.0);
  }
  double sum = 0.0;
  for (int j = 1; j <= 100; ++j) {
    const double term = std::exp(-2.0 * j * j * lambda * lambda);
    sum += (j % 2 == 1 ? term : -term);
    if (term < 1e-16) break;
  }
  return std::clamp(2.0 * sum, 0.0, 1.0);
}

namespace {

double standardized_normal_ks(std::vector<double>& x) {
  const double m = mean(x);
  const double sd = std::sqrt(variance(x));
  if (!(sd > 0.0)) return 1.0;
  for (double& v : x) v = (v - m) / sd;
  return ks_statistic(x, standard_normal_cdf());
}

}  // namespace

LillieforsNull::LillieforsNull(std::size_t sample_size, int resamples, std::uint64_t seed)
    : sample_size_(sample_size) {
  if (sample_size < 5) throw UsageError("Lilliefors null needs sample size >= 5");
  if (resamples < 1) throw UsageError("Lilliefors null needs at least one resample");
  sorted_.reserve(static_cast<std::size_t>(resamples));
  std::vector<double> buf(sample_size);
  for (int b = 0; b < resamples; ++b) {
    CounterRng rng(derive_seed(seed, {static_cast<std::uint64_t>(b)}));
    for (double& v : buf) v = rng.normal();
    sorted_.push_back(standardized_normal_ks(buf));
  }
  std::sort(sorted_.begin(), sorted_.end());
}

double LillieforsNull::p_value(double statistic) const {
  const auto at_least =
      static_cast<double>(sorted_.end() - std::lower_bound(sorted_.begin(), sorted_.end(), statistic));
  return (1.0 + at_least) / (1.0 + static_cast<double>(sorted_.size()));
}

KsResult ks_test(std::span<const double> sample, const Cdf& reference) {
  if (sample.size() < 5) throw InsufficientSamplesError("ks_test needs at least 5 samples");
  KsResult out;
  out.statistic = ks_statistic(sample, reference);
  out.p_value = kolmogorov_p_value(sample.size(), out.statistic);
  out.calibration = KsCalibration::asymptotic;
  return out;
}

KsResult lilliefors_test(std::span<const double> sample, const LillieforsNull& null) {
  if (sample.size() < 5) throw InsufficientSamplesError("ks_test needs at least 5 samples");
  if (sample.size() != null.sample_size()) {
    throw UsageError("Lilliefors null table was built for a different sample size");
  }
  std::vector<double> x(sample.begin(), sample.end());
  KsResult out;
  out.statistic = standardized_normal_ks(x);
  out.p_value = null.p_value(out.statistic);
  out.calibration = KsCalibration::monte_carlo;
  return out;
}

double hoeffding_tail(double epsilon, double block_size, double m_prime, double kappa) {
  if (!(epsilon >= 0.0) || !(block_size > 0.0) || !(m_prime > 0.0) || !(kappa > 0.0)) {
    throw UsageError("hoeffding_tail: need eps >= 0, w > 0, M' > 0, kappa > 0");
  }
  const double exponent = -block_size * epsilon * epsilon / (2.0 * kappa * kappa * m_prime * m_prime);
  return std::min(1.0, 2.0 * std::exp(exponent));
}

Interval bootstrap_ci(std::size_t n, const IndexStatistic& statistic, double level, int reps,
                      std::uint64_t seed) {
  if (n == 0) throw UsageError("bootstrap on empty data");
  if (reps < 200) throw UsageError("bootstrap needs at least 200 replicates");
  if (!(level > 0.0 && level < 1.0)) throw UsageError("bootstrap level must lie in (0,1)");
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Interval out;
  out.estimate = statistic(idx);
  std::vector<double> values;
  values.reserve(static_cast<std::size_t>(reps));
  for (int b = 0; b < reps; ++b) {
    CounterRng rng(derive_seed(seed, {static_cast<std::uint64_t>(b)}));
    for (auto& i : idx) i = static_cast<std::size_t>(rng.below(n));
    values.push_back(statistic(idx));
  }
  std::sort(values.begin(), values.end());
  out.lo = quantile_sorted(values, 0.5 * (1.0 - level));
  out.hi = quantile_sorted(values, 0.5 * (1.0 + level));
  out.std_error = std::sqrt(variance(values));
  return out;
}

Interval bootstrap_ci(std::span<const double> data,
                      const std::function<double(std::span<const double>)>& statistic,
                      double level, int reps, std::uint64_t seed) {
  std::vector<double> buf(data.size());
  return bootstrap_ci(
      data.size(),
      [&](std::span<const std::size_t> idx) {
        for (std::size_t i = 0; i < idx.size(); ++i) buf[i] = data[idx[i]];
        return statistic(buf);
      },
      level, reps, seed);
}

double mean(std::span<const double> xs) {
  if (xs.empty()) throw UsageError("mean of empty data");
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

double variance(std::span<const double> xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return s / static_cast<double>(xs.size() - 1);
}

double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size() || xs.size() < 2) throw UsageError("pearson needs paired data of size >= 2");
  const double mx = mean(xs), my = mean(ys);
  double sxx = 0.0, syy = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    sxx += (xs[i] - mx) * (xs[i] - mx);
    syy += (ys[i] - my) * (ys[i] - my);
    sxy += (xs[i] - mx) * (ys[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

std::vector<double> ranks(std::span<const double> xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return xs[a] < xs[b]; });
  std::vector<double> r(xs.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && xs[order[j]] == xs[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j - 1) + 1.0;
    for (std::size_t k = i; k < j; ++k) r[order[k]] = avg;
    i = j;
  }
  return r;
}

double spearman(std::span<const double> xs, std::span<const double> ys) {
  const auto rx = ranks(xs);
  const auto ry = ranks(ys);
  return pearson(rx, ry);
}

double quantile_sorted(std::span<const double> sorted, double q) {
  if (sorted.empty()) throw UsageError("quantile of empty data");
  const double h = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  const auto hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (h - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

double normal_quantile(double p) {
  return boost::math::quantile(boost::math::normal_distribution<double>(), p);
}

Interval wilson_interval(std::size_t successes, std::size_t trials, double level) {
  if (trials == 0) throw UsageError("wilson interval with zero trials");
  const double z = normal_quantile(0.5 * (1.0 + level));
  const double n = static_cast<double>(trials);
  const double p = static_cast<double>(successes) / n;
  const double denom = 1.0 + z * z / n;
  const double centre = (p + z * z / (2.0 * n)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n)) / denom;
  Interval out;
  out.estimate = p;
  out.lo = std::max(0.0, centre - half);
  out.hi = std::min(1.0, centre + half);
  out.std_error = std::sqrt(p * (1.0 - p) / n);
  return out;
}

}  // namespace scaling_lab::stats
