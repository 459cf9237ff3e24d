#include "scaling_lab/emergence.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>

#include <unsupported/Eigen/LevenbergMarquardt>

#include "scaling_lab/errors.hpp"
#include "scaling_lab/parallel.hpp"
#include "scaling_lab/rng.hpp"

namespace scaling_lab::emergence {

using nanoformer::Model;
using sources::Source;

namespace {

struct Powers {
  double signal = 0.0;
  double noise = 0.0;
};

// Signal and noise over the rows listed in `idx`.
Powers powers(const Matrix& reps, std::span<const int> labels, int num_classes,
              std::span<const std::size_t> idx) {
  const Eigen::Index d = reps.cols();
  std::vector<Vector> sums(static_cast<std::size_t>(num_classes), Vector::Zero(d));
  std::vector<double> counts(static_cast<std::size_t>(num_classes), 0.0);
  Vector grand = Vector::Zero(d);
  for (std::size_t i : idx) {
    const auto c = static_cast<std::size_t>(labels[i]);
    sums[c] += reps.row(static_cast<Eigen::Index>(i)).transpose();
    counts[c] += 1.0;
    grand += reps.row(static_cast<Eigen::Index>(i)).transpose();
  }
  const double total = static_cast<double>(idx.size());
  grand /= total;
  Powers p;
  for (std::size_t c = 0; c < sums.size(); ++c) {
    if (counts[c] == 0.0) continue;
    sums[c] /= counts[c];
    p.signal += counts[c] * (sums[c] - grand).squaredNorm();
  }
  for (std::size_t i : idx) {
    const auto c = static_cast<std::size_t>(labels[i]);
    p.noise += (reps.row(static_cast<Eigen::Index>(i)).transpose() - sums[c]).squaredNorm();
  }
  p.signal /= total;
  p.noise /= total;
  return p;
}

struct Labelled {
  Matrix reps;
  std::vector<int> labels;
};

Labelled sample_representations(const Model& model, const Source& source, const SnrOptions& options,
                                std::uint64_t seed) {
  if (source.kind() != sources::SourceKind::planted_copy) {
    throw UsageError("signal/noise estimation needs a planted-copy source");
  }
  if (options.per_class < 1) throw UsageError("per_class must be positive");
  const std::size_t n = options.context_len;
  const auto lag = static_cast<std::size_t>(source.lag());
  if (n <= lag) throw UsageError("context_len must exceed the copy lag");
  const int layers = model.config.num_layers;
  const int layer = options.layer < 0 ? layers - 1 : options.layer;
  if (layer >= layers) throw UsageError("layer index out of range");

  const int classes = source.vocab_size();
  const std::size_t target = static_cast<std::size_t>(options.per_class);
  std::vector<std::size_t> have(static_cast<std::size_t>(classes), 0);
  std::size_t filled = 0;
  const std::size_t budget = 50 * target * static_cast<std::size_t>(classes);
  std::vector<Vector> rows;
  Labelled out;
  for (std::size_t draw = 0; draw < budget && filled < static_cast<std::size_t>(classes); ++draw) {
    const auto seq = sources::sample_sequence(source, n, derive_seed(seed, {draw}));
    // The next position would copy the token `lag` steps back from it.
    const int cls = seq.tokens[n - lag];
    auto& count = have[static_cast<std::size_t>(cls)];
    if (count >= target) continue;
    const auto trace = nanoformer::forward_last(model, seq.tokens);
    rows.push_back(trace.layers[static_cast<std::size_t>(layer)].repr);
    out.labels.push_back(cls);
    if (++count == target) ++filled;
  }
  out.reps.resize(static_cast<Eigen::Index>(rows.size()), model.config.model_dim);
  for (std::size_t i = 0; i < rows.size(); ++i) out.reps.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  return out;
}

double logistic(double z) { return 1.0 / (1.0 + std::exp(-z)); }

struct SigmoidFunctor : Eigen::DenseFunctor<double> {
  std::span<const double> xs, ys;
  std::optional<double> lo, hi;

  SigmoidFunctor(std::span<const double> x, std::span<const double> y, std::optional<double> l,
                 std::optional<double> h)
      : DenseFunctor<double>(2 + !l + !h, static_cast<int>(x.size())), xs(x), ys(y), lo(l), hi(h) {}

  // Parameter layout: midpoint, slope, then free asymptotes.
  void unpack(const InputType& p, double& a, double& b, double& m, double& s) const {
    m = p(0);
    s = p(1);
    int k = 2;
    a = lo ? *lo : p(k++);
    b = hi ? *hi : p(k++);
  }

  int operator()(const InputType& p, ValueType& f) const {
    double a, b, m, s;
    unpack(p, a, b, m, s);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      f(static_cast<Eigen::Index>(i)) = a + (b - a) * logistic(s * (xs[i] - m)) - ys[i];
    }
    return 0;
  }

  int df(const InputType& p, JacobianType& j) const {
    double a, b, m, s;
    unpack(p, a, b, m, s);
    for (std::size_t i = 0; i < xs.size(); ++i) {
      const auto r = static_cast<Eigen::Index>(i);
      const double g = logistic(s * (xs[i] - m));
      const double dg = g * (1.0 - g);
      j(r, 0) = -(b - a) * dg * s;
      j(r, 1) = (b - a) * dg * (xs[i] - m);
      int k = 2;
      if (!lo) j(r, k++) = 1.0 - g;
      if (!hi) j(r, k++) = g;
    }
    return 0;
  }
};

}  // namespace

SnrEstimate snr_from_samples(const Matrix& reps, std::span<const int> labels, int num_classes,
                             int bootstrap_reps, std::uint64_t seed, std::size_t min_class) {
  if (static_cast<std::size_t>(reps.rows()) != labels.size()) {
    throw UsageError("representation rows and labels differ in length");
  }
  if (num_classes < 1) throw UsageError("num_classes must be positive");
  SnrEstimate est;
  est.class_counts.assign(static_cast<std::size_t>(num_classes), 0);
  for (int c : labels) {
    if (c < 0 || c >= num_classes) throw UsageError("class label out of range");
    ++est.class_counts[static_cast<std::size_t>(c)];
  }
  for (int c = 0; c < num_classes; ++c) {
    auto& n = est.class_counts[static_cast<std::size_t>(c)];
    if (n > 0 && n < min_class) {
      est.dropped_classes.push_back(c);
      n = 0;
    }
  }
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (est.class_counts[static_cast<std::size_t>(labels[i])] > 0) keep.push_back(i);
  }
  if (keep.empty()) throw EstimationError("no class has enough samples for a signal/noise split");
  const Powers p = powers(reps, labels, num_classes, keep);
  est.signal_power = p.signal;
  est.noise_power = p.noise;
  if (!(p.noise > 0.0)) throw EstimationError("noise power is zero; SNR is undefined");
  est.snr = p.signal / p.noise;
  est.ci = {est.snr, est.snr, est.snr, 0.0};
  if (bootstrap_reps > 0) {
    std::vector<std::size_t> mapped(keep.size());
    est.ci = stats::bootstrap_ci(
        keep.size(),
        [&](std::span<const std::size_t> idx) {
          for (std::size_t i = 0; i < idx.size(); ++i) mapped[i] = keep[idx[i]];
          const Powers b = powers(reps, labels, num_classes, mapped);
          return b.noise > 0.0 ? b.signal / b.noise : std::numeric_limits<double>::infinity();
        },
        0.95, bootstrap_reps, seed);
    est.ci.estimate = est.snr;
  }
  return est;
}

SnrEstimate estimate_signal_noise(const Model& model, const Source& source, const SnrOptions& options,
                                  std::uint64_t seed) {
  const auto data = sample_representations(model, source, options, derive_seed(seed, {fnv1a64("contexts")}));
  return snr_from_samples(data.reps, data.labels, source.vocab_size(), options.bootstrap_reps,
                          derive_seed(seed, {fnv1a64("bootstrap")}), options.min_class);
}

Predictor model_predictor(const Model& model) {
  return [&model](std::span<const int> tokens) { return nanoformer::forward(model, tokens).log_probs; };
}

Predictor oracle_predictor(const Source& source) {
  return [source](std::span<const int> tokens) {
    Matrix out(static_cast<Eigen::Index>(tokens.size()), source.vocab_size());
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      const auto law = sources::conditional_distribution(source, tokens.subspan(0, t + 1));
      for (std::size_t v = 0; v < law.size(); ++v) {
        out(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(v)) = std::log(law[v]);
      }
    }
    return out;
  };
}

Accuracy capability_probe(const Predictor& predictor, const Source& source, std::size_t min_positions,
                          std::size_t seq_len, std::uint64_t seed) {
  if (source.kind() != sources::SourceKind::planted_copy) {
    throw UsageError("capability probe needs a planted-copy source");
  }
  if (min_positions == 0) throw UsageError("min_positions must be positive");
  Accuracy acc;
  for (std::uint64_t draw = 0; acc.positions < min_positions; ++draw) {
    const auto seq = sources::sample_sequence(source, seq_len, derive_seed(seed, {draw}));
    const Matrix scores = predictor(seq.tokens);
    for (std::size_t t = 0; t + 1 < seq.size(); ++t) {
      if (!seq.copied[t + 1]) continue;
      const auto row = scores.row(static_cast<Eigen::Index>(t));
      Eigen::Index best = 0;
      for (Eigen::Index v = 1; v < row.size(); ++v) {
        if (row(v) > row(best)) best = v;
      }
      acc.hits += best == seq.tokens[t + 1];
      ++acc.positions;
    }
    if (draw > 1000 * min_positions) throw EstimationError("source produced no copy positions");
  }
  acc.accuracy = static_cast<double>(acc.hits) / static_cast<double>(acc.positions);
  acc.ci = stats::wilson_interval(acc.hits, acc.positions, 0.95);
  return acc;
}

double sigmoid(const SigmoidFit& fit, double x) {
  return fit.lower + (fit.upper - fit.lower) * logistic(fit.slope * (x - fit.midpoint));
}

namespace {

SigmoidFit fit_sigmoid_once(std::span<const double> xs, std::span<const double> ys, const SigmoidOptions& options) {
  SigmoidFunctor functor(xs, ys, options.fixed_lower, options.fixed_upper);
  SigmoidFit best;
  if (xs.size() < static_cast<std::size_t>(functor.inputs())) return best;
  const auto [xmin_it, xmax_it] = std::minmax_element(xs.begin(), xs.end());
  const auto [ymin_it, ymax_it] = std::minmax_element(ys.begin(), ys.end());
  const double span = std::max(*xmax_it - *xmin_it, 1e-6);
  double best_sse = std::numeric_limits<double>::infinity();

  for (double mq : {0.25, 0.5, 0.75}) {
    for (double sf : {0.5, 2.0, 8.0}) {
      Eigen::VectorXd p(functor.inputs());
      p(0) = *xmin_it + mq * span;
      p(1) = sf * 4.0 / span;
      int k = 2;
      if (!options.fixed_lower) p(k++) = *ymin_it;
      if (!options.fixed_upper) p(k++) = *ymax_it;
      Eigen::LevenbergMarquardt<SigmoidFunctor> lm(functor);
      lm.setMaxfev(2000);
      const auto status = lm.minimize(p);
      using namespace Eigen::LevenbergMarquardtSpace;
      const bool ok = status != ImproperInputParameters && status != TooManyFunctionEvaluation &&
                      status != NotStarted && status != Running && p.allFinite();
      if (!ok) continue;
      Eigen::VectorXd f(functor.values());
      functor(p, f);
      const double sse = f.squaredNorm();
      if (sse < best_sse) {
        best_sse = sse;
        best.converged = true;
        functor.unpack(p, best.lower, best.upper, best.midpoint, best.slope);
        best.residuals.assign(f.data(), f.data() + f.size());
      }
    }
  }
  if (!best.converged) return best;
  // Canonical orientation: slope >= 0 with the asymptotes swapped if needed.
  if (best.slope < 0.0 && !options.fixed_lower && !options.fixed_upper) {
    best.slope = -best.slope;
    std::swap(best.lower, best.upper);
  }
  const double ybar = std::accumulate(ys.begin(), ys.end(), 0.0) / static_cast<double>(ys.size());
  double sst = 0.0;
  for (double y : ys) sst += (y - ybar) * (y - ybar);
  best.r_squared = sst > 0.0 ? 1.0 - best_sse / sst : (best_sse == 0.0 ? 1.0 : 0.0);
  return best;
}

}  // namespace

SigmoidFit fit_sigmoid(std::span<const double> xs, std::span<const double> ys, const SigmoidOptions& options) {
  if (xs.size() != ys.size()) throw UsageError("xs and ys differ in length");
  SigmoidOptions opt = options;
  SigmoidFit fit = fit_sigmoid_once(xs, ys, opt);
  // At most two pinning rounds, one per asymptote.
  for (int round = 0; round < 2 && fit.converged; ++round) {
    bool pinned = false;
    if (!opt.fixed_upper && fit.upper > opt.max_asymptote) {
      opt.fixed_upper = opt.max_asymptote;
      pinned = true;
    }
    if (!opt.fixed_lower && fit.lower < opt.min_asymptote) {
      opt.fixed_lower = opt.min_asymptote;
      pinned = true;
    }
    if (!pinned) break;
    fit = fit_sigmoid_once(xs, ys, opt);
  }
  return fit;
}

Threshold detect_threshold(const SigmoidFit& fit, double chance, double criterion, std::span<const double> xs) {
  Threshold t;
  t.criterion_accuracy = chance + criterion * (fit.upper - chance);
  if (!fit.converged) {
    t.reason = "sigmoid fit did not converge";
    return t;
  }
  if (xs.empty()) {
    t.reason = "no cells";
    return t;
  }
  // A rise smaller than this is indistinguishable from a flat curve.
  constexpr double kMinRise = 0.05;
  if (!(fit.slope > 0.0) || fit.upper - fit.lower < kMinRise || fit.upper - chance < kMinRise) {
    t.reason = "no threshold detected: curve is flat or decreasing";
    return t;
  }
  const double q = (t.criterion_accuracy - fit.lower) / (fit.upper - fit.lower);
  if (!(q > 0.0 && q < 1.0)) {
    t.reason = "no threshold detected: criterion accuracy outside the fitted range";
    return t;
  }
  const double x = fit.midpoint + std::log(q / (1.0 - q)) / fit.slope;
  const auto [lo, hi] = std::minmax_element(xs.begin(), xs.end());
  if (!(x >= *lo - 1.0 && x <= *hi + 1.0)) {
    t.reason = "no threshold detected: crossing lies outside the observed SNR range";
    return t;
  }
  t.detected = true;
  t.ln_theta = x;
  t.theta = std::exp(x);
  return t;
}

ScalingFit snr_scaling_fit(std::span<const std::size_t> capacity, std::span<const double> data_size,
                           std::span<const double> snr) {
  const std::size_t n = capacity.size();
  if (data_size.size() != n || snr.size() != n) throw UsageError("scaling fit inputs differ in length");
  const std::set<std::size_t> caps(capacity.begin(), capacity.end());
  const std::set<double> sizes(data_size.begin(), data_size.end());
  if (sizes.size() < 2) throw UsageError("scaling fit needs at least two data sizes (singular design)");
  if (caps.size() < 2 || n < 6) throw UsageError("scaling fit needs at least 6 cells and 2 capacities");
  for (std::size_t i = 0; i < n; ++i) {
    if (!(data_size[i] > 0.0) || !(snr[i] > 0.0) || !std::isfinite(snr[i])) {
      throw DomainError("scaling fit needs positive finite D and SNR");
    }
  }
  ScalingFit fit;
  fit.capacities.assign(caps.begin(), caps.end());
  const auto p = static_cast<Eigen::Index>(1 + caps.size());
  Eigen::MatrixXd x = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(n), p);
  Eigen::VectorXd y(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const auto r = static_cast<Eigen::Index>(i);
    x(r, 0) = std::log(data_size[i]);
    const auto col = std::distance(caps.begin(), caps.find(capacity[i]));
    x(r, 1 + col) = 1.0;
    y(r) = std::log(snr[i]);
  }
  const Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(x);
  if (qr.rank() < p) throw UsageError("scaling fit design is singular");
  const Eigen::VectorXd beta = qr.solve(y);
  const Eigen::VectorXd resid = y - x * beta;
  fit.count = n;
  fit.alpha = beta(0);
  fit.residual_variance = static_cast<Eigen::Index>(n) > p ? resid.squaredNorm() / static_cast<double>(static_cast<Eigen::Index>(n) - p) : 0.0;
  const Eigen::MatrixXd xtx_inv = (x.transpose() * x).inverse();
  fit.alpha_stderr = std::sqrt(fit.residual_variance * xtx_inv(0, 0));
  for (Eigen::Index k = 1; k < p; ++k) fit.offsets.push_back(beta(k));
  for (std::size_t k = 1; k < fit.offsets.size(); ++k) {
    if (fit.offsets[k] < fit.offsets[k - 1]) fit.offsets_nondecreasing = false;
  }
  fit.sigma2 = std::exp(-fit.offsets.front());
  return fit;
}

DominanceReport taylor_dominance(const Probe& probe, const Matrix& reps, std::span<const int> labels,
                                 int num_classes) {
  if (static_cast<std::size_t>(reps.rows()) != labels.size()) {
    throw UsageError("representation rows and labels differ in length");
  }
  DominanceReport rep;
  const Eigen::Index d = reps.cols();
  std::vector<Vector> means(static_cast<std::size_t>(num_classes), Vector::Zero(d));
  std::vector<double> counts(static_cast<std::size_t>(num_classes), 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    means[static_cast<std::size_t>(labels[i])] += reps.row(static_cast<Eigen::Index>(i)).transpose();
    counts[static_cast<std::size_t>(labels[i])] += 1.0;
  }
  std::vector<double> value(means.size()), dummy;
  std::vector<Vector> grad(means.size());
  for (std::size_t c = 0; c < means.size(); ++c) {
    if (counts[c] == 0.0) continue;
    means[c] /= counts[c];
    value[c] = probe.value(means[c], static_cast<int>(c));
    grad[c] = probe.gradient(means[c], static_cast<int>(c));
  }
  double sum_signal = 0.0, sum_fluct = 0.0;
  std::size_t dominated = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto c = static_cast<std::size_t>(labels[i]);
    const double signal = std::abs(value[c]);
    const double fluct = std::abs(grad[c].dot(reps.row(static_cast<Eigen::Index>(i)).transpose() - means[c]));
    dominated += signal > fluct;
    sum_signal += signal;
    sum_fluct += fluct;
  }
  rep.available = !labels.empty();
  rep.samples = labels.size();
  if (rep.samples == 0) {
    rep.note = "no samples";
    return rep;
  }
  rep.fraction = static_cast<double>(dominated) / static_cast<double>(rep.samples);
  rep.mean_ratio = sum_fluct > 0.0 ? sum_signal / sum_fluct : std::numeric_limits<double>::infinity();
  return rep;
}

Vector LogisticSurrogate::probabilities(const Vector& h) const {
  Vector z = weights.transpose() * h + bias;
  z.array() -= z.maxCoeff();
  z = z.array().exp();
  return z / z.sum();
}

Probe LogisticSurrogate::probe() const {
  Probe p;
  p.value = [this](const Vector& h, int c) { return probabilities(h)(c); };
  p.gradient = [this](const Vector& h, int c) {
    const Vector pr = probabilities(h);
    // d p_c / d h = p_c (w_c - W p)
    return Vector(pr(c) * (weights.col(c) - weights * pr));
  };
  return p;
}

LogisticSurrogate fit_logistic(const Matrix& reps, std::span<const int> labels, int num_classes,
                               int iterations, double l2) {
  const Eigen::Index n = reps.rows(), d = reps.cols();
  if (n == 0 || static_cast<std::size_t>(n) != labels.size()) throw UsageError("logistic fit needs labelled rows");
  // Work on standardised features, then fold the scaling back in.
  const Eigen::RowVectorXd mu = reps.colwise().mean();
  Matrix z = reps.rowwise() - mu;
  Eigen::RowVectorXd scale = (z.array().square().colwise().sum() / static_cast<double>(n)).sqrt();
  for (Eigen::Index j = 0; j < d; ++j) {
    if (!(scale(j) > 1e-12)) scale(j) = 1.0;
  }
  z = z.array().rowwise() / scale.array();
  Matrix w = Matrix::Zero(d, num_classes);
  Vector b = Vector::Zero(num_classes);
  Matrix onehot = Matrix::Zero(n, num_classes);
  for (Eigen::Index i = 0; i < n; ++i) onehot(i, labels[static_cast<std::size_t>(i)]) = 1.0;
  const double lr = 0.5;
  for (int it = 0; it < iterations; ++it) {
    Matrix logits = (z * w).rowwise() + b.transpose();
    for (Eigen::Index i = 0; i < n; ++i) {
      logits.row(i).array() -= logits.row(i).maxCoeff();
      logits.row(i) = logits.row(i).array().exp();
      logits.row(i) /= logits.row(i).sum();
    }
    const Matrix delta = (logits - onehot) / static_cast<double>(n);
    w -= lr * (z.transpose() * delta + l2 * w);
    b -= lr * delta.colwise().sum().transpose();
  }
  LogisticSurrogate s;
  s.weights = w.array().colwise() / scale.transpose().array();
  s.bias = b - (mu * s.weights).transpose();
  s.converged = s.weights.allFinite() && s.bias.allFinite();
  if (s.converged) {
    std::size_t hits = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
      Eigen::Index arg = 0;
      s.probabilities(reps.row(i).transpose()).maxCoeff(&arg);
      hits += arg == labels[static_cast<std::size_t>(i)];
    }
    s.train_accuracy = static_cast<double>(hits) / static_cast<double>(n);
  }
  return s;
}

DominanceReport taylor_dominance_diagnostic(const Model& model, const Source& source,
                                            const SnrOptions& options, std::uint64_t seed) {
  const auto data = sample_representations(model, source, options, derive_seed(seed, {fnv1a64("contexts")}));
  const Eigen::Index n = data.reps.rows();
  DominanceReport rep;
  if (n < 4) {
    rep.note = "skipped: too few representation samples";
    return rep;
  }
  std::vector<Eigen::Index> fit_rows, eval_rows;
  for (Eigen::Index i = 0; i < n; ++i) (i % 2 == 0 ? fit_rows : eval_rows).push_back(i);
  auto take = [&](const std::vector<Eigen::Index>& rows, Matrix& m, std::vector<int>& l) {
    m.resize(static_cast<Eigen::Index>(rows.size()), data.reps.cols());
    for (std::size_t i = 0; i < rows.size(); ++i) {
      m.row(static_cast<Eigen::Index>(i)) = data.reps.row(rows[i]);
      l.push_back(data.labels[static_cast<std::size_t>(rows[i])]);
    }
  };
  Matrix fit_x, eval_x;
  std::vector<int> fit_y, eval_y;
  take(fit_rows, fit_x, fit_y);
  take(eval_rows, eval_x, eval_y);
  const auto surrogate = fit_logistic(fit_x, fit_y, source.vocab_size());
  if (!surrogate.converged) {
    rep.note = "skipped: surrogate training failed";
    return rep;
  }
  rep = taylor_dominance(surrogate.probe(), eval_x, eval_y, source.vocab_size());
  rep.surrogate_accuracy = surrogate.train_accuracy;
  rep.note = "first-order term only; the second-order remainder is not measured";
  return rep;
}

void SweepPlan::validate() const {
  if (capacities.size() < 2) throw PlanError("capacities: need at least 2 model configs");
  if (data_sizes.size() < 2) throw PlanError("data_sizes: need at least 2 values");
  for (std::size_t i = 1; i < data_sizes.size(); ++i) {
    if (data_sizes[i] <= data_sizes[i - 1]) throw PlanError("data_sizes: must be strictly increasing");
  }
  if (seeds < 1) throw PlanError("seeds: must be positive");
  if (capacities.size() * data_sizes.size() * static_cast<std::size_t>(seeds) < 6) {
    throw PlanError("grid: need at least 6 cells");
  }
  if (source.kind() != sources::SourceKind::planted_copy) throw PlanError("source: must be planted-copy");
  if (snr.per_class < 50) throw PlanError("snr.per_class: must be at least 50");
  if (eval_positions < 1000) throw PlanError("eval_positions: must be at least 1000");
  if (!(criterion > 0.0 && criterion < 1.0)) throw PlanError("criterion: must lie in (0, 1)");
  if (!(epochs > 0.0)) throw PlanError("epochs: must be positive");
  const auto batch_tokens = static_cast<std::int64_t>(hyper.batch_size) * hyper.seq_len;
  if (data_sizes.front() < batch_tokens) throw PlanError("data_sizes: smallest D is below one batch");
  if (snr.context_len <= static_cast<std::size_t>(source.lag()) ||
      static_cast<std::size_t>(hyper.seq_len) <= static_cast<std::size_t>(source.lag())) {
    throw PlanError("source.lag: must be below the sequence length");
  }
  for (const auto& c : capacities) {
    c.validate();
    if (c.vocab_size != source.vocab_size()) throw PlanError("capacities: vocab_size must match the source");
    if (static_cast<std::size_t>(c.context_cap) < std::max<std::size_t>(snr.context_len, static_cast<std::size_t>(hyper.seq_len))) {
      throw PlanError("capacities: context_cap below the sequence length");
    }
  }
}

std::uint64_t cell_seed(std::uint64_t master, std::size_t capacity_index, std::size_t data_index, int seed_index) {
  return derive_seed(master, {fnv1a64("emergence"), capacity_index, data_index, static_cast<std::uint64_t>(seed_index)});
}

EmergenceCurve emergence_sweep(const SweepPlan& plan) {
  plan.validate();
  EmergenceCurve curve;
  curve.chance = 1.0 / plan.source.vocab_size();
  curve.criterion = plan.criterion;
  for (std::size_t pi = 0; pi < plan.capacities.size(); ++pi) {
    for (std::size_t di = 0; di < plan.data_sizes.size(); ++di) {
      for (int s = 0; s < plan.seeds; ++s) {
        Cell c;
        c.capacity_index = pi;
        c.data_size = plan.data_sizes[di];
        c.seed_index = s;
        c.seed = cell_seed(plan.seed, pi, di, s);
        curve.cells.push_back(c);
      }
    }
  }
  // Every cell is measured on the same contexts and evaluation stream.
  const std::uint64_t snr_seed = derive_seed(plan.seed, {fnv1a64("snr")});
  const std::uint64_t probe_seed = derive_seed(plan.seed, {fnv1a64("probe")});
  parallel_for(curve.cells.size(), plan.jobs, [&](std::size_t i) {
    Cell& c = curve.cells[i];
    const auto& config = plan.capacities[c.capacity_index];
    auto hyper = plan.hyper;
    hyper.seed = derive_seed(c.seed, {fnv1a64("train")});
    hyper.steps = nanoformer::steps_for_epochs(plan.epochs, c.data_size, hyper);
    c.steps = hyper.steps;
    try {
      auto model = nanoformer::init_model(config, derive_seed(c.seed, {fnv1a64("init")}));
      c.parameter_count = model.parameter_count();
      auto trained = nanoformer::train(std::move(model), plan.source, c.data_size, hyper);
      c.final_loss = trained.final_loss;
      c.snr = estimate_signal_noise(trained.model, plan.source, plan.snr, snr_seed);
      c.accuracy = capability_probe(model_predictor(trained.model), plan.source, plan.eval_positions,
                                    static_cast<std::size_t>(hyper.seq_len), probe_seed);
      if (plan.dominance) c.dominance = taylor_dominance_diagnostic(trained.model, plan.source, plan.snr, snr_seed);
    } catch (const TrainingDivergenceError& e) {
      c.failed = true;
      c.failure = e.what();
    } catch (const EstimationError& e) {
      c.failed = true;
      c.failure = e.what();
    }
  });
  analyze_curve(curve);
  return curve;
}

void analyze_curve(EmergenceCurve& curve) {
  std::vector<double> ln_snr, snr, acc, dom, dsize;
  std::vector<std::size_t> caps;
  for (const auto& c : curve.cells) {
    if (c.failed || !(c.snr.snr > 0.0) || !std::isfinite(c.snr.snr)) continue;
    snr.push_back(c.snr.snr);
    ln_snr.push_back(std::log(c.snr.snr));
    acc.push_back(c.accuracy.accuracy);
    dsize.push_back(static_cast<double>(c.data_size));
    caps.push_back(c.parameter_count);
    if (c.dominance.available) dom.push_back(c.dominance.fraction);
  }
  curve.spearman = snr.size() >= 2 ? stats::spearman(snr, acc) : 0.0;
  SigmoidOptions opt;
  opt.min_asymptote = 0.0;
  opt.max_asymptote = 1.0;
  curve.sigmoid = fit_sigmoid(ln_snr, acc, opt);
  curve.threshold = detect_threshold(curve.sigmoid, curve.chance, curve.criterion, ln_snr);
  try {
    curve.scaling = snr_scaling_fit(caps, dsize, snr);
    curve.scaling_note.clear();
  } catch (const Error& e) {
    curve.scaling.reset();
    curve.scaling_note = e.what();
  }
  curve.dominance_accuracy_corr = dom.size() == acc.size() && dom.size() >= 2 ? stats::pearson(dom, acc) : 0.0;
  if (!std::isfinite(curve.dominance_accuracy_corr)) curve.dominance_accuracy_corr = 0.0;
}

}  // namespace scaling_lab::emergence
