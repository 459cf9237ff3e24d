#include "scaling_lab/cltlab.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include "scaling_lab/errors.hpp"
#include "scaling_lab/parallel.hpp"
#include "scaling_lab/rng.hpp"

namespace scaling_lab::cltlab {

using nanoformer::Model;

namespace {

std::uint64_t context_seed(std::uint64_t master, std::size_t n, int r) {
  return derive_seed(master, {fnv1a64("clt-context"), n, static_cast<std::uint64_t>(r)});
}

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(static_cast<Eigen::Index>(idx.size()), m.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = m.row(static_cast<Eigen::Index>(idx[i]));
  return out;
}

bool block_source(const sources::Source& s) {
  return s.kind() == sources::SourceKind::iid || s.kind() == sources::SourceKind::block_stationary;
}

// One Lilliefors null per sample size.
class NullCache {
 public:
  NullCache(int resamples, std::uint64_t seed) : resamples_(resamples), seed_(seed) {}
  const stats::LillieforsNull& get(std::size_t n) {
    auto it = cache_.find(n);
    if (it == cache_.end()) {
      it = cache_.emplace(n, stats::LillieforsNull(n, resamples_, derive_seed(seed_, {fnv1a64("lilliefors"), n}))).first;
    }
    return it->second;
  }

 private:
  int resamples_;
  std::uint64_t seed_;
  std::map<std::size_t, stats::LillieforsNull> cache_;
};

std::vector<double> layer_lipschitz(const CltPlan& plan, const Model& model, const std::vector<ContextSamples>& all) {
  std::vector<double> out;
  const auto layers = plan.measured_layers();
  for (std::size_t li = 0; li < layers.size(); ++li) {
    // Points are the pre-FFN vectors seen at the largest context.
    const Matrix& pts = all.back().pre_ffn[li];
    const Eigen::Index take = std::min<Eigen::Index>(pts.rows(), 256);
    out.push_back(nanoformer::ffn_lipschitz_estimate(model.params.layers[static_cast<std::size_t>(layers[li])],
                                                     model.config.ffn_activation, pts.topRows(take),
                                                     derive_seed(plan.seed, {fnv1a64("lipschitz"), li}), 2000));
  }
  return out;
}

NoiseScalingReport noise_from_samples(const CltPlan& plan, const std::vector<ContextSamples>& all) {
  NoiseScalingReport rep;
  const auto layers = plan.measured_layers();
  for (std::size_t li = 0; li < layers.size(); ++li) {
    LayerScaling ls;
    ls.layer = layers[li];
    std::vector<double> ns, vs, ses;
    for (std::size_t g = 0; g < all.size(); ++g) {
      const Matrix& x = all[g].repr[li];
      VariancePoint p;
      p.layer = layers[li];
      p.n = all[g].n;
      p.variance = stats::noise_variance(x);
      p.ci = stats::bootstrap_ci(
          static_cast<std::size_t>(x.rows()),
          [&](std::span<const std::size_t> idx) { return stats::noise_variance(gather_rows(x, idx)); }, 0.95,
          plan.bootstrap_reps, derive_seed(plan.seed, {fnv1a64("variance-ci"), li, g}));
      p.ci.estimate = p.variance;
      ns.push_back(static_cast<double>(p.n));
      vs.push_back(p.variance);
      ses.push_back(p.ci.std_error);
      rep.points.push_back(p);
    }
    for (std::size_t g = 1; g < vs.size(); ++g) {
      if (vs[g] - vs[g - 1] > 2.0 * std::hypot(ses[g], ses[g - 1])) ls.monotone = false;
    }
    try {
      ls.fit = stats::power_law_fit(ns, vs);
      // Joint bootstrap: resample every context size, refit.
      std::vector<double> draws;
      for (int b = 0; b < plan.bootstrap_reps; ++b) {
        std::vector<double> vb;
        for (std::size_t g = 0; g < all.size(); ++g) {
          const Matrix& x = all[g].repr[li];
          CounterRng rng(derive_seed(plan.seed, {fnv1a64("exponent-ci"), li, g, static_cast<std::uint64_t>(b)}));
          std::vector<std::size_t> idx(static_cast<std::size_t>(x.rows()));
          for (auto& i : idx) i = static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(x.rows())));
          vb.push_back(stats::noise_variance(gather_rows(x, idx)));
        }
        try {
          draws.push_back(stats::power_law_fit(ns, vb).exponent);
        } catch (const DomainError&) {
        }
      }
      std::sort(draws.begin(), draws.end());
      if (!draws.empty()) {
        ls.exponent_ci.lo = stats::quantile_sorted(draws, 0.025);
        ls.exponent_ci.hi = stats::quantile_sorted(draws, 0.975);
        ls.exponent_ci.estimate = ls.fit->exponent;
        ls.exponent_ci.std_error = std::sqrt(stats::variance(draws));
      }
    } catch (const DomainError&) {
      ls.note = "power-law fit undefined: some variance is zero";
    }
    rep.fits.push_back(ls);
  }
  return rep;
}

void add_gaussianity(const CltPlan& plan, const std::vector<ContextSamples>& all, NullCache& nulls,
                     std::vector<VariancePoint>& points) {
  const auto layers = plan.measured_layers();
  for (auto& p : points) {
    const auto li = static_cast<std::size_t>(std::find(layers.begin(), layers.end(), p.layer) - layers.begin());
    const auto g = static_cast<std::size_t>(
        std::find_if(all.begin(), all.end(), [&](const ContextSamples& s) { return s.n == p.n; }) - all.begin());
    const Matrix& x = all[g].repr[li];
    const auto summary = projection_ks(x, plan.projections, nulls.get(static_cast<std::size_t>(x.rows())), plan.alpha,
                                       derive_seed(plan.seed, {fnv1a64("projections"), li, p.n}));
    p.reject_frac = summary.reject_frac;
    p.projections_tested = summary.tested;
    p.projections_skipped = summary.skipped;
  }
}

std::vector<ContextSamples> collect_all(const CltPlan& plan, const Model& model) {
  std::vector<ContextSamples> all;
  for (std::size_t n : plan.contexts) all.push_back(collect_samples(plan, model, n));
  return all;
}

}  // namespace

void CltPlan::validate() const {
  model.validate();
  if (contexts.size() < 3) throw PlanError("contexts: need at least 3 context sizes (G >= 3)");
  for (std::size_t i = 1; i < contexts.size(); ++i) {
    if (contexts[i] <= contexts[i - 1]) throw PlanError("contexts: must be strictly increasing");
  }
  if (replicates < 32) throw PlanError("replicates: need R >= 32");
  if (block_width < 2) throw PlanError("block_width: need w >= 2");
  if (contexts.back() > static_cast<std::size_t>(model.context_cap)) {
    throw PlanError("model.context_cap: smaller than the largest context");
  }
  if (source.vocab_size() != model.vocab_size) throw PlanError("source: vocab_size differs from the model");
  if (bootstrap_reps < 200) throw PlanError("bootstrap_reps: need at least 200");
  if (projections < 1) throw PlanError("projections: must be positive");
  if (lilliefors_resamples < 2000) throw PlanError("lilliefors_resamples: need at least 2000");
  if (!(alpha > 0.0 && alpha < 1.0)) throw PlanError("alpha: must lie in (0, 1)");
  if (!(kappa > 0.0)) throw PlanError("kappa: must be positive");
  for (double e : epsilons) {
    if (!(e >= 0.0)) throw PlanError("epsilons: must be nonnegative");
  }
  for (int l : layers) {
    if (l < 0 || l >= model.num_layers) throw PlanError("layers: index out of range");
  }
  if (diagnostic_layer < 0 || diagnostic_layer >= model.num_layers) {
    throw PlanError("diagnostic_layer: index out of range");
  }
}

std::vector<int> CltPlan::measured_layers() const {
  if (!layers.empty()) return layers;
  std::vector<int> all(static_cast<std::size_t>(model.num_layers));
  for (int l = 0; l < model.num_layers; ++l) all[static_cast<std::size_t>(l)] = l;
  return all;
}

Model build_model(const CltPlan& plan) {
  Model m = nanoformer::init_model(plan.model, plan.model_seed);
  if (plan.uniform_attention) {
    for (auto& w : m.params.layers) w.wq.setZero();
  }
  return m;
}

ContextSamples collect_samples(const CltPlan& plan, const Model& model, std::size_t n) {
  ContextSamples s;
  s.n = n;
  s.layers = plan.measured_layers();
  const auto r_count = static_cast<Eigen::Index>(plan.replicates);
  const Eigen::Index d = model.config.model_dim;
  for (std::size_t i = 0; i < s.layers.size(); ++i) {
    s.repr.emplace_back(r_count, d);
    s.pre_ffn.emplace_back(r_count, d);
    s.ffn_out.emplace_back(r_count, d);
  }
  s.attention.resize(r_count, static_cast<Eigen::Index>(n));
  s.diagnostic_pre.resize(r_count, d);
  const std::size_t w = static_cast<std::size_t>(plan.block_width);
  const std::size_t blocks = std::max<std::size_t>(n / w, 1);
  s.block_sums.assign(static_cast<std::size_t>(r_count), Matrix::Zero(static_cast<Eigen::Index>(blocks), d));
  const auto diag = static_cast<std::size_t>(plan.diagnostic_layer);

  parallel_for(static_cast<std::size_t>(r_count), plan.jobs, [&](std::size_t r) {
    const auto seq = sources::sample_sequence(plan.source, n, context_seed(plan.seed, n, static_cast<int>(r)));
    const auto trace = nanoformer::forward_last(model, seq.tokens, true);
    const auto row = static_cast<Eigen::Index>(r);
    for (std::size_t i = 0; i < s.layers.size(); ++i) {
      const auto& lp = trace.layers[static_cast<std::size_t>(s.layers[i])];
      s.repr[i].row(row) = lp.repr.transpose();
      s.pre_ffn[i].row(row) = lp.pre_ffn.transpose();
      s.ffn_out[i].row(row) = lp.ffn_out.transpose();
    }
    const auto& dl = trace.layers[diag];
    s.attention.row(row) = dl.attention.transpose();
    s.diagnostic_pre.row(row) = dl.pre_ffn.transpose();
    Matrix& t = s.block_sums[r];
    for (std::size_t k = 0; k < n; ++k) {
      const std::size_t m = std::min(k / w, blocks - 1);
      t.row(static_cast<Eigen::Index>(m)) += dl.attention(static_cast<Eigen::Index>(k)) * dl.values.row(static_cast<Eigen::Index>(k));
    }
  });
  return s;
}

GaussianitySummary projection_ks(const Matrix& samples, int projections, const stats::LillieforsNull& null,
                                 double alpha, std::uint64_t seed) {
  GaussianitySummary out;
  const Eigen::Index r = samples.rows(), d = samples.cols();
  if (static_cast<std::size_t>(r) != null.sample_size()) throw UsageError("Lilliefors null sized for a different R");
  Matrix z = samples.rowwise() - samples.colwise().mean();
  for (Eigen::Index j = 0; j < d; ++j) {
    const double sd = std::sqrt(z.col(j).squaredNorm() / static_cast<double>(r - 1));
    const double scale = std::max(samples.col(j).cwiseAbs().maxCoeff(), 1.0);
    if (sd > 1e-12 * scale) {
      z.col(j) /= sd;
    } else {
      z.col(j).setZero();
    }
  }
  CounterRng rng(seed);
  int rejected = 0;
  std::vector<double> proj(static_cast<std::size_t>(r));
  for (int p = 0; p < projections; ++p) {
    Vector u(d);
    for (Eigen::Index j = 0; j < d; ++j) u(j) = rng.normal();
    u.normalize();
    const Vector y = z * u;
    const double sd = std::sqrt(y.squaredNorm() / static_cast<double>(r - 1));
    if (!(sd > 1e-9)) {
      ++out.skipped;
      continue;
    }
    std::copy(y.data(), y.data() + r, proj.begin());
    const auto res = stats::lilliefors_test(proj, null);
    ++out.tested;
    if (res.p_value < alpha) ++rejected;
  }
  out.reject_frac = out.tested > 0 ? static_cast<double>(rejected) / out.tested : 0.0;
  return out;
}

ConcentrationTable concentration_table(const Matrix& attention, const std::vector<double>& epsilons, double m_prime,
                                       double kappa) {
  ConcentrationTable t;
  const Eigen::Index r = attention.rows(), n = attention.cols();
  if (r < 2) throw InsufficientSamplesError("concentration needs at least 2 replicates");
  t.n = static_cast<std::size_t>(n);
  t.block_size = static_cast<double>(n);
  t.m_prime = m_prime;
  t.kappa = kappa;
  const Eigen::RowVectorXd mean = attention.colwise().mean();
  const Matrix dev = (attention.rowwise() - mean).cwiseAbs();
  for (double eps : epsilons) {
    ConcentrationRow row;
    row.epsilon = eps;
    std::vector<double> per(static_cast<std::size_t>(r));
    for (Eigen::Index i = 0; i < r; ++i) {
      per[static_cast<std::size_t>(i)] = static_cast<double>((dev.row(i).array() > eps).count()) / static_cast<double>(n);
    }
    row.empirical = stats::mean(per);
    row.std_error = std::sqrt(stats::variance(per) / static_cast<double>(r));
    row.bound = stats::hoeffding_tail(eps, t.block_size, m_prime, kappa);
    row.violated = row.empirical > row.bound + 3.0 * row.std_error;
    t.any_violation = t.any_violation || row.violated;
    t.rows.push_back(row);
  }
  return t;
}

BlockSumDiagnostic block_diagnostic(const ContextSamples& samples, int width, const stats::LillieforsNull& null,
                                    std::uint64_t seed) {
  BlockSumDiagnostic out;
  out.n = samples.n;
  out.width = width;
  const std::size_t r = samples.block_sums.size();
  if (r < 2) throw InsufficientSamplesError("block diagnostics need at least 2 replicates");
  const Eigen::Index m = samples.block_sums.front().rows(), d = samples.block_sums.front().cols();
  out.blocks = static_cast<int>(m);
  Matrix mean = Matrix::Zero(m, d);
  for (const auto& t : samples.block_sums) mean += t;
  mean /= static_cast<double>(r);
  const Vector mean_total = mean.colwise().sum().transpose();

  CounterRng rng(seed);
  Vector u(d);
  for (Eigen::Index j = 0; j < d; ++j) u(j) = rng.normal();
  u.normalize();

  std::size_t pass = 0;
  Matrix summary(static_cast<Eigen::Index>(r), m);  // u . S_m per replicate
  std::vector<double> totals(r);
  for (std::size_t i = 0; i < r; ++i) {
    const Matrix s = samples.block_sums[i] - mean;
    const Vector total = s.colwise().sum().transpose();
    const double err = (total + mean_total - samples.diagnostic_pre.row(static_cast<Eigen::Index>(i)).transpose())
                           .cwiseAbs()
                           .maxCoeff();
    out.max_reconstruction_error = std::max(out.max_reconstruction_error, err);
    pass += err < 1e-9;
    summary.row(static_cast<Eigen::Index>(i)) = (s * u).transpose();
    totals[i] = u.dot(total);
  }
  out.reconstruction_pass_frac = static_cast<double>(pass) / static_cast<double>(r);

  // Mean |corr| over block pairs of the projected block sums.
  const Matrix c = summary.rowwise() - summary.colwise().mean();
  const Eigen::RowVectorXd sd = c.colwise().norm();
  double acc = 0.0;
  std::size_t pairs = 0;
  for (Eigen::Index a = 0; a < m; ++a) {
    for (Eigen::Index b = a + 1; b < m; ++b) {
      if (sd(a) > 0.0 && sd(b) > 0.0) {
        acc += std::abs(c.col(a).dot(c.col(b)) / (sd(a) * sd(b)));
        ++pairs;
      }
    }
  }
  out.mean_abs_cross_corr = pairs > 0 ? acc / static_cast<double>(pairs) : 0.0;
  if (stats::variance(totals) > 0.0) out.normalized_total = stats::lilliefors_test(totals, null);
  return out;
}

std::vector<FfnMappingPoint> ffn_mapping(const ContextSamples& samples, const std::vector<double>& lipschitz,
                                         int bootstrap_reps, std::uint64_t seed) {
  if (lipschitz.size() != samples.layers.size()) throw UsageError("one Lipschitz estimate per measured layer");
  std::vector<FfnMappingPoint> out;
  for (std::size_t li = 0; li < samples.layers.size(); ++li) {
    FfnMappingPoint p;
    p.layer = samples.layers[li];
    p.n = samples.n;
    const Matrix& pre = samples.pre_ffn[li];
    const Matrix& post = samples.ffn_out[li];
    p.pre_variance = stats::noise_variance(pre);
    p.post_variance = stats::noise_variance(post);
    p.ratio = p.pre_variance > 0.0 ? p.post_variance / p.pre_variance : 0.0;
    const double l2 = lipschitz[li] * lipschitz[li];
    p.bound = l2;
    const auto ci = stats::bootstrap_ci(
        static_cast<std::size_t>(pre.rows()),
        [&](std::span<const std::size_t> idx) {
          return stats::noise_variance(gather_rows(post, idx)) - l2 * stats::noise_variance(gather_rows(pre, idx));
        },
        0.95, bootstrap_reps, derive_seed(seed, {li}));
    p.std_error = ci.std_error;
    p.holds = p.post_variance <= l2 * p.pre_variance + 3.0 * p.std_error;
    out.push_back(p);
  }
  return out;
}

NoiseScalingReport measure_representation_noise(const CltPlan& plan) {
  plan.validate();
  const Model model = build_model(plan);
  return noise_from_samples(plan, collect_all(plan, model));
}

std::vector<VariancePoint> gaussianity_sweep(const CltPlan& plan) {
  plan.validate();
  if (plan.replicates < 200) throw PlanError("replicates: Gaussianity tests need R >= 200");
  const Model model = build_model(plan);
  const auto all = collect_all(plan, model);
  std::vector<VariancePoint> points;
  for (int l : plan.measured_layers()) {
    for (const auto& s : all) {
      VariancePoint p;
      p.layer = l;
      p.n = s.n;
      points.push_back(p);
    }
  }
  NullCache nulls(plan.lilliefors_resamples, plan.seed);
  add_gaussianity(plan, all, nulls, points);
  return points;
}

std::vector<ConcentrationTable> attention_concentration(const CltPlan& plan) {
  plan.validate();
  if (!plan.model.enforce_bounds) throw PlanError("model.enforce_bounds: the bound's M' is undefined without caps");
  const Model model = build_model(plan);
  std::vector<ConcentrationTable> out;
  for (std::size_t n : plan.contexts) {
    const auto s = collect_samples(plan, model, n);
    out.push_back(concentration_table(s.attention, plan.epsilons, plan.model.logit_bound(), plan.kappa));
  }
  return out;
}

std::vector<BlockSumDiagnostic> block_sum_diagnostics(const CltPlan& plan) {
  plan.validate();
  if (!block_source(plan.source)) throw PlanError("source: block diagnostics need an iid or block-stationary source");
  if (plan.contexts.front() < 2 * static_cast<std::size_t>(plan.block_width)) {
    throw PlanError("contexts: every n must be at least 2 * block_width");
  }
  const Model model = build_model(plan);
  NullCache nulls(plan.lilliefors_resamples, plan.seed);
  std::vector<BlockSumDiagnostic> out;
  for (std::size_t n : plan.contexts) {
    const auto s = collect_samples(plan, model, n);
    out.push_back(block_diagnostic(s, plan.block_width, nulls.get(static_cast<std::size_t>(plan.replicates)),
                                   derive_seed(plan.seed, {fnv1a64("block-direction"), n})));
  }
  return out;
}

CltReport run_clt(const CltPlan& plan) {
  plan.validate();
  const Model model = build_model(plan);
  const auto all = collect_all(plan, model);
  CltReport rep;
  rep.logit_scale = nanoformer::to_string(plan.model.logit_scale);
  rep.uniform_attention = plan.uniform_attention;
  rep.noise = noise_from_samples(plan, all);
  NullCache nulls(plan.lilliefors_resamples, plan.seed);
  if (plan.replicates >= 200) {
    add_gaussianity(plan, all, nulls, rep.noise.points);
  } else {
    for (auto& p : rep.noise.points) p.reject_frac = std::nan("");
  }

  if (plan.model.enforce_bounds) {
    for (const auto& s : all) {
      rep.concentration.push_back(concentration_table(s.attention, plan.epsilons, plan.model.logit_bound(), plan.kappa));
    }
  } else {
    rep.concentration_note = "skipped: bounds are not enforced, so M' is undefined";
  }

  if (block_source(plan.source)) {
    for (const auto& s : all) {
      if (s.n < 2 * static_cast<std::size_t>(plan.block_width)) continue;
      rep.blocks.push_back(block_diagnostic(s, plan.block_width, nulls.get(static_cast<std::size_t>(plan.replicates)),
                                            derive_seed(plan.seed, {fnv1a64("block-direction"), s.n})));
    }
  } else {
    rep.block_note = "skipped: source is neither iid nor block-stationary";
  }

  rep.lipschitz = layer_lipschitz(plan, model, all);
  for (const auto& s : all) {
    for (auto& p : ffn_mapping(s, rep.lipschitz, plan.bootstrap_reps, derive_seed(plan.seed, {fnv1a64("ffn"), s.n}))) {
      rep.ffn_all_hold = rep.ffn_all_hold && p.holds;
      rep.ffn.push_back(p);
    }
  }
  std::vector<sources::TokenSequence> batch;
  for (int i = 0; i < 4; ++i) {
    batch.push_back(sources::sample_sequence(plan.source, std::min<std::size_t>(plan.contexts.front(), 256),
                                             derive_seed(plan.seed, {fnv1a64("assumptions"), static_cast<std::uint64_t>(i)})));
  }
  rep.assumptions = nanoformer::check_assumptions(model, batch, derive_seed(plan.seed, {fnv1a64("assumptions")}));
  return rep;
}

}  // namespace scaling_lab::cltlab
