#include "scaling_lab/biasvar.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "scaling_lab/errors.hpp"
#include "scaling_lab/parallel.hpp"
#include "scaling_lab/rng.hpp"

namespace scaling_lab::biasvar {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// Work item: capacity pi, data index di (== J for reference runs), seed s.
struct Job {
  std::size_t pi = 0;
  std::size_t di = 0;
  int s = 0;
  std::int64_t tokens = 0;
  Run* run = nullptr;
};

double sample_sd(const std::vector<double>& xs) { return xs.size() >= 2 ? std::sqrt(stats::variance(xs)) : 0.0; }

Direction classify(double rho) {
  if (rho <= -kTrendBand) return Direction::decreasing;
  if (rho >= kTrendBand) return Direction::increasing;
  return Direction::none;
}

}  // namespace

void BiasVarPlan::validate() const {
  if (capacities.size() < 2) throw PlanError("capacities: need at least 2 model configs");
  if (data_sizes.size() < 3) throw PlanError("data_sizes: need at least 3 values");
  for (std::size_t i = 1; i < data_sizes.size(); ++i) {
    if (data_sizes[i] <= data_sizes[i - 1]) throw PlanError("data_sizes: must be strictly increasing");
  }
  if (reference_size < 10 * data_sizes.back()) {
    throw PlanError("reference_size: must be at least 10 x the largest data size");
  }
  if (seeds < 3) throw PlanError("seeds: need at least 3");
  if (reference_seeds < 1) throw PlanError("reference_seeds: must be positive");
  if (!(epochs > 0.0)) throw PlanError("epochs: must be positive");
  if (eval_tokens < hyper.seq_len) throw PlanError("eval_tokens: smaller than one sequence");
  const auto batch_tokens = static_cast<std::int64_t>(hyper.batch_size) * hyper.seq_len;
  if (data_sizes.front() < batch_tokens) throw PlanError("data_sizes: smallest D is below one batch");
  std::size_t prev = 0;
  for (const auto& c : capacities) {
    c.validate();
    if (c.vocab_size != source.vocab_size()) throw PlanError("capacities: vocab_size must match the source");
    if (c.context_cap < hyper.seq_len) throw PlanError("capacities: context_cap below hyper.seq_len");
    const std::size_t p = nanoformer::init_model(c, 0).parameter_count();
    if (p <= prev) throw PlanError("capacities: parameter counts must increase");
    prev = p;
  }
}

std::uint64_t run_seed(std::uint64_t master, std::size_t capacity_index, std::size_t data_index, int seed_index) {
  return derive_seed(master, {fnv1a64("biasvar"), capacity_index, data_index, static_cast<std::uint64_t>(seed_index)});
}

BiasVarianceReport run_decomposition(const BiasVarPlan& plan) {
  plan.validate();
  BiasVarianceReport rep;
  rep.epsilon = sources::entropy_rate(plan.source);
  rep.reference_size = plan.reference_size;
  rep.eval_tokens = plan.eval_tokens;
  const std::size_t J = plan.data_sizes.size();

  rep.capacities.resize(plan.capacities.size());
  for (std::size_t pi = 0; pi < plan.capacities.size(); ++pi) {
    rep.capacities[pi].parameter_count = nanoformer::init_model(plan.capacities[pi], 0).parameter_count();
    rep.capacities[pi].reference_runs.resize(static_cast<std::size_t>(plan.reference_seeds));
    for (std::size_t di = 0; di < J; ++di) {
      Cell c;
      c.capacity_index = pi;
      c.data_size = plan.data_sizes[di];
      c.runs.resize(static_cast<std::size_t>(plan.seeds));
      rep.cells.push_back(std::move(c));
    }
  }
  std::vector<Job> jobs;
  for (std::size_t pi = 0; pi < plan.capacities.size(); ++pi) {
    for (int s = 0; s < plan.reference_seeds; ++s) {
      jobs.push_back({pi, J, s, plan.reference_size, &rep.capacities[pi].reference_runs[static_cast<std::size_t>(s)]});
    }
    for (std::size_t di = 0; di < J; ++di) {
      for (int s = 0; s < plan.seeds; ++s) {
        jobs.push_back({pi, di, s, plan.data_sizes[di], &rep.cells[pi * J + di].runs[static_cast<std::size_t>(s)]});
      }
    }
  }
  // Largest jobs first keeps the pool busy.
  std::stable_sort(jobs.begin(), jobs.end(), [](const Job& a, const Job& b) { return a.tokens > b.tokens; });

  const auto eval = nanoformer::materialize_dataset(plan.source, plan.eval_tokens, plan.hyper.seq_len,
                                                    derive_seed(plan.seed, {fnv1a64("eval")}));
  parallel_for(jobs.size(), plan.jobs, [&](std::size_t i) {
    const Job& job = jobs[i];
    Run& run = *job.run;
    run.seed_index = job.s;
    run.seed = run_seed(plan.seed, job.pi, job.di, job.s);
    auto hyper = plan.hyper;
    hyper.seed = derive_seed(run.seed, {fnv1a64("train")});
    hyper.steps = nanoformer::steps_for_epochs(plan.epochs, job.tokens, hyper);
    run.steps = hyper.steps;
    try {
      auto model = nanoformer::init_model(plan.capacities[job.pi], derive_seed(run.seed, {fnv1a64("init")}));
      const auto trained = nanoformer::train(std::move(model), plan.source, job.tokens, hyper);
      run.loss = nanoformer::next_token_loss(trained.model, eval);
      if (!std::isfinite(run.loss)) throw TrainingDivergenceError(hyper.steps, run.loss);
    } catch (const TrainingDivergenceError& e) {
      run.failed = true;
      run.failure = e.what();
      run.loss = kNaN;
    }
  });

  assemble(rep);
  if (5 * rep.failed_runs > rep.total_runs) {
    throw ExperimentError(std::to_string(rep.failed_runs) + " of " + std::to_string(rep.total_runs) +
                          " training runs failed (more than 20%)");
  }
  return rep;
}

void assemble(BiasVarianceReport& rep) {
  rep.total_runs = 0;
  rep.failed_runs = 0;
  rep.max_abs_residual = 0.0;
  rep.min_excess_loss = std::numeric_limits<double>::infinity();
  auto note_run = [&](const Run& r) {
    ++rep.total_runs;
    if (r.failed) {
      ++rep.failed_runs;
    } else {
      rep.min_excess_loss = std::min(rep.min_excess_loss, r.loss - rep.epsilon);
    }
  };
  for (auto& cap : rep.capacities) {
    std::vector<double> losses;
    for (const auto& r : cap.reference_runs) {
      note_run(r);
      if (!r.failed) losses.push_back(r.loss);
    }
    cap.approx_loss = losses.empty() ? kNaN : stats::mean(losses);
    cap.reference_seed_sd = sample_sd(losses);
    cap.bias = cap.approx_loss - rep.epsilon;
    for (auto& r : cap.reference_runs) {
      r.bias = cap.bias;
      r.variance = r.loss - cap.approx_loss;
      r.residual = r.failed ? kNaN : r.loss - (r.bias + r.variance + rep.epsilon);
    }
  }
  for (auto& cell : rep.cells) {
    const auto& cap = rep.capacities.at(cell.capacity_index);
    std::vector<double> losses;
    cell.failed_runs = 0;
    for (auto& r : cell.runs) {
      note_run(r);
      r.bias = cap.bias;
      if (r.failed) {
        ++cell.failed_runs;
        r.variance = kNaN;
        r.residual = kNaN;
        continue;
      }
      losses.push_back(r.loss);
      r.variance = r.loss - cap.approx_loss;
      r.residual = r.loss - (r.bias + r.variance + rep.epsilon);
      if (std::isfinite(r.residual)) rep.max_abs_residual = std::max(rep.max_abs_residual, std::abs(r.residual));
    }
    cell.usable = !losses.empty() && std::isfinite(cap.approx_loss);
    cell.mean_loss = losses.empty() ? kNaN : stats::mean(losses);
    cell.seed_sd = sample_sd(losses);
    cell.bias = cap.bias;
    cell.variance = cell.mean_loss - cap.approx_loss;
    cell.negative_variance = cell.usable && cell.variance < 0.0;
    cell.residual = cell.mean_loss - (cell.bias + cell.variance + rep.epsilon);
    if (cell.usable) rep.max_abs_residual = std::max(rep.max_abs_residual, std::abs(cell.residual));
  }
}

std::string to_string(Direction d) {
  switch (d) {
    case Direction::decreasing:
      return "decreasing";
    case Direction::increasing:
      return "increasing";
    case Direction::none:
      break;
  }
  return "no trend";
}

MonotonicityReport monotonicity_diagnostics(const BiasVarianceReport& report) {
  MonotonicityReport out;
  for (std::size_t pi = 0; pi < report.capacities.size(); ++pi) {
    std::vector<double> d, v;
    for (const auto& c : report.cells) {
      if (c.capacity_index != pi || !c.usable) continue;
      d.push_back(static_cast<double>(c.data_size));
      v.push_back(c.variance);
    }
    Trend t;
    t.subject = "V vs D at capacity " + std::to_string(pi);
    if (d.size() >= 2) t.spearman = stats::spearman(d, v);
    t.direction = classify(t.spearman);
    t.pass = t.direction == Direction::decreasing;
    out.variance_vs_data.push_back(t);
  }
  std::vector<double> p, b;
  for (const auto& cap : report.capacities) {
    if (!std::isfinite(cap.bias)) continue;
    p.push_back(static_cast<double>(cap.parameter_count));
    b.push_back(cap.bias);
  }
  out.bias_vs_capacity.subject = "B vs P";
  if (p.size() >= 2) out.bias_vs_capacity.spearman = stats::spearman(p, b);
  out.bias_vs_capacity.direction = classify(out.bias_vs_capacity.spearman);
  out.bias_vs_capacity.pass = out.bias_vs_capacity.direction != Direction::increasing;
  return out;
}

OrthogonalityReport orthogonality_diagnostics(const BiasVarianceReport& report, int bootstrap_reps,
                                              std::uint64_t seed) {
  OrthogonalityReport out;
  std::vector<double> b, v;
  for (const auto& c : report.cells) {
    if (!c.usable) continue;
    b.push_back(c.bias);
    v.push_back(c.variance);
  }
  out.cells = b.size();
  if (out.cells < 6) {
    out.note = "needs at least 6 usable cells";
    return out;
  }
  out.correlation = stats::pearson(b, v);
  out.explained = out.correlation * out.correlation;
  out.flagged = std::abs(out.correlation) > 0.5;
  out.ci = stats::bootstrap_ci(
      b.size(),
      [&](std::span<const std::size_t> idx) {
        std::vector<double> bb, vv;
        for (std::size_t i : idx) {
          bb.push_back(b[i]);
          vv.push_back(v[i]);
        }
        return stats::pearson(bb, vv);
      },
      0.95, bootstrap_reps, seed);
  out.ci.estimate = out.correlation;
  out.note = out.flagged ? "V tracks B; the split may not be orthogonal" : "low association between V and B";
  return out;
}

}  // namespace scaling_lab::biasvar
