#include "doctest.h"

#include <cmath>
#include <vector>

#include "scaling_lab/biasvar.hpp"
#include "scaling_lab/errors.hpp"

using namespace scaling_lab;
using namespace scaling_lab::biasvar;
using sources::Source;

namespace {

// Synthetic report: capacities with the given biases, cells over `ds`, one
// run per seed whose loss is eps + B + v(P, D).
template <class F>
BiasVarianceReport synthetic(double eps, const std::vector<double>& biases, const std::vector<std::int64_t>& ds,
                             F&& v) {
  BiasVarianceReport rep;
  rep.epsilon = eps;
  for (std::size_t pi = 0; pi < biases.size(); ++pi) {
    CapacityResult cap;
    cap.parameter_count = 100 * (pi + 1);
    Run ref;
    ref.loss = eps + biases[pi];
    cap.reference_runs = {ref};
    rep.capacities.push_back(cap);
    for (auto d : ds) {
      Cell c;
      c.capacity_index = pi;
      c.data_size = d;
      for (int s = 0; s < 3; ++s) {
        Run r;
        r.seed_index = s;
        r.loss = eps + biases[pi] + v(pi, d);
        c.runs.push_back(r);
      }
      rep.cells.push_back(c);
    }
  }
  assemble(rep);
  return rep;
}

nanoformer::ModelConfig tiny(int vocab, int d) {
  nanoformer::ModelConfig c;
  c.vocab_size = vocab;
  c.model_dim = d;
  c.key_dim = d;
  c.ffn_hidden_dim = 2 * d;
  c.context_cap = 64;
  return c;
}

BiasVarPlan small_plan() {
  BiasVarPlan p;
  p.capacities = {tiny(2, 2), tiny(2, 4)};
  p.data_sizes = {512, 1024, 2048};
  p.reference_size = 20480;
  p.seeds = 3;
  p.hyper.learning_rate = 0.1;
  p.eval_tokens = 20000;
  p.seed = 4;
  return p;
}

}  // namespace

TEST_CASE("the split reconstructs every loss") {
  const auto rep = synthetic(0.5, {0.3, 0.1, 0.05}, {100, 200, 400},
                             [](std::size_t pi, std::int64_t d) { return 7.0 / static_cast<double>(d) + 0.01 * pi; });
  CHECK(rep.max_abs_residual < 1e-12);
  for (const auto& c : rep.cells) {
    CHECK(std::abs(c.mean_loss - (c.bias + c.variance + rep.epsilon)) < 1e-12);
    CHECK(c.variance == doctest::Approx(7.0 / static_cast<double>(c.data_size) + 0.01 * c.capacity_index));
    CHECK_FALSE(c.negative_variance);
  }
  CHECK(rep.capacities[0].bias == doctest::Approx(0.3));
  CHECK(rep.total_runs == 3 + 27);
  CHECK(rep.failed_runs == 0);
}

TEST_CASE("reference runs have zero variance by definition") {
  auto rep = synthetic(0.2, {0.1, 0.0}, {10, 20, 40}, [](std::size_t, std::int64_t) { return 0.0; });
  Run extra;
  extra.loss = 0.31;
  rep.capacities[0].reference_runs.push_back(extra);
  rep.capacities[0].reference_runs[0].loss = 0.29;
  assemble(rep);
  double sum = 0.0;
  for (const auto& r : rep.capacities[0].reference_runs) sum += r.variance;
  CHECK(std::abs(sum) < 1e-15);
  CHECK(rep.capacities[0].approx_loss == doctest::Approx(0.30));
  CHECK(rep.capacities[0].reference_seed_sd > 0.0);
}

TEST_CASE("negative variance is kept and flagged") {
  const auto rep = synthetic(0.2, {0.1, 0.05}, {10, 20, 40},
                             [](std::size_t, std::int64_t d) { return d == 40 ? -0.01 : 0.02; });
  for (const auto& c : rep.cells) {
    CHECK(c.negative_variance == (c.data_size == 40));
    if (c.data_size == 40) CHECK(c.variance == doctest::Approx(-0.01));
  }
}

TEST_CASE("failed runs are excluded and counted") {
  auto rep = synthetic(0.2, {0.1, 0.05}, {10, 20, 40}, [](std::size_t, std::int64_t) { return 0.01; });
  rep.cells[0].runs[1].failed = true;
  rep.cells[0].runs[1].loss = std::nan("");
  rep.capacities[1].reference_runs[0].failed = true;
  assemble(rep);
  CHECK(rep.failed_runs == 2);
  CHECK(rep.cells[0].failed_runs == 1);
  CHECK(rep.cells[0].usable);
  CHECK(rep.cells[0].variance == doctest::Approx(0.01));
  // Without a reference model a capacity has no bias and its cells drop out.
  CHECK(std::isnan(rep.capacities[1].bias));
  CHECK_FALSE(rep.cells[3].usable);
  CHECK(std::isfinite(rep.max_abs_residual));
}

TEST_CASE("monotonicity diagnostics") {
  SUBCASE("V proportional to 1/D") {
    const auto rep = synthetic(0.3, {0.2, 0.1, 0.0}, {100, 200, 400, 800},
                               [](std::size_t, std::int64_t d) { return 5.0 / static_cast<double>(d); });
    const auto m = monotonicity_diagnostics(rep);
    REQUIRE(m.variance_vs_data.size() == 3);
    for (const auto& t : m.variance_vs_data) {
      CHECK(t.spearman == doctest::Approx(-1.0));
      CHECK(t.direction == Direction::decreasing);
      CHECK(t.pass);
    }
    CHECK(m.bias_vs_capacity.spearman == doctest::Approx(-1.0));
    CHECK(m.bias_vs_capacity.pass);
  }
  SUBCASE("constant bias reads as no trend") {
    const auto rep = synthetic(0.3, {0.1, 0.1, 0.1}, {100, 200, 400},
                               [](std::size_t, std::int64_t d) { return 1.0 / static_cast<double>(d); });
    const auto m = monotonicity_diagnostics(rep);
    CHECK(m.bias_vs_capacity.spearman == 0.0);
    CHECK(m.bias_vs_capacity.direction == Direction::none);
    CHECK(to_string(m.bias_vs_capacity.direction) == "no trend");
  }
  SUBCASE("rising variance fails") {
    const auto rep = synthetic(0.3, {0.1, 0.0}, {100, 200, 400},
                               [](std::size_t, std::int64_t d) { return 1e-4 * static_cast<double>(d); });
    for (const auto& t : monotonicity_diagnostics(rep).variance_vs_data) {
      CHECK(t.direction == Direction::increasing);
      CHECK_FALSE(t.pass);
    }
  }
}

TEST_CASE("orthogonality diagnostics") {
  SUBCASE("V independent of P") {
    const auto rep = synthetic(0.3, {0.3, 0.1, 0.0}, {100, 200, 400},
                               [](std::size_t, std::int64_t d) { return 5.0 / static_cast<double>(d); });
    const auto o = orthogonality_diagnostics(rep, 500, 1);
    CHECK(o.cells == 9);
    CHECK(std::abs(o.correlation) < 1e-12);
    CHECK_FALSE(o.flagged);
    CHECK(o.ci.lo <= 0.0);
    CHECK(o.ci.hi >= 0.0);
  }
  SUBCASE("V equal to B") {
    const std::vector<double> b = {0.3, 0.1, 0.0};
    const auto rep = synthetic(0.3, b, {100, 200, 400}, [&](std::size_t pi, std::int64_t) { return b[pi]; });
    const auto o = orthogonality_diagnostics(rep, 500, 1);
    CHECK(o.correlation == doctest::Approx(1.0));
    CHECK(o.explained == doctest::Approx(1.0));
    CHECK(o.flagged);
  }
  SUBCASE("too few cells") {
    const auto rep = synthetic(0.3, {0.3}, {100, 200, 400}, [](std::size_t, std::int64_t) { return 0.0; });
    const auto o = orthogonality_diagnostics(rep, 500, 1);
    CHECK(o.cells == 3);
    CHECK_FALSE(o.note.empty());
  }
}

TEST_CASE("plan validation") {
  auto p = small_plan();
  CHECK_NOTHROW(p.validate());
  p.reference_size = 10000;
  CHECK_THROWS_WITH_AS(p.validate(), doctest::Contains("reference_size"), PlanError);
  p = small_plan();
  p.seeds = 2;
  CHECK_THROWS_WITH_AS(p.validate(), doctest::Contains("seeds"), PlanError);
  p = small_plan();
  p.data_sizes = {512, 1024};
  CHECK_THROWS_AS(p.validate(), PlanError);
  p = small_plan();
  p.capacities = {tiny(2, 4), tiny(2, 2)};
  CHECK_THROWS_WITH_AS(p.validate(), doctest::Contains("parameter counts"), PlanError);
  p = small_plan();
  p.capacities = {tiny(3, 2), tiny(3, 4)};
  CHECK_THROWS_AS(p.validate(), PlanError);
}

TEST_CASE("a small real grid") {
  const auto p = small_plan();
  const auto rep = run_decomposition(p);
  CHECK(rep.epsilon == doctest::Approx(sources::entropy_rate(p.source)));
  CHECK(rep.failed_runs == 0);
  CHECK(rep.total_runs == 2 * 1 + 2 * 3 * 3);
  CHECK(rep.max_abs_residual < 1e-12);
  CHECK(rep.min_excess_loss >= -0.02);
  for (const auto& cap : rep.capacities) CHECK(cap.bias >= -0.02);
  for (const auto& c : rep.cells) {
    for (const auto& r : c.runs) {
      CHECK(r.seed == run_seed(p.seed, c.capacity_index, static_cast<std::size_t>(&c - rep.cells.data()) % 3,
                               r.seed_index));
    }
  }
  // Same plan, more threads, same numbers.
  auto q = p;
  q.jobs = 3;
  const auto again = run_decomposition(q);
  for (std::size_t i = 0; i < rep.cells.size(); ++i) {
    for (std::size_t s = 0; s < rep.cells[i].runs.size(); ++s) {
      CHECK(rep.cells[i].runs[s].loss == again.cells[i].runs[s].loss);
    }
  }
}

TEST_CASE("a representable iid law has no bias") {
  // The output bias alone can express any iid law.
  BiasVarPlan p = small_plan();
  p.source = Source::iid({0.7, 0.2, 0.1});
  p.capacities = {tiny(3, 2), tiny(3, 4)};
  p.reference_size = 1 << 16;
  p.hyper.learning_rate = 0.3;
  const auto rep = run_decomposition(p);
  for (const auto& cap : rep.capacities) CHECK(std::abs(cap.bias) < 0.02);
}

TEST_CASE("too many diverged runs abort the experiment") {
  BiasVarPlan p = small_plan();
  p.hyper.learning_rate = 1e12;
  CHECK_THROWS_AS(run_decomposition(p), ExperimentError);
}
