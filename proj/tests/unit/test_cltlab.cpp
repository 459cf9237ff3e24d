#include "doctest.h"

#include <cmath>
#include <vector>

#include "scaling_lab/cltlab.hpp"
#include "scaling_lab/errors.hpp"
#include "scaling_lab/rng.hpp"

using namespace scaling_lab;
using namespace scaling_lab::cltlab;
using sources::Source;

namespace {

CltPlan reference_plan() {
  CltPlan p;
  p.model.vocab_size = 32;
  p.model.model_dim = 16;
  p.model.key_dim = 16;
  p.model.ffn_hidden_dim = 32;
  p.model.context_cap = 2048;
  p.model.enforce_bounds = true;
  p.model_seed = 11;
  p.seed = 12;
  p.uniform_attention = true;
  p.source = Source::uniform(32);
  p.contexts = {64, 128, 256, 512, 1024, 2048};
  p.replicates = 256;
  p.bootstrap_reps = 200;
  return p;
}

Matrix gaussian_matrix(Eigen::Index r, Eigen::Index d, std::uint64_t seed) {
  CounterRng rng(seed);
  Matrix x(r, d);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = rng.normal();
  return x;
}

}  // namespace

TEST_CASE("uniform attention on an iid source gives a 1/n variance law") {
  const auto rep = measure_representation_noise(reference_plan());
  REQUIRE(rep.fits.size() == 1);
  REQUIRE(rep.fits[0].fit.has_value());
  const auto& fit = *rep.fits[0].fit;
  CHECK(fit.exponent >= -1.25);
  CHECK(fit.exponent <= -0.75);
  CHECK(fit.r_squared >= 0.95);
  CHECK(rep.fits[0].exponent_ci.lo <= fit.exponent);
  CHECK(rep.fits[0].exponent_ci.hi >= fit.exponent);
  CHECK(rep.fits[0].monotone);
  for (const auto& p : rep.points) {
    CHECK(p.variance >= 0.0);
    CHECK(p.ci.lo <= p.variance);
    CHECK(p.ci.hi >= p.variance);
  }
}

TEST_CASE("a constant source has zero noise and no fit") {
  CltPlan p = reference_plan();
  std::vector<double> probs(32, 0.0);
  probs[3] = 1.0;
  p.source = Source::iid(probs);
  p.uniform_attention = false;
  p.contexts = {64, 128, 256};
  p.replicates = 32;
  const auto rep = measure_representation_noise(p);
  for (const auto& pt : rep.points) CHECK(pt.variance == 0.0);
  CHECK_FALSE(rep.fits[0].fit.has_value());
  CHECK_FALSE(rep.fits[0].note.empty());
}

TEST_CASE("doubling R keeps the variance within two bootstrap errors") {
  CltPlan p = reference_plan();
  p.contexts = {64, 256, 1024};
  const auto small = measure_representation_noise(p);
  p.replicates *= 2;
  const auto big = measure_representation_noise(p);
  for (std::size_t i = 0; i < small.points.size(); ++i) {
    const double se = std::hypot(small.points[i].ci.std_error, big.points[i].ci.std_error);
    CHECK(std::abs(small.points[i].variance - big.points[i].variance) < 2.0 * se);
  }
}

TEST_CASE("replicate contexts do not depend on R or jobs") {
  CltPlan p = reference_plan();
  p.replicates = 40;
  const auto model = build_model(p);
  const auto a = collect_samples(p, model, 64);
  p.replicates = 80;
  p.jobs = 3;
  const auto b = collect_samples(p, model, 64);
  CHECK(a.repr[0] == b.repr[0].topRows(40));
  CHECK(a.attention == b.attention.topRows(40));
}

TEST_CASE("projection tests are calibrated on Gaussian data and reject two-point data") {
  const stats::LillieforsNull null(500, 2000, 3);
  const auto g = projection_ks(gaussian_matrix(500, 16, 21), 50, null, 0.01, 22);
  CHECK(g.tested == 50);
  CHECK(g.reject_frac <= 0.03);

  CounterRng rng(23);
  Matrix two(500, 16);
  const Vector a = gaussian_matrix(1, 16, 24).row(0).transpose();
  const Vector b = gaussian_matrix(1, 16, 25).row(0).transpose();
  for (Eigen::Index i = 0; i < 500; ++i) two.row(i) = (rng.uniform() < 0.5 ? a : b).transpose();
  CHECK(projection_ks(two, 50, null, 0.01, 26).reject_frac >= 0.9);
}

TEST_CASE("projections along constant coordinates are skipped") {
  const stats::LillieforsNull null(200, 2000, 3);
  Matrix x = Matrix::Constant(200, 4, 1.5);
  const auto g = projection_ks(x, 10, null, 0.01, 1);
  CHECK(g.tested == 0);
  CHECK(g.skipped == 10);
  CHECK(g.reject_frac == 0.0);
  CHECK_THROWS_AS(projection_ks(gaussian_matrix(100, 4, 1), 10, null, 0.01, 1), UsageError);
}

TEST_CASE("gaussianity does not get worse with context size") {
  CltPlan p = reference_plan();
  p.replicates = 500;
  p.contexts = {64, 512, 2048};
  const auto pts = gaussianity_sweep(p);
  REQUIRE(pts.size() == 3);
  for (const auto& v : pts) {
    CHECK(v.reject_frac >= 0.0);
    CHECK(v.reject_frac <= 1.0);
  }
  CHECK(pts.back().reject_frac <= pts.front().reject_frac + 0.1);
  p.replicates = 100;
  CHECK_THROWS_AS(gaussianity_sweep(p), PlanError);
}

TEST_CASE("attention tails") {
  SUBCASE("a single key has weight exactly one") {
    const Matrix att = Matrix::Ones(50, 1);
    const auto t = concentration_table(att, {0.0, 0.05, 0.5}, 1.0, 1.0);
    for (const auto& r : t.rows) CHECK(r.empirical == 0.0);
    CHECK_FALSE(t.any_violation);
  }
  SUBCASE("uniform attention has no spread") {
    CltPlan p = reference_plan();
    p.contexts = {8, 32, 128};
    p.replicates = 64;
    for (const auto& t : attention_concentration(p)) {
      for (const auto& r : t.rows) CHECK(r.empirical == 0.0);
    }
  }
  SUBCASE("a random bounded model stays under the bound") {
    CltPlan p = reference_plan();
    p.uniform_attention = false;
    p.model.cap_q = 2.0;
    p.model.cap_k = 2.0;
    p.contexts = {4, 16, 64, 256};
    p.replicates = 2000;
    for (const auto& t : attention_concentration(p)) {
      CHECK(t.m_prime == doctest::Approx(p.model.logit_bound()));
      CHECK(t.rows.size() == 10);
      CHECK_FALSE(t.any_violation);
    }
  }
  SUBCASE("the bound needs enforced caps") {
    CltPlan p = reference_plan();
    p.model.enforce_bounds = false;
    CHECK_THROWS_AS(attention_concentration(p), PlanError);
  }
}

TEST_CASE("tail frequencies and standard errors on a hand table") {
  Matrix att(2, 2);
  att << 0.9, 0.1,
         0.5, 0.5;
  // Column means 0.7 and 0.3, every deviation is 0.2.
  const auto t = concentration_table(att, {0.1, 0.3}, 1.0, 1.0);
  CHECK(t.rows[0].empirical == doctest::Approx(1.0));
  CHECK(t.rows[0].std_error == doctest::Approx(0.0));
  CHECK(t.rows[1].empirical == 0.0);
  CHECK(t.rows[0].bound == doctest::Approx(stats::hoeffding_tail(0.1, 2.0, 1.0, 1.0)));
  // With w = 2 the bound is 1, which no frequency can exceed.
  CHECK(t.rows[0].bound == 1.0);
  CHECK_FALSE(t.any_violation);
}

TEST_CASE("block sums reconstruct the attention output") {
  CltPlan p = reference_plan();
  p.replicates = 500;
  p.contexts = {256, 512, 1024};
  const auto diags = block_sum_diagnostics(p);
  REQUIRE(diags.size() == 3);
  for (const auto& d : diags) {
    CHECK(d.max_reconstruction_error < 1e-9);
    CHECK(d.reconstruction_pass_frac == 1.0);
    CHECK(d.blocks == static_cast<int>(d.n / 16));
  }
  CHECK(diags[1].mean_abs_cross_corr < 0.1);
  CHECK(diags[2].normalized_total.p_value > 0.01);
}

TEST_CASE("block diagnostics with a ragged last block and with trained-style attention") {
  CltPlan p = reference_plan();
  p.uniform_attention = false;
  p.replicates = 40;
  p.contexts = {40, 50, 70};
  const auto model = build_model(p);
  const auto s = collect_samples(p, model, 70);
  CHECK(s.block_sums[0].rows() == 4);
  const stats::LillieforsNull null(40, 2000, 1);
  const auto d = block_diagnostic(s, 16, null, 5);
  CHECK(d.max_reconstruction_error < 1e-9);
}

TEST_CASE("block diagnostics preconditions") {
  CltPlan p = reference_plan();
  p.contexts = {16, 64, 128};
  CHECK_THROWS_AS(block_sum_diagnostics(p), PlanError);
  p.contexts = {64, 128, 256};
  p.source = Source::markov({{0.9, 0.1}, {0.1, 0.9}});
  p.model.vocab_size = 2;
  CHECK_THROWS_AS(block_sum_diagnostics(p), PlanError);
}

TEST_CASE("FFN variance mapping") {
  CltPlan p = reference_plan();
  p.contexts = {64, 128, 256};
  p.replicates = 200;
  auto model = build_model(p);
  SUBCASE("identity-like ratio with a linear FFN of norm one") {
    // hardtanh is the identity on small inputs; W2 W1 = I makes FFN(u) = u.
    model.config.ffn_activation = nanoformer::Activation::hardtanh;
    auto& w = model.params.layers[0];
    w.w1.setZero();
    w.w2.setZero();
    w.b1.setZero();
    w.b2.setZero();
    for (int i = 0; i < 16; ++i) {
      w.w1(i, i) = 1.0;
      w.w2(i, i) = 1.0;
    }
    CltPlan q = p;
    q.model = model.config;
    const auto s = collect_samples(q, model, 128);
    const auto pts = ffn_mapping(s, {1.0}, 200, 3);
    REQUIRE(pts.size() == 1);
    CHECK(pts[0].ratio == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(pts[0].holds);
  }
  SUBCASE("a half-norm linear map cuts the variance by at least four") {
    model.config.ffn_activation = nanoformer::Activation::hardtanh;
    auto& w = model.params.layers[0];
    w.w1.setZero();
    w.w2.setZero();
    w.b1.setZero();
    w.b2.setZero();
    for (int i = 0; i < 16; ++i) {
      w.w1(i, i) = 0.5;
      w.w2(i, i) = (i % 2 == 0) ? 1.0 : 0.5;
    }
    CltPlan q = p;
    q.model = model.config;
    const auto s = collect_samples(q, model, 128);
    const auto pts = ffn_mapping(s, {0.5}, 200, 3);
    CHECK(pts[0].ratio <= 0.25 + 1e-12);
    CHECK(pts[0].holds);
  }
  SUBCASE("one Lipschitz value per layer") {
    const auto s = collect_samples(p, model, 64);
    CHECK_THROWS_AS(ffn_mapping(s, {}, 200, 3), UsageError);
  }
}

TEST_CASE("plan validation names the field") {
  CltPlan p = reference_plan();
  p.contexts = {64, 128};
  CHECK_THROWS_WITH_AS(p.validate(), doctest::Contains("contexts"), PlanError);
  p = reference_plan();
  p.contexts = {64, 64, 128};
  CHECK_THROWS_AS(p.validate(), PlanError);
  p = reference_plan();
  p.replicates = 16;
  CHECK_THROWS_WITH_AS(p.validate(), doctest::Contains("replicates"), PlanError);
  p = reference_plan();
  p.contexts = {64, 128, 4096};
  CHECK_THROWS_WITH_AS(p.validate(), doctest::Contains("context_cap"), PlanError);
  p = reference_plan();
  p.source = Source::uniform(8);
  CHECK_THROWS_AS(p.validate(), PlanError);
}

TEST_CASE("the combined run fills every section") {
  CltPlan p = reference_plan();
  p.contexts = {64, 128, 256};
  p.replicates = 200;
  const auto rep = run_clt(p);
  CHECK(rep.noise.points.size() == 3);
  CHECK(rep.concentration.size() == 3);
  CHECK(rep.blocks.size() == 3);
  CHECK(rep.lipschitz.size() == 1);
  CHECK(rep.ffn.size() == 3);
  CHECK(rep.assumptions.bounds_hold);
  CHECK(rep.uniform_attention);
}
