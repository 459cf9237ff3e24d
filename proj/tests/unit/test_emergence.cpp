#include "doctest.h"

#include <cmath>
#include <vector>

#include "scaling_lab/emergence.hpp"
#include "scaling_lab/errors.hpp"
#include "scaling_lab/rng.hpp"

using namespace scaling_lab;
using namespace scaling_lab::emergence;
using sources::Source;

namespace {

Matrix gaussian_matrix(Eigen::Index r, Eigen::Index d, std::uint64_t seed, double sd = 1.0) {
  CounterRng rng(seed);
  Matrix x(r, d);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = sd * rng.normal();
  return x;
}

std::vector<int> cyclic_labels(std::size_t n, int classes) {
  std::vector<int> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i % static_cast<std::size_t>(classes));
  return y;
}

// Random orthogonal matrix from a QR factorisation.
Matrix random_rotation(Eigen::Index d, std::uint64_t seed) {
  const Eigen::HouseholderQR<Matrix> qr(gaussian_matrix(d, d, seed));
  return qr.householderQ();
}

nanoformer::ModelConfig copy_config() {
  nanoformer::ModelConfig c;
  c.vocab_size = 4;
  c.model_dim = 8;
  c.key_dim = 8;
  c.ffn_hidden_dim = 16;
  c.context_cap = 64;
  return c;
}

}  // namespace

TEST_CASE("signal and noise powers") {
  SUBCASE("no within-class spread leaves SNR undefined") {
    Matrix x(40, 3);
    const auto y = cyclic_labels(40, 4);
    for (Eigen::Index i = 0; i < 40; ++i) x.row(i) = Eigen::RowVector3d::Constant(static_cast<double>(y[static_cast<std::size_t>(i)]));
    CHECK_THROWS_AS(snr_from_samples(x, y, 4, 0, 1), EstimationError);
  }
  SUBCASE("injected signal 4 and noise 2 give SNR 2") {
    // Two balanced classes at +-2 e1, each with residuals +-sqrt(2) e2.
    Matrix x(40, 2);
    std::vector<int> y(40);
    for (Eigen::Index i = 0; i < 40; ++i) {
      const int c = static_cast<int>(i % 2);
      const double noise = ((i / 2) % 2 == 0 ? 1.0 : -1.0) * std::sqrt(2.0);
      x(i, 0) = c == 0 ? 2.0 : -2.0;
      x(i, 1) = noise;
      y[static_cast<std::size_t>(i)] = c;
    }
    const auto est = snr_from_samples(x, y, 2, 0, 1);
    CHECK(est.signal_power == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(est.noise_power == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(est.snr == doctest::Approx(2.0).epsilon(1e-12));
  }
  SUBCASE("class-independent noise gives SNR near zero") {
    const auto x = gaussian_matrix(500, 16, 3);
    const auto y = cyclic_labels(500, 4);
    CHECK(snr_from_samples(x, y, 4, 0, 1).snr < 0.05);
  }
  SUBCASE("sparse classes are dropped") {
    auto y = cyclic_labels(60, 3);
    y[0] = 3;  // a single sample of class 3
    const auto est = snr_from_samples(gaussian_matrix(60, 4, 4), y, 4, 0, 1);
    REQUIRE(est.dropped_classes.size() == 1);
    CHECK(est.dropped_classes[0] == 3);
    CHECK(est.class_counts[3] == 0);
    CHECK_THROWS_AS(snr_from_samples(gaussian_matrix(5, 4, 4), cyclic_labels(5, 2), 2, 0, 1), EstimationError);
  }
  SUBCASE("bootstrap interval brackets the estimate") {
    Matrix x = gaussian_matrix(400, 8, 5);
    const auto y = cyclic_labels(400, 4);
    for (Eigen::Index i = 0; i < 400; ++i) x(i, y[static_cast<std::size_t>(i)]) += 1.0;
    const auto est = snr_from_samples(x, y, 4, 300, 6);
    CHECK(est.ci.lo <= est.snr);
    CHECK(est.ci.hi >= est.snr);
    CHECK(est.ci.std_error > 0.0);
  }
}

TEST_CASE("SNR invariances") {
  Matrix x = gaussian_matrix(300, 6, 7);
  const auto y = cyclic_labels(300, 3);
  for (Eigen::Index i = 0; i < 300; ++i) x(i, y[static_cast<std::size_t>(i)]) += 1.5;
  const double base = snr_from_samples(x, y, 3, 0, 1).snr;

  const Matrix rotated = x * random_rotation(6, 8);
  CHECK(snr_from_samples(rotated, y, 3, 0, 1).snr == doctest::Approx(base).epsilon(1e-10));

  const Matrix scaled = 3.7 * x;
  CHECK(snr_from_samples(scaled, y, 3, 0, 1).snr == doctest::Approx(base).epsilon(1e-10));

  const Matrix shifted = x.rowwise() + Eigen::RowVectorXd::Constant(6, -4.0);
  CHECK(snr_from_samples(shifted, y, 3, 0, 1).snr == doctest::Approx(base).epsilon(1e-10));

  // Relabelling classes by a permutation changes nothing.
  std::vector<int> perm = {2, 0, 1}, relabelled(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) relabelled[i] = perm[static_cast<std::size_t>(y[i])];
  CHECK(snr_from_samples(x, relabelled, 3, 0, 1).snr == doctest::Approx(base).epsilon(1e-12));

  const Matrix noisier = x + gaussian_matrix(300, 6, 9);
  CHECK(snr_from_samples(noisier, y, 3, 0, 1).snr < base);
}

TEST_CASE("estimate_signal_noise on a model") {
  const auto src = Source::planted_copy(1, 0.5, {0.25, 0.25, 0.25, 0.25});
  const auto model = nanoformer::init_model(copy_config(), 2);
  SnrOptions opt;
  opt.per_class = 60;
  opt.bootstrap_reps = 0;
  const auto a = estimate_signal_noise(model, src, opt, 5);
  const auto b = estimate_signal_noise(model, src, opt, 5);
  CHECK(a.snr == b.snr);
  for (auto n : a.class_counts) CHECK(n == 60);
  CHECK_THROWS_AS(estimate_signal_noise(model, Source::uniform(4), opt, 5), UsageError);
}

TEST_CASE("capability probe") {
  SUBCASE("the exact oracle is perfect on a pure copy source") {
    const auto src = Source::planted_copy(1, 1.0, {0.25, 0.25, 0.25, 0.25});
    const auto acc = capability_probe(oracle_predictor(src), src, 1000, 32, 3);
    CHECK(acc.positions >= 1000);
    CHECK(acc.accuracy == 1.0);
  }
  SUBCASE("an untrained model sits at chance") {
    const auto src = Source::planted_copy(1, 0.5, {0.25, 0.25, 0.25, 0.25});
    const auto model = nanoformer::init_model(copy_config(), 4);
    const auto acc = capability_probe(model_predictor(model), src, 2000, 32, 5);
    const double se = std::sqrt(0.25 * 0.75 / static_cast<double>(acc.positions));
    CHECK(std::abs(acc.accuracy - 0.25) < 3.0 * se);
    CHECK(acc.ci.lo <= acc.accuracy);
    CHECK(acc.ci.hi >= acc.accuracy);
  }
  SUBCASE("a model trained on the pure copy task learns it") {
    const auto src = Source::planted_copy(1, 1.0, {0.25, 0.25, 0.25, 0.25});
    nanoformer::TrainHyper hyper;
    hyper.learning_rate = 0.5;
    hyper.seed = 17;
    hyper.steps = 300;
    const auto r = nanoformer::train(nanoformer::init_model(copy_config(), 3), src, 1 << 14, hyper);
    CHECK(capability_probe(model_predictor(r.model), src, 1000, 32, 6).accuracy > 0.95);
  }
  SUBCASE("non-copy sources are rejected") {
    const auto src = Source::uniform(4);
    CHECK_THROWS_AS(capability_probe(oracle_predictor(src), src, 1000, 32, 1), UsageError);
  }
}

TEST_CASE("sigmoid fit and threshold") {
  SUBCASE("three symmetric points put the threshold at SNR 1") {
    const std::vector<double> xs = {std::log(0.1), 0.0, std::log(10.0)};
    const std::vector<double> ys = {0.1, 0.5, 0.9};
    SigmoidOptions opt;
    opt.fixed_lower = 0.0;
    opt.fixed_upper = 1.0;
    const auto fit = fit_sigmoid(xs, ys, opt);
    REQUIRE(fit.converged);
    const auto t = detect_threshold(fit, 0.0, 0.5, xs);
    REQUIRE(t.detected);
    CHECK(t.theta == doctest::Approx(1.0).epsilon(0.2));
    CHECK(t.criterion_accuracy == doctest::Approx(0.5));
  }
  SUBCASE("an exact four-parameter curve is recovered") {
    SigmoidFit truth;
    truth.lower = 0.25;
    truth.upper = 0.9;
    truth.midpoint = 1.2;
    truth.slope = 2.5;
    std::vector<double> xs, ys;
    for (int i = 0; i < 15; ++i) {
      xs.push_back(-2.0 + 0.4 * i);
      ys.push_back(sigmoid(truth, xs.back()));
    }
    const auto fit = fit_sigmoid(xs, ys);
    REQUIRE(fit.converged);
    CHECK(fit.lower == doctest::Approx(0.25).epsilon(1e-6));
    CHECK(fit.upper == doctest::Approx(0.9).epsilon(1e-6));
    CHECK(fit.midpoint == doctest::Approx(1.2).epsilon(1e-6));
    CHECK(fit.slope == doctest::Approx(2.5).epsilon(1e-6));
    CHECK(fit.r_squared == doctest::Approx(1.0).epsilon(1e-9));
    // Crossing of 0.25 + 0.5 (0.9 - 0.25) is the midpoint.
    const auto t = detect_threshold(fit, 0.25, 0.5, xs);
    REQUIRE(t.detected);
    CHECK(t.ln_theta == doctest::Approx(1.2).epsilon(1e-6));
  }
  SUBCASE("asymptotes stay inside their bounds") {
    // Still rising at the right edge; an unbounded fit overshoots 1.
    const std::vector<double> xs = {-2, -1, 0, 1, 2, 3};
    const std::vector<double> ys = {0.25, 0.27, 0.35, 0.55, 0.78, 0.93};
    SigmoidOptions opt;
    opt.min_asymptote = 0.0;
    opt.max_asymptote = 1.0;
    const auto fit = fit_sigmoid(xs, ys, opt);
    REQUIRE(fit.converged);
    CHECK(fit.upper <= 1.0);
    CHECK(fit.lower >= 0.0);
  }
  SUBCASE("a flat curve has no threshold") {
    const std::vector<double> xs = {-3, -2, -1, 0, 1, 2};
    const std::vector<double> ys = {0.25, 0.25, 0.25, 0.25, 0.25, 0.25};
    const auto fit = fit_sigmoid(xs, ys);
    const auto t = detect_threshold(fit, 0.25, 0.5, xs);
    CHECK_FALSE(t.detected);
    CHECK_FALSE(t.reason.empty());
  }
  SUBCASE("a falling curve has no threshold") {
    const std::vector<double> xs = {-3, -2, -1, 0, 1, 2};
    const std::vector<double> ys = {0.9, 0.85, 0.7, 0.4, 0.3, 0.28};
    const auto fit = fit_sigmoid(xs, ys);
    CHECK_FALSE(detect_threshold(fit, 0.25, 0.5, xs).detected);
  }
}

TEST_CASE("SNR scaling fit") {
  const std::vector<std::size_t> caps = {10, 10, 10, 40, 40, 40, 90, 90, 90};
  const std::vector<double> ds = {100, 1000, 10000, 100, 1000, 10000, 100, 1000, 10000};
  SUBCASE("SNR = D P exactly") {
    std::vector<double> snr;
    for (std::size_t i = 0; i < caps.size(); ++i) snr.push_back(ds[i] * static_cast<double>(caps[i]));
    const auto fit = snr_scaling_fit(caps, ds, snr);
    CHECK(std::abs(fit.alpha - 1.0) < 1e-10);
    REQUIRE(fit.offsets.size() == 3);
    CHECK(std::abs(fit.offsets[0] - std::log(10.0)) < 1e-10);
    CHECK(std::abs(fit.offsets[1] - std::log(40.0)) < 1e-10);
    CHECK(std::abs(fit.offsets[2] - std::log(90.0)) < 1e-10);
    CHECK(fit.offsets_nondecreasing);
    CHECK(fit.sigma2 == doctest::Approx(0.1).epsilon(1e-10));
    CHECK(fit.alpha_stderr < 1e-8);
  }
  SUBCASE("SNR independent of D") {
    std::vector<double> snr;
    for (std::size_t i = 0; i < caps.size(); ++i) snr.push_back(5.0 / static_cast<double>(caps[i]));
    const auto fit = snr_scaling_fit(caps, ds, snr);
    CHECK(std::abs(fit.alpha) < 1e-10);
    CHECK_FALSE(fit.offsets_nondecreasing);
  }
  SUBCASE("shuffled cell order gives the same fit") {
    std::vector<double> snr;
    CounterRng rng(1);
    for (std::size_t i = 0; i < caps.size(); ++i) snr.push_back(std::sqrt(ds[i]) * (1.0 + 0.1 * rng.uniform()));
    const auto a = snr_scaling_fit(caps, ds, snr);
    std::vector<std::size_t> rc(caps.rbegin(), caps.rend());
    std::vector<double> rd(ds.rbegin(), ds.rend()), rs(snr.rbegin(), snr.rend());
    const auto b = snr_scaling_fit(rc, rd, rs);
    CHECK(a.alpha == doctest::Approx(b.alpha).epsilon(1e-12));
  }
  SUBCASE("preconditions") {
    const std::vector<double> one_d(9, 100.0), ones(9, 1.0);
    CHECK_THROWS_AS(snr_scaling_fit(caps, one_d, ones), UsageError);
    const std::vector<std::size_t> one_cap(9, 10);
    CHECK_THROWS_AS(snr_scaling_fit(one_cap, ds, ones), UsageError);
    std::vector<double> bad(9, 1.0);
    bad[4] = 0.0;
    CHECK_THROWS_AS(snr_scaling_fit(caps, ds, bad), DomainError);
  }
}

TEST_CASE("Taylor dominance") {
  // Linear probe f(h) = g . h.
  auto linear = [](const Vector& g) {
    Probe p;
    p.value = [g](const Vector& h, int) { return g.dot(h); };
    p.gradient = [g](const Vector&, int) { return g; };
    return p;
  };
  SUBCASE("no fluctuation") {
    Matrix x(20, 3);
    const auto y = cyclic_labels(20, 2);
    for (Eigen::Index i = 0; i < 20; ++i) x.row(i) = Eigen::RowVector3d(1.0 + y[static_cast<std::size_t>(i)], 0.5, -1.0);
    const auto rep = taylor_dominance(linear(Vector::Ones(3)), x, y, 2);
    CHECK(rep.fraction == 1.0);
  }
  SUBCASE("gradient orthogonal to every residual") {
    Matrix x = gaussian_matrix(50, 3, 2);
    x.col(0).setConstant(2.0);
    const auto rep = taylor_dominance(linear(Vector::Unit(3, 0)), x, cyclic_labels(50, 2), 2);
    CHECK(rep.fraction == 1.0);
  }
  SUBCASE("Gaussian noise at SNR 10 with an aligned probe") {
    const Eigen::Index d = 16;
    const double sd = std::sqrt(0.1 / static_cast<double>(d));  // E|N|^2 = 0.1 against |S|^2 = 1
    Matrix x = gaussian_matrix(2000, d, 3, sd);
    x.col(0).array() += 1.0;
    const std::vector<int> y(2000, 0);
    const auto rep = taylor_dominance(linear(Vector::Unit(d, 0)), x, y, 1);
    CHECK(rep.fraction > 0.9);
    CHECK(rep.mean_ratio > 1.0);
  }
  SUBCASE("logistic surrogate gradient matches finite differences") {
    Matrix x = gaussian_matrix(200, 4, 4);
    const auto y = cyclic_labels(200, 3);
    for (Eigen::Index i = 0; i < 200; ++i) x(i, y[static_cast<std::size_t>(i)]) += 2.0;
    const auto s = fit_logistic(x, y, 3);
    REQUIRE(s.converged);
    CHECK(s.train_accuracy > 0.6);
    const auto probe = s.probe();
    const Vector h = x.row(7).transpose();
    const Vector g = probe.gradient(h, 1);
    for (Eigen::Index j = 0; j < 4; ++j) {
      Vector hp = h, hm = h;
      hp(j) += 1e-6;
      hm(j) -= 1e-6;
      CHECK(g(j) == doctest::Approx((probe.value(hp, 1) - probe.value(hm, 1)) / 2e-6).epsilon(1e-5));
    }
    CHECK(s.probabilities(h).sum() == doctest::Approx(1.0));
  }
}

TEST_CASE("sweep plan validation") {
  SweepPlan p;
  p.capacities = {copy_config(), copy_config()};
  p.data_sizes = {2048, 4096, 8192};
  p.hyper.learning_rate = 0.3;
  CHECK_NOTHROW(p.validate());
  auto q = p;
  q.data_sizes = {4096, 2048};
  CHECK_THROWS_WITH_AS(q.validate(), doctest::Contains("data_sizes"), PlanError);
  q = p;
  q.capacities.resize(1);
  CHECK_THROWS_AS(q.validate(), PlanError);
  q = p;
  q.source = Source::uniform(4);
  CHECK_THROWS_WITH_AS(q.validate(), doctest::Contains("source"), PlanError);
  q = p;
  q.eval_positions = 100;
  CHECK_THROWS_AS(q.validate(), PlanError);
  q = p;
  q.data_sizes = {64, 4096};
  CHECK_THROWS_AS(q.validate(), PlanError);
}

TEST_CASE("a tiny sweep is reproducible and independent of jobs") {
  SweepPlan p;
  auto small = copy_config();
  small.model_dim = 4;
  small.key_dim = 4;
  small.ffn_hidden_dim = 8;
  p.capacities = {small, copy_config()};
  p.data_sizes = {512, 1024, 2048};
  p.seeds = 1;
  p.epochs = 2;
  p.hyper.learning_rate = 0.3;
  p.snr.per_class = 50;
  p.snr.bootstrap_reps = 0;
  p.eval_positions = 1000;
  p.seed = 9;
  const auto a = emergence_sweep(p);
  p.jobs = 3;
  const auto b = emergence_sweep(p);
  REQUIRE(a.cells.size() == 6);
  for (std::size_t i = 0; i < a.cells.size(); ++i) {
    CHECK(a.cells[i].snr.snr == b.cells[i].snr.snr);
    CHECK(a.cells[i].accuracy.hits == b.cells[i].accuracy.hits);
    CHECK(a.cells[i].final_loss == b.cells[i].final_loss);
  }
  CHECK(a.chance == 0.25);
  CHECK(a.cells[0].seed == cell_seed(9, 0, 0, 0));
  CHECK(a.cells[0].steps == nanoformer::steps_for_epochs(2, 512, p.hyper));
  CHECK(a.scaling.has_value());
  CHECK(a.cells[0].dominance.available);

  // Failed cells are left out of the analysis.
  auto c = a;
  c.cells[0].failed = true;
  c.cells[0].accuracy.accuracy = 1.0;
  analyze_curve(c);
  // Five cells are below the fit's minimum, so the scaling fit is withheld.
  CHECK_FALSE(c.scaling.has_value());
  CHECK_FALSE(c.scaling_note.empty());
}
