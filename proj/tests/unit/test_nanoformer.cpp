#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <vector>

#include "scaling_lab/errors.hpp"
#include "scaling_lab/nanoformer.hpp"
#include "scaling_lab/rng.hpp"
#include "scaling_lab/sources.hpp"

using namespace scaling_lab;
using namespace scaling_lab::nanoformer;
using sources::Source;
using sources::TokenSequence;

namespace {

ModelConfig small_config() {
  ModelConfig c;
  c.vocab_size = 4;
  c.num_layers = 1;
  c.model_dim = 8;
  c.key_dim = 8;
  c.ffn_hidden_dim = 16;
  return c;
}

Model randomized(const ModelConfig& c, std::uint64_t seed) {
  // Fill every array, including the zero-initialised head and biases.
  Model m = init_model(c, seed);
  CounterRng rng(seed + 1000);
  m.params.for_each_array([&](const std::string&, double* data, Eigen::Index size) {
    for (Eigen::Index i = 0; i < size; ++i) data[i] += 0.3 * rng.normal();
  });
  return m;
}

std::vector<TokenSequence> batch_of(const Source& src, int count, std::size_t len, std::uint64_t seed) {
  std::vector<TokenSequence> out;
  for (int i = 0; i < count; ++i)
    out.push_back(sources::sample_sequence(src, len, derive_seed(seed, {static_cast<std::uint64_t>(i)})));
  return out;
}

double copy_accuracy(const Model& m, std::span<const TokenSequence> data) {
  std::size_t hits = 0, total = 0;
  for (const auto& s : data) {
    const auto tr = forward(m, s.tokens);
    for (std::size_t t = 0; t + 1 < s.size(); ++t) {
      if (!s.copied[t + 1]) continue;
      Eigen::Index arg = 0;
      tr.log_probs.row(static_cast<Eigen::Index>(t)).maxCoeff(&arg);
      hits += arg == s.tokens[t + 1];
      ++total;
    }
  }
  return double(hits) / double(total);
}

}  // namespace

TEST_CASE("parameter count matches a hand enumeration") {
  const Model m = init_model(small_config(), 1);
  // embedding 4*8, Wq/Wk/Wv 3*64, W1 8*16 + b1 16, W2 16*8 + b2 8, head 8*4 + 4
  const std::size_t hand = 32 + 3 * 64 + 128 + 16 + 128 + 8 + 32 + 4;
  CHECK(hand == 540);
  CHECK(m.parameter_count() == hand);
  std::size_t summed = 0;
  m.params.for_each_array([&](const std::string&, const double*, Eigen::Index size) {
    summed += static_cast<std::size_t>(size);
  });
  CHECK(summed == hand);
}

TEST_CASE("initialisation is deterministic and respects caps") {
  auto c = small_config();
  const Model a = init_model(c, 9), b = init_model(c, 9);
  CHECK(a.params.embedding == b.params.embedding);
  CHECK(a.params.layers[0].w1 == b.params.layers[0].w1);
  CHECK(a.params.layers[0].wq != init_model(c, 10).params.layers[0].wq);

  c.enforce_bounds = true;
  c.cap_q = c.cap_k = c.cap_v = 1.0;
  c.model_dim = 32;  // rows of N(0, 1/d) have norm about sqrt(d_k/d) < 1, so widen d_k
  c.key_dim = 64;
  const Model m = init_model(c, 3);
  const auto& w = m.params.layers[0];
  CHECK(w.wq.rowwise().norm().maxCoeff() <= 1.0 + 1e-12);
  CHECK(w.wk.rowwise().norm().maxCoeff() <= 1.0 + 1e-12);
  CHECK(w.wv.rowwise().norm().maxCoeff() <= 1.0 + 1e-12);
}

TEST_CASE("forward trace examples") {
  const Model m = randomized(small_config(), 4);
  const std::vector<int> one = {2};
  const auto t1 = forward(m, one);
  CHECK(t1.layers[0].attention(0, 0) == 1.0);

  // Identical embeddings give identical values everywhere.
  Model same = m;
  for (int v = 1; v < 4; ++v) same.params.embedding.row(v) = same.params.embedding.row(0);
  const std::vector<int> seq = {0, 3, 1, 2, 2, 0};
  const auto ts = forward(same, seq);
  const Eigen::RowVectorXd v0 = ts.layers[0].values.row(0);
  for (Eigen::Index i = 0; i < 6; ++i)
    CHECK((ts.layers[0].pre_ffn.row(i) - v0).norm() < 1e-12);

  Model flat = m;
  flat.params.layers[0].wq.setZero();
  const auto tf = forward(flat, seq);
  for (Eigen::Index i = 0; i < 6; ++i)
    for (Eigen::Index k = 0; k <= i; ++k) CHECK(tf.layers[0].attention(i, k) == doctest::Approx(1.0 / (i + 1)).epsilon(1e-14));

  auto capped = small_config();
  capped.context_cap = 4;
  CHECK_THROWS_AS(forward(init_model(capped, 1), seq), CapacityError);
}

TEST_CASE("attention rows and predictive laws are probability vectors") {
  auto c = small_config();
  c.num_layers = 2;
  const Model m = randomized(c, 6);
  const auto data = batch_of(Source::uniform(4), 3, 40, 2);
  for (const auto& s : data) {
    const auto tr = forward(m, s.tokens);
    for (const auto& layer : tr.layers) {
      CHECK(layer.attention.minCoeff() >= 0.0);
      for (Eigen::Index i = 0; i < layer.attention.rows(); ++i) {
        CHECK(std::abs(layer.attention.row(i).sum() - 1.0) < 1e-9);
        for (Eigen::Index k = i + 1; k < layer.attention.cols(); ++k) CHECK(layer.attention(i, k) == 0.0);
      }
    }
    for (Eigen::Index i = 0; i < tr.log_probs.rows(); ++i)
      CHECK(std::abs(tr.log_probs.row(i).array().exp().sum() - 1.0) < 1e-9);
  }
}

TEST_CASE("changing a later token never changes earlier positions") {
  auto c = small_config();
  c.num_layers = 3;
  const Model m = randomized(c, 12);
  std::vector<int> x = {0, 1, 2, 3, 0, 1, 2, 3, 1, 1};
  const auto base = forward(m, x);
  for (std::size_t j = 0; j < x.size(); ++j) {
    auto y = x;
    y[j] = (y[j] + 1) % 4;
    const auto alt = forward(m, y);
    const auto rows = static_cast<Eigen::Index>(j);
    for (std::size_t l = 0; l < base.layers.size(); ++l)
      CHECK(alt.layers[l].repr.topRows(rows) == base.layers[l].repr.topRows(rows));
    CHECK(alt.log_probs.topRows(rows) == base.log_probs.topRows(rows));
  }
}

TEST_CASE("forward_last agrees with the full forward pass") {
  auto c = small_config();
  c.num_layers = 2;
  c.enforce_bounds = true;
  const Model m = randomized(c, 21);
  const auto s = sources::sample_sequence(Source::uniform(4), 33, 5);
  const auto full = forward(m, s.tokens);
  const auto last = forward_last(m, s.tokens, true);
  for (std::size_t l = 0; l < 2; ++l) {
    CHECK((full.layers[l].repr.row(32).transpose() - last.layers[l].repr).norm() < 1e-12);
    CHECK((full.layers[l].attention.row(32).transpose() - last.layers[l].attention).norm() < 1e-12);
    CHECK((full.layers[l].values - last.layers[l].values).norm() < 1e-12);
  }
}

TEST_CASE("loss examples") {
  const auto uniform = Source::uniform(4);
  const auto data = batch_of(uniform, 40, 251, 8);  // 10^4 predicted tokens
  const Model fresh = init_model(small_config(), 2);
  CHECK(next_token_loss(fresh, data) == doctest::Approx(std::log(4.0)).epsilon(1e-12));

  Model random = randomized(small_config(), 3);
  CHECK(next_token_loss(random, data) >= std::log(4.0) - 0.05);

  // Head that outputs the log-probabilities of an iid law.
  const std::vector<double> probs = {0.5, 0.25, 0.125, 0.125};
  const auto iid = Source::iid(probs);
  Model exact = init_model(small_config(), 2);
  exact.params.w_out.setZero();
  for (int v = 0; v < 4; ++v) exact.params.b_out(v) = std::log(probs[static_cast<std::size_t>(v)]);
  const auto iid_data = batch_of(iid, 40, 251, 9);
  CHECK(next_token_loss(exact, iid_data) == doctest::Approx(sources::oracle_loss(iid, iid_data)).epsilon(1e-12));

  CHECK_THROWS_AS(next_token_loss(fresh, std::span<const TokenSequence>{}), UsageError);
}

TEST_CASE("analytic gradient matches central differences") {
  for (bool bounded : {false, true}) {
    for (auto act : {Activation::tanh, Activation::hardtanh}) {
      auto c = small_config();
      c.num_layers = 2;
      c.model_dim = 4;
      c.key_dim = 3;
      c.ffn_hidden_dim = 6;
      c.enforce_bounds = bounded;
      c.cap_q = c.cap_k = c.cap_v = 0.7;
      c.ffn_activation = act;
      Model m = randomized(c, 31);
      REQUIRE(m.parameter_count() <= 1000);
      const auto data = batch_of(Source::iid({0.4, 0.3, 0.2, 0.1}), 3, 9, 4);
      Parameters grad;
      loss_and_gradient(m, data, grad);
      std::vector<double> analytic;
      grad.for_each_array([&](const std::string&, const double* d, Eigen::Index n) {
        analytic.insert(analytic.end(), d, d + n);
      });
      std::vector<double*> slots;
      m.params.for_each_array([&](const std::string&, double* d, Eigen::Index n) {
        for (Eigen::Index i = 0; i < n; ++i) slots.push_back(d + i);
      });
      REQUIRE(slots.size() == analytic.size());
      const double h = 1e-5;
      double worst = 0.0;
      for (std::size_t i = 0; i < slots.size(); ++i) {
        const double keep = *slots[i];
        *slots[i] = keep + h;
        const double up = next_token_loss(m, data);
        *slots[i] = keep - h;
        const double down = next_token_loss(m, data);
        *slots[i] = keep;
        const double numeric = (up - down) / (2 * h);
        const double scale = std::max({std::abs(numeric), std::abs(analytic[i]), 1e-6});
        worst = std::max(worst, std::abs(numeric - analytic[i]) / scale);
      }
      CAPTURE(bounded);
      CHECK(worst < 1e-4);
    }
  }
}

TEST_CASE("training") {
  TrainHyper hyper;
  hyper.batch_size = 4;
  hyper.seq_len = 16;
  hyper.seed = 5;

  SUBCASE("zero steps leaves the model alone") {
    const Model m = randomized(small_config(), 8);
    hyper.steps = 0;
    const auto r = train(m, Source::uniform(4), 1024, hyper);
    CHECK(r.model.params.embedding == m.params.embedding);
    CHECK(r.final_loss == r.initial_loss);
  }
  SUBCASE("deterministic in its seeds") {
    hyper.steps = 20;
    const auto a = train(init_model(small_config(), 1), Source::uniform(4), 2048, hyper);
    const auto b = train(init_model(small_config(), 1), Source::uniform(4), 2048, hyper);
    CHECK(a.final_loss == b.final_loss);
    CHECK(a.model.params.layers[0].wq == b.model.params.layers[0].wq);
  }
  SUBCASE("dataset smaller than a batch is rejected") {
    hyper.steps = 1;
    CHECK_THROWS_AS(train(init_model(small_config(), 1), Source::uniform(4), 32, hyper), UsageError);
  }
  SUBCASE("divergence reports the step") {
    hyper.steps = 50;
    hyper.learning_rate = 1e300;
    try {
      train(randomized(small_config(), 1), Source::uniform(4), 2048, hyper);
      FAIL("expected divergence");
    } catch (const TrainingDivergenceError& e) {
      CHECK(e.step() >= 0);
      CHECK(e.step() < 50);
    }
  }
  SUBCASE("bounds hold after every update") {
    auto c = small_config();
    c.enforce_bounds = true;
    c.cap_q = c.cap_k = c.cap_v = 0.5;
    hyper.steps = 30;
    hyper.learning_rate = 0.5;
    const auto r = train(init_model(c, 2), Source::uniform(4), 2048, hyper);
    const auto& w = r.model.params.layers[0];
    CHECK(w.wq.rowwise().norm().maxCoeff() <= 0.5 + 1e-12);
    CHECK(w.wv.rowwise().norm().maxCoeff() <= 0.5 + 1e-12);
  }
}

TEST_CASE("training fixtures: copy task and deterministic cycle") {
  TrainHyper hyper;
  hyper.batch_size = 8;
  hyper.seq_len = 32;
  hyper.learning_rate = 0.5;
  hyper.seed = 17;
  hyper.steps = 300;

  const auto copy = Source::planted_copy(1, 1.0, {0.25, 0.25, 0.25, 0.25});
  const auto r = train(init_model(small_config(), 3), copy, 1 << 14, hyper);
  const auto held_out = batch_of(copy, 20, 32, 999);
  CHECK(copy_accuracy(r.model, held_out) > 0.95);

  const auto cycle = Source::markov({{0, 1, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}, {1, 0, 0, 0}});
  hyper.steps = 600;
  const auto rc = train(init_model(small_config(), 3), cycle, 1 << 14, hyper);
  CHECK(next_token_loss(rc.model, batch_of(cycle, 20, 32, 998)) < 0.1);
}

TEST_CASE("assumption checks") {
  auto c = small_config();
  c.model_dim = 5;
  c.ffn_hidden_dim = 5;
  c.ffn_activation = Activation::hardtanh;
  Model m = init_model(c, 1);
  auto& w = m.params.layers[0];

  Matrix points(64, 5);
  CounterRng rng(2);
  for (Eigen::Index i = 0; i < points.size(); ++i) points.data()[i] = 0.05 * rng.normal();

  SUBCASE("identity wiring") {
    // Inputs stay inside hardtanh's linear zone, so FFN(u) = u.
    w.w1.setIdentity();
    w.b1.setZero();
    w.w2.setIdentity();
    w.b2.setZero();
    CHECK(ffn_lipschitz_estimate(w, c.ffn_activation, points, 3, 500) == doctest::Approx(1.0).epsilon(1e-6));
  }
  SUBCASE("linear map with spectral norm 2") {
    w.w1.setIdentity();
    w.b1.setZero();
    Matrix a(5, 5);
    for (Eigen::Index i = 0; i < a.size(); ++i) a.data()[i] = rng.normal();
    // Power iteration for the exact spectral norm.
    Vector v = Vector::Ones(5);
    for (int it = 0; it < 500; ++it) v = (a.transpose() * (a * v)).normalized();
    const double sigma = (a * v).norm();
    w.w2 = a * (2.0 / sigma);
    const double est = ffn_lipschitz_estimate(w, c.ffn_activation, points, 3, 500);
    CHECK(est >= 1.9);
    CHECK(est <= 2.0 + 1e-9);
  }
  SUBCASE("report on a bounded random model") {
    auto bc = small_config();
    bc.enforce_bounds = true;
    bc.cap_q = 0.8;
    bc.cap_k = 0.6;
    bc.cap_v = 0.5;
    const Model bm = randomized(bc, 4);
    const auto data = batch_of(Source::uniform(4), 4, 48, 1);
    const auto rep = check_assumptions(bm, data, 7);
    CHECK(rep.bounds_enforced);
    CHECK(rep.bounds_hold);
    CHECK(rep.max_query_norm <= 0.8 + 1e-12);
    CHECK(rep.max_key_norm <= 0.6 + 1e-12);
    CHECK(rep.max_value_norm <= 0.5 + 1e-12);
    CHECK(rep.max_abs_logit <= bc.logit_bound() + 1e-12);
    CHECK(bc.logit_bound() == doctest::Approx(0.8 * 0.6 / std::sqrt(8.0)));
    CHECK(rep.softmax_sensitivity <= 1.0 + 1e-9);
    CHECK(rep.softmax_sensitivity > 0.0);
    CHECK(rep.ffn_lipschitz > 0.0);
  }
}

TEST_CASE("checkpoint round trip") {
  auto c = small_config();
  c.logit_scale = LogitScale::linear;
  c.temperature = 0.75;
  const Model m = randomized(c, 44);
  const auto path = std::filesystem::temp_directory_path() / "scaling_lab_ckpt_test.txt";
  save_checkpoint(m, path);
  const Model back = load_checkpoint(path);
  std::filesystem::remove(path);
  CHECK(back.config == m.config);
  CHECK(back.seed == m.seed);
  std::vector<double> x, y;
  m.params.for_each_array([&](const std::string&, const double* d, Eigen::Index n) { x.insert(x.end(), d, d + n); });
  back.params.for_each_array([&](const std::string&, const double* d, Eigen::Index n) { y.insert(y.end(), d, d + n); });
  CHECK(x == y);
}
