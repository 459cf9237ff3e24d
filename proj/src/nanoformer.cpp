#include "scaling_lab/nanoformer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "scaling_lab/errors.hpp"
#include "scaling_lab/format.hpp"
#include "scaling_lab/rng.hpp"

namespace scaling_lab::nanoformer {

using sources::TokenSequence;

std::string to_string(Activation a) { return a == Activation::tanh ? "tanh" : "hardtanh"; }
std::string to_string(LogitScale s) { return s == LogitScale::sqrt ? "sqrt" : "linear"; }

Activation parse_activation(const std::string& name) {
  if (name == "tanh") return Activation::tanh;
  if (name == "hardtanh") return Activation::hardtanh;
  throw ParameterError("ffn_activation", "unknown activation '" + name + "' (tanh | hardtanh)");
}

LogitScale parse_logit_scale(const std::string& name) {
  if (name == "sqrt") return LogitScale::sqrt;
  if (name == "linear") return LogitScale::linear;
  throw ParameterError("logit_scale", "unknown logit scale '" + name + "' (sqrt | linear)");
}

void ModelConfig::validate() const {
  auto positive = [](int v, const char* field) {
    if (v < 1) throw ParameterError(field, "must be a positive integer");
  };
  positive(vocab_size, "vocab_size");
  positive(num_layers, "num_layers");
  positive(model_dim, "model_dim");
  positive(key_dim, "key_dim");
  positive(ffn_hidden_dim, "ffn_hidden_dim");
  positive(context_cap, "context_cap");
  if (!(cap_q > 0.0)) throw ParameterError("cap_q", "must be positive");
  if (!(cap_k > 0.0)) throw ParameterError("cap_k", "must be positive");
  if (!(cap_v > 0.0)) throw ParameterError("cap_v", "must be positive");
  if (!(temperature > 0.0)) throw ParameterError("temperature", "must be positive");
}

double ModelConfig::logit_multiplier() const {
  const double dk = static_cast<double>(key_dim);
  const double base = logit_scale == LogitScale::sqrt ? std::sqrt(dk) : dk;
  return 1.0 / (base * temperature);
}

double ModelConfig::logit_bound() const { return cap_q * cap_k * logit_multiplier(); }

std::size_t Parameters::count() const {
  std::size_t total = 0;
  for_each_array([&](const std::string&, const double*, Eigen::Index size) {
    total += static_cast<std::size_t>(size);
  });
  return total;
}

void Parameters::set_zero() {
  for_each_array([](const std::string&, double* data, Eigen::Index size) {
    std::fill(data, data + size, 0.0);
  });
}

namespace {

void clip_rows(Matrix& w, double cap) {
  for (Eigen::Index r = 0; r < w.rows(); ++r) {
    const double norm = w.row(r).norm();
    if (norm > cap) w.row(r) *= cap / norm;
  }
}

Parameters shaped_like(const ModelConfig& c) {
  Parameters p;
  p.embedding = Matrix::Zero(c.vocab_size, c.model_dim);
  p.layers.resize(static_cast<std::size_t>(c.num_layers));
  for (auto& w : p.layers) {
    w.wq = Matrix::Zero(c.model_dim, c.key_dim);
    w.wk = Matrix::Zero(c.model_dim, c.key_dim);
    w.wv = Matrix::Zero(c.model_dim, c.model_dim);
    w.w1 = Matrix::Zero(c.model_dim, c.ffn_hidden_dim);
    w.b1 = Vector::Zero(c.ffn_hidden_dim);
    w.w2 = Matrix::Zero(c.ffn_hidden_dim, c.model_dim);
    w.b2 = Vector::Zero(c.model_dim);
  }
  p.w_out = Matrix::Zero(c.model_dim, c.vocab_size);
  p.b_out = Vector::Zero(c.vocab_size);
  return p;
}

void fill_normal(Matrix& m, double sd, CounterRng& rng) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = sd * rng.normal();
}

void cap_rows(const Matrix& raw, double cap, Matrix& out) {
  out = raw;
  clip_rows(out, cap);
}

// Gradient of y = x * min(1, cap/|x|) row by row.
void cap_rows_backward(const Matrix& raw, double cap, Matrix& grad) {
  for (Eigen::Index r = 0; r < raw.rows(); ++r) {
    const double norm = raw.row(r).norm();
    if (norm > cap) {
      const Eigen::RowVectorXd u = raw.row(r) / norm;
      const double proj = u.dot(grad.row(r));
      grad.row(r) = (cap / norm) * (grad.row(r) - proj * u);
    }
  }
}

double activate(Activation act, double z) {
  return act == Activation::tanh ? std::tanh(z) : std::clamp(z, -1.0, 1.0);
}

double activate_grad(Activation act, double z, double h) {
  if (act == Activation::tanh) return 1.0 - h * h;
  return std::abs(z) < 1.0 ? 1.0 : 0.0;
}

void check_tokens(const Model& model, std::span<const int> tokens) {
  if (tokens.empty()) throw UsageError("forward on an empty sequence");
  if (static_cast<long>(tokens.size()) > model.config.context_cap) {
    throw CapacityError("sequence length " + std::to_string(tokens.size()) +
                        " exceeds context_cap " + std::to_string(model.config.context_cap));
  }
  for (int t : tokens) {
    if (t < 0 || t >= model.config.vocab_size) {
      throw UsageError("token " + std::to_string(t) + " outside model vocabulary");
    }
  }
}

struct LayerCache {
  Matrix x, q_raw, k_raw, v_raw, q, k, v, logits, attn, pre, z, h, out;
};

struct Cache {
  std::vector<LayerCache> layers;
  Matrix log_probs;
};

void causal_softmax(const Matrix& logits, Matrix& attn) {
  const auto n = logits.rows();
  attn = Matrix::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double m = logits.row(i).head(i + 1).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index j = 0; j <= i; ++j) {
      const double e = std::exp(logits(i, j) - m);
      attn(i, j) = e;
      sum += e;
    }
    attn.row(i).head(i + 1) /= sum;
  }
}

void layer_forward(const ModelConfig& c, const LayerWeights& w, const Matrix& x, LayerCache& lc) {
  lc.x = x;
  lc.q_raw = x * w.wq;
  lc.k_raw = x * w.wk;
  lc.v_raw = x * w.wv;
  if (c.enforce_bounds) {
    cap_rows(lc.q_raw, c.cap_q, lc.q);
    cap_rows(lc.k_raw, c.cap_k, lc.k);
    cap_rows(lc.v_raw, c.cap_v, lc.v);
  } else {
    lc.q = lc.q_raw;
    lc.k = lc.k_raw;
    lc.v = lc.v_raw;
  }
  lc.logits = (lc.q * lc.k.transpose()) * c.logit_multiplier();
  causal_softmax(lc.logits, lc.attn);
  lc.pre = lc.attn.triangularView<Eigen::Lower>() * lc.v;
  lc.z = lc.pre * w.w1;
  lc.z.rowwise() += w.b1.transpose();
  lc.h = lc.z.unaryExpr([&](double z) { return activate(c.ffn_activation, z); });
  lc.out = lc.h * w.w2;
  lc.out.rowwise() += w.b2.transpose();
  lc.out += lc.pre;
}

void log_softmax_rows(const Matrix& logits, Matrix& out) {
  out.resize(logits.rows(), logits.cols());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    const double m = logits.row(i).maxCoeff();
    const double lse = m + std::log((logits.row(i).array() - m).exp().sum());
    out.row(i) = logits.row(i).array() - lse;
  }
}

void run_forward(const Model& model, std::span<const int> tokens, Cache& cache) {
  check_tokens(model, tokens);
  const auto& c = model.config;
  const auto n = static_cast<Eigen::Index>(tokens.size());
  Matrix x(n, c.model_dim);
  for (Eigen::Index t = 0; t < n; ++t) x.row(t) = model.params.embedding.row(tokens[static_cast<std::size_t>(t)]);
  cache.layers.resize(model.params.layers.size());
  for (std::size_t l = 0; l < model.params.layers.size(); ++l) {
    layer_forward(c, model.params.layers[l], l == 0 ? x : cache.layers[l - 1].out, cache.layers[l]);
  }
  Matrix logits = cache.layers.back().out * model.params.w_out;
  logits.rowwise() += model.params.b_out.transpose();
  log_softmax_rows(logits, cache.log_probs);
}

// Accumulates weight * d(sum of -log p over predicted positions) into grad.
double backward(const Model& model, std::span<const int> tokens, const Cache& cache, double weight,
                Parameters& grad) {
  const auto& c = model.config;
  const auto n = static_cast<Eigen::Index>(tokens.size());
  Matrix dlogits = Matrix::Zero(n, c.vocab_size);
  double loss = 0.0;
  for (Eigen::Index t = 0; t + 1 < n; ++t) {
    const int target = tokens[static_cast<std::size_t>(t + 1)];
    loss -= cache.log_probs(t, target);
    dlogits.row(t) = cache.log_probs.row(t).array().exp();
    dlogits(t, target) -= 1.0;
  }
  dlogits *= weight;
  const Matrix& top = cache.layers.back().out;
  grad.w_out.noalias() += top.transpose() * dlogits;
  grad.b_out += dlogits.colwise().sum().transpose();
  Matrix dx = dlogits * model.params.w_out.transpose();

  const double mult = c.logit_multiplier();
  for (std::size_t l = model.params.layers.size(); l-- > 0;) {
    const auto& w = model.params.layers[l];
    const auto& lc = cache.layers[l];
    auto& g = grad.layers[l];
    const Matrix& dout = dx;
    g.b2 += dout.colwise().sum().transpose();
    g.w2.noalias() += lc.h.transpose() * dout;
    Matrix dz = dout * w.w2.transpose();
    for (Eigen::Index i = 0; i < dz.size(); ++i) {
      dz.data()[i] *= activate_grad(c.ffn_activation, lc.z.data()[i], lc.h.data()[i]);
    }
    g.b1 += dz.colwise().sum().transpose();
    g.w1.noalias() += lc.pre.transpose() * dz;
    Matrix dpre = dout + dz * w.w1.transpose();

    Matrix dattn = dpre * lc.v.transpose();
    Matrix dv = lc.attn.transpose() * dpre;
    Matrix dlogit_attn(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double inner = lc.attn.row(i).head(i + 1).dot(dattn.row(i).head(i + 1));
      dlogit_attn.row(i) = lc.attn.row(i).array() * (dattn.row(i).array() - inner);
    }
    dlogit_attn *= mult;
    Matrix dq = dlogit_attn * lc.k;
    Matrix dk = dlogit_attn.transpose() * lc.q;
    if (c.enforce_bounds) {
      cap_rows_backward(lc.q_raw, c.cap_q, dq);
      cap_rows_backward(lc.k_raw, c.cap_k, dk);
      cap_rows_backward(lc.v_raw, c.cap_v, dv);
    }
    g.wq.noalias() += lc.x.transpose() * dq;
    g.wk.noalias() += lc.x.transpose() * dk;
    g.wv.noalias() += lc.x.transpose() * dv;
    dx = dq * w.wq.transpose() + dk * w.wk.transpose() + dv * w.wv.transpose();
  }
  for (Eigen::Index t = 0; t < n; ++t) {
    grad.embedding.row(tokens[static_cast<std::size_t>(t)]) += dx.row(t);
  }
  return loss;
}

std::size_t predicted_positions(std::span<const TokenSequence> data) {
  std::size_t count = 0;
  for (const auto& s : data) count += s.tokens.empty() ? 0 : s.tokens.size() - 1;
  return count;
}

}  // namespace

void Model::clip_to_bounds() {
  for (auto& w : params.layers) {
    clip_rows(w.wq, config.cap_q);
    clip_rows(w.wk, config.cap_k);
    clip_rows(w.wv, config.cap_v);
  }
}

Model init_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config = config;
  m.seed = seed;
  m.params = shaped_like(config);
  CounterRng rng(seed);
  const double d = config.model_dim;
  fill_normal(m.params.embedding, 1.0 / std::sqrt(d), rng);
  for (auto& w : m.params.layers) {
    fill_normal(w.wq, 1.0 / std::sqrt(d), rng);
    fill_normal(w.wk, 1.0 / std::sqrt(d), rng);
    fill_normal(w.wv, 1.0 / std::sqrt(d), rng);
    fill_normal(w.w1, 1.0 / std::sqrt(d), rng);
    fill_normal(w.w2, 1.0 / std::sqrt(static_cast<double>(config.ffn_hidden_dim)), rng);
  }
  if (config.enforce_bounds) m.clip_to_bounds();
  return m;
}

ForwardTrace forward(const Model& model, std::span<const int> tokens) {
  Cache cache;
  run_forward(model, tokens, cache);
  ForwardTrace trace;
  trace.layers.reserve(cache.layers.size());
  for (auto& lc : cache.layers) {
    LayerTrace lt;
    lt.queries = std::move(lc.q);
    lt.keys = std::move(lc.k);
    lt.values = std::move(lc.v);
    lt.logits = std::move(lc.logits);
    lt.attention = std::move(lc.attn);
    lt.pre_ffn = std::move(lc.pre);
    lt.repr = std::move(lc.out);
    lt.ffn_out = lt.repr - lt.pre_ffn;
    trace.layers.push_back(std::move(lt));
  }
  trace.log_probs = std::move(cache.log_probs);
  return trace;
}

Vector apply_ffn(const LayerWeights& w, Activation act, const Vector& u) {
  Vector z = w.w1.transpose() * u + w.b1;
  for (Eigen::Index i = 0; i < z.size(); ++i) z(i) = activate(act, z(i));
  return w.w2.transpose() * z + w.b2;
}

LastPositionTrace forward_last(const Model& model, std::span<const int> tokens, bool keep_values) {
  check_tokens(model, tokens);
  const auto& c = model.config;
  const auto n = static_cast<Eigen::Index>(tokens.size());
  Matrix x(n, c.model_dim);
  for (Eigen::Index t = 0; t < n; ++t) x.row(t) = model.params.embedding.row(tokens[static_cast<std::size_t>(t)]);
  LastPositionTrace out;
  out.layers.resize(model.params.layers.size());
  const std::size_t last = model.params.layers.size() - 1;
  for (std::size_t l = 0; l < model.params.layers.size(); ++l) {
    const auto& w = model.params.layers[l];
    auto& lp = out.layers[l];
    if (l < last) {
      LayerCache lc;
      layer_forward(c, w, x, lc);
      lp.attention = lc.attn.row(n - 1).transpose();
      lp.pre_ffn = lc.pre.row(n - 1).transpose();
      lp.repr = lc.out.row(n - 1).transpose();
      lp.ffn_out = lp.repr - lp.pre_ffn;
      if (keep_values) lp.values = lc.v;
      x = std::move(lc.out);
      continue;
    }
    Matrix k = x * w.wk;
    Matrix v = x * w.wv;
    Eigen::RowVectorXd q = x.row(n - 1) * w.wq;
    if (c.enforce_bounds) {
      clip_rows(k, c.cap_k);
      clip_rows(v, c.cap_v);
      const double qn = q.norm();
      if (qn > c.cap_q) q *= c.cap_q / qn;
    }
    Vector logits = (k * q.transpose()) * c.logit_multiplier();
    const double m = logits.maxCoeff();
    Vector a = (logits.array() - m).exp();
    a /= a.sum();
    lp.attention = a;
    lp.pre_ffn = v.transpose() * a;
    lp.ffn_out = apply_ffn(w, c.ffn_activation, lp.pre_ffn);
    lp.repr = lp.pre_ffn + lp.ffn_out;
    if (keep_values) lp.values = std::move(v);
  }
  return out;
}

double next_token_loss(const Model& model, std::span<const TokenSequence> data) {
  const std::size_t count = predicted_positions(data);
  if (data.empty() || count == 0) throw UsageError("next_token_loss needs nonempty data");
  double total = 0.0;
  Cache cache;
  for (const auto& seq : data) {
    if (seq.tokens.size() < 2) continue;
    run_forward(model, seq.tokens, cache);
    for (std::size_t t = 0; t + 1 < seq.tokens.size(); ++t) {
      total -= cache.log_probs(static_cast<Eigen::Index>(t), seq.tokens[t + 1]);
    }
  }
  return total / static_cast<double>(count);
}

double loss_and_gradient(const Model& model, std::span<const TokenSequence> batch, Parameters& grad) {
  const std::size_t count = predicted_positions(batch);
  if (batch.empty() || count == 0) throw UsageError("loss_and_gradient needs nonempty data");
  grad = shaped_like(model.config);
  const double weight = 1.0 / static_cast<double>(count);
  double total = 0.0;
  Cache cache;
  for (const auto& seq : batch) {
    if (seq.tokens.size() < 2) continue;
    run_forward(model, seq.tokens, cache);
    total += backward(model, seq.tokens, cache, weight, grad);
  }
  return total / static_cast<double>(count);
}

std::vector<TokenSequence> materialize_dataset(const sources::Source& source, std::int64_t tokens,
                                               int seq_len, std::uint64_t seed) {
  if (seq_len < 2) throw ParameterError("seq_len", "must be at least 2");
  const std::int64_t count = tokens / seq_len;
  std::vector<TokenSequence> data;
  data.reserve(static_cast<std::size_t>(std::max<std::int64_t>(count, 0)));
  for (std::int64_t i = 0; i < count; ++i) {
    data.push_back(sources::sample_sequence(source, static_cast<std::size_t>(seq_len),
                                            derive_seed(seed, {static_cast<std::uint64_t>(i)})));
  }
  return data;
}

std::int64_t steps_for_epochs(double epochs, std::int64_t tokens, const TrainHyper& hyper) {
  const double per_step = static_cast<double>(hyper.batch_size) * hyper.seq_len;
  return static_cast<std::int64_t>(std::ceil(epochs * static_cast<double>(tokens) / per_step));
}

TrainResult train(Model model, const sources::Source& source, std::int64_t num_tokens,
                  const TrainHyper& hyper) {
  if (hyper.batch_size < 1) throw ParameterError("batch_size", "must be positive");
  if (num_tokens < static_cast<std::int64_t>(hyper.batch_size) * hyper.seq_len) {
    throw UsageError("dataset of " + std::to_string(num_tokens) +
                     " tokens is smaller than one batch");
  }
  const auto data = materialize_dataset(source, num_tokens, hyper.seq_len,
                                        derive_seed(hyper.seed, {fnv1a64("dataset")}));
  auto result = train_on(std::move(model), data, hyper);
  result.dataset_tokens = num_tokens;
  return result;
}

TrainResult train_on(Model model, std::span<const TokenSequence> dataset, const TrainHyper& hyper) {
  if (!(hyper.learning_rate > 0.0)) throw ParameterError("learning_rate", "must be positive");
  if (hyper.steps < 0) throw ParameterError("steps", "must be nonnegative");
  if (hyper.batch_size < 1) throw ParameterError("batch_size", "must be positive");
  if (dataset.size() < static_cast<std::size_t>(hyper.batch_size)) {
    throw UsageError("dataset holds fewer sequences than one batch");
  }
  TrainResult result;
  result.initial_loss = next_token_loss(model, dataset);
  result.loss_trace.push_back({0, result.initial_loss});

  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::size_t cursor = order.size();
  std::uint64_t epoch = 0;
  std::vector<TokenSequence> batch(static_cast<std::size_t>(hyper.batch_size));
  Parameters grad;
  double interval_loss = 0.0;
  std::int64_t interval_steps = 0;

  for (std::int64_t step = 0; step < hyper.steps; ++step) {
    for (auto& slot : batch) {
      if (cursor == order.size()) {
        CounterRng rng(derive_seed(hyper.seed, {fnv1a64("shuffle"), epoch++}));
        for (std::size_t i = order.size(); i > 1; --i) {
          std::swap(order[i - 1], order[static_cast<std::size_t>(rng.below(i))]);
        }
        cursor = 0;
      }
      slot = dataset[order[cursor++]];
    }
    const double loss = loss_and_gradient(model, batch, grad);
    if (!std::isfinite(loss)) throw TrainingDivergenceError(step, loss);
    // Model and gradient visit their arrays in the same order.
    std::vector<const double*> gptr;
    grad.for_each_array([&](const std::string&, const double* data, Eigen::Index) { gptr.push_back(data); });
    std::size_t a = 0;
    model.params.for_each_array([&](const std::string&, double* data, Eigen::Index size) {
      const double* g = gptr[a++];
      for (Eigen::Index i = 0; i < size; ++i) data[i] -= hyper.learning_rate * g[i];
    });
    if (model.config.enforce_bounds) model.clip_to_bounds();
    interval_loss += loss;
    ++interval_steps;
    if (hyper.log_every > 0 && (step + 1) % hyper.log_every == 0) {
      result.loss_trace.push_back({step + 1, interval_loss / static_cast<double>(interval_steps)});
      interval_loss = 0.0;
      interval_steps = 0;
    }
  }
  result.final_loss = hyper.steps == 0 ? result.initial_loss : next_token_loss(model, dataset);
  if (!std::isfinite(result.final_loss)) throw TrainingDivergenceError(hyper.steps, result.final_loss);
  if (hyper.steps > 0) result.loss_trace.push_back({hyper.steps, result.final_loss});
  result.model = std::move(model);
  return result;
}

double ffn_lipschitz_estimate(const LayerWeights& w, Activation act, const Matrix& points,
                              std::uint64_t seed, int pairs) {
  if (points.rows() == 0) return 0.0;
  CounterRng rng(seed);
  const auto d = points.cols();
  const auto n = static_cast<std::uint64_t>(points.rows());
  double best = 0.0;
  auto ratio = [&](const Vector& u, const Vector& v) {
    const double den = (u - v).norm();
    if (den == 0.0) return 0.0;
    return (apply_ffn(w, act, u) - apply_ffn(w, act, v)).norm() / den;
  };
  for (int p = 0; p < pairs; ++p) {
    const Vector u = points.row(static_cast<Eigen::Index>(rng.below(n))).transpose();
    const Vector v = points.row(static_cast<Eigen::Index>(rng.below(n))).transpose();
    best = std::max(best, ratio(u, v));
    Vector delta(d);
    for (Eigen::Index i = 0; i < d; ++i) delta(i) = rng.normal();
    delta *= 1e-5 / delta.norm();
    best = std::max(best, ratio(u, u + delta));
  }
  // Spectral norm of J = W2^T diag(act'(z)) W1^T at a subset of points.
  const std::uint64_t jac_points = std::min<std::uint64_t>(n, 64);
  for (std::uint64_t p = 0; p < jac_points; ++p) {
    const Vector u = points.row(static_cast<Eigen::Index>(rng.below(n))).transpose();
    Vector z = w.w1.transpose() * u + w.b1;
    Vector slope(z.size());
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      slope(i) = activate_grad(act, z(i), activate(act, z(i)));
    }
    const Eigen::MatrixXd jac = w.w2.transpose() * slope.asDiagonal() * w.w1.transpose();
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(jac);
    best = std::max(best, svd.singularValues()(0));
  }
  return best;
}

AssumptionReport check_assumptions(const Model& model, std::span<const TokenSequence> batch,
                                   std::uint64_t seed, int pairs) {
  if (batch.empty()) throw UsageError("check_assumptions needs a nonempty batch");
  const auto& c = model.config;
  AssumptionReport rep;
  rep.bounds_enforced = c.enforce_bounds;
  rep.logit_bound = c.logit_bound();
  const std::size_t layers = model.params.layers.size();
  std::vector<std::vector<Eigen::RowVectorXd>> pre_points(layers);
  std::vector<Eigen::VectorXd> logit_rows;
  for (const auto& seq : batch) {
    const auto trace = forward(model, seq.tokens);
    for (std::size_t l = 0; l < layers; ++l) {
      const auto& lt = trace.layers[l];
      rep.max_query_norm = std::max(rep.max_query_norm, lt.queries.rowwise().norm().maxCoeff());
      rep.max_key_norm = std::max(rep.max_key_norm, lt.keys.rowwise().norm().maxCoeff());
      rep.max_value_norm = std::max(rep.max_value_norm, lt.values.rowwise().norm().maxCoeff());
      const auto n = lt.logits.rows();
      for (Eigen::Index i = 0; i < n; ++i) {
        rep.max_abs_logit = std::max(rep.max_abs_logit, lt.logits.row(i).head(i + 1).cwiseAbs().maxCoeff());
        if (i > 0 && logit_rows.size() < 512) logit_rows.push_back(lt.logits.row(i).head(i + 1).transpose());
        if (pre_points[l].size() < 4096) pre_points[l].push_back(lt.pre_ffn.row(i));
      }
    }
  }
  rep.points = pre_points.empty() ? 0 : pre_points[0].size();
  if (c.enforce_bounds) {
    const double slack = 1e-12;
    rep.bounds_hold = rep.max_query_norm <= c.cap_q + slack && rep.max_key_norm <= c.cap_k + slack &&
                      rep.max_value_norm <= c.cap_v + slack &&
                      rep.max_abs_logit <= rep.logit_bound + slack;
  }
  for (std::size_t l = 0; l < layers; ++l) {
    Matrix pts(static_cast<Eigen::Index>(pre_points[l].size()), c.model_dim);
    for (std::size_t i = 0; i < pre_points[l].size(); ++i) pts.row(static_cast<Eigen::Index>(i)) = pre_points[l][i];
    const double lip = ffn_lipschitz_estimate(model.params.layers[l], c.ffn_activation, pts,
                                              derive_seed(seed, {l}), pairs);
    rep.ffn_lipschitz_per_layer.push_back(lip);
    rep.ffn_lipschitz = std::max(rep.ffn_lipschitz, lip);
  }
  CounterRng rng(derive_seed(seed, {fnv1a64("softmax")}));
  auto softmax = [](const Vector& s) {
    Vector e = (s.array() - s.maxCoeff()).exp();
    return Vector(e / e.sum());
  };
  for (const auto& s : logit_rows) {
    const Vector p = softmax(s);
    Vector delta(s.size());
    for (Eigen::Index i = 0; i < s.size(); ++i) delta(i) = rng.normal();
    delta *= 1e-5 / delta.norm();
    rep.softmax_sensitivity =
        std::max(rep.softmax_sensitivity, (softmax(s + delta) - p).norm() / delta.norm());
    const Eigen::MatrixXd jac = Eigen::MatrixXd(p.asDiagonal()) - p * p.transpose();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(jac, Eigen::EigenvaluesOnly);
    rep.softmax_sensitivity = std::max(rep.softmax_sensitivity, eig.eigenvalues().cwiseAbs().maxCoeff());
  }
  return rep;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  const auto& c = model.config;
  out << "scaling-lab-checkpoint 1\n";
  out << "vocab_size " << c.vocab_size << "\n";
  out << "num_layers " << c.num_layers << "\n";
  out << "model_dim " << c.model_dim << "\n";
  out << "key_dim " << c.key_dim << "\n";
  out << "ffn_hidden_dim " << c.ffn_hidden_dim << "\n";
  out << "context_cap " << c.context_cap << "\n";
  out << "cap_q " << format_double(c.cap_q) << "\n";
  out << "cap_k " << format_double(c.cap_k) << "\n";
  out << "cap_v " << format_double(c.cap_v) << "\n";
  out << "ffn_activation " << to_string(c.ffn_activation) << "\n";
  out << "temperature " << format_double(c.temperature) << "\n";
  out << "logit_scale " << to_string(c.logit_scale) << "\n";
  out << "enforce_bounds " << (c.enforce_bounds ? 1 : 0) << "\n";
  out << "seed " << model.seed << "\n";
  model.params.for_each_array([&](const std::string& name, const double* data, Eigen::Index size) {
    out << "array " << name << " " << size << "\n";
    for (Eigen::Index i = 0; i < size; ++i) {
      out << format_double(data[i]) << (i + 1 == size ? "\n" : " ");
    }
    if (size == 0) out << "\n";
  });
  out << "end\n";
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read checkpoint " + path.string());
  std::string magic;
  int version = 0;
  in >> magic >> version;
  if (magic != "scaling-lab-checkpoint" || version != 1) {
    throw IoError("not a scaling-lab checkpoint: " + path.string());
  }
  ModelConfig c;
  std::uint64_t seed = 0;
  std::string key;
  auto read_double = [&](double& v) {
    std::string tok;
    in >> tok;
    if (!parse_double(tok, v)) throw IoError("bad number '" + tok + "' in checkpoint");
  };
  while (in >> key && key != "array") {
    if (key == "vocab_size") in >> c.vocab_size;
    else if (key == "num_layers") in >> c.num_layers;
    else if (key == "model_dim") in >> c.model_dim;
    else if (key == "key_dim") in >> c.key_dim;
    else if (key == "ffn_hidden_dim") in >> c.ffn_hidden_dim;
    else if (key == "context_cap") in >> c.context_cap;
    else if (key == "cap_q") read_double(c.cap_q);
    else if (key == "cap_k") read_double(c.cap_k);
    else if (key == "cap_v") read_double(c.cap_v);
    else if (key == "temperature") read_double(c.temperature);
    else if (key == "ffn_activation") { std::string v; in >> v; c.ffn_activation = parse_activation(v); }
    else if (key == "logit_scale") { std::string v; in >> v; c.logit_scale = parse_logit_scale(v); }
    else if (key == "enforce_bounds") { int v = 0; in >> v; c.enforce_bounds = v != 0; }
    else if (key == "seed") in >> seed;
    else throw IoError("unknown checkpoint field '" + key + "'");
  }
  c.validate();
  Model m;
  m.config = c;
  m.seed = seed;
  m.params = shaped_like(c);
  bool first = true;
  m.params.for_each_array([&](const std::string& name, double* data, Eigen::Index size) {
    if (!first) in >> key;
    first = false;
    std::string got;
    Eigen::Index got_size = 0;
    in >> got >> got_size;
    if (key != "array" || got != name || got_size != size) {
      throw IoError("checkpoint array mismatch at '" + name + "'");
    }
    for (Eigen::Index i = 0; i < size; ++i) read_double(data[i]);
  });
  in >> key;
  if (key != "end") throw IoError("checkpoint truncated: " + path.string());
  return m;
}

}  // namespace scaling_lab::nanoformer
