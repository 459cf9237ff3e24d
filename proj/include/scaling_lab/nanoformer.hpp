#pragma once

// Minimal single-head transformer with instrumentation and an SGD trainer.
//
// Layer l maps X (n x d) to
//   Q = cap(X Wq), K = cap(X Wk), V = cap(X Wv)
//   A = causal_softmax(Q K^T * s),  s = 1 / (sqrt(d_k) or d_k) / temperature
//   R~ = A V
//   R = R~ + W2^T act(W1^T R~ + b1) + b2
// and the head maps the last layer to log p = log_softmax(R Wout + bout).
// cap() scales a row down to the configured norm bound and is the identity
// when bounds are not enforced.

#include <Eigen/Dense>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "scaling_lab/sources.hpp"

namespace scaling_lab::nanoformer {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

enum class Activation { tanh, hardtanh };
enum class LogitScale { sqrt, linear };

std::string to_string(Activation a);
std::string to_string(LogitScale s);
Activation parse_activation(const std::string& name);
LogitScale parse_logit_scale(const std::string& name);

struct ModelConfig {
  int vocab_size = 4;
  int num_layers = 1;
  int model_dim = 8;
  int key_dim = 8;
  int ffn_hidden_dim = 16;
  int context_cap = 256;
  double cap_q = 1.0;
  double cap_k = 1.0;
  double cap_v = 1.0;
  Activation ffn_activation = Activation::tanh;
  double temperature = 1.0;
  LogitScale logit_scale = LogitScale::sqrt;
  bool enforce_bounds = false;

  /// Throws ParameterError naming the first bad field.
  void validate() const;
  /// Multiplier applied to q.k before the softmax.
  double logit_multiplier() const;
  /// Bound on |attention logit| implied by the caps (enforced models only).
  double logit_bound() const;

  bool operator==(const ModelConfig&) const = default;
};

struct LayerWeights {
  Matrix wq;  // d x d_k
  Matrix wk;  // d x d_k
  Matrix wv;  // d x d
  Matrix w1;  // d x h
  Vector b1;  // h
  Matrix w2;  // h x d
  Vector b2;  // d
};

struct Parameters {
  Matrix embedding;  // |V| x d
  std::vector<LayerWeights> layers;
  Matrix w_out;  // d x |V|
  Vector b_out;  // |V|

  /// Visits every weight array in a fixed order as (name, data, size).
  template <class F>
  void for_each_array(F&& f) {
    f(std::string("embedding"), embedding.data(), embedding.size());
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      auto& w = layers[l];
      f(p + "wq", w.wq.data(), w.wq.size());
      f(p + "wk", w.wk.data(), w.wk.size());
      f(p + "wv", w.wv.data(), w.wv.size());
      f(p + "w1", w.w1.data(), w.w1.size());
      f(p + "b1", w.b1.data(), w.b1.size());
      f(p + "w2", w.w2.data(), w.w2.size());
      f(p + "b2", w.b2.data(), w.b2.size());
    }
    f(std::string("w_out"), w_out.data(), w_out.size());
    f(std::string("b_out"), b_out.data(), b_out.size());
  }
  template <class F>
  void for_each_array(F&& f) const {
    const_cast<Parameters*>(this)->for_each_array(
        [&](const std::string& name, double* data, Eigen::Index size) {
          f(name, static_cast<const double*>(data), size);
        });
  }

  std::size_t count() const;
  void set_zero();
};

struct Model {
  ModelConfig config;
  std::uint64_t seed = 0;
  Parameters params;

  std::size_t parameter_count() const { return params.count(); }
  /// Row-norm clipping of Wq, Wk, Wv to their caps.
  void clip_to_bounds();
};

/// Weights ~ N(0, 1/fan_in) (embedding ~ N(0, 1/d)); biases and the output
/// head start at zero so the untrained predictive law is uniform.
Model init_model(const ModelConfig& config, std::uint64_t seed);

struct LayerTrace {
  Matrix queries;    // n x d_k, after capping
  Matrix keys;       // n x d_k
  Matrix values;     // n x d
  Matrix logits;     // n x n attention logits (upper triangle unused)
  Matrix attention;  // n x n, row i supported on k <= i
  Matrix pre_ffn;    // n x d, raw attention output r~
  Matrix ffn_out;    // n x d
  Matrix repr;       // n x d, r = r~ + FFN(r~)
};

struct ForwardTrace {
  std::vector<LayerTrace> layers;
  Matrix log_probs;  // n x |V|, row t predicts token t+1
};

ForwardTrace forward(const Model& model, std::span<const int> tokens);

/// The quantities at the last position only. The final layer's attention is
/// evaluated for that single query, so cost is linear in n there.
struct LastPositionLayer {
  Vector attention;  // length n
  Vector pre_ffn;
  Vector ffn_out;
  Vector repr;
  Matrix values;     // n x d, filled when requested
};

struct LastPositionTrace {
  std::vector<LastPositionLayer> layers;
};

LastPositionTrace forward_last(const Model& model, std::span<const int> tokens,
                               bool keep_values = false);

Vector apply_ffn(const LayerWeights& w, Activation act, const Vector& u);

/// Mean of -ln p(x_{t+1} | x_{1:t}) over all predicted positions.
double next_token_loss(const Model& model, std::span<const sources::TokenSequence> data);

/// Mean loss over the batch; `grad` receives d(loss)/d(params) (overwritten).
double loss_and_gradient(const Model& model, std::span<const sources::TokenSequence> batch,
                         Parameters& grad);

struct TrainHyper {
  double learning_rate = 0.1;
  std::int64_t steps = 0;
  int batch_size = 8;
  int seq_len = 32;
  std::uint64_t seed = 0;
  /// Loss trace interval in steps; 0 records only the endpoints.
  std::int64_t log_every = 0;
};

struct LossPoint {
  std::int64_t step = 0;
  double loss = 0.0;
};

struct TrainResult {
  Model model;
  std::vector<LossPoint> loss_trace;
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::int64_t dataset_tokens = 0;
};

/// floor(tokens / seq_len) independent sequences of length seq_len.
std::vector<sources::TokenSequence> materialize_dataset(const sources::Source& source,
                                                        std::int64_t tokens, int seq_len,
                                                        std::uint64_t seed);

/// Steps needed to pass over a `tokens`-sized dataset `epochs` times.
std::int64_t steps_for_epochs(double epochs, std::int64_t tokens, const TrainHyper& hyper);

/// Materialises a fixed D-token dataset once (seeded by hyper.seed) and runs
/// plain SGD over shuffled epochs of it.
TrainResult train(Model model, const sources::Source& source, std::int64_t num_tokens,
                  const TrainHyper& hyper);

TrainResult train_on(Model model, std::span<const sources::TokenSequence> dataset,
                     const TrainHyper& hyper);

struct AssumptionReport {
  double max_query_norm = 0.0;
  double max_key_norm = 0.0;
  double max_value_norm = 0.0;
  double max_abs_logit = 0.0;
  double logit_bound = 0.0;
  bool bounds_enforced = false;
  bool bounds_hold = true;
  /// Max over layers of the empirical FFN Lipschitz estimate.
  double ffn_lipschitz = 0.0;
  std::vector<double> ffn_lipschitz_per_layer;
  /// Empirical Euclidean Lipschitz constant of the row softmax.
  double softmax_sensitivity = 0.0;
  std::size_t points = 0;
};

AssumptionReport check_assumptions(const Model& model,
                                   std::span<const sources::TokenSequence> batch,
                                   std::uint64_t seed, int pairs = 2000);

/// Max of pairwise difference ratios, small-perturbation ratios and the
/// spectral norm of the analytic Jacobian at each point (rows of `points`).
double ffn_lipschitz_estimate(const LayerWeights& w, Activation act, const Matrix& points,
                              std::uint64_t seed, int pairs);

/// Text checkpoint; see docs/checkpoint-format.md.
void save_checkpoint(const Model& model, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path);

}  // namespace scaling_lab::nanoformer
