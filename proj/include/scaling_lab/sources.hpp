#pragma once

// Synthetic token processes with exactly computable entropy rates.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace scaling_lab::sources {

enum class SourceKind { iid, markov, block_stationary, planted_copy };

std::string to_string(SourceKind kind);

struct TokenSequence {
  std::vector<int> tokens;
  std::string source_id;
  std::uint64_t seed = 0;
  /// Planted-copy only: 1 where the token was produced by the copy event.
  std::vector<std::uint8_t> copied;

  std::size_t size() const noexcept { return tokens.size(); }
};

/// Immutable description of a token process. Cheap to copy; block sources
/// share their base.
class Source {
 public:
  static Source iid(std::vector<double> probs);
  static Source uniform(int vocab_size);
  /// Row-major |V| x |V| transition matrix. The chain starts from its
  /// stationary law, which must be unique.
  static Source markov(std::vector<std::vector<double>> transition);
  /// Concatenation of independent width-w blocks drawn from `base`.
  static Source block_stationary(const Source& base, int width);
  /// Position i >= lag copies position i - lag with probability copy_prob,
  /// otherwise draws from `background`. Positions before `lag` are background.
  static Source planted_copy(int lag, double copy_prob, std::vector<double> background);

  SourceKind kind() const noexcept { return kind_; }
  int vocab_size() const noexcept { return vocab_size_; }
  std::string id() const;

  const std::vector<double>& probs() const noexcept { return probs_; }
  const std::vector<std::vector<double>>& transition() const noexcept { return transition_; }
  const std::vector<double>& stationary() const noexcept { return stationary_; }
  int width() const noexcept { return width_; }
  const Source& base() const;
  int lag() const noexcept { return lag_; }
  double copy_prob() const noexcept { return copy_prob_; }
  const std::vector<double>& background() const noexcept { return probs_; }

  /// Law of the first token of a fresh sequence.
  std::vector<double> initial_distribution() const;
  /// Conditional entropy H(X_t | X_<t) (nats) of a fresh sequence at
  /// 0-based position t.
  double position_entropy(std::size_t t) const;

 private:
  Source() = default;

  SourceKind kind_ = SourceKind::iid;
  int vocab_size_ = 0;
  // iid probabilities, or planted-copy background.
  std::vector<double> probs_;
  std::vector<std::vector<double>> transition_;
  std::vector<double> stationary_;
  std::shared_ptr<const Source> base_;
  int width_ = 0;
  int lag_ = 0;
  double copy_prob_ = 0.0;
};

/// Deterministic in (source, n, seed).
TokenSequence sample_sequence(const Source& source, std::size_t n, std::uint64_t seed);

/// Exact entropy rate in nats per token.
double entropy_rate(const Source& source);

/// Exact law of the next token after `prefix`.
std::vector<double> conditional_distribution(const Source& source, std::span<const int> prefix);

/// Shannon entropy (nats) of a probability vector.
double shannon_entropy(std::span<const double> probs);

/// Mean of -ln p(x_t | x_<t) over positions t >= 1 under the true law.
double oracle_loss(const Source& source, std::span<const TokenSequence> data);

}  // namespace scaling_lab::sources
