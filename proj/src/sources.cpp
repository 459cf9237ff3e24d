#include "scaling_lab/sources.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "scaling_lab/errors.hpp"
#include "scaling_lab/rng.hpp"

namespace scaling_lab::sources {

namespace {

constexpr double kSumTolerance = 1e-12;
constexpr double kStationaryTolerance = 1e-10;

void check_probability_vector(const std::vector<double>& p, const std::string& field) {
  if (p.empty()) throw ParameterError(field, "probability vector is empty");
  double sum = 0.0;
  for (double v : p) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw ParameterError(field, "entries must be finite and nonnegative");
    }
    sum += v;
  }
  if (std::abs(sum - 1.0) > kSumTolerance) {
    std::ostringstream msg;
    msg.precision(17);
    msg << "entries sum to " << sum << ", expected 1";
    throw ParameterError(field, msg.str());
  }
}

std::vector<double> solve_stationary(const std::vector<std::vector<double>>& t) {
  const auto n = static_cast<Eigen::Index>(t.size());
  // Stack (T^T - I) over the normalisation row and solve in least squares.
  Eigen::MatrixXd system(n + 1, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      system(i, j) = t[static_cast<std::size_t>(j)][static_cast<std::size_t>(i)] - (i == j ? 1.0 : 0.0);
    }
  }
  system.row(n).setOnes();
  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n + 1);
  rhs(n) = 1.0;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(system);
  if (lu.rank() < n) {
    throw ParameterError("transition", "chain has no unique stationary distribution");
  }
  Eigen::VectorXd pi = system.colPivHouseholderQr().solve(rhs);
  std::vector<double> out(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    // Clean signed zeros and tiny negative rounding.
    out[static_cast<std::size_t>(i)] = std::max(0.0, pi(i));
  }
  const double total = std::accumulate(out.begin(), out.end(), 0.0);
  for (double& v : out) v /= total;
  for (Eigen::Index j = 0; j < n; ++j) {
    double pt = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      pt += out[static_cast<std::size_t>(i)] * t[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    }
    if (std::abs(pt - out[static_cast<std::size_t>(j)]) > kStationaryTolerance) {
      throw ParameterError("transition", "stationary vector does not satisfy pi T = pi");
    }
  }
  return out;
}

std::vector<double> copy_mixture(const Source& s, int copied_token) {
  std::vector<double> law(s.background().size());
  for (std::size_t j = 0; j < law.size(); ++j) {
    law[j] = (1.0 - s.copy_prob()) * s.background()[j];
  }
  law[static_cast<std::size_t>(copied_token)] += s.copy_prob();
  return law;
}

double planted_mixture_entropy(const Source& s) {
  double h = 0.0;
  const auto& b = s.background();
  for (std::size_t c = 0; c < b.size(); ++c) {
    if (b[c] == 0.0) continue;
    const auto law = copy_mixture(s, static_cast<int>(c));
    h += b[c] * shannon_entropy(law);
  }
  return h;
}

void sample_into(const Source& s, std::size_t n, CounterRng& rng, std::uint64_t seed,
                 std::vector<int>& tokens, std::vector<std::uint8_t>& copied) {
  switch (s.kind()) {
    case SourceKind::iid:
      for (std::size_t i = 0; i < n; ++i) {
        tokens.push_back(static_cast<int>(rng.categorical(s.probs())));
      }
      break;
    case SourceKind::markov: {
      int state = static_cast<int>(rng.categorical(s.stationary()));
      tokens.push_back(state);
      for (std::size_t i = 1; i < n; ++i) {
        state = static_cast<int>(rng.categorical(s.transition()[static_cast<std::size_t>(state)]));
        tokens.push_back(state);
      }
      break;
    }
    case SourceKind::planted_copy: {
      const std::size_t start = tokens.size();
      const auto lag = static_cast<std::size_t>(s.lag());
      for (std::size_t i = 0; i < n; ++i) {
        if (i >= lag && rng.uniform() < s.copy_prob()) {
          tokens.push_back(tokens[start + i - lag]);
          copied.push_back(1);
        } else {
          tokens.push_back(static_cast<int>(rng.categorical(s.background())));
          copied.push_back(0);
        }
      }
      break;
    }
    case SourceKind::block_stationary: {
      const auto w = static_cast<std::size_t>(s.width());
      for (std::size_t b = 0, pos = 0; pos < n; ++b, pos += w) {
        CounterRng block_rng(derive_seed(seed, {b}));
        sample_into(s.base(), std::min(w, n - pos), block_rng, block_rng.key(), tokens, copied);
      }
      break;
    }
  }
}

bool uses_copy_flags(const Source& s) {
  if (s.kind() == SourceKind::planted_copy) return true;
  if (s.kind() == SourceKind::block_stationary) return uses_copy_flags(s.base());
  return false;
}

}  // namespace

std::string to_string(SourceKind kind) {
  switch (kind) {
    case SourceKind::iid: return "iid";
    case SourceKind::markov: return "markov";
    case SourceKind::block_stationary: return "block-stationary";
    case SourceKind::planted_copy: return "planted-copy";
  }
  return "unknown";
}

double shannon_entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

Source Source::iid(std::vector<double> probs) {
  check_probability_vector(probs, "probs");
  Source s;
  s.kind_ = SourceKind::iid;
  s.vocab_size_ = static_cast<int>(probs.size());
  s.probs_ = std::move(probs);
  return s;
}

Source Source::uniform(int vocab_size) {
  if (vocab_size < 1) throw ParameterError("vocab_size", "must be positive");
  return iid(std::vector<double>(static_cast<std::size_t>(vocab_size), 1.0 / vocab_size));
}

Source Source::markov(std::vector<std::vector<double>> transition) {
  if (transition.empty()) throw ParameterError("transition", "matrix is empty");
  for (std::size_t i = 0; i < transition.size(); ++i) {
    if (transition[i].size() != transition.size()) {
      throw ParameterError("transition", "matrix must be square");
    }
    check_probability_vector(transition[i], "transition[" + std::to_string(i) + "]");
  }
  Source s;
  s.kind_ = SourceKind::markov;
  s.vocab_size_ = static_cast<int>(transition.size());
  s.stationary_ = solve_stationary(transition);
  s.transition_ = std::move(transition);
  return s;
}

Source Source::block_stationary(const Source& base, int width) {
  if (width < 1) throw ParameterError("width", "block width must be positive");
  Source s;
  s.kind_ = SourceKind::block_stationary;
  s.vocab_size_ = base.vocab_size();
  s.width_ = width;
  s.base_ = std::make_shared<const Source>(base);
  return s;
}

Source Source::planted_copy(int lag, double copy_prob, std::vector<double> background) {
  if (lag < 1) throw ParameterError("lag", "must be at least 1");
  if (!(copy_prob > 0.0 && copy_prob <= 1.0)) {
    throw ParameterError("copy_prob", "must lie in (0, 1]");
  }
  check_probability_vector(background, "background");
  Source s;
  s.kind_ = SourceKind::planted_copy;
  s.vocab_size_ = static_cast<int>(background.size());
  s.lag_ = lag;
  s.copy_prob_ = copy_prob;
  s.probs_ = std::move(background);
  return s;
}

const Source& Source::base() const {
  if (!base_) throw UsageError("source has no base (not block-stationary)");
  return *base_;
}

std::string Source::id() const {
  std::ostringstream out;
  out << to_string(kind_) << "(V=" << vocab_size_;
  if (kind_ == SourceKind::block_stationary) out << ",w=" << width_ << ",base=" << base_->id();
  if (kind_ == SourceKind::planted_copy) out << ",k=" << lag_ << ",p=" << copy_prob_;
  out << ")";
  return out.str();
}

std::vector<double> Source::initial_distribution() const {
  switch (kind_) {
    case SourceKind::iid:
    case SourceKind::planted_copy: return probs_;
    case SourceKind::markov: return stationary_;
    case SourceKind::block_stationary: return base_->initial_distribution();
  }
  return {};
}

double Source::position_entropy(std::size_t t) const {
  switch (kind_) {
    case SourceKind::iid: return shannon_entropy(probs_);
    case SourceKind::markov:
      if (t == 0) return shannon_entropy(stationary_);
      return entropy_rate(*this);
    case SourceKind::planted_copy:
      if (t < static_cast<std::size_t>(lag_)) return shannon_entropy(probs_);
      return planted_mixture_entropy(*this);
    case SourceKind::block_stationary:
      return base_->position_entropy(t % static_cast<std::size_t>(width_));
  }
  return 0.0;
}

TokenSequence sample_sequence(const Source& source, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw ParameterError("n", "sequence length must be at least 1");
  if (source.kind() == SourceKind::planted_copy &&
      n <= static_cast<std::size_t>(source.lag())) {
    throw ParameterError("lag", "copy lag k=" + std::to_string(source.lag()) +
                                    " must be smaller than sequence length n=" + std::to_string(n));
  }
  TokenSequence seq;
  seq.source_id = source.id();
  seq.seed = seed;
  seq.tokens.reserve(n);
  CounterRng rng(seed);
  sample_into(source, n, rng, seed, seq.tokens, seq.copied);
  if (!uses_copy_flags(source)) seq.copied.clear();
  return seq;
}

double entropy_rate(const Source& source) {
  switch (source.kind()) {
    case SourceKind::iid: return shannon_entropy(source.probs());
    case SourceKind::markov: {
      double h = 0.0;
      const auto& pi = source.stationary();
      for (std::size_t i = 0; i < pi.size(); ++i) {
        h += pi[i] * shannon_entropy(source.transition()[i]);
      }
      return h;
    }
    case SourceKind::planted_copy: return planted_mixture_entropy(source);
    case SourceKind::block_stationary: {
      // Per-token entropy of one block: the average over in-block positions.
      double total = 0.0;
      for (int t = 0; t < source.width(); ++t) {
        total += source.base().position_entropy(static_cast<std::size_t>(t));
      }
      return total / source.width();
    }
  }
  return 0.0;
}

std::vector<double> conditional_distribution(const Source& source, std::span<const int> prefix) {
  for (int tok : prefix) {
    if (tok < 0 || tok >= source.vocab_size()) {
      throw UsageError("prefix token " + std::to_string(tok) + " outside vocabulary");
    }
  }
  switch (source.kind()) {
    case SourceKind::iid: return source.probs();
    case SourceKind::markov:
      if (prefix.empty()) throw UsageError("markov conditional law needs a nonempty prefix");
      return source.transition()[static_cast<std::size_t>(prefix.back())];
    case SourceKind::planted_copy: {
      if (prefix.empty()) throw UsageError("planted-copy conditional law needs a nonempty prefix");
      const auto lag = static_cast<std::size_t>(source.lag());
      if (prefix.size() < lag) return source.background();
      return copy_mixture(source, prefix[prefix.size() - lag]);
    }
    case SourceKind::block_stationary: {
      const auto w = static_cast<std::size_t>(source.width());
      const std::size_t offset = prefix.size() % w;
      if (offset == 0) return source.base().initial_distribution();
      return conditional_distribution(source.base(), prefix.subspan(prefix.size() - offset));
    }
  }
  return {};
}

double oracle_loss(const Source& source, std::span<const TokenSequence> data) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& seq : data) {
    std::span<const int> tokens(seq.tokens);
    for (std::size_t t = 1; t < tokens.size(); ++t) {
      const auto law = conditional_distribution(source, tokens.first(t));
      total -= std::log(law[static_cast<std::size_t>(tokens[t])]);
      ++count;
    }
  }
  if (count == 0) throw UsageError("oracle_loss needs at least one predicted position");
  return total / static_cast<double>(count);
}

}  // namespace scaling_lab::sources
