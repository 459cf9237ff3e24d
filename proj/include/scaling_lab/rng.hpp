#pragma once

// Counter-based 64-bit generator.
//
// Output i of a stream with key K is splitmix64_mix(K + (i + 1) * 0x9E3779B97F4A7C15),
// where splitmix64_mix is the SplitMix64 finalizer:
//   z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
//   z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//   z =  z ^ (z >> 31)
// Doubles in [0,1) take the top 53 bits. Normals use Box-Muller on two
// consecutive uniforms (the second variate is cached). Integers below n use
// Lemire's multiply-shift with rejection. Everything is specified here so any
// implementation can replay a stream bit for bit.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>
#include <span>
#include <string_view>

namespace scaling_lab {

inline constexpr std::uint64_t kGoldenGamma = 0x9E3779B97F4A7C15ULL;

constexpr std::uint64_t splitmix64_mix(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// FNV-1a 64-bit hash of a string (used to fold names into seeds).
constexpr std::uint64_t fnv1a64(std::string_view text) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

/// Derives an independent stream key from a master seed and cell coordinates.
constexpr std::uint64_t derive_seed(std::uint64_t master, std::span<const std::uint64_t> coords) noexcept {
  std::uint64_t h = splitmix64_mix(master ^ 0x6A09E667F3BCC909ULL);
  for (std::uint64_t c : coords) {
    h = splitmix64_mix(h + kGoldenGamma + splitmix64_mix(c + 0x243F6A8885A308D3ULL));
  }
  return h;
}

constexpr std::uint64_t derive_seed(std::uint64_t master,
                                    std::initializer_list<std::uint64_t> coords) noexcept {
  return derive_seed(master, std::span<const std::uint64_t>(coords.begin(), coords.size()));
}

class CounterRng {
 public:
  using result_type = std::uint64_t;

  explicit constexpr CounterRng(std::uint64_t key) noexcept : key_(key) {}

  static constexpr result_type min() noexcept { return 0; }
  static constexpr result_type max() noexcept {
    return std::numeric_limits<result_type>::max();
  }

  constexpr result_type operator()() noexcept {
    ++counter_;
    return splitmix64_mix(key_ + counter_ * kGoldenGamma);
  }

  std::uint64_t key() const noexcept { return key_; }
  std::uint64_t counter() const noexcept { return counter_; }

  double uniform() noexcept {
    return static_cast<double>((*this)() >> 11) * 0x1.0p-53;
  }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) noexcept {
    if (n <= 1) return 0;
    std::uint64_t x = (*this)();
    __uint128_t m = static_cast<__uint128_t>(x) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (low < threshold) {
        x = (*this)();
        m = static_cast<__uint128_t>(x) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  double normal() noexcept {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
  }

  /// Inverse-CDF draw from a probability vector.
  std::size_t categorical(std::span<const double> probs) noexcept {
    const double u = uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      acc += probs[i];
      if (u < acc) return i;
    }
    // Rounding left mass above the last cumulative value.
    for (std::size_t i = probs.size(); i-- > 0;) {
      if (probs[i] > 0.0) return i;
    }
    return 0;
  }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

}  // namespace scaling_lab
