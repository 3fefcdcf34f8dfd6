#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <span>

#include "refuel/error.hpp"

namespace refuel {

/// SplitMix64 finalizer (Stafford variant 13). Bijective on 64-bit words.
constexpr std::uint64_t mix64(std::uint64_t z) noexcept {
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

/// Derive an independent child key from a parent key and a stream id.
///
/// Split rule: child = mix64(parent ^ mix64(stream + 0x632BE59BD9B4E019)).
/// Callers that fan work out (per task, per episode, per trajectory) derive
/// their seed with this rule so that the output never depends on which
/// thread ran which piece.
constexpr std::uint64_t split_key(std::uint64_t parent, std::uint64_t stream) noexcept {
  return mix64(parent ^ mix64(stream + 0x632BE59BD9B4E019ULL));
}

constexpr std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> path) noexcept {
  std::uint64_t key = seed;
  for (auto stream : path) key = split_key(key, stream);
  return key;
}

/// Counter-based generator: the i-th draw of key k is mix64(k + i * golden).
///
/// All derived distributions are implemented here on top of raw 64-bit
/// words so that sequences are bit-identical across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) noexcept : key_(mix64(seed)) {}

  std::uint64_t next_u64() noexcept {
    ++counter_;
    return mix64(key_ + counter_ * 0x9E3779B97F4A7C15ULL);
  }

  /// Uniform on [0, 1) with 53 bits of resolution.
  double uniform() noexcept { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) noexcept { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n) by Lemire's multiply-shift with rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw InputError("Rng::below: empty range");
    unsigned __int128 m = static_cast<unsigned __int128>(next_u64()) * n;
    auto low = static_cast<std::uint64_t>(m);
    if (low < n) {
      const std::uint64_t threshold = (0 - n) % n;
      while (low < threshold) {
        m = static_cast<unsigned __int128>(next_u64()) * n;
        low = static_cast<std::uint64_t>(m);
      }
    }
    return static_cast<std::uint64_t>(m >> 64);
  }

  /// Standard exponential, used for flat-Dirichlet draws.
  double exponential() noexcept { return -std::log1p(-uniform()); }

  /// Index drawn from a probability vector (need not be exactly normalized).
  std::size_t categorical(std::span<const double> probs) {
    if (probs.empty()) throw InputError("Rng::categorical: empty distribution");
    double total = 0.0;
    for (double p : probs) total += p;
    const double u = uniform() * total;
    double acc = 0.0;
    std::size_t last_positive = 0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
      if (probs[i] <= 0.0) continue;
      last_positive = i;
      acc += probs[i];
      if (u < acc) return i;
    }
    return last_positive;
  }

  Rng split(std::uint64_t stream) const noexcept { return Rng(split_key(key_, stream)); }

 private:
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
};

}  // namespace refuel
