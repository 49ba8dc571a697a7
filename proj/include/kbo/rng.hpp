#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace kbo {

/// Deterministic random stream. Wraps mt19937_64 (whose raw output is fully
/// specified by the standard) and implements the value transforms by hand so
/// that draws are bit-identical across platforms and library versions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform();

  /// Uniform double in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Standard normal via Box-Muller. No spare caching: every call consumes
  /// exactly two uniforms, which keeps stream accounting trivial.
  double normal();

  /// Integer in [0, n), n >= 1. Rejection-free scaling; fine for the modest n
  /// used here (bias < 2^-53 * n).
  std::uint64_t below(std::uint64_t n);

  /// Index j with probability probs[j] (probs sum to ~1; the last index
  /// absorbs any rounding slack).
  std::size_t categorical(const std::vector<double>& probs);

  /// Fisher-Yates shuffle of 0..n-1.
  std::vector<std::size_t> permutation(std::size_t n);

 private:
  std::mt19937_64 eng_;
};

/// Stream seed derived from (base_seed, label). Labels hash via FNV-1a and
/// mix through splitmix64, so creation order of sibling streams is
/// irrelevant and distinct labels decorrelate.
std::uint64_t derive_seed(std::uint64_t base_seed, std::string_view label);

/// One named stream.
Rng seed_stream(std::uint64_t base_seed, std::string_view label);

/// Independent named streams, one per label.
std::vector<Rng> seed_streams(std::uint64_t base_seed,
                              const std::vector<std::string>& labels);

}  // namespace kbo
