#include "kbo/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace kbo {

double Rng::uniform() {
  return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
  // Box-Muller, cosine branch. u1 nudged away from 0 so log is finite.
  double u1 = uniform();
  double u2 = uniform();
  if (u1 <= 0.0) u1 = 0x1.0p-53;
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw std::invalid_argument("Rng::below: n must be >= 1");
  return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)) % n;
}

std::size_t Rng::categorical(const std::vector<double>& probs) {
  const double u = uniform();
  double acc = 0.0;
  for (std::size_t j = 0; j + 1 < probs.size(); ++j) {
    acc += probs[j];
    if (u < acc) return j;
  }
  return probs.empty() ? 0 : probs.size() - 1;
}

std::vector<std::size_t> Rng::permutation(std::size_t n) {
  std::vector<std::size_t> p(n);
  for (std::size_t i = 0; i < n; ++i) p[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    std::size_t j = static_cast<std::size_t>(below(i));
    std::swap(p[i - 1], p[j]);
  }
  return p;
}

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::uint64_t derive_seed(std::uint64_t base_seed, std::string_view label) {
  return splitmix64(splitmix64(base_seed) ^ fnv1a64(label));
}

Rng seed_stream(std::uint64_t base_seed, std::string_view label) {
  return Rng(derive_seed(base_seed, label));
}

std::vector<Rng> seed_streams(std::uint64_t base_seed,
                              const std::vector<std::string>& labels) {
  std::vector<Rng> out;
  out.reserve(labels.size());
  for (const auto& l : labels) out.push_back(seed_stream(base_seed, l));
  return out;
}

}  // namespace kbo
