#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace efl {

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view bytes);

// Seeded generator. derive() produces independent child streams keyed by a
// string so that per-sample randomness never depends on iteration order.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(splitmix64(seed)) {}

  std::uint64_t seed() const { return seed_; }
  Rng derive(std::string_view key) const { return Rng(splitmix64(seed_ ^ fnv1a64(key))); }
  Rng derive(std::uint64_t key) const { return Rng(splitmix64(seed_ + 0x9e3779b97f4a7c15ULL * (key + 1))); }

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double uniform(double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  double normal() { return normal_(engine_); }
  // Uniform integer in [0, n).
  std::size_t index(std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_); }
  std::uint64_t next() { return engine_(); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

}  // namespace efl
