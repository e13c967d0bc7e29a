#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace splitsim {

inline constexpr std::uint64_t splitmix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t fnv1a(std::string_view s) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Deterministic random stream. Every stream is derived from a seed and a name,
/// so that independent consumers never share draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(splitmix64(seed)) {}

  /// Named substream of `seed`, optionally indexed (e.g. per client).
  static Rng substream(std::uint64_t seed, std::string_view name, std::uint64_t index = 0) {
    return Rng(splitmix64(seed ^ fnv1a(name)) ^ splitmix64(index + 0x632be59bd9b4e019ULL));
  }

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  std::size_t index(std::size_t n) {
    return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }

  double gamma(double shape) { return std::gamma_distribution<double>(shape, 1.0)(engine_); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    // Fisher-Yates from the back; std::shuffle's draw pattern is not pinned by the standard.
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = index(i);
      std::swap(v[i - 1], v[j]);
    }
  }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace splitsim
