#pragma once

#include <cstdint>
#include <cmath>
#include <random>
#include <string_view>
#include <vector>

namespace dpnav {

inline constexpr double kTwoPi = 6.283185307179586476925286766559;

// 64-bit FNV-1a, used to key RNG substreams by a string label.
constexpr std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : s) {
    h ^= static_cast<unsigned char>(c);
    h *= 1099511628211ull;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Deterministic random stream. The raw generator is mt19937_64, whose output
// sequence is fixed by the standard; uniform and gaussian draws are derived
// here rather than through std distributions so results are bit-identical
// across standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  // Independent substream keyed by (label, a, b). Streams for distinct keys
  // are decorrelated by splitmix64 mixing, so work items can be processed in
  // any order (or concurrently) with identical results.
  static Rng substream(std::uint64_t seed, std::string_view label,
                       std::uint64_t a = 0, std::uint64_t b = 0) {
    std::uint64_t h = splitmix64(seed ^ fnv1a64(label));
    h = splitmix64(h ^ (a + 0x632be59bd9b4e019ull));
    h = splitmix64(h ^ (b + 0x9e6c63d0876a9a35ull));
    return Rng(h);
  }

  std::uint64_t next_u64() { return gen_(); }

  // [0,1)
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller on (0,1] uniforms; the spare value is cached.
  double gaussian() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = static_cast<double>((next_u64() >> 11) + 1) * 0x1.0p-53;
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = kTwoPi * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

  // Uniform integer in [0, n) without modulo bias.
  std::uint64_t below(std::uint64_t n) {
    std::uint64_t threshold = (0 - n) % n;
    for (;;) {
      std::uint64_t r = next_u64();
      if (r >= threshold) return r % n;
    }
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 gen_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace dpnav
