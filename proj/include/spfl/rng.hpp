#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <vector>

namespace spfl {

// SplitMix64 counter generator. Self-contained so that streams are
// reproducible across platforms and standard libraries; std::shuffle and
// std::normal_distribution are implementation-defined.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  // Independent stream keyed by (seed, path...). Streams derived with
  // different paths behave as unrelated generators.
  static Rng derive(uint64_t seed, std::initializer_list<uint64_t> path) {
    uint64_t s = mix(seed ^ 0x9e3779b97f4a7c15ull);
    for (uint64_t p : path) s = mix(s ^ mix(p + 0xbf58476d1ce4e5b9ull));
    return Rng(s);
  }

  uint64_t next() {
    state_ += 0x9e3779b97f4a7c15ull;
    return mix(state_);
  }

  // [0, 1)
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; second value of the pair is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 == 0.0) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  // Unbiased integer in [0, n) by rejection.
  uint64_t below(uint64_t n) {
    if (n <= 1) return 0;
    uint64_t threshold = (0 - n) % n;
    for (;;) {
      uint64_t r = next();
      if (r >= threshold) return r % n;
    }
  }

  // Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  static uint64_t mix(uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Stream purposes used to key per-client per-round generators.
namespace stream {
constexpr uint64_t kInit = 1;      // global weight init
constexpr uint64_t kBatches = 2;   // mini-batch order
constexpr uint64_t kAttack = 3;    // adversary-side extra training
constexpr uint64_t kPartition = 4; // dataset sharding
}  // namespace stream

}  // namespace spfl
