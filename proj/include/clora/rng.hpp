#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace clora {

// SplitMix64 generator (Steele, Lea, Flood 2014). Chosen over std::mt19937
// because the output sequence is pinned by this file alone: identical seeds
// give identical streams on every platform and standard library.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  // Derives an independent named stream from a root seed, so that e.g. data
  // generation and weight init consume separate sequences.
  static Rng stream(uint64_t root_seed, std::string_view name);

  uint64_t next_u64();

  // Uniform in [0, 1) with 53 random mantissa bits.
  double uniform();

  // Uniform in [lo, hi).
  double uniform(double lo, double hi);

  // Uniform integer in [0, n). Modulo reduction; the bias is ~n/2^64.
  uint64_t next_below(uint64_t n);

  // Standard normal via Box-Muller. One pair per two calls.
  double gaussian();
  double gaussian(double mean, double stddev) { return mean + stddev * gaussian(); }

  // Fisher-Yates; deterministic given the stream state.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace clora
