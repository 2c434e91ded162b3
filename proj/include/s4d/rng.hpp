#pragma once

#include <cstdint>
#include <random>

namespace s4d {

// Splitmix64-style fold. Used to derive independent, reproducible substreams
// (per epoch, per clip, per mask) from one master seed without coupling the
// draw counts of unrelated consumers.
inline uint64_t fold_seed(uint64_t seed, uint64_t salt) {
  uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(eng_);
  }
  // [0,1)
  double uniform() {
    return std::uniform_real_distribution<double>(0.0, 1.0)(eng_);
  }
  // [0,n)
  int uniform_int(int n) {
    return std::uniform_int_distribution<int>(0, n - 1)(eng_);
  }
  bool bernoulli(double p) {
    return std::bernoulli_distribution(p)(eng_);
  }
  std::mt19937_64& engine() { return eng_; }

 private:
  std::mt19937_64 eng_;
};

}  // namespace s4d
