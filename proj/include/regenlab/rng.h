#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace regenlab {

// All randomness in the project flows from one global seed through named
// sub-streams, so any component can be re-run in isolation with the same
// draws it would see inside the full pipeline.
inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline uint64_t derive_seed(uint64_t global_seed, std::string_view stream) {
  uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (char c : stream) {
    h ^= static_cast<uint64_t>(static_cast<unsigned char>(c));
    h *= 1099511628211ULL;
  }
  return splitmix64(global_seed ^ h);
}

inline uint64_t derive_seed(uint64_t global_seed, std::string_view stream, uint64_t index) {
  return splitmix64(derive_seed(global_seed, stream) ^ splitmix64(index));
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed) {}

  double normal(double mean = 0.0, double std = 1.0) {
    return std::normal_distribution<double>(mean, std)(gen_);
  }

  double uniform(double lo = 0.0, double hi = 1.0) {
    return std::uniform_real_distribution<double>(lo, hi)(gen_);
  }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) {
    return std::uniform_int_distribution<uint64_t>(0, n - 1)(gen_);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    std::shuffle(v.begin(), v.end(), gen_);
  }

  std::mt19937_64& engine() { return gen_; }

 private:
  std::mt19937_64 gen_;
};

}  // namespace regenlab
