#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

namespace cfn {

uint64_t splitmix64(uint64_t x);
uint64_t fnv1a64(std::string_view s);

// Deterministic RNG. The engine is std::mt19937_64 (its raw output sequence is
// pinned by the standard); all distribution transforms are implemented here so
// streams are bit-identical across platforms and library versions.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(splitmix64(seed)) {}

  // Independent substream for (seed, stream); used for per-clip / per-parameter
  // derivation so streams do not shift when unrelated consumers are added.
  static Rng derive(uint64_t seed, uint64_t stream) {
    return Rng(splitmix64(seed ^ splitmix64(stream + 0x9e3779b97f4a7c15ull)));
  }
  static Rng derive(uint64_t seed, std::string_view name) {
    return derive(seed, fnv1a64(name));
  }

  uint64_t next_u64() { return eng_(); }

  // Uniform on [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive range. Modulo bias is irrelevant here; determinism is what matters.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    return lo + static_cast<int64_t>(next_u64() % static_cast<uint64_t>(hi - lo + 1));
  }

  // Box-Muller with a cached spare.
  double normal();
  double normal(double mu, double sigma) { return mu + sigma * normal(); }

  std::vector<double> normal_vec(size_t n, double mu = 0.0, double sigma = 1.0);

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::mt19937_64 eng_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace cfn
