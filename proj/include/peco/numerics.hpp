#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

#include "peco/error.hpp"

namespace peco {

/// Seeded pseudo-random source for everything outside torch's own generator
/// (shuffles, masks, augmentations, k-means seeding).
///
/// The engine is std::mt19937_64, whose output sequence is fixed by the C++
/// standard; the transforms to uniform/normal/integer draws are done here
/// rather than through std distributions so the same seed yields the same
/// draws on every standard library.
class Rng {
 public:
  explicit Rng(uint64_t seed) : engine_(seed), seed_(seed) {}

  uint64_t next_u64() { return engine_(); }

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). Rejection sampling, no modulo bias.
  int64_t uniform_int(int64_t n);

  /// Standard normal via Box-Muller (no cached second value).
  double normal();

  bool bernoulli(double p) { return uniform() < p; }

  std::vector<int64_t> permutation(int64_t n);

  template <typename T>
  void shuffle(std::vector<T>& values) {
    for (int64_t i = static_cast<int64_t>(values.size()) - 1; i > 0; --i) {
      std::swap(values[i], values[uniform_int(i + 1)]);
    }
  }

  /// Derive an independent child stream (e.g. one per worker or per phase).
  Rng fork(uint64_t salt);

  uint64_t seed() const { return seed_; }

  std::string state() const;
  void set_state(const std::string& state);

 private:
  std::mt19937_64 engine_;
  uint64_t seed_;
};

inline Rng seeded_rng(uint64_t seed) { return Rng(seed); }

/// Seed torch's global CPU generator (weight init, dropout, drop-path).
void seed_torch(uint64_t seed);

/// Throws kEvaluation when the tensor holds NaN or Inf.
void check_finite(const torch::Tensor& t, std::string_view what);

using ScalarFn = std::function<torch::Tensor(const torch::Tensor&)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  int64_t worst_index = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
};

/// Compares the autograd gradient of a scalar function against central
/// differences, coordinate by coordinate. The relative error per coordinate is
/// |a - n| / max(|a|, |n|, 1e-8).
GradCheckResult grad_check_detailed(const ScalarFn& f, const torch::Tensor& x,
                                    double eps = 1e-3);

inline double grad_check(const ScalarFn& f, const torch::Tensor& x,
                         double eps = 1e-3) {
  return grad_check_detailed(f, x, eps).max_relative_error;
}

/// 64-bit FNV-1a, used for fingerprints and manifest integrity.
uint64_t fnv1a64(const void* data, size_t size, uint64_t seed = 0xcbf29ce484222325ULL);
uint64_t fnv1a64(const torch::Tensor& t, uint64_t seed = 0xcbf29ce484222325ULL);
std::string to_hex(uint64_t value);

}  // namespace peco
