#pragma once

#include <cstdint>

#include <torch/torch.h>

#include "peco/numerics.hpp"

namespace peco {

/// Shared codebook of K codewords in R^D plus the running EMA statistics.
///
/// Invariant after every ema_update: entries[k] == ema_sums[k] / max(ema_counts[k], eps).
struct Codebook {
  torch::Tensor entries;     // [K, D] float32
  torch::Tensor ema_counts;  // [K]
  torch::Tensor ema_sums;    // [K, D]
  double decay = 0.99;
  double eps = 1e-5;

  int64_t size() const { return entries.defined() ? entries.size(0) : 0; }
  int64_t dim() const { return entries.defined() ? entries.size(1) : 0; }

  /// Wraps explicit codewords; counts start at 1 and sums at the entries, so
  /// the EMA invariant holds from the start.
  static Codebook from_entries(const torch::Tensor& entries, double decay = 0.99,
                               double eps = 1e-5);

  Codebook clone() const;
};

/// Discrete indices produced by the quantizer. Shape [h, w] or [B, h, w], int64.
struct TokenGrid {
  torch::Tensor indices;
};

/// Nearest codeword per row of a [N, D] matrix. Ties go to the lowest index.
///
/// Distances are screened with the ||z||^2 - 2 z.e + ||e||^2 expansion and
/// every candidate within the float32 error band of the minimum is re-scored
/// exactly in double precision, so the result agrees with a direct scan.
torch::Tensor assign_vectors(const torch::Tensor& vectors, const Codebook& cb);

/// Latents are laid out [B, D, h, w] (or [D, h, w]); tokens come back [B, h, w]
/// (or [h, w]).
TokenGrid assign(const torch::Tensor& latents, const Codebook& cb);

/// Codeword lookup; returns [B, D, h, w] (or [D, h, w]). Differentiable with
/// respect to cb.entries.
torch::Tensor lookup(const TokenGrid& tokens, const Codebook& cb);

/// Forward value is z_q, bit for bit; the incoming gradient is handed to z
/// unchanged and z_q receives none.
torch::Tensor straight_through(const torch::Tensor& z, const torch::Tensor& z_q);

/// One EMA step. `latents` and `tokens` may be batched grids or flat [N, D] / [N].
Codebook ema_update(const Codebook& cb, const torch::Tensor& latents,
                    const TokenGrid& tokens);

struct KMeansOptions {
  int max_iterations = 10;
  double decay = 0.99;
  double eps = 1e-5;
};

/// k-means++ seeding followed by Lloyd iterations until assignments stop
/// changing or max_iterations is hit. Empty clusters keep their center.
Codebook kmeans_init(const torch::Tensor& vectors, int64_t k, Rng& rng,
                     const KMeansOptions& options = {});

/// exp(entropy) of the empirical index distribution. In [1, K].
double perplexity(const torch::Tensor& tokens, int64_t k);
inline double perplexity(const TokenGrid& tokens, int64_t k) {
  return perplexity(tokens.indices, k);
}

/// Same quantity from a usage histogram [K].
double perplexity_from_counts(const torch::Tensor& histogram);

/// Per-codeword usage counts over any index tensor.
torch::Tensor token_histogram(const torch::Tensor& tokens, int64_t k);

}  // namespace peco
