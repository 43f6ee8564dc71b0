#include "peco/quantizer.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace peco {

namespace {

// [B, D, h, w] or [D, h, w] -> [N, D]; remembers how to fold back.
struct FlatLatents {
  torch::Tensor flat;
  std::vector<int64_t> grid_shape;  // [B, h, w] or [h, w]
};

FlatLatents flatten_latents(const torch::Tensor& latents) {
  if (latents.dim() == 2) {
    return {latents, {latents.size(0)}};
  }
  if (latents.dim() == 3) {
    const int64_t d = latents.size(0);
    return {latents.permute({1, 2, 0}).reshape({-1, d}), {latents.size(1), latents.size(2)}};
  }
  if (latents.dim() == 4) {
    const int64_t d = latents.size(1);
    return {latents.permute({0, 2, 3, 1}).reshape({-1, d}),
            {latents.size(0), latents.size(2), latents.size(3)}};
  }
  fail(ErrorCode::kShape, "latents must be [N,D], [D,h,w] or [B,D,h,w]");
}

void require_codebook(const Codebook& cb) {
  if (cb.size() == 0) fail(ErrorCode::kConfig, "empty codebook");
}

struct StraightThroughFn : public torch::autograd::Function<StraightThroughFn> {
  static torch::Tensor forward(torch::autograd::AutogradContext* /*ctx*/,
                               const torch::Tensor& /*z*/, const torch::Tensor& z_q) {
    return z_q.clone();
  }
  static torch::autograd::variable_list backward(torch::autograd::AutogradContext* /*ctx*/,
                                                 torch::autograd::variable_list grads) {
    return {grads[0], torch::Tensor()};
  }
};

torch::Tensor squared_distances_to(const torch::Tensor& points, const torch::Tensor& center) {
  return (points - center.unsqueeze(0)).pow(2).sum(1);
}

}  // namespace

Codebook Codebook::from_entries(const torch::Tensor& entries, double decay, double eps) {
  if (entries.dim() != 2) fail(ErrorCode::kShape, "codebook entries must be [K, D]");
  Codebook cb;
  cb.entries = entries.detach().to(torch::kFloat32).contiguous().clone();
  cb.ema_counts = torch::ones({cb.entries.size(0)}, torch::kFloat32);
  cb.ema_sums = cb.entries.clone();
  cb.decay = decay;
  cb.eps = eps;
  return cb;
}

Codebook Codebook::clone() const {
  Codebook out = *this;
  out.entries = entries.detach().clone();
  out.ema_counts = ema_counts.detach().clone();
  out.ema_sums = ema_sums.detach().clone();
  return out;
}

torch::Tensor assign_vectors(const torch::Tensor& vectors, const Codebook& cb) {
  require_codebook(cb);
  if (vectors.dim() != 2 || vectors.size(1) != cb.dim()) {
    fail(ErrorCode::kShape, "latent dimension " +
                                std::to_string(vectors.dim() == 2 ? vectors.size(1) : -1) +
                                " does not match codebook dimension " +
                                std::to_string(cb.dim()));
  }
  torch::NoGradGuard no_grad;
  const torch::Tensor z = vectors.detach().to(torch::kFloat32).contiguous();
  const torch::Tensor e = cb.entries.detach().to(torch::kFloat32).contiguous();
  check_finite(z, "assign: latents");
  const int64_t n = z.size(0);
  const int64_t k = e.size(0);
  const int64_t d = e.size(1);

  const torch::Tensor zn = z.pow(2).sum(1);
  const torch::Tensor en = e.pow(2).sum(1);
  const torch::Tensor approx = zn.unsqueeze(1) - 2.0 * torch::matmul(z, e.t()) + en.unsqueeze(0);
  const torch::Tensor approx_min = std::get<0>(approx.min(1));
  const double e_max = en.max().item<double>();
  // Generous multiple of the float32 rounding bound of the expansion.
  const double rel_band = 4e-7 * static_cast<double>(d + 4);

  auto a = approx.accessor<float, 2>();
  auto amin = approx_min.accessor<float, 1>();
  auto zn_a = zn.accessor<float, 1>();
  auto za = z.accessor<float, 2>();
  auto ea = e.accessor<float, 2>();

  torch::Tensor out = torch::empty({n}, torch::kInt64);
  auto oa = out.accessor<int64_t, 1>();
  for (int64_t i = 0; i < n; ++i) {
    const double threshold =
        static_cast<double>(amin[i]) + rel_band * (static_cast<double>(zn_a[i]) + e_max) + 1e-30;
    int64_t best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < k; ++j) {
      if (static_cast<double>(a[i][j]) > threshold) continue;
      double exact = 0.0;
      for (int64_t c = 0; c < d; ++c) {
        const double diff = static_cast<double>(za[i][c]) - static_cast<double>(ea[j][c]);
        exact += diff * diff;
      }
      if (exact < best_d) {
        best_d = exact;
        best = j;
      }
    }
    oa[i] = best;
  }
  return out;
}

TokenGrid assign(const torch::Tensor& latents, const Codebook& cb) {
  require_codebook(cb);
  const FlatLatents f = flatten_latents(latents);
  return TokenGrid{assign_vectors(f.flat, cb).reshape(f.grid_shape)};
}

torch::Tensor lookup(const TokenGrid& tokens, const Codebook& cb) {
  require_codebook(cb);
  const torch::Tensor idx = tokens.indices.to(torch::kInt64);
  if (idx.numel() > 0) {
    const int64_t lo = idx.min().item<int64_t>();
    const int64_t hi = idx.max().item<int64_t>();
    if (lo < 0 || hi >= cb.size()) {
      fail(ErrorCode::kBounds, "token index " + std::to_string(lo < 0 ? lo : hi) +
                                   " outside codebook of size " + std::to_string(cb.size()));
    }
  }
  const torch::Tensor rows = cb.entries.index_select(0, idx.reshape({-1}));
  const int64_t d = cb.dim();
  if (idx.dim() == 1) return rows;
  if (idx.dim() == 2) {
    return rows.reshape({idx.size(0), idx.size(1), d}).permute({2, 0, 1}).contiguous();
  }
  if (idx.dim() == 3) {
    return rows.reshape({idx.size(0), idx.size(1), idx.size(2), d})
        .permute({0, 3, 1, 2})
        .contiguous();
  }
  fail(ErrorCode::kShape, "token grid must be [N], [h,w] or [B,h,w]");
}

torch::Tensor straight_through(const torch::Tensor& z, const torch::Tensor& z_q) {
  if (z.sizes() != z_q.sizes()) {
    fail(ErrorCode::kShape, "straight_through: z and z_q shapes differ");
  }
  return StraightThroughFn::apply(z, z_q);
}

Codebook ema_update(const Codebook& cb, const torch::Tensor& latents, const TokenGrid& tokens) {
  require_codebook(cb);
  torch::NoGradGuard no_grad;
  const torch::Tensor flat = flatten_latents(latents.detach()).flat.to(torch::kFloat32);
  const torch::Tensor idx = tokens.indices.reshape({-1}).to(torch::kInt64);
  if (flat.size(0) != idx.size(0)) {
    fail(ErrorCode::kShape, "ema_update: latent count and token count differ");
  }
  if (flat.size(1) != cb.dim()) fail(ErrorCode::kShape, "ema_update: latent dimension mismatch");

  const int64_t k = cb.size();
  const torch::Tensor batch_counts =
      torch::zeros({k}, torch::kFloat32).index_add_(0, idx, torch::ones({idx.size(0)}));
  const torch::Tensor batch_sums =
      torch::zeros({k, cb.dim()}, torch::kFloat32).index_add_(0, idx, flat);

  const double g = cb.decay;
  Codebook out;
  out.decay = cb.decay;
  out.eps = cb.eps;
  out.ema_counts = cb.ema_counts * g + batch_counts * (1.0 - g);
  out.ema_sums = cb.ema_sums * g + batch_sums * (1.0 - g);
  out.entries = out.ema_sums / out.ema_counts.clamp_min(cb.eps).unsqueeze(1);
  return out;
}

Codebook kmeans_init(const torch::Tensor& vectors, int64_t k, Rng& rng,
                     const KMeansOptions& options) {
  if (vectors.dim() != 2) fail(ErrorCode::kShape, "kmeans_init expects [M, D]");
  const int64_t m = vectors.size(0);
  if (k <= 0) fail(ErrorCode::kConfig, "kmeans_init: K must be positive");
  if (m < k) {
    fail(ErrorCode::kConfig, "kmeans_init: need at least K=" + std::to_string(k) +
                                 " vectors, got " + std::to_string(m));
  }
  torch::NoGradGuard no_grad;
  const torch::Tensor points = vectors.detach().to(torch::kFloat64).contiguous();

  // k-means++ seeding.
  std::vector<int64_t> chosen;
  chosen.reserve(static_cast<size_t>(k));
  std::vector<bool> taken(static_cast<size_t>(m), false);
  int64_t first = rng.uniform_int(m);
  chosen.push_back(first);
  taken[first] = true;
  torch::Tensor min_d = squared_distances_to(points, points[first]);
  while (static_cast<int64_t>(chosen.size()) < k) {
    auto md = min_d.accessor<double, 1>();
    double total = 0.0;
    for (int64_t i = 0; i < m; ++i) total += taken[i] ? 0.0 : md[i];
    int64_t pick = -1;
    if (total > 0.0) {
      const double r = rng.uniform() * total;
      double acc = 0.0;
      for (int64_t i = 0; i < m; ++i) {
        if (taken[i]) continue;
        acc += md[i];
        if (acc > r && md[i] > 0.0) {
          pick = i;
          break;
        }
      }
      if (pick < 0) {
        for (int64_t i = m - 1; i >= 0; --i) {
          if (!taken[i] && md[i] > 0.0) {
            pick = i;
            break;
          }
        }
      }
    }
    if (pick < 0) {
      // Remaining points all coincide with chosen centers.
      for (int64_t i = 0; i < m; ++i) {
        if (!taken[i]) {
          pick = i;
          break;
        }
      }
    }
    chosen.push_back(pick);
    taken[pick] = true;
    min_d = torch::minimum(min_d, squared_distances_to(points, points[pick]));
  }

  torch::Tensor centers =
      points.index_select(0, torch::tensor(chosen, torch::kInt64)).to(torch::kFloat32);
  const torch::Tensor points32 = points.to(torch::kFloat32);
  torch::Tensor previous;
  for (int it = 0; it < options.max_iterations; ++it) {
    const torch::Tensor labels = assign_vectors(points32, Codebook::from_entries(centers));
    if (previous.defined() && torch::equal(labels, previous)) break;
    previous = labels;
    const torch::Tensor counts =
        torch::zeros({k}, torch::kFloat64).index_add_(0, labels, torch::ones({m}, torch::kFloat64));
    const torch::Tensor sums = torch::zeros({k, points.size(1)}, torch::kFloat64)
                                   .index_add_(0, labels, points);
    const torch::Tensor means = (sums / counts.clamp_min(1.0).unsqueeze(1)).to(torch::kFloat32);
    centers = torch::where(counts.gt(0).unsqueeze(1), means, centers);
  }
  return Codebook::from_entries(centers, options.decay, options.eps);
}

torch::Tensor token_histogram(const torch::Tensor& tokens, int64_t k) {
  const torch::Tensor flat = tokens.reshape({-1}).to(torch::kInt64);
  if (flat.numel() > 0 && (flat.min().item<int64_t>() < 0 || flat.max().item<int64_t>() >= k)) {
    fail(ErrorCode::kBounds, "token index outside [0, K)");
  }
  return torch::bincount(flat, /*weights=*/{}, /*minlength=*/k);
}

double perplexity(const torch::Tensor& tokens, int64_t k) {
  if (tokens.numel() == 0) fail(ErrorCode::kConfig, "perplexity needs at least one token");
  return perplexity_from_counts(token_histogram(tokens, k));
}

double perplexity_from_counts(const torch::Tensor& histogram) {
  const torch::Tensor counts = histogram.to(torch::kFloat64).contiguous();
  const double total = counts.sum().item<double>();
  if (!(total > 0.0)) fail(ErrorCode::kConfig, "perplexity needs at least one token");
  auto c = counts.accessor<double, 1>();
  double entropy = 0.0;
  for (int64_t i = 0; i < counts.size(0); ++i) {
    if (c[i] <= 0.0) continue;
    const double p = c[i] / total;
    entropy -= p * std::log(p);
  }
  return std::exp(entropy);
}

}  // namespace peco
