#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <torch/torch.h>

#include "peco/numerics.hpp"
#include "peco/schedule.hpp"

namespace peco {

/// The masked set M over an h x w patch grid, stored as a dense flag vector.
struct MaskSpec {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<uint8_t> flags;  // row-major, 1 = masked

  MaskSpec() = default;
  MaskSpec(int64_t h, int64_t w) : height(h), width(w), flags(static_cast<size_t>(h * w), 0) {}

  int64_t size() const { return height * width; }
  int64_t count() const;
  bool masked(int64_t index) const { return flags[static_cast<size_t>(index)] != 0; }
  std::vector<int64_t> indices() const;
  /// Bool tensor [N].
  torch::Tensor tensor() const;
  static MaskSpec from_indices(int64_t h, int64_t w, const std::vector<int64_t>& indices);
};

struct BlockMaskOptions {
  int64_t min_block = -1;  // -1: 4 when N >= 16, else 1
  double min_aspect = 0.3;
  double max_aspect = 3.33;
  int attempts = 10;       // random proposals per block before the exhaustive fallback
};

/// Rectangle shapes (rows, cols) allowed as mask blocks on an h x w grid.
std::vector<std::pair<int64_t, int64_t>> valid_block_shapes(int64_t h, int64_t w,
                                                            const BlockMaskOptions& options);

/// Greedy union of random rectangles until |M| reaches round(ratio * N).
/// Random proposals first (area uniform in [min_block, remaining], log-uniform
/// aspect); when those stall, an exhaustive scan picks the block whose newly
/// covered cell count is closest to the remainder. Final |M| is within 2 of
/// the target.
MaskSpec blockwise_mask(int64_t h, int64_t w, double ratio, Rng& rng,
                        const BlockMaskOptions& options = {});

/// Rows in M are replaced by `mask_token`; other rows pass through untouched.
/// embeddings: [N, W] with mask [N], or [B, N, W] with mask [B, N] (bool).
torch::Tensor corrupt(const torch::Tensor& embeddings, const torch::Tensor& mask,
                      const torch::Tensor& mask_token);
inline torch::Tensor corrupt(const torch::Tensor& embeddings, const MaskSpec& spec,
                             const torch::Tensor& mask_token) {
  return corrupt(embeddings, spec.tensor(), mask_token);
}

struct MimConfig {
  int64_t input_size = 32;
  int64_t patch_size = 4;
  int64_t depth = 6;
  int64_t width = 256;
  int64_t heads = 4;
  int64_t mlp_ratio = 4;
  int64_t vocab_size = 512;     // K
  double mask_ratio = 0.4;
  double drop_path = 0.1;       // stochastic depth, max rate (linear over depth)

  int64_t grid_side() const { return input_size / patch_size; }
  int64_t num_patches() const { return grid_side() * grid_side(); }
  void validate() const;
};

class TransformerBlockImpl : public torch::nn::Module {
 public:
  TransformerBlockImpl(int64_t width, int64_t heads, int64_t mlp_ratio, double drop_path);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::Tensor drop_path(const torch::Tensor& residual) const;

  int64_t heads_;
  double drop_path_;
  torch::nn::LayerNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Linear qkv_{nullptr}, proj_{nullptr}, fc1_{nullptr}, fc2_{nullptr};
};
TORCH_MODULE(TransformerBlock);

/// Pre-norm ViT over raw pixel patches with a learnable mask token and a
/// single linear K-way head.
class MimTransformerImpl : public torch::nn::Module {
 public:
  explicit MimTransformerImpl(const MimConfig& cfg);

  const MimConfig& config() const { return cfg_; }

  /// [B, 3, S, S] -> [B, N, 3 p^2], patches in row-major grid order.
  torch::Tensor patchify(const torch::Tensor& images) const;
  /// Patch embeddings without position information, [B, N, W].
  torch::Tensor embed(const torch::Tensor& images);
  /// Adds position embeddings and runs the blocks; returns normalized hidden [B, N, W].
  torch::Tensor encode(const torch::Tensor& embeddings);
  /// Logits [B, N, K] from (possibly corrupted) embeddings.
  torch::Tensor mim_forward(const torch::Tensor& corrupted);
  /// Mean-pooled hidden states of uncorrupted images, [B, W].
  torch::Tensor pooled_features(const torch::Tensor& images);

  const torch::Tensor& mask_token() const { return mask_token_; }
  int64_t num_layers() const { return static_cast<int64_t>(blocks_.size()); }
  /// Layer id used for layer-wise lr decay: 0 for embeddings, i + 1 for
  /// block i, depth + 1 for the final norm and heads.
  int64_t layer_id(const std::string& parameter_name) const;

 private:
  MimConfig cfg_;
  torch::nn::Linear patch_embed_{nullptr};
  torch::Tensor pos_embed_;
  torch::Tensor mask_token_;
  std::vector<TransformerBlock> blocks_;
  torch::nn::LayerNorm norm_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(MimTransformer);

/// Mean cross-entropy over masked positions only.
/// logits [B, N, K] with targets/mask [B, N], or [N, K] with [N].
torch::Tensor mim_loss(const torch::Tensor& logits, const torch::Tensor& targets,
                       const torch::Tensor& mask);
inline torch::Tensor mim_loss(const torch::Tensor& logits, const torch::Tensor& targets,
                              const MaskSpec& spec) {
  return mim_loss(logits, targets, spec.tensor());
}

struct PretrainOptions {
  int64_t epochs = 20;
  int64_t batch_size = 128;
  int64_t log_interval = 20;
  OptimizerSettings optim;
};

struct PretrainLogEntry {
  int64_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
};

struct PretrainResult {
  MimTransformer model{nullptr};
  double initial_loss = 0.0;         // loss of the very first batch, before any update
  std::vector<double> epoch_losses;  // mean loss per epoch
  std::vector<PretrainLogEntry> log;
};

using PretrainLogger = std::function<void(const PretrainLogEntry&)>;

/// BERT-style pre-training: block masks per image, mask-token substitution,
/// cross-entropy on the cached tokenizer targets [N, h, w].
PretrainResult pretrain(const torch::Tensor& images, const torch::Tensor& targets,
                        const MimConfig& cfg, const PretrainOptions& options, Rng& rng,
                        const PretrainLogger& logger = {});

}  // namespace peco
