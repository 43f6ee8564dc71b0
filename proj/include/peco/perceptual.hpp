#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "peco/numerics.hpp"

namespace peco {

enum class FeatureWeights { kSelfSupervised, kRandomInit };

struct FeatureNetConfig {
  int64_t input_size = 32;
  std::vector<int64_t> channels = {32, 32, 64, 64, 128, 128, 128, 128};
  std::vector<int64_t> strides = {1, 1, 2, 1, 2, 1, 2, 1};
  std::vector<int64_t> tap_layers = {2, 4, 6, 8};  // 1-based layer indices
  int64_t norm_groups = 8;
  FeatureWeights weights = FeatureWeights::kSelfSupervised;

  int64_t depth() const { return static_cast<int64_t>(channels.size()); }
  void validate() const;
};

/// Plain conv stack (conv3x3 -> GroupNorm -> SiLU per layer). Taps are the
/// post-activation outputs of the configured layers.
class FeatureNetImpl : public torch::nn::Module {
 public:
  explicit FeatureNetImpl(const FeatureNetConfig& cfg);

  const FeatureNetConfig& config() const { return cfg_; }

  /// Raw (unnormalized) activations at every tap, in tap order.
  std::vector<torch::Tensor> taps(const torch::Tensor& images);
  /// Global average pool of the last layer; the representation trained by
  /// instance discrimination.
  torch::Tensor embedding(const torch::Tensor& images);

 private:
  void check_input(const torch::Tensor& images) const;

  FeatureNetConfig cfg_;
  std::vector<torch::nn::Conv2d> convs_;
  std::vector<torch::nn::GroupNorm> norms_;
};
TORCH_MODULE(FeatureNet);

/// One tensor [B, C_l, H_l, W_l] per tap, unit-normalized along channels.
using FeatureStack = std::vector<torch::Tensor>;

/// Divides each spatial position's channel vector by its L2 norm; all-zero
/// vectors stay zero (and get zero gradient).
torch::Tensor normalize_channels(const torch::Tensor& activations);

FeatureStack extract_features(FeatureNet& net, const torch::Tensor& images);

/// Sum over taps of the squared channel-vector distance averaged over spatial
/// positions (and over the batch). Symmetric, zero on identical stacks.
torch::Tensor feature_distance(const FeatureStack& a, const FeatureStack& b);

torch::Tensor perceptual_distance(FeatureNet& net, const torch::Tensor& x,
                                  const torch::Tensor& x_hat);

struct FeatureTrainConfig {
  int64_t epochs = 10;
  int64_t batch_size = 128;
  double lr = 1e-3;
  double weight_decay = 1e-4;
  double temperature = 0.2;
  int64_t projection_dim = 64;
  int64_t log_interval = 20;  // steps
};

struct FeatureTrainResult {
  FeatureNet net{nullptr};
  std::vector<double> interval_losses;  // mean contrastive loss per log interval
};

/// Instance-discrimination (two augmented views, NT-Xent) training on an
/// unlabeled image tensor [N, 3, S, S]. Weights depend only on (images, cfg, seed).
FeatureTrainResult train_feature_net(const torch::Tensor& images, const FeatureNetConfig& cfg,
                                     const FeatureTrainConfig& train, Rng& rng);

/// Random crop/flip plus colour perturbations, batched. Exposed for tests.
torch::Tensor augment_views(const torch::Tensor& images, Rng& rng);

}  // namespace peco
