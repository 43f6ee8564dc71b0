#pragma once

#include <cstdint>

#include <torch/torch.h>

#include "peco/perceptual.hpp"

namespace peco {

enum class PixelNorm { kL1, kL2 };

struct LossConfig {
  double beta = 0.25;        // commitment weight
  double lambda = 1.0;       // perceptual weight
  double adv_weight = 0.0;   // generator-side adversarial weight
  PixelNorm pixel_norm = PixelNorm::kL1;
  // Adds ||sg[z] - z_q||^2 for gradient-trained codebooks; off when EMA
  // maintains the codebook.
  bool codebook_term = false;

  void validate() const;
};

/// Mean absolute (L1) or mean squared (L2) difference.
torch::Tensor pixel_loss(const torch::Tensor& x, const torch::Tensor& x_hat,
                         PixelNorm norm = PixelNorm::kL1);

/// beta * mean((z - sg[z_q])^2).
torch::Tensor commitment_loss(const torch::Tensor& z, const torch::Tensor& z_q, double beta);

/// mean((sg[z] - z_q)^2).
torch::Tensor codebook_loss(const torch::Tensor& z, const torch::Tensor& z_q);

/// Weighted contributions; total is their sum.
struct LossBreakdown {
  torch::Tensor pixel;
  torch::Tensor perceptual;
  torch::Tensor commitment;
  torch::Tensor codebook;
  torch::Tensor adversarial;
  torch::Tensor total;
};

struct DiscriminatorConfig {
  int64_t input_size = 32;
  int64_t base_channels = 32;
  int64_t stages = 3;  // stride-2 conv stages

  int64_t output_side() const { return input_size >> stages; }
  void validate() const;
};

/// Patch discriminator: `stages` stride-2 4x4 convs with LeakyReLU, then a
/// 3x3 conv to one logit per patch. Output [B, 1, p, p], p = S / 2^stages.
class PatchDiscriminatorImpl : public torch::nn::Module {
 public:
  explicit PatchDiscriminatorImpl(const DiscriminatorConfig& cfg);
  torch::Tensor forward(const torch::Tensor& images);
  const DiscriminatorConfig& config() const { return cfg_; }

 private:
  DiscriminatorConfig cfg_;
  torch::nn::Sequential body_{nullptr};
};
TORCH_MODULE(PatchDiscriminator);

struct AdversarialLosses {
  torch::Tensor discriminator;  // 0.5 * (softplus(-D(x)) + softplus(D(x_hat))), patch means
  torch::Tensor generator;      // non-saturating: mean softplus(-D(x_hat))
};

/// From precomputed logits. Gradients flow wherever the inputs carry them.
AdversarialLosses adversarial_losses(const torch::Tensor& real_logits,
                                     const torch::Tensor& fake_logits);

/// Runs D. The discriminator term sees x_hat detached; the generator term
/// back-propagates into x_hat.
AdversarialLosses adversarial_losses(const torch::Tensor& x, const torch::Tensor& x_hat,
                                     PatchDiscriminator& disc);

/// pixel + lambda * perceptual + commitment (+ codebook) (+ adv_weight * generator).
/// `feature_net` may be null only when lambda == 0; `disc` only when adv_weight == 0.
LossBreakdown tokenizer_loss(const torch::Tensor& x, const torch::Tensor& x_hat,
                             const torch::Tensor& z, const torch::Tensor& z_q,
                             FeatureNet* feature_net, const LossConfig& cfg,
                             PatchDiscriminator* disc = nullptr);

}  // namespace peco
