#include "peco/losses.hpp"

namespace peco {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

void LossConfig::validate() const {
  if (beta < 0.0 || lambda < 0.0 || adv_weight < 0.0) {
    fail(ErrorCode::kConfig, "loss weights must be non-negative");
  }
}

torch::Tensor pixel_loss(const torch::Tensor& x, const torch::Tensor& x_hat, PixelNorm norm) {
  if (x.sizes() != x_hat.sizes()) fail(ErrorCode::kShape, "pixel_loss: shapes differ");
  const torch::Tensor diff = x - x_hat;
  return norm == PixelNorm::kL1 ? diff.abs().mean() : diff.pow(2).mean();
}

torch::Tensor commitment_loss(const torch::Tensor& z, const torch::Tensor& z_q, double beta) {
  if (z.sizes() != z_q.sizes()) fail(ErrorCode::kShape, "commitment_loss: shapes differ");
  return beta * (z - z_q.detach()).pow(2).mean();
}

torch::Tensor codebook_loss(const torch::Tensor& z, const torch::Tensor& z_q) {
  if (z.sizes() != z_q.sizes()) fail(ErrorCode::kShape, "codebook_loss: shapes differ");
  return (z.detach() - z_q).pow(2).mean();
}

void DiscriminatorConfig::validate() const {
  if (stages < 1 || base_channels <= 0 || input_size % (int64_t{1} << stages) != 0) {
    fail(ErrorCode::kConfig, "discriminator: input_size must be divisible by 2^stages");
  }
}

PatchDiscriminatorImpl::PatchDiscriminatorImpl(const DiscriminatorConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  body_ = nn::Sequential();
  int64_t in = 3;
  int64_t out = cfg.base_channels;
  for (int64_t s = 0; s < cfg.stages; ++s) {
    body_->push_back(nn::Conv2d(nn::Conv2dOptions(in, out, 4).stride(2).padding(1)));
    body_->push_back(nn::LeakyReLU(nn::LeakyReLUOptions().negative_slope(0.2)));
    in = out;
    out *= 2;
  }
  body_->push_back(nn::Conv2d(nn::Conv2dOptions(in, 1, 3).padding(1)));
  register_module("body", body_);
}

torch::Tensor PatchDiscriminatorImpl::forward(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != cfg_.input_size ||
      images.size(3) != cfg_.input_size) {
    fail(ErrorCode::kShape, "discriminator: expected [B,3," + std::to_string(cfg_.input_size) +
                                "," + std::to_string(cfg_.input_size) + "] images");
  }
  return body_->forward(images);
}

AdversarialLosses adversarial_losses(const torch::Tensor& real_logits,
                                     const torch::Tensor& fake_logits) {
  AdversarialLosses out;
  out.discriminator =
      0.5 * (F::softplus(-real_logits).mean() + F::softplus(fake_logits).mean());
  out.generator = F::softplus(-fake_logits).mean();
  return out;
}

AdversarialLosses adversarial_losses(const torch::Tensor& x, const torch::Tensor& x_hat,
                                     PatchDiscriminator& disc) {
  const torch::Tensor real = disc->forward(x.detach());
  AdversarialLosses out;
  out.discriminator = adversarial_losses(real, disc->forward(x_hat.detach())).discriminator;
  out.generator = F::softplus(-disc->forward(x_hat)).mean();
  return out;
}

LossBreakdown tokenizer_loss(const torch::Tensor& x, const torch::Tensor& x_hat,
                             const torch::Tensor& z, const torch::Tensor& z_q,
                             FeatureNet* feature_net, const LossConfig& cfg,
                             PatchDiscriminator* disc) {
  cfg.validate();
  if (cfg.lambda > 0.0 && (feature_net == nullptr || !*feature_net)) {
    fail(ErrorCode::kConfig, "perceptual weight > 0 requires a feature network");
  }
  if (cfg.adv_weight > 0.0 && (disc == nullptr || !*disc)) {
    fail(ErrorCode::kConfig, "adversarial weight > 0 requires a discriminator");
  }
  const torch::Tensor zero = torch::zeros({}, x.options());
  LossBreakdown out;
  out.pixel = pixel_loss(x, x_hat, cfg.pixel_norm);
  out.perceptual =
      cfg.lambda > 0.0 ? cfg.lambda * perceptual_distance(*feature_net, x, x_hat) : zero;
  out.commitment = commitment_loss(z, z_q, cfg.beta);
  out.codebook = cfg.codebook_term ? codebook_loss(z, z_q) : zero;
  out.adversarial = cfg.adv_weight > 0.0
                        ? cfg.adv_weight * F::softplus(-(*disc)->forward(x_hat)).mean()
                        : zero;
  out.total = out.pixel + out.perceptual + out.commitment + out.codebook + out.adversarial;
  return out;
}

}  // namespace peco
