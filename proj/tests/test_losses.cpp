#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "peco/losses.hpp"

using namespace peco;

namespace {

FeatureNetConfig tiny_features() {
  FeatureNetConfig fc;
  fc.input_size = 8;
  fc.channels = {4, 8};
  fc.strides = {1, 2};
  fc.tap_layers = {1, 2};
  fc.norm_groups = 4;
  fc.weights = FeatureWeights::kRandomInit;
  return fc;
}

}  // namespace

TEST(PixelLoss, IdentityIsZero) {
  const torch::Tensor x = torch::randn({2, 3, 4, 4});
  EXPECT_EQ(pixel_loss(x, x).item<float>(), 0.0f);
}

TEST(PixelLoss, ConstantDifference) {
  EXPECT_FLOAT_EQ(pixel_loss(torch::ones({1, 3, 2, 2}), torch::zeros({1, 3, 2, 2})).item<float>(), 1.0f);
}

TEST(PixelLoss, HandMean) {
  EXPECT_FLOAT_EQ(pixel_loss(torch::tensor({0.0f, 0.5f}), torch::tensor({1.0f, 0.0f})).item<float>(), 0.75f);
  EXPECT_FLOAT_EQ(pixel_loss(torch::tensor({0.0f, 0.5f}), torch::tensor({1.0f, 0.0f}), PixelNorm::kL2).item<float>(),
                  0.625f);
}

TEST(CommitmentLoss, IdentityIsZero) {
  const torch::Tensor z = torch::randn({1, 4, 2, 2});
  EXPECT_EQ(commitment_loss(z, z, 0.25).item<float>(), 0.0f);
}

TEST(CommitmentLoss, NoGradientToCodewords) {
  torch::Tensor z = torch::randn({1, 4, 2, 2}).requires_grad_(true);
  torch::Tensor z_q = torch::randn({1, 4, 2, 2}).requires_grad_(true);
  commitment_loss(z, z_q, 0.25).backward();
  EXPECT_TRUE(z.grad().abs().sum().item<float>() > 0.0f);
  EXPECT_TRUE(!z_q.grad().defined() || torch::equal(z_q.grad(), torch::zeros_like(z_q)));
}

TEST(CommitmentLoss, HandValue) {
  EXPECT_FLOAT_EQ(commitment_loss(torch::zeros({2}), torch::ones({2}), 0.25).item<float>(), 0.25f);
}

TEST(TokenizerLoss, ReducesToPixelPlusCommitment) {
  torch::manual_seed(0);
  const torch::Tensor x = torch::rand({2, 3, 8, 8}), x_hat = torch::rand({2, 3, 8, 8});
  const torch::Tensor z = torch::randn({2, 4, 2, 2}), z_q = torch::randn({2, 4, 2, 2});
  LossConfig cfg;
  cfg.lambda = 0.0;
  const LossBreakdown b = tokenizer_loss(x, x_hat, z, z_q, nullptr, cfg);
  const double expected = pixel_loss(x, x_hat).item<double>() + commitment_loss(z, z_q, 0.25).item<double>();
  EXPECT_NEAR(b.total.item<double>(), expected, 1e-6);
  EXPECT_EQ(b.perceptual.item<float>(), 0.0f);
  EXPECT_EQ(b.adversarial.item<float>(), 0.0f);
}

TEST(TokenizerLoss, AllTermsZeroAtIdentity) {
  seed_torch(1);
  FeatureNet net(tiny_features());
  const torch::Tensor x = torch::rand({2, 3, 8, 8}) * 2 - 1;
  const torch::Tensor z = torch::randn({2, 4, 2, 2});
  LossConfig cfg;
  cfg.codebook_term = true;
  EXPECT_EQ(tokenizer_loss(x, x, z, z, &net, cfg).total.item<float>(), 0.0f);
}

TEST(TokenizerLoss, BreakdownSumsToTotal) {
  seed_torch(2);
  FeatureNet net(tiny_features());
  DiscriminatorConfig dc;
  dc.input_size = 8;
  dc.base_channels = 4;
  dc.stages = 2;
  PatchDiscriminator disc(dc);
  LossConfig cfg;
  cfg.adv_weight = 0.4;
  cfg.codebook_term = true;
  for (int trial = 0; trial < 5; ++trial) {
    const torch::Tensor x = torch::rand({2, 3, 8, 8}) * 2 - 1, x_hat = torch::rand({2, 3, 8, 8}) * 2 - 1;
    const torch::Tensor z = torch::randn({2, 4, 2, 2}), z_q = torch::randn({2, 4, 2, 2});
    const LossBreakdown b = tokenizer_loss(x, x_hat, z, z_q, &net, cfg, &disc);
    const double sum = b.pixel.item<double>() + b.perceptual.item<double>() + b.commitment.item<double>() +
                       b.codebook.item<double>() + b.adversarial.item<double>();
    EXPECT_LT(std::abs(sum - b.total.item<double>()), 1e-6);
  }
}

TEST(TokenizerLoss, PerceptualNeedsNetwork) {
  try {
    tokenizer_loss(torch::zeros({1, 3, 8, 8}), torch::zeros({1, 3, 8, 8}), torch::zeros({1}), torch::zeros({1}),
                   nullptr, LossConfig{});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfig);
  }
}

TEST(Discriminator, ThreeStagesOn32) {
  seed_torch(3);
  PatchDiscriminator disc(DiscriminatorConfig{});
  EXPECT_EQ(disc->forward(torch::zeros({2, 3, 32, 32})).sizes(), (std::vector<int64_t>{2, 1, 4, 4}));
}

TEST(Discriminator, ShapeFollowsConfig) {
  for (int64_t stages = 1; stages <= 4; ++stages) {
    DiscriminatorConfig dc;
    dc.input_size = 64;
    dc.base_channels = 4;
    dc.stages = stages;
    PatchDiscriminator disc(dc);
    const int64_t p = dc.output_side();
    EXPECT_EQ(disc->forward(torch::zeros({1, 3, 64, 64})).sizes(), (std::vector<int64_t>{1, 1, p, p}));
  }
}

TEST(Discriminator, Deterministic) {
  seed_torch(4);
  PatchDiscriminator disc(DiscriminatorConfig{});
  const torch::Tensor x = torch::rand({1, 3, 32, 32});
  EXPECT_TRUE(torch::equal(disc->forward(x), disc->forward(x)));
}

TEST(AdversarialLosses, ZeroLogits) {
  const AdversarialLosses l = adversarial_losses(torch::zeros({2, 1, 4, 4}), torch::zeros({2, 1, 4, 4}));
  EXPECT_NEAR(l.discriminator.item<double>(), std::log(2.0), 1e-6);
  EXPECT_NEAR(l.generator.item<double>(), std::log(2.0), 1e-6);
}

TEST(AdversarialLosses, ConfidentDiscriminator) {
  const AdversarialLosses l = adversarial_losses(torch::full({1, 1, 2, 2}, 40.0f), torch::full({1, 1, 2, 2}, -40.0f));
  EXPECT_LT(l.discriminator.item<double>(), 1e-12);
}

TEST(AdversarialLosses, UnitMargins) {
  const AdversarialLosses l = adversarial_losses(torch::ones({1, 1, 4, 4}), -torch::ones({1, 1, 4, 4}));
  const double softplus_minus_one = std::log1p(std::exp(-1.0));
  EXPECT_NEAR(l.discriminator.item<double>(), softplus_minus_one, 1e-6);
  EXPECT_NEAR(l.discriminator.item<double>(), 0.31326, 1e-5);
  // Generator wants the fake logits high: softplus(1).
  EXPECT_NEAR(l.generator.item<double>(), std::log1p(std::exp(1.0)), 1e-6);
}

TEST(AdversarialLosses, DiscriminatorTermIgnoresGenerator) {
  seed_torch(5);
  DiscriminatorConfig dc;
  dc.input_size = 8;
  dc.base_channels = 4;
  dc.stages = 2;
  PatchDiscriminator disc(dc);
  torch::Tensor x_hat = torch::rand({1, 3, 8, 8}).requires_grad_(true);
  adversarial_losses(torch::rand({1, 3, 8, 8}), x_hat, disc).discriminator.backward();
  EXPECT_TRUE(!x_hat.grad().defined() || x_hat.grad().abs().sum().item<float>() == 0.0f);
}
