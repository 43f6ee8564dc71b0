#include <cmath>
#include <set>
#include <vector>

#include <gtest/gtest.h>

#include "peco/codec.hpp"
#include "peco/dataset.hpp"
#include "peco/mim.hpp"

using namespace peco;

namespace {

MimConfig small_config() {
  MimConfig mc;
  mc.input_size = 16;
  mc.patch_size = 4;
  mc.depth = 2;
  mc.width = 32;
  mc.heads = 2;
  mc.mlp_ratio = 2;
  mc.vocab_size = 16;
  mc.drop_path = 0.0;
  return mc;
}

// True when every masked cell lies in some allowed rectangle that is itself
// fully masked, i.e. the mask is a union of allowed rectangles.
bool decomposes_into_blocks(const MaskSpec& m, int64_t min_block, double min_aspect, double max_aspect) {
  const int64_t h = m.height, w = m.width;
  std::vector<uint8_t> covered(m.flags.size(), 0);
  for (int64_t rows = 1; rows <= h; ++rows) {
    for (int64_t cols = 1; cols <= w; ++cols) {
      const double aspect = static_cast<double>(rows) / static_cast<double>(cols);
      if (rows * cols < min_block || aspect < min_aspect || aspect > max_aspect) continue;
      for (int64_t r0 = 0; r0 + rows <= h; ++r0) {
        for (int64_t c0 = 0; c0 + cols <= w; ++c0) {
          bool inside = true;
          for (int64_t r = r0; r < r0 + rows && inside; ++r)
            for (int64_t c = c0; c < c0 + cols && inside; ++c) inside = m.masked(r * w + c);
          if (!inside) continue;
          for (int64_t r = r0; r < r0 + rows; ++r)
            for (int64_t c = c0; c < c0 + cols; ++c) covered[static_cast<size_t>(r * w + c)] = 1;
        }
      }
    }
  }
  for (size_t i = 0; i < covered.size(); ++i)
    if (m.flags[i] && !covered[i]) return false;
  return true;
}

}  // namespace

TEST(BlockMask, RatioZeroIsEmpty) {
  Rng rng(0);
  EXPECT_EQ(blockwise_mask(8, 8, 0.0, rng).count(), 0);
}

TEST(BlockMask, RatioOneIsFull) {
  Rng rng(0);
  EXPECT_EQ(blockwise_mask(8, 8, 1.0, rng).count(), 64);
}

TEST(BlockMask, StatisticsAndDecomposition) {
  Rng rng(0);
  double total = 0.0;
  for (int draw = 0; draw < 1000; ++draw) {
    const MaskSpec m = blockwise_mask(8, 8, 0.4, rng);
    total += static_cast<double>(m.count());
    ASSERT_TRUE(decomposes_into_blocks(m, 4, 0.3, 3.33)) << "draw " << draw;
  }
  const double mean = total / 1000.0;
  EXPECT_GE(mean, 24.6);
  EXPECT_LE(mean, 26.6);
}

TEST(BlockMask, SmallGridUsesUnitBlocks) {
  Rng rng(1);
  const MaskSpec m = blockwise_mask(3, 3, 0.5, rng);
  EXPECT_NEAR(static_cast<double>(m.count()), 4.5, 2.0);
  EXPECT_TRUE(decomposes_into_blocks(m, 1, 0.3, 3.33));
}

TEST(BlockMask, Deterministic) {
  Rng a(7), b(7);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(blockwise_mask(8, 8, 0.4, a).flags, blockwise_mask(8, 8, 0.4, b).flags);
}

TEST(BlockMask, BadRatioIsConfigError) {
  Rng rng(0);
  try {
    blockwise_mask(8, 8, 1.5, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfig);
  }
}

TEST(Corrupt, EmptyMaskIsIdentity) {
  const torch::Tensor e = torch::randn({6, 4});
  EXPECT_TRUE(torch::equal(corrupt(e, MaskSpec(2, 3), torch::ones({4})), e));
}

TEST(Corrupt, FullMaskIsAllToken) {
  const torch::Tensor e = torch::randn({6, 4});
  const torch::Tensor token = torch::randn({4});
  const torch::Tensor out = corrupt(e, MaskSpec::from_indices(2, 3, {0, 1, 2, 3, 4, 5}), token);
  for (int64_t i = 0; i < 6; ++i) EXPECT_TRUE(torch::equal(out[i], token));
}

TEST(Corrupt, FirstRowOnly) {
  const torch::Tensor e = torch::randn({6, 4});
  const torch::Tensor token = torch::randn({4});
  const torch::Tensor out = corrupt(e, MaskSpec::from_indices(2, 3, {0}), token);
  EXPECT_TRUE(torch::equal(out[0], token));
  for (int64_t i = 1; i < 6; ++i) EXPECT_TRUE(torch::equal(out[i], e[i])) << "row " << i;
}

TEST(Corrupt, BatchedMasks) {
  const torch::Tensor e = torch::randn({2, 3, 4});
  const torch::Tensor mask = torch::tensor({true, false, false, false, false, true}).reshape({2, 3});
  const torch::Tensor token = torch::randn({4});
  const torch::Tensor out = corrupt(e, mask, token);
  EXPECT_TRUE(torch::equal(out[0][0], token));
  EXPECT_TRUE(torch::equal(out[1][2], token));
  EXPECT_TRUE(torch::equal(out[1][0], e[1][0]));
}

TEST(MimForward, ShapeForSeveralGrids) {
  for (int64_t side : {8, 16, 24}) {
    MimConfig mc = small_config();
    mc.input_size = side;
    seed_torch(0);
    MimTransformer model(mc);
    torch::NoGradGuard no_grad;
    const torch::Tensor logits = model->mim_forward(model->embed(torch::zeros({2, 3, side, side})));
    EXPECT_EQ(logits.sizes(), (std::vector<int64_t>{2, mc.num_patches(), 16}));
  }
}

TEST(MimForward, DeterministicWithoutDropPath) {
  seed_torch(1);
  MimTransformer model(small_config());
  model->train();
  const torch::Tensor x = torch::randn({2, 3, 16, 16});
  torch::NoGradGuard no_grad;
  EXPECT_TRUE(torch::equal(model->mim_forward(model->embed(x)), model->mim_forward(model->embed(x))));
}

TEST(MimForward, DropPathIsStochasticInTraining) {
  MimConfig mc = small_config();
  mc.drop_path = 0.5;
  seed_torch(2);
  MimTransformer model(mc);
  model->train();
  const torch::Tensor x = torch::randn({4, 3, 16, 16});
  torch::NoGradGuard no_grad;
  const torch::Tensor a = model->mim_forward(model->embed(x));
  const torch::Tensor b = model->mim_forward(model->embed(x));
  EXPECT_FALSE(torch::equal(a, b));
  model->eval();
  EXPECT_TRUE(torch::equal(model->mim_forward(model->embed(x)), model->mim_forward(model->embed(x))));
}

TEST(MimLoss, UniformLogitsGiveLogK) {
  const torch::Tensor logits = torch::zeros({1, 10, 512});
  const torch::Tensor targets = torch::randint(512, {1, 10});
  const torch::Tensor mask = torch::ones({1, 10}, torch::kBool);
  EXPECT_NEAR(mim_loss(logits, targets, mask).item<double>(), std::log(512.0), 1e-5);
  EXPECT_NEAR(std::log(512.0), 6.23832, 1e-5);
}

TEST(MimLoss, ConfidentCorrectGivesZero) {
  const torch::Tensor targets = torch::tensor({2, 0, 1}, torch::kInt64);
  const torch::Tensor logits = torch::one_hot(targets, 3).to(torch::kFloat32) * 100;
  EXPECT_LT(mim_loss(logits, targets, torch::ones({3}, torch::kBool)).item<double>(), 1e-12);
}

TEST(MimLoss, HandSoftmax) {
  const torch::Tensor logits = torch::tensor({5.0f, -2.0f, static_cast<float>(std::log(3.0)), 0.0f}).reshape({2, 2});
  const torch::Tensor targets = torch::tensor({1, 0}, torch::kInt64);
  // Only row 1 is masked: -log(3 / (3 + 1)).
  EXPECT_NEAR(mim_loss(logits, targets, MaskSpec::from_indices(1, 2, {1})).item<double>(), std::log(4.0 / 3.0), 1e-6);
  EXPECT_NEAR(std::log(4.0 / 3.0), 0.28768, 1e-5);
}

TEST(MimLoss, NoGradientAtUnmaskedRows) {
  torch::Tensor logits = torch::randn({6, 5}).requires_grad_(true);
  const torch::Tensor targets = torch::randint(5, {6});
  const MaskSpec spec = MaskSpec::from_indices(2, 3, {1, 4});
  mim_loss(logits, targets, spec).backward();
  for (int64_t i = 0; i < 6; ++i) {
    const bool zero = torch::equal(logits.grad()[i], torch::zeros({5}));
    EXPECT_EQ(zero, !spec.masked(i)) << "row " << i;
  }
}

TEST(MimLoss, EmptyMaskIsUndefined) {
  try {
    mim_loss(torch::zeros({2, 3}), torch::zeros({2}, torch::kInt64), torch::zeros({2}, torch::kBool));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUndefinedLoss);
  }
}

TEST(LayerIds, EmbeddingsBlocksHead) {
  MimTransformer model(small_config());
  EXPECT_EQ(model->layer_id("patch_embed.weight"), 0);
  EXPECT_EQ(model->layer_id("pos_embed"), 0);
  EXPECT_EQ(model->layer_id("mask_token"), 0);
  EXPECT_EQ(model->layer_id("block0.qkv.weight"), 1);
  EXPECT_EQ(model->layer_id("block1.fc2.bias"), 2);
  EXPECT_EQ(model->layer_id("norm.weight"), 3);
  EXPECT_EQ(model->layer_id("head.weight"), 3);
}

namespace {

struct PretrainFixture {
  torch::Tensor images;
  torch::Tensor targets;
};

PretrainFixture fixture(int64_t count, int64_t vocab) {
  ToyDatasetOptions o;
  o.count = count;
  o.image_size = 16;
  const Dataset data = make_toy_dataset(o);
  CodecConfig cc;
  cc.input_size = 16;
  cc.base_channels = 8;
  cc.residual_blocks = 1;
  cc.latent_dim = 8;
  cc.norm_groups = 4;
  seed_torch(3);
  Tokenizer tok = Tokenizer::create(cc, vocab);
  return {data.images, tok.tokenize(data.images).indices};
}

}  // namespace

TEST(Pretrain, InitialLossNearLogK) {
  const PretrainFixture f = fixture(64, 512);
  MimConfig mc = small_config();
  mc.vocab_size = 512;
  PretrainOptions po;
  po.epochs = 1;
  po.batch_size = 32;
  Rng rng(0);
  const PretrainResult r = pretrain(f.images, f.targets, mc, po, rng);
  EXPECT_NEAR(r.initial_loss / std::log(512.0), 1.0, 0.02);
}

TEST(Pretrain, SameSeedSameLoss) {
  const PretrainFixture f = fixture(64, 16);
  PretrainOptions po;
  po.epochs = 2;
  po.batch_size = 16;
  Rng a(4), b(4);
  const PretrainResult ra = pretrain(f.images, f.targets, small_config(), po, a);
  const PretrainResult rb = pretrain(f.images, f.targets, small_config(), po, b);
  EXPECT_EQ(ra.epoch_losses, rb.epoch_losses);
}

TEST(Pretrain, LossFallsAcrossEpochs) {
  const PretrainFixture f = fixture(5000, 64);
  MimConfig mc = small_config();
  mc.vocab_size = 64;
  mc.drop_path = 0.1;
  PretrainOptions po;
  po.epochs = 20;
  po.batch_size = 128;
  po.optim.warmup_steps = 40;
  Rng rng(5);
  const PretrainResult r = pretrain(f.images, f.targets, mc, po, rng);
  ASSERT_EQ(r.epoch_losses.size(), 20u);
  EXPECT_GT(r.epoch_losses[0], r.epoch_losses[4]);
  EXPECT_GT(r.epoch_losses[4], r.epoch_losses[19]);
}

TEST(Pretrain, GridMismatchIsConfigError) {
  const PretrainFixture f = fixture(8, 16);
  MimConfig mc = small_config();
  mc.patch_size = 2;
  Rng rng(0);
  try {
    pretrain(f.images, f.targets, mc, PretrainOptions{}, rng);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kConfig);
  }
}
