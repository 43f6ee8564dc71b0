#include <algorithm>
#include <cmath>
#include <vector>

#include <gtest/gtest.h>

#include "peco/codec.hpp"
#include "peco/losses.hpp"
#include "peco/numerics.hpp"

using namespace peco;

TEST(GradCheck, Polynomial) {
  const torch::Tensor x = torch::tensor({1.0f, 2.0f});
  const ScalarFn f = [](const torch::Tensor& t) { return (t * t).sum(); };
  torch::Tensor probe = x.clone().requires_grad_(true);
  f(probe).backward();
  EXPECT_TRUE(torch::allclose(probe.grad(), torch::tensor({2.0f, 4.0f})));
  EXPECT_LT(grad_check(f, x, 1e-3), 1e-4);
}

TEST(GradCheck, ConstantFunction) {
  const ScalarFn f = [](const torch::Tensor& t) { return (t * 0).sum() + 3.0; };
  EXPECT_EQ(grad_check(f, torch::randn({5})), 0.0);
}

TEST(GradCheck, DetectsWrongGradient) {
  // Forward x^2, backward claims 3x: the checker must notice.
  const ScalarFn f = [](const torch::Tensor& t) {
    const torch::Tensor scaled = 1.5 * (t * t).sum();
    return (t * t).sum().detach() + scaled - scaled.detach();
  };
  EXPECT_GT(grad_check(f, torch::tensor({1.0f, -2.0f})), 0.2);
}

TEST(GradCheck, NonFiniteIsEvaluationError) {
  const ScalarFn f = [](const torch::Tensor& t) { return (t / 0.0).sum(); };
  try {
    grad_check(f, torch::ones({2}));
    FAIL() << "expected an evaluation error";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kEvaluation);
  }
}

TEST(GradCheck, PixelLossThroughDecoder) {
  seed_torch(0);
  CodecConfig cc;
  cc.input_size = 8;
  cc.downsample_stages = 2;
  cc.base_channels = 8;
  cc.residual_blocks = 1;
  cc.latent_dim = 8;
  cc.norm_groups = 4;
  Codec codec(cc);
  // Evaluated in double so finite differences are not swamped by float32 rounding.
  codec->to(torch::kDouble);
  const torch::Tensor x = (torch::rand({2, 3, 8, 8}) * 2 - 1).to(torch::kDouble);
  const torch::Tensor z_q = torch::randn({2, 8, 2, 2});
  const ScalarFn f = [&](const torch::Tensor& z) {
    return pixel_loss(x, decode(codec, z.to(torch::kDouble)), PixelNorm::kL2);
  };
  EXPECT_LT(grad_check(f, z_q, 1e-2), 1e-2);
}

TEST(Rng, SameSeedSameDraws) {
  Rng a = seeded_rng(0), b = seeded_rng(0);
  for (int i = 0; i < 100; ++i) ASSERT_EQ(a.uniform(), b.uniform());
}

TEST(Rng, DistinctSeedsDiffer) {
  Rng a = seeded_rng(0), b = seeded_rng(1);
  int same = 0;
  for (int i = 0; i < 100; ++i) same += a.uniform() == b.uniform();
  EXPECT_LT(same, 100);
}

TEST(Rng, UniformMean) {
  Rng rng = seeded_rng(0);
  double sum = 0.0;
  for (int i = 0; i < 100000; ++i) {
    const double u = rng.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    sum += u;
  }
  EXPECT_NEAR(sum / 100000.0, 0.5, 0.01);
}

TEST(Rng, UniformIntInRangeAndCovers) {
  Rng rng(3);
  std::vector<int> seen(7, 0);
  for (int i = 0; i < 7000; ++i) {
    const int64_t v = rng.uniform_int(7);
    ASSERT_GE(v, 0);
    ASSERT_LT(v, 7);
    ++seen[static_cast<size_t>(v)];
  }
  for (int c : seen) EXPECT_GT(c, 800);
}

TEST(Rng, StateRoundTrip) {
  Rng rng(9);
  rng.uniform();
  const std::string state = rng.state();
  const double next = rng.uniform();
  Rng other(1);
  other.set_state(state);
  EXPECT_EQ(other.uniform(), next);
}

TEST(Rng, PermutationIsPermutation) {
  Rng rng(4);
  std::vector<int64_t> p = rng.permutation(50);
  std::sort(p.begin(), p.end());
  for (int64_t i = 0; i < 50; ++i) EXPECT_EQ(p[static_cast<size_t>(i)], i);
}

TEST(Hash, Fnv1aKnownValues) {
  EXPECT_EQ(fnv1a64("", 0), 0xcbf29ce484222325ULL);
  EXPECT_EQ(fnv1a64("a", 1), 0xaf63dc4c8601ec8cULL);
  EXPECT_EQ(to_hex(0xabcULL), "0000000000000abc");
}
