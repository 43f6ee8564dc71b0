#include "peco/perceptual.hpp"

#include <algorithm>
#include <cmath>

namespace peco {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

void FeatureNetConfig::validate() const {
  if (channels.empty() || channels.size() != strides.size()) {
    fail(ErrorCode::kConfig, "feature net: channels and strides must be non-empty and equal length");
  }
  if (tap_layers.empty()) fail(ErrorCode::kConfig, "feature net: tap_layers must be non-empty");
  for (size_t i = 0; i < tap_layers.size(); ++i) {
    if (tap_layers[i] < 1 || tap_layers[i] > depth()) {
      fail(ErrorCode::kConfig, "feature net: tap layer " + std::to_string(tap_layers[i]) +
                                   " outside 1.." + std::to_string(depth()));
    }
    if (i > 0 && tap_layers[i] <= tap_layers[i - 1]) {
      fail(ErrorCode::kConfig, "feature net: tap_layers must be strictly increasing");
    }
  }
  int64_t side = input_size;
  for (size_t i = 0; i < channels.size(); ++i) {
    if (channels[i] <= 0 || channels[i] % norm_groups != 0) {
      fail(ErrorCode::kConfig, "feature net: channel count must be a positive multiple of norm_groups");
    }
    if (strides[i] != 1 && strides[i] != 2) fail(ErrorCode::kConfig, "feature net: strides must be 1 or 2");
    side = (side + strides[i] - 1) / strides[i];
  }
  if (side < 1) fail(ErrorCode::kConfig, "feature net: input too small");
}

FeatureNetImpl::FeatureNetImpl(const FeatureNetConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  int64_t in = 3;
  for (int64_t i = 0; i < cfg_.depth(); ++i) {
    const int64_t out = cfg_.channels[i];
    convs_.push_back(register_module(
        "conv" + std::to_string(i + 1),
        nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(cfg_.strides[i]).padding(1))));
    norms_.push_back(register_module("norm" + std::to_string(i + 1),
                                     nn::GroupNorm(nn::GroupNormOptions(cfg_.norm_groups, out))));
    in = out;
  }
}

void FeatureNetImpl::check_input(const torch::Tensor& images) const {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != cfg_.input_size ||
      images.size(3) != cfg_.input_size) {
    fail(ErrorCode::kShape, "feature net: expected [B,3," + std::to_string(cfg_.input_size) + "," +
                                std::to_string(cfg_.input_size) + "] images, got " +
                                c10::str(images.sizes()));
  }
}

std::vector<torch::Tensor> FeatureNetImpl::taps(const torch::Tensor& images) {
  check_input(images);
  std::vector<torch::Tensor> out;
  out.reserve(cfg_.tap_layers.size());
  torch::Tensor h = images;
  size_t next_tap = 0;
  const int64_t last = cfg_.tap_layers.back();
  for (int64_t i = 0; i < last; ++i) {
    h = torch::silu(norms_[i](convs_[i](h)));
    if (next_tap < cfg_.tap_layers.size() && cfg_.tap_layers[next_tap] == i + 1) {
      out.push_back(h);
      ++next_tap;
    }
  }
  return out;
}

torch::Tensor FeatureNetImpl::embedding(const torch::Tensor& images) {
  check_input(images);
  torch::Tensor h = images;
  for (int64_t i = 0; i < cfg_.depth(); ++i) h = torch::silu(norms_[i](convs_[i](h)));
  return h.mean({2, 3});
}

torch::Tensor normalize_channels(const torch::Tensor& activations) {
  const torch::Tensor sq = activations.pow(2).sum(1, /*keepdim=*/true);
  // Substituting 1 for zero norms keeps sqrt's derivative finite there.
  const torch::Tensor safe = torch::where(sq > 0, sq, torch::ones_like(sq));
  return activations / torch::sqrt(safe);
}

FeatureStack extract_features(FeatureNet& net, const torch::Tensor& images) {
  FeatureStack stack;
  for (const auto& t : net->taps(images)) stack.push_back(normalize_channels(t));
  return stack;
}

torch::Tensor feature_distance(const FeatureStack& a, const FeatureStack& b) {
  if (a.size() != b.size()) fail(ErrorCode::kShape, "feature stacks differ in depth");
  torch::Tensor total = torch::zeros({}, torch::kFloat32);
  for (size_t l = 0; l < a.size(); ++l) {
    if (a[l].sizes() != b[l].sizes()) fail(ErrorCode::kShape, "feature maps differ in shape");
    // Squared norm over channels, mean over batch and positions.
    total = total + (a[l] - b[l]).pow(2).sum(1).mean();
  }
  return total;
}

torch::Tensor perceptual_distance(FeatureNet& net, const torch::Tensor& x,
                                  const torch::Tensor& x_hat) {
  if (x.sizes() != x_hat.sizes()) fail(ErrorCode::kShape, "perceptual_distance: shapes differ");
  return feature_distance(extract_features(net, x), extract_features(net, x_hat));
}

torch::Tensor augment_views(const torch::Tensor& images, Rng& rng) {
  torch::NoGradGuard no_grad;
  const int64_t b = images.size(0);
  torch::Tensor theta = torch::zeros({b, 2, 3}, torch::kFloat32);
  torch::Tensor perm = torch::empty({b, 3}, torch::kInt64);
  torch::Tensor brightness = torch::empty({b, 1, 1, 1}, torch::kFloat32);
  torch::Tensor contrast = torch::empty({b, 1, 1, 1}, torch::kFloat32);
  torch::Tensor saturation = torch::empty({b, 1, 1, 1}, torch::kFloat32);
  auto th = theta.accessor<float, 3>();
  auto pa = perm.accessor<int64_t, 2>();
  auto ba = brightness.accessor<float, 4>();
  auto ca = contrast.accessor<float, 4>();
  auto sa = saturation.accessor<float, 4>();
  for (int64_t i = 0; i < b; ++i) {
    const double area = rng.uniform(0.35, 1.0);
    const double log_aspect = rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0));
    const double sx = std::min(1.0, std::sqrt(area * std::exp(log_aspect)));
    const double sy = std::min(1.0, std::sqrt(area / std::exp(log_aspect)));
    const double tx = rng.uniform(-(1.0 - sx), 1.0 - sx);
    const double ty = rng.uniform(-(1.0 - sy), 1.0 - sy);
    const double flip = rng.bernoulli(0.5) ? -1.0 : 1.0;
    th[i][0][0] = static_cast<float>(sx * flip);
    th[i][0][2] = static_cast<float>(tx);
    th[i][1][1] = static_cast<float>(sy);
    th[i][1][2] = static_cast<float>(ty);

    int64_t order[3] = {0, 1, 2};
    if (rng.bernoulli(0.8)) {
      for (int64_t j = 2; j > 0; --j) std::swap(order[j], order[rng.uniform_int(j + 1)]);
    }
    for (int64_t j = 0; j < 3; ++j) pa[i][j] = order[j];
    ba[i][0][0][0] = static_cast<float>(rng.uniform(-0.3, 0.3));
    ca[i][0][0][0] = static_cast<float>(rng.uniform(0.6, 1.4));
    sa[i][0][0][0] = rng.bernoulli(0.2) ? 0.0f : static_cast<float>(rng.uniform(0.4, 1.6));
  }
  const auto grid = F::affine_grid(theta, {b, 3, images.size(2), images.size(3)},
                                   /*align_corners=*/false);
  torch::Tensor out = F::grid_sample(images, grid,
                                     F::GridSampleFuncOptions()
                                         .mode(torch::kBilinear)
                                         .padding_mode(torch::kBorder)
                                         .align_corners(false));
  out = torch::gather(out, 1, perm.view({b, 3, 1, 1}).expand_as(out));
  const torch::Tensor gray = out.mean(1, /*keepdim=*/true);
  out = gray + (out - gray) * saturation;
  const torch::Tensor mean = out.mean({1, 2, 3}, /*keepdim=*/true);
  out = (out - mean) * contrast + mean + brightness;
  return out.clamp(-1.0, 1.0);
}

FeatureTrainResult train_feature_net(const torch::Tensor& images, const FeatureNetConfig& cfg,
                                     const FeatureTrainConfig& train, Rng& rng) {
  cfg.validate();
  if (images.dim() != 4 || images.size(0) == 0) {
    fail(ErrorCode::kConfig, "train_feature_net: empty dataset");
  }
  if (images.size(0) < 2) fail(ErrorCode::kConfig, "train_feature_net: need at least two images");
  seed_torch(rng.next_u64());
  FeatureTrainResult result;
  result.net = FeatureNet(cfg);
  if (cfg.weights == FeatureWeights::kRandomInit) return result;

  const int64_t width = cfg.channels.back();
  nn::Sequential head(nn::Linear(width, width), nn::ReLU(), nn::Linear(width, train.projection_dim));
  std::vector<torch::Tensor> params = result.net->parameters();
  for (const auto& p : head->parameters()) params.push_back(p);
  torch::optim::AdamW opt(params, torch::optim::AdamWOptions(train.lr).weight_decay(train.weight_decay));

  const int64_t n = images.size(0);
  const int64_t batch = std::min(train.batch_size, n);
  double interval_sum = 0.0;
  int64_t interval_count = 0;
  for (int64_t epoch = 0; epoch < train.epochs; ++epoch) {
    const std::vector<int64_t> order = rng.permutation(n);
    for (int64_t start = 0; start + batch <= n; start += batch) {
      const torch::Tensor idx =
          torch::tensor(std::vector<int64_t>(order.begin() + start, order.begin() + start + batch));
      const torch::Tensor x = images.index_select(0, idx);
      const torch::Tensor v1 = augment_views(x, rng);
      const torch::Tensor v2 = augment_views(x, rng);
      const torch::Tensor z = F::normalize(
          head->forward(result.net->embedding(torch::cat({v1, v2}, 0))),
          F::NormalizeFuncOptions().dim(1));
      torch::Tensor logits = torch::matmul(z, z.t()) / train.temperature;
      logits = logits.masked_fill(torch::eye(2 * batch, torch::kBool), -1e9);
      const torch::Tensor targets =
          torch::cat({torch::arange(batch, 2 * batch), torch::arange(0, batch)});
      const torch::Tensor loss = F::cross_entropy(logits, targets);
      opt.zero_grad();
      loss.backward();
      opt.step();
      const double v = loss.item<double>();
      if (!std::isfinite(v)) fail(ErrorCode::kDiverged, "feature net training diverged");
      interval_sum += v;
      if (++interval_count == train.log_interval) {
        result.interval_losses.push_back(interval_sum / static_cast<double>(interval_count));
        interval_sum = 0.0;
        interval_count = 0;
      }
    }
  }
  if (interval_count > 0) {
    result.interval_losses.push_back(interval_sum / static_cast<double>(interval_count));
  }
  result.net->eval();
  return result;
}

}  // namespace peco
