#include "peco/codec.hpp"

#include <cmath>
#include <cstring>

namespace peco {

namespace nn = torch::nn;

void CodecConfig::validate() const {
  if (input_size <= 0 || downsample_stages < 0 || base_channels <= 0 || latent_dim <= 0 ||
      residual_blocks < 0 || norm_groups <= 0) {
    fail(ErrorCode::kConfig, "codec: sizes must be positive");
  }
  if (downsample_stages > 8 || input_size % (int64_t{1} << downsample_stages) != 0) {
    fail(ErrorCode::kConfig, "codec: input_size " + std::to_string(input_size) +
                                 " not divisible by 2^" + std::to_string(downsample_stages));
  }
  for (int64_t level = 0; level <= downsample_stages; ++level) {
    if (channels_at(level) % norm_groups != 0) {
      fail(ErrorCode::kConfig, "codec: channels " + std::to_string(channels_at(level)) +
                                   " not divisible by norm_groups " + std::to_string(norm_groups));
    }
  }
}

namespace {

nn::Conv2d conv3(int64_t in, int64_t out, int64_t stride = 1) {
  return nn::Conv2d(nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

nn::Conv2d conv1(int64_t in, int64_t out) { return nn::Conv2d(nn::Conv2dOptions(in, out, 1)); }

nn::GroupNorm group_norm(int64_t groups, int64_t channels) {
  return nn::GroupNorm(nn::GroupNormOptions(groups, channels).eps(1e-6));
}

}  // namespace

ResBlockImpl::ResBlockImpl(int64_t in_channels, int64_t out_channels, int64_t groups) {
  norm1_ = register_module("norm1", group_norm(groups, in_channels));
  conv1_ = register_module("conv1", conv3(in_channels, out_channels));
  norm2_ = register_module("norm2", group_norm(groups, out_channels));
  conv2_ = register_module("conv2", conv3(out_channels, out_channels));
  if (in_channels != out_channels) {
    skip_ = register_module("skip", conv1(in_channels, out_channels));
  }
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x) {
  torch::Tensor h = conv1_(torch::silu(norm1_(x)));
  h = conv2_(torch::silu(norm2_(h)));
  return (skip_ ? skip_(x) : x) + h;
}

AttentionBlockImpl::AttentionBlockImpl(int64_t channels, int64_t groups) {
  norm_ = register_module("norm", group_norm(groups, channels));
  q_ = register_module("q", conv1(channels, channels));
  k_ = register_module("k", nn::Conv2d(nn::Conv2dOptions(channels, channels, 1).bias(false)));
  v_ = register_module("v", conv1(channels, channels));
  proj_ = register_module("proj", conv1(channels, channels));
}

torch::Tensor AttentionBlockImpl::forward(const torch::Tensor& x) {
  const int64_t b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  const torch::Tensor n = norm_(x);
  const torch::Tensor q = q_(n).reshape({b, c, h * w}).permute({0, 2, 1});  // [B, HW, C]
  const torch::Tensor k = k_(n).reshape({b, c, h * w});                     // [B, C, HW]
  const torch::Tensor v = v_(n).reshape({b, c, h * w});                     // [B, C, HW]
  const torch::Tensor attn =
      torch::softmax(torch::bmm(q, k) / std::sqrt(static_cast<double>(c)), -1);  // [B, HW, HW]
  const torch::Tensor out = torch::bmm(v, attn.permute({0, 2, 1})).reshape({b, c, h, w});
  return x + proj_(out);
}

EncoderImpl::EncoderImpl(const CodecConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  conv_in_ = register_module("conv_in", conv3(3, cfg.base_channels));
  body_ = nn::Sequential();
  int64_t ch = cfg.base_channels;
  for (int64_t level = 0; level <= cfg.downsample_stages; ++level) {
    for (int64_t r = 0; r < cfg.residual_blocks; ++r) body_->push_back(ResBlock(ch, ch, cfg.norm_groups));
    if (level < cfg.downsample_stages) {
      body_->push_back(conv3(ch, ch * 2, /*stride=*/2));
      ch *= 2;
    }
  }
  if (cfg.attention) body_->push_back(AttentionBlock(ch, cfg.norm_groups));
  register_module("body", body_);
  norm_out_ = register_module("norm_out", group_norm(cfg.norm_groups, ch));
  conv_out_ = register_module("conv_out", conv3(ch, cfg.latent_dim));
}

torch::Tensor EncoderImpl::forward(const torch::Tensor& x) {
  return conv_out_(torch::silu(norm_out_(body_->forward(conv_in_(x)))));
}

DecoderImpl::DecoderImpl(const CodecConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  int64_t ch = cfg.channels_at(cfg.downsample_stages);
  conv_in_ = register_module("conv_in", conv3(cfg.latent_dim, ch));
  body_ = nn::Sequential();
  if (cfg.attention) body_->push_back(AttentionBlock(ch, cfg.norm_groups));
  for (int64_t level = cfg.downsample_stages; level >= 0; --level) {
    for (int64_t r = 0; r < cfg.residual_blocks; ++r) body_->push_back(ResBlock(ch, ch, cfg.norm_groups));
    if (level > 0) {
      body_->push_back(nn::Upsample(
          nn::UpsampleOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest)));
      body_->push_back(conv3(ch, ch / 2));
      ch /= 2;
    }
  }
  register_module("body", body_);
  norm_out_ = register_module("norm_out", group_norm(cfg.norm_groups, ch));
  conv_out_ = register_module("conv_out", conv3(ch, 3));
}

torch::Tensor DecoderImpl::forward(const torch::Tensor& z_q) {
  return torch::tanh(conv_out_(torch::silu(norm_out_(body_->forward(conv_in_(z_q))))));
}

CodecImpl::CodecImpl(const CodecConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  encoder_ = register_module("encoder", Encoder(cfg));
  decoder_ = register_module("decoder", Decoder(cfg));
}

torch::Tensor encode(Codec& codec, const torch::Tensor& images) {
  const auto& cfg = codec->config();
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != cfg.input_size ||
      images.size(3) != cfg.input_size) {
    fail(ErrorCode::kShape, "encode: expected [B,3," + std::to_string(cfg.input_size) + "," +
                                std::to_string(cfg.input_size) + "] images, got " +
                                c10::str(images.sizes()));
  }
  return codec->encoder()->forward(images);
}

torch::Tensor decode(Codec& codec, const torch::Tensor& z_q) {
  const auto& cfg = codec->config();
  const int64_t side = cfg.latent_side();
  if (z_q.dim() != 4 || z_q.size(1) != cfg.latent_dim || z_q.size(2) != side ||
      z_q.size(3) != side) {
    fail(ErrorCode::kShape, "decode: expected [B," + std::to_string(cfg.latent_dim) + "," +
                                std::to_string(side) + "," + std::to_string(side) +
                                "] latents, got " + c10::str(z_q.sizes()));
  }
  return codec->decoder()->forward(z_q);
}

Tokenizer Tokenizer::create(const CodecConfig& cfg, int64_t codebook_size) {
  if (codebook_size <= 0) fail(ErrorCode::kConfig, "codebook size must be positive");
  Tokenizer t;
  t.codec = Codec(cfg);
  t.codebook = Codebook::from_entries(torch::randn({codebook_size, cfg.latent_dim}));
  return t;
}

TokenGrid Tokenizer::tokenize(const torch::Tensor& images) {
  torch::NoGradGuard no_grad;
  return assign(encode(codec, images), codebook);
}

torch::Tensor Tokenizer::pooled_codewords(const torch::Tensor& images) {
  torch::NoGradGuard no_grad;
  return lookup(tokenize(images), codebook).mean({2, 3});
}

uint64_t Tokenizer::fingerprint() {
  const auto& c = codec->config();
  const int64_t header[] = {c.input_size, c.downsample_stages, c.base_channels, c.residual_blocks,
                            c.latent_dim, c.attention ? 1 : 0, c.norm_groups, codebook.size()};
  uint64_t h = fnv1a64(header, sizeof(header));
  for (const auto& item : codec->named_parameters()) {
    h = fnv1a64(item.key().data(), item.key().size(), h);
    h = fnv1a64(item.value(), h);
  }
  h = fnv1a64(codebook.entries, h);
  h = fnv1a64(codebook.ema_counts, h);
  h = fnv1a64(codebook.ema_sums, h);
  return h;
}

torch::Tensor reconstruct(Tokenizer& tokenizer, const torch::Tensor& images) {
  torch::NoGradGuard no_grad;
  const torch::Tensor z = encode(tokenizer.codec, images);
  return decode(tokenizer.codec, lookup(assign(z, tokenizer.codebook), tokenizer.codebook));
}

std::vector<std::pair<std::string, std::vector<int64_t>>> parameter_shapes(
    const torch::nn::Module& module) {
  std::vector<std::pair<std::string, std::vector<int64_t>>> out;
  for (const auto& item : module.named_parameters()) {
    out.emplace_back(item.key(), item.value().sizes().vec());
  }
  return out;
}

int64_t parameter_count(const torch::nn::Module& module) {
  int64_t n = 0;
  for (const auto& p : module.parameters()) n += p.numel();
  return n;
}

}  // namespace peco
