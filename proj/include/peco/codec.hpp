#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "peco/quantizer.hpp"

namespace peco {

struct CodecConfig {
  int64_t input_size = 32;
  int64_t downsample_stages = 2;
  int64_t base_channels = 64;
  int64_t residual_blocks = 2;  // per resolution
  int64_t latent_dim = 64;
  bool attention = true;        // self-attention at the bottleneck
  int64_t norm_groups = 8;

  int64_t latent_side() const { return input_size >> downsample_stages; }
  int64_t channels_at(int64_t level) const { return base_channels << level; }
  void validate() const;
};

/// GroupNorm -> SiLU -> conv3x3, twice, plus a (projected) skip.
class ResBlockImpl : public torch::nn::Module {
 public:
  ResBlockImpl(int64_t in_channels, int64_t out_channels, int64_t groups);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::GroupNorm norm1_{nullptr}, norm2_{nullptr};
  torch::nn::Conv2d conv1_{nullptr}, conv2_{nullptr}, skip_{nullptr};
};
TORCH_MODULE(ResBlock);

/// Single-head self-attention over all spatial positions, residual.
class AttentionBlockImpl : public torch::nn::Module {
 public:
  AttentionBlockImpl(int64_t channels, int64_t groups);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::GroupNorm norm_{nullptr};
  torch::nn::Conv2d q_{nullptr}, k_{nullptr}, v_{nullptr}, proj_{nullptr};
};
TORCH_MODULE(AttentionBlock);

class EncoderImpl : public torch::nn::Module {
 public:
  explicit EncoderImpl(const CodecConfig& cfg);
  torch::Tensor forward(const torch::Tensor& x);

 private:
  CodecConfig cfg_;
  torch::nn::Conv2d conv_in_{nullptr};
  torch::nn::Sequential body_{nullptr};
  torch::nn::GroupNorm norm_out_{nullptr};
  torch::nn::Conv2d conv_out_{nullptr};
};
TORCH_MODULE(Encoder);

/// Mirror of the encoder; upsampling is nearest-neighbour followed by a 3x3 conv.
class DecoderImpl : public torch::nn::Module {
 public:
  explicit DecoderImpl(const CodecConfig& cfg);
  torch::Tensor forward(const torch::Tensor& z_q);

 private:
  CodecConfig cfg_;
  torch::nn::Conv2d conv_in_{nullptr};
  torch::nn::Sequential body_{nullptr};
  torch::nn::GroupNorm norm_out_{nullptr};
  torch::nn::Conv2d conv_out_{nullptr};
};
TORCH_MODULE(Decoder);

class CodecImpl : public torch::nn::Module {
 public:
  explicit CodecImpl(const CodecConfig& cfg);

  const CodecConfig& config() const { return cfg_; }
  Encoder& encoder() { return encoder_; }
  Decoder& decoder() { return decoder_; }

 private:
  CodecConfig cfg_;
  Encoder encoder_{nullptr};
  Decoder decoder_{nullptr};
};
TORCH_MODULE(Codec);

/// Images are [B, 3, S, S] in [-1, 1]; latents [B, D, h, w].
torch::Tensor encode(Codec& codec, const torch::Tensor& images);
torch::Tensor decode(Codec& codec, const torch::Tensor& z_q);

/// Encoder + codebook + decoder: the trained VQ-VAE.
struct Tokenizer {
  Codec codec{nullptr};
  Codebook codebook;

  static Tokenizer create(const CodecConfig& cfg, int64_t codebook_size);
  TokenGrid tokenize(const torch::Tensor& images);
  /// Average-pooled quantized codewords, one D-vector per image.
  torch::Tensor pooled_codewords(const torch::Tensor& images);
  /// Hash over config, codec weights and codebook state.
  uint64_t fingerprint();
};

/// decode(lookup(assign(encode(x)))).
torch::Tensor reconstruct(Tokenizer& tokenizer, const torch::Tensor& images);

/// (name, shape) for every parameter, in registration order.
std::vector<std::pair<std::string, std::vector<int64_t>>> parameter_shapes(
    const torch::nn::Module& module);
int64_t parameter_count(const torch::nn::Module& module);

}  // namespace peco
