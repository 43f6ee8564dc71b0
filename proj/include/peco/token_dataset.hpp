#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <torch/torch.h>

#include "peco/codec.hpp"
#include "peco/dataset.hpp"

namespace peco {

/// Cached tokenizer output for a whole dataset.
///
/// File layout: 32-byte header ("PECOTOK1", u32 N, u16 h, u16 w, u32 K,
/// u32 flags = 0, u64 tokenizer fingerprint), then N*h*w u16 little-endian
/// token ids in image-major, row-major order.
struct TokenDataset {
  int64_t height = 0;
  int64_t width = 0;
  int64_t vocab_size = 0;
  uint64_t fingerprint = 0;
  torch::Tensor tokens;  // [N, h, w] int64

  int64_t size() const { return tokens.defined() ? tokens.size(0) : 0; }
};

TokenDataset tokenize_dataset(Tokenizer& tokenizer, const Dataset& data);

std::vector<uint8_t> encode_tokens(const TokenDataset& tokens);
TokenDataset decode_tokens(const std::vector<uint8_t>& bytes);

void save_tokens(const TokenDataset& tokens, const std::filesystem::path& path);
TokenDataset load_tokens(const std::filesystem::path& path);

/// Fatal (fingerprint error) unless the cache was produced by this tokenizer.
void verify_fingerprint(const TokenDataset& tokens, uint64_t tokenizer_fingerprint);

}  // namespace peco
