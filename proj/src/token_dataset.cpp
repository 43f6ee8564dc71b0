#include "peco/token_dataset.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>

#include "binary_io.hpp"
#include "peco/error.hpp"
#include "peco/numerics.hpp"

namespace peco {

namespace {

constexpr char kMagic[] = "PECOTOK1";
constexpr size_t kHeader = 32;

}  // namespace

TokenDataset tokenize_dataset(Tokenizer& tokenizer, const Dataset& data) {
  if (tokenizer.codebook.size() > 65536) fail(ErrorCode::kConfig, "token cache holds at most 65536 codewords");
  TokenDataset out;
  out.vocab_size = tokenizer.codebook.size();
  out.fingerprint = tokenizer.fingerprint();
  const int64_t side = tokenizer.codec->config().latent_side();
  out.height = side;
  out.width = side;
  std::vector<torch::Tensor> parts;
  for (int64_t s = 0; s < data.size(); s += 256) {
    parts.push_back(tokenizer.tokenize(data.images.slice(0, s, std::min(data.size(), s + 256))).indices);
  }
  out.tokens = parts.empty() ? torch::zeros({0, side, side}, torch::kInt64) : torch::cat(parts, 0);
  return out;
}

std::vector<uint8_t> encode_tokens(const TokenDataset& t) {
  if (t.height > 65535 || t.width > 65535 || t.vocab_size > 65536) {
    fail(ErrorCode::kConfig, "token cache dimensions exceed the header range");
  }
  const torch::Tensor tokens = t.tokens.to(torch::kInt64).contiguous();
  if (tokens.dim() != 3 || tokens.size(1) != t.height || tokens.size(2) != t.width) {
    fail(ErrorCode::kShape, "token cache: tokens must be [N, h, w]");
  }
  std::vector<uint8_t> out;
  out.reserve(kHeader + 2 * static_cast<size_t>(tokens.numel()));
  out.insert(out.end(), kMagic, kMagic + 8);
  detail::put_le<uint32_t>(out, static_cast<uint32_t>(tokens.size(0)));
  detail::put_le<uint16_t>(out, static_cast<uint16_t>(t.height));
  detail::put_le<uint16_t>(out, static_cast<uint16_t>(t.width));
  detail::put_le<uint32_t>(out, static_cast<uint32_t>(t.vocab_size));
  detail::put_le<uint32_t>(out, 0);
  detail::put_le<uint64_t>(out, t.fingerprint);
  const int64_t* p = tokens.data_ptr<int64_t>();
  for (int64_t i = 0; i < tokens.numel(); ++i) {
    if (p[i] < 0 || p[i] >= t.vocab_size) fail(ErrorCode::kBounds, "token cache: index out of range");
    detail::put_le<uint16_t>(out, static_cast<uint16_t>(p[i]));
  }
  return out;
}

TokenDataset decode_tokens(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < kHeader) fail(ErrorCode::kTruncatedBlob, "token cache: header truncated");
  if (!std::equal(kMagic, kMagic + 7, bytes.begin())) fail(ErrorCode::kIngestion, "token cache: bad magic");
  if (bytes[7] != static_cast<uint8_t>(kMagic[7])) {
    fail(ErrorCode::kVersionMismatch, "token cache: unsupported version");
  }
  TokenDataset t;
  const uint8_t* h = bytes.data();
  const auto n = static_cast<int64_t>(detail::get_le<uint32_t>(h + 8));
  t.height = detail::get_le<uint16_t>(h + 12);
  t.width = detail::get_le<uint16_t>(h + 14);
  t.vocab_size = detail::get_le<uint32_t>(h + 16);
  t.fingerprint = detail::get_le<uint64_t>(h + 24);
  const auto count = static_cast<size_t>(n * t.height * t.width);
  if (bytes.size() < kHeader + 2 * count) {
    fail(ErrorCode::kTruncatedBlob, "token cache: expected " + std::to_string(count) + " tokens");
  }
  t.tokens = torch::empty({n, t.height, t.width}, torch::kInt64);
  int64_t* dst = t.tokens.data_ptr<int64_t>();
  for (size_t i = 0; i < count; ++i) {
    dst[i] = detail::get_le<uint16_t>(h + kHeader + 2 * i);
    if (dst[i] >= t.vocab_size) {
      fail(ErrorCode::kBounds, "token cache: index " + std::to_string(dst[i]) + " >= K = " +
                                   std::to_string(t.vocab_size));
    }
  }
  return t;
}

void save_tokens(const TokenDataset& tokens, const std::filesystem::path& path) {
  const std::vector<uint8_t> bytes = encode_tokens(tokens);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

TokenDataset load_tokens(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open token cache " + path.string());
  const std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_tokens(bytes);
}

void verify_fingerprint(const TokenDataset& tokens, uint64_t tokenizer_fingerprint) {
  if (tokens.fingerprint != tokenizer_fingerprint) {
    fail(ErrorCode::kFingerprint, "token cache was produced by tokenizer " + to_hex(tokens.fingerprint) +
                                      ", but the configured tokenizer is " + to_hex(tokenizer_fingerprint));
  }
}

}  // namespace peco
