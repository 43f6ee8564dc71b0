#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

namespace peco {

inline constexpr const char* kCheckpointFormat = "peco-ckpt/1";

/// Named float32 tensors plus run metadata.
///
/// On disk: "PECOCKPT", u64 manifest byte length, u64 FNV-1a hash of the
/// manifest, the UTF-8 JSON manifest, then the little-endian float32 blob.
/// The manifest lists every tensor's shape, byte offset and byte length.
struct Checkpoint {
  std::string stage;
  int64_t step = 0;
  nlohmann::json config = nlohmann::json::object();
  std::string rng_state;
  std::vector<std::pair<std::string, torch::Tensor>> tensors;

  void add(const std::string& name, const torch::Tensor& tensor);
  bool has(const std::string& name) const;
  const torch::Tensor& get(const std::string& name) const;
};

/// Writes to a temporary sibling and renames, so an existing file is only
/// ever replaced by a complete checkpoint.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Serialized bytes; exposed for corruption tests.
std::vector<uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<uint8_t>& bytes);

/// Copies every parameter and buffer under `prefix.`.
void put_module(Checkpoint& ckpt, const std::string& prefix, const torch::nn::Module& module);
/// Loads them back; a missing entry or shape mismatch is a shape error.
void get_module(const Checkpoint& ckpt, const std::string& prefix, torch::nn::Module& module);

}  // namespace peco
