#include "peco/checkpoint.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>

#include "binary_io.hpp"
#include "peco/error.hpp"
#include "peco/numerics.hpp"

namespace peco {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr char kMagic[] = "PECOCKPT";
constexpr size_t kPreamble = 8 + 8 + 8;

}  // namespace

void Checkpoint::add(const std::string& name, const torch::Tensor& tensor) {
  if (has(name)) fail(ErrorCode::kConfig, "checkpoint: duplicate tensor '" + name + "'");
  if (tensor.scalar_type() != torch::kFloat32) {
    fail(ErrorCode::kShape, "checkpoint: tensor '" + name + "' is not float32");
  }
  tensors.emplace_back(name, tensor.detach().contiguous().clone());
}

bool Checkpoint::has(const std::string& name) const {
  return std::any_of(tensors.begin(), tensors.end(), [&](const auto& t) { return t.first == name; });
}

const torch::Tensor& Checkpoint::get(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.first == name) return t.second;
  }
  fail(ErrorCode::kShape, "checkpoint: no tensor named '" + name + "'");
}

std::vector<uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  json entries = json::array();
  uint64_t offset = 0;
  for (const auto& [name, t] : ckpt.tensors) {
    const uint64_t length = static_cast<uint64_t>(t.numel()) * 4;
    entries.push_back({{"name", name}, {"dtype", "float32"}, {"shape", t.sizes().vec()},
                       {"offset", offset}, {"length", length}});
    offset += length;
  }
  const json manifest = {{"format", kCheckpointFormat}, {"stage", ckpt.stage},
                         {"step", ckpt.step},           {"config", ckpt.config},
                         {"rng_state", ckpt.rng_state}, {"tensors", entries},
                         {"blob_length", offset}};
  const std::string text = manifest.dump();

  std::vector<uint8_t> out;
  out.reserve(kPreamble + text.size() + offset);
  out.insert(out.end(), kMagic, kMagic + 8);
  detail::put_le<uint64_t>(out, text.size());
  detail::put_le<uint64_t>(out, fnv1a64(text.data(), text.size()));
  detail::put_bytes(out, text);
  for (const auto& item : ckpt.tensors) {
    const float* p = item.second.data_ptr<float>();
    for (int64_t i = 0; i < item.second.numel(); ++i) detail::put_f32(out, p[i]);
  }
  return out;
}

Checkpoint decode_checkpoint(const std::vector<uint8_t>& bytes) {
  if (bytes.size() < kPreamble || !std::equal(kMagic, kMagic + 8, bytes.begin())) {
    fail(ErrorCode::kManifestParse, "checkpoint: missing PECOCKPT magic");
  }
  const uint64_t length = detail::get_le<uint64_t>(bytes.data() + 8);
  const uint64_t hash = detail::get_le<uint64_t>(bytes.data() + 16);
  if (length > bytes.size() - kPreamble) fail(ErrorCode::kManifestParse, "checkpoint: manifest length exceeds file size");
  const std::string text(bytes.begin() + kPreamble, bytes.begin() + static_cast<std::ptrdiff_t>(kPreamble + length));
  if (fnv1a64(text.data(), text.size()) != hash) {
    fail(ErrorCode::kManifestParse, "checkpoint: manifest checksum mismatch");
  }
  json manifest;
  try {
    manifest = json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::kManifestParse, std::string("checkpoint: manifest is not valid JSON: ") + e.what());
  }

  Checkpoint ckpt;
  uint64_t blob_length = 0;
  std::vector<std::tuple<std::string, std::vector<int64_t>, uint64_t, uint64_t>> entries;
  try {
    const std::string format = manifest.at("format").get<std::string>();
    if (format != kCheckpointFormat) {
      fail(ErrorCode::kVersionMismatch, "checkpoint: format '" + format + "', expected '" +
                                            kCheckpointFormat + "'");
    }
    ckpt.stage = manifest.at("stage").get<std::string>();
    ckpt.step = manifest.at("step").get<int64_t>();
    ckpt.config = manifest.at("config");
    ckpt.rng_state = manifest.at("rng_state").get<std::string>();
    blob_length = manifest.at("blob_length").get<uint64_t>();
    for (const auto& e : manifest.at("tensors")) {
      if (e.at("dtype").get<std::string>() != "float32") {
        fail(ErrorCode::kManifestParse, "checkpoint: unsupported dtype");
      }
      entries.emplace_back(e.at("name").get<std::string>(), e.at("shape").get<std::vector<int64_t>>(),
                           e.at("offset").get<uint64_t>(), e.at("length").get<uint64_t>());
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::kManifestParse, std::string("checkpoint: malformed manifest: ") + e.what());
  }

  const uint64_t available = bytes.size() - kPreamble - length;
  if (available < blob_length) {
    fail(ErrorCode::kTruncatedBlob, "checkpoint: blob has " + std::to_string(available) +
                                        " bytes, manifest declares " + std::to_string(blob_length));
  }
  std::vector<std::pair<uint64_t, uint64_t>> ranges;
  const uint8_t* blob = bytes.data() + kPreamble + length;
  for (const auto& [name, shape, offset, bytes_len] : entries) {
    int64_t numel = 1;
    for (int64_t d : shape) {
      if (d < 0) fail(ErrorCode::kManifestParse, "checkpoint: negative dimension in '" + name + "'");
      numel *= d;
    }
    if (bytes_len != static_cast<uint64_t>(numel) * 4) {
      fail(ErrorCode::kOffsetOverflow, "checkpoint: '" + name + "' length does not match its shape");
    }
    if (offset > blob_length || bytes_len > blob_length - offset) {
      fail(ErrorCode::kOffsetOverflow, "checkpoint: '" + name + "' extends past the blob");
    }
    ranges.emplace_back(offset, bytes_len);
    torch::Tensor t = torch::empty(shape, torch::kFloat32);
    float* dst = t.data_ptr<float>();
    for (int64_t i = 0; i < numel; ++i) dst[i] = detail::get_f32(blob + offset + 4 * static_cast<uint64_t>(i));
    ckpt.tensors.emplace_back(name, t);
  }
  std::sort(ranges.begin(), ranges.end());
  for (size_t i = 1; i < ranges.size(); ++i) {
    if (ranges[i - 1].first + ranges[i - 1].second > ranges[i].first) {
      fail(ErrorCode::kOffsetOverflow, "checkpoint: overlapping tensor ranges");
    }
  }
  return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  const std::vector<uint8_t> bytes = encode_checkpoint(ckpt);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::kIo, "cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorCode::kIo, "short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

Checkpoint load_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot open checkpoint " + path.string());
  const std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(bytes);
}

void put_module(Checkpoint& ckpt, const std::string& prefix, const torch::nn::Module& module) {
  for (const auto& item : module.named_parameters()) ckpt.add(prefix + "." + item.key(), item.value());
  for (const auto& item : module.named_buffers()) ckpt.add(prefix + "." + item.key(), item.value());
}

void get_module(const Checkpoint& ckpt, const std::string& prefix, torch::nn::Module& module) {
  torch::NoGradGuard no_grad;
  auto load = [&](const std::string& key, torch::Tensor& dst) {
    const torch::Tensor& src = ckpt.get(prefix + "." + key);
    if (src.sizes() != dst.sizes()) {
      fail(ErrorCode::kShape, "checkpoint: '" + prefix + "." + key + "' has shape " +
                                  c10::str(src.sizes()) + ", model expects " + c10::str(dst.sizes()));
    }
    dst.copy_(src);
  };
  for (auto& item : module.named_parameters()) load(item.key(), item.value());
  for (auto& item : module.named_buffers()) load(item.key(), item.value());
}

}  // namespace peco
