#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "peco/numerics.hpp"

namespace peco {

/// In-memory image collection. Images are [N, 3, S, S] float32 in [-1, 1].
struct Dataset {
  torch::Tensor images;
  std::vector<int64_t> labels;            // empty when unlabeled
  std::vector<std::string> ids;           // one per image (file name or record number)
  std::vector<std::string> class_names;   // empty when unlabeled

  int64_t size() const { return images.defined() ? images.size(0) : 0; }
  bool labeled() const { return !labels.empty(); }
  int64_t num_classes() const { return static_cast<int64_t>(class_names.size()); }
  int64_t image_size() const { return size() > 0 ? images.size(2) : 0; }

  Dataset subset(const std::vector<int64_t>& indices) const;
  torch::Tensor label_tensor() const;
  /// Content hash over pixels and labels.
  uint64_t fingerprint() const;
};

enum class DatasetFormat { kAuto, kImageDirectory, kPackedBinary };

DatasetFormat parse_dataset_format(const std::string& name);

/// image-directory: PNG/PPM files, either flat (unlabeled) or one level of
/// class subdirectories (labels from sorted subdirectory names).
/// packed-binary: the PECOIMG1 container written by save_packed.
Dataset load_dataset(const std::filesystem::path& path, DatasetFormat format = DatasetFormat::kAuto);

/// 32-byte header: "PECOIMG1", u32 count, u16 height, u16 width, u8 channels,
/// u8 has_labels, u16 num_classes, 8 reserved bytes. Then per record an
/// optional u8 label followed by H*W*3 RGB bytes. Class names, when present,
/// follow the records as newline-separated UTF-8.
void save_packed(const Dataset& data, const std::filesystem::path& path);

/// Batches of indices in a seeded shuffled order; the last partial batch is
/// kept when `drop_last` is false.
std::vector<std::vector<int64_t>> shuffled_batches(int64_t n, int64_t batch_size, Rng& rng,
                                                   bool drop_last = false);

struct Split {
  std::vector<int64_t> train;
  std::vector<int64_t> test;
};

/// Stratified when labels are given: each class contributes round(fraction * count) test items.
Split split_indices(const std::vector<int64_t>& labels, int64_t n, double test_fraction, Rng& rng);

struct ToyDatasetOptions {
  int64_t count = 5000;
  int64_t image_size = 32;
  uint64_t seed = 0;
};

/// Procedural labeled shapes on textured backgrounds (8 classes). Colour,
/// position, scale and rotation are nuisance factors; the class is the shape.
Dataset make_toy_dataset(const ToyDatasetOptions& options);

}  // namespace peco
