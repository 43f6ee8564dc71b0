#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include <torch/torch.h>

namespace peco {

/// 8-bit RGB raster, row-major HWC.
struct RgbImage {
  int64_t width = 0;
  int64_t height = 0;
  std::vector<uint8_t> pixels;
};

RgbImage read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const RgbImage& image);

/// Binary PPM (P6, maxval 255).
RgbImage read_ppm(const std::filesystem::path& path);

/// [3, H, W] in [-1, 1] <-> RGB8 (x + 1) * 127.5, rounded and clamped.
torch::Tensor to_tensor(const RgbImage& image);
RgbImage to_rgb(const torch::Tensor& chw);

}  // namespace peco
