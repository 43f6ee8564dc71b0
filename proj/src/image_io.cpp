#include "peco/image_io.hpp"

#include <png.h>

#include <cctype>
#include <cstring>
#include <fstream>
#include <string>

#include "peco/error.hpp"

namespace peco {

RgbImage read_png(const std::filesystem::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    fail(ErrorCode::kIngestion, "cannot decode PNG " + path.string() + ": " + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  RgbImage out;
  out.width = img.width;
  out.height = img.height;
  out.pixels.resize(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    fail(ErrorCode::kIngestion, "corrupt PNG " + path.string() + ": " + msg);
  }
  return out;
}

void write_png(const std::filesystem::path& path, const RgbImage& image) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr)) {
    fail(ErrorCode::kIo, "cannot write PNG " + path.string() + ": " + img.message);
  }
}

namespace {

int64_t read_ppm_int(std::istream& in) {
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (!std::isspace(c)) {
      break;
    }
    c = in.get();
  }
  int64_t v = 0;
  bool any = false;
  while (c != EOF && std::isdigit(c)) {
    v = v * 10 + (c - '0');
    any = true;
    c = in.get();
  }
  if (!any) return -1;
  return v;
}

}  // namespace

RgbImage read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIngestion, "cannot open " + path.string());
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (magic[0] != 'P' || magic[1] != '6') fail(ErrorCode::kIngestion, "not a P6 PPM: " + path.string());
  RgbImage out;
  out.width = read_ppm_int(in);
  out.height = read_ppm_int(in);
  const int64_t maxval = read_ppm_int(in);
  if (out.width <= 0 || out.height <= 0 || maxval != 255) {
    fail(ErrorCode::kIngestion, "unsupported PPM header in " + path.string());
  }
  out.pixels.resize(static_cast<size_t>(out.width * out.height * 3));
  in.read(reinterpret_cast<char*>(out.pixels.data()), static_cast<std::streamsize>(out.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(out.pixels.size())) {
    fail(ErrorCode::kIngestion, "truncated PPM " + path.string());
  }
  return out;
}

torch::Tensor to_tensor(const RgbImage& image) {
  torch::Tensor hwc = torch::from_blob(const_cast<uint8_t*>(image.pixels.data()),
                                       {image.height, image.width, 3}, torch::kUInt8)
                          .to(torch::kFloat32);
  return (hwc.permute({2, 0, 1}) / 127.5 - 1.0).contiguous();
}

RgbImage to_rgb(const torch::Tensor& chw) {
  if (chw.dim() != 3 || chw.size(0) != 3) fail(ErrorCode::kShape, "to_rgb expects [3,H,W]");
  const torch::Tensor bytes = ((chw.detach().to(torch::kFloat32) + 1.0) * 127.5)
                                  .round()
                                  .clamp(0, 255)
                                  .to(torch::kUInt8)
                                  .permute({1, 2, 0})
                                  .contiguous();
  RgbImage out;
  out.height = chw.size(1);
  out.width = chw.size(2);
  out.pixels.assign(bytes.data_ptr<uint8_t>(), bytes.data_ptr<uint8_t>() + bytes.numel());
  return out;
}

}  // namespace peco
