#include "peco/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>

#include "binary_io.hpp"
#include "peco/image_io.hpp"

namespace peco {

namespace fs = std::filesystem;

namespace {

constexpr char kPackedMagic[8] = {'P', 'E', 'C', 'O', 'I', 'M', 'G', '1'};
constexpr size_t kPackedHeader = 32;

std::vector<uint8_t> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIngestion, "cannot open " + path.string());
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(in), {});
}

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".ppm";
}

RgbImage read_image(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" ? read_png(p) : read_ppm(p);
}

Dataset load_image_directory(const fs::path& root) {
  if (!fs::is_directory(root)) fail(ErrorCode::kIngestion, "not a directory: " + root.string());
  std::vector<fs::path> flat_files;
  std::map<std::string, std::vector<fs::path>> by_class;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_regular_file() && is_image_file(entry.path())) {
      flat_files.push_back(entry.path());
    } else if (entry.is_directory()) {
      auto& files = by_class[entry.path().filename().string()];
      for (const auto& sub : fs::directory_iterator(entry.path())) {
        if (sub.is_regular_file() && is_image_file(sub.path())) files.push_back(sub.path());
      }
    }
  }
  for (auto it = by_class.begin(); it != by_class.end();) {
    it = it->second.empty() ? by_class.erase(it) : std::next(it);
  }
  if (!flat_files.empty() && !by_class.empty()) {
    fail(ErrorCode::kIngestion, "image directory mixes unlabeled files (e.g. " +
                                    flat_files.front().string() + ") with class subdirectories");
  }

  Dataset data;
  std::vector<std::pair<fs::path, int64_t>> items;
  if (by_class.empty()) {
    std::sort(flat_files.begin(), flat_files.end());
    for (const auto& f : flat_files) items.emplace_back(f, -1);
  } else {
    int64_t label = 0;
    for (auto& [name, files] : by_class) {
      data.class_names.push_back(name);
      std::sort(files.begin(), files.end());
      for (const auto& f : files) items.emplace_back(f, label);
      ++label;
    }
  }
  if (items.empty()) {
    data.images = torch::zeros({0, 3, 0, 0});
    return data;
  }

  std::vector<torch::Tensor> tensors;
  int64_t width = -1, height = -1;
  for (const auto& [path, label] : items) {
    const RgbImage img = read_image(path);
    if (width < 0) {
      width = img.width;
      height = img.height;
    } else if (img.width != width || img.height != height) {
      fail(ErrorCode::kIngestion, "image " + path.string() + " is " + std::to_string(img.width) +
                                      "x" + std::to_string(img.height) + ", expected " +
                                      std::to_string(width) + "x" + std::to_string(height));
    }
    if (width != height) fail(ErrorCode::kIngestion, "image " + path.string() + " is not square");
    tensors.push_back(to_tensor(img));
    data.ids.push_back(fs::relative(path, root).string());
    if (label >= 0) data.labels.push_back(label);
  }
  data.images = torch::stack(tensors);
  return data;
}

Dataset load_packed(const fs::path& path) {
  const std::vector<uint8_t> bytes = read_file(path);
  if (bytes.size() < kPackedHeader || std::memcmp(bytes.data(), kPackedMagic, 8) != 0) {
    fail(ErrorCode::kIngestion, "not a packed image file: " + path.string());
  }
  const auto count = detail::get_le<uint32_t>(bytes.data() + 8);
  const auto height = detail::get_le<uint16_t>(bytes.data() + 12);
  const auto width = detail::get_le<uint16_t>(bytes.data() + 14);
  const uint8_t channels = bytes[16];
  const bool has_labels = bytes[17] != 0;
  const auto num_classes = detail::get_le<uint16_t>(bytes.data() + 18);
  if (channels != 3 || width == 0 || height == 0 || width != height) {
    fail(ErrorCode::kIngestion, path.string() + ": unsupported geometry");
  }
  const size_t pixels = static_cast<size_t>(width) * height * 3;
  const size_t record = pixels + (has_labels ? 1 : 0);
  const size_t payload = kPackedHeader + record * count;
  if (bytes.size() < payload) {
    fail(ErrorCode::kIngestion, path.string() + ": truncated at record " +
                                    std::to_string((bytes.size() - kPackedHeader) / record));
  }
  Dataset data;
  torch::Tensor raw = torch::empty({static_cast<int64_t>(count), height, width, 3}, torch::kUInt8);
  uint8_t* dst = raw.data_ptr<uint8_t>();
  for (uint32_t i = 0; i < count; ++i) {
    const uint8_t* rec = bytes.data() + kPackedHeader + record * i;
    if (has_labels) {
      if (*rec >= num_classes) {
        fail(ErrorCode::kIngestion, path.string() + ": record " + std::to_string(i) +
                                        " has label " + std::to_string(*rec) + " >= " +
                                        std::to_string(num_classes));
      }
      data.labels.push_back(*rec);
      ++rec;
    }
    std::memcpy(dst + pixels * i, rec, pixels);
    data.ids.push_back(std::to_string(i));
  }
  data.images = (raw.to(torch::kFloat32).permute({0, 3, 1, 2}) / 127.5 - 1.0).contiguous();
  if (has_labels) {
    std::string tail(bytes.begin() + static_cast<std::ptrdiff_t>(payload), bytes.end());
    size_t start = 0;
    while (start < tail.size()) {
      const size_t end = tail.find('\n', start);
      data.class_names.push_back(tail.substr(start, end == std::string::npos ? std::string::npos : end - start));
      if (end == std::string::npos) break;
      start = end + 1;
    }
    if (static_cast<int64_t>(data.class_names.size()) != num_classes) {
      data.class_names.clear();
      for (uint16_t c = 0; c < num_classes; ++c) data.class_names.push_back("class" + std::to_string(c));
    }
  }
  return data;
}

}  // namespace

Dataset Dataset::subset(const std::vector<int64_t>& indices) const {
  Dataset out;
  out.class_names = class_names;
  out.images = images.index_select(0, torch::tensor(indices, torch::kInt64));
  for (int64_t i : indices) {
    if (labeled()) out.labels.push_back(labels[i]);
    if (!ids.empty()) out.ids.push_back(ids[i]);
  }
  return out;
}

torch::Tensor Dataset::label_tensor() const { return torch::tensor(labels, torch::kInt64); }

uint64_t Dataset::fingerprint() const {
  uint64_t h = fnv1a64(images);
  if (!labels.empty()) h = fnv1a64(labels.data(), labels.size() * sizeof(int64_t), h);
  return h;
}

DatasetFormat parse_dataset_format(const std::string& name) {
  if (name == "auto" || name.empty()) return DatasetFormat::kAuto;
  if (name == "image-directory") return DatasetFormat::kImageDirectory;
  if (name == "packed-binary") return DatasetFormat::kPackedBinary;
  fail(ErrorCode::kConfig, "unknown dataset format '" + name + "'");
}

Dataset load_dataset(const fs::path& path, DatasetFormat format) {
  if (!fs::exists(path)) fail(ErrorCode::kIngestion, "dataset path does not exist: " + path.string());
  if (format == DatasetFormat::kAuto) {
    format = fs::is_directory(path) ? DatasetFormat::kImageDirectory : DatasetFormat::kPackedBinary;
  }
  return format == DatasetFormat::kImageDirectory ? load_image_directory(path) : load_packed(path);
}

void save_packed(const Dataset& data, const fs::path& path) {
  const int64_t n = data.size();
  const int64_t side = data.image_size();
  std::vector<uint8_t> out;
  out.insert(out.end(), kPackedMagic, kPackedMagic + 8);
  detail::put_le<uint32_t>(out, static_cast<uint32_t>(n));
  detail::put_le<uint16_t>(out, static_cast<uint16_t>(side));
  detail::put_le<uint16_t>(out, static_cast<uint16_t>(side));
  out.push_back(3);
  out.push_back(data.labeled() ? 1 : 0);
  detail::put_le<uint16_t>(out, static_cast<uint16_t>(data.num_classes()));
  out.resize(kPackedHeader, 0);
  if (n > 0) {
    const torch::Tensor bytes = ((data.images + 1.0) * 127.5)
                                    .round()
                                    .clamp(0, 255)
                                    .to(torch::kUInt8)
                                    .permute({0, 2, 3, 1})
                                    .contiguous();
    const size_t pixels = static_cast<size_t>(side * side * 3);
    const uint8_t* src = bytes.data_ptr<uint8_t>();
    for (int64_t i = 0; i < n; ++i) {
      if (data.labeled()) out.push_back(static_cast<uint8_t>(data.labels[i]));
      out.insert(out.end(), src + pixels * i, src + pixels * (i + 1));
    }
  }
  for (size_t c = 0; c < data.class_names.size(); ++c) {
    if (c > 0) out.push_back('\n');
    detail::put_bytes(out, data.class_names[c]);
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) fail(ErrorCode::kIo, "cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

std::vector<std::vector<int64_t>> shuffled_batches(int64_t n, int64_t batch_size, Rng& rng,
                                                   bool drop_last) {
  if (batch_size <= 0) fail(ErrorCode::kConfig, "batch size must be positive");
  const std::vector<int64_t> order = rng.permutation(n);
  std::vector<std::vector<int64_t>> out;
  for (int64_t start = 0; start < n; start += batch_size) {
    const int64_t end = std::min(n, start + batch_size);
    if (drop_last && end - start < batch_size) break;
    out.emplace_back(order.begin() + start, order.begin() + end);
  }
  return out;
}

Split split_indices(const std::vector<int64_t>& labels, int64_t n, double test_fraction, Rng& rng) {
  Split s;
  if (labels.empty()) {
    const std::vector<int64_t> order = rng.permutation(n);
    const auto n_test = static_cast<int64_t>(std::llround(test_fraction * static_cast<double>(n)));
    s.test.assign(order.begin(), order.begin() + n_test);
    s.train.assign(order.begin() + n_test, order.end());
  } else {
    std::map<int64_t, std::vector<int64_t>> by_class;
    for (int64_t i = 0; i < n; ++i) by_class[labels[i]].push_back(i);
    for (auto& [label, members] : by_class) {
      rng.shuffle(members);
      const auto n_test =
          static_cast<int64_t>(std::llround(test_fraction * static_cast<double>(members.size())));
      s.test.insert(s.test.end(), members.begin(), members.begin() + n_test);
      s.train.insert(s.train.end(), members.begin() + n_test, members.end());
    }
  }
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

// ---------------------------------------------------------------------------
// Toy shapes

namespace {

const std::vector<std::string> kToyClasses = {"disk",    "square", "triangle", "ring",
                                              "plus",    "diamond", "cross",   "frame"};

// Shape membership in local, rotated, radius-normalized coordinates.
bool inside_shape(int64_t cls, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  switch (cls) {
    case 0: return u * u + v * v <= 1.0;
    case 1: return au <= 0.8 && av <= 0.8;
    case 2: {
      // Equilateral, circumradius 1, apex up (v grows downward).
      const double c = std::sqrt(3.0) / 2.0;
      return v <= 0.5 && c * u - 0.5 * v <= 0.5 && -c * u - 0.5 * v <= 0.5;
    }
    case 3: {
      const double r2 = u * u + v * v;
      return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    }
    case 4:
    case 6: return (au <= 0.28 && av <= 1.0) || (av <= 0.28 && au <= 1.0);
    case 5: return au + av <= 1.0;
    case 7: {
      const double m = std::max(au, av);
      return m <= 0.85 && m >= 0.5;
    }
    default: return false;
  }
}

}  // namespace

Dataset make_toy_dataset(const ToyDatasetOptions& options) {
  if (options.count < 0 || options.image_size < 8) fail(ErrorCode::kConfig, "toy dataset: bad size");
  Rng rng(options.seed);
  const int64_t s = options.image_size;
  const auto n_classes = static_cast<int64_t>(kToyClasses.size());
  Dataset data;
  data.class_names = kToyClasses;
  data.images = torch::empty({options.count, 3, s, s}, torch::kFloat32);
  auto img = data.images.accessor<float, 4>();
  const double scale = static_cast<double>(s) / 32.0;

  for (int64_t n = 0; n < options.count; ++n) {
    const int64_t cls = rng.uniform_int(n_classes);
    data.labels.push_back(cls);
    data.ids.push_back("toy" + std::to_string(n));

    double bg[3], fg[3], grad[3];
    for (double& c : bg) c = rng.uniform(-0.9, 0.9);
    do {
      for (double& c : fg) c = rng.uniform(-1.0, 1.0);
    } while (std::abs(fg[0] - bg[0]) + std::abs(fg[1] - bg[1]) + std::abs(fg[2] - bg[2]) < 0.9);
    for (double& c : grad) c = rng.uniform(-0.25, 0.25);
    const double grad_angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    // Low-frequency background texture: a few random plane waves.
    double wave_k[3][2], wave_phase[3], wave_amp[3];
    for (int w = 0; w < 3; ++w) {
      const double ang = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double freq = rng.uniform(0.15, 0.6) / scale;
      wave_k[w][0] = freq * std::cos(ang);
      wave_k[w][1] = freq * std::sin(ang);
      wave_phase[w] = rng.uniform(0.0, 2.0 * std::numbers::pi);
      wave_amp[w] = rng.uniform(0.0, 0.12);
    }

    const double radius = rng.uniform(7.0, 12.0) * scale;
    const double cx = rng.uniform(radius * 0.8, static_cast<double>(s) - radius * 0.8);
    const double cy = rng.uniform(radius * 0.8, static_cast<double>(s) - radius * 0.8);
    // The cross is the plus turned by 45 degrees; everything else gets a small tilt.
    const double theta = (cls == 6 ? std::numbers::pi / 4.0 : 0.0) + rng.uniform(-0.26, 0.26);
    const double ct = std::cos(theta), st = std::sin(theta);

    for (int64_t y = 0; y < s; ++y) {
      for (int64_t x = 0; x < s; ++x) {
        int hits = 0;
        for (int sy = 0; sy < 2; ++sy) {
          for (int sx = 0; sx < 2; ++sx) {
            const double px = static_cast<double>(x) + 0.25 + 0.5 * sx - cx;
            const double py = static_cast<double>(y) + 0.25 + 0.5 * sy - cy;
            const double u = (ct * px + st * py) / radius;
            const double v = (-st * px + ct * py) / radius;
            hits += inside_shape(cls, u, v) ? 1 : 0;
          }
        }
        const double alpha = hits / 4.0;
        const double g = (std::cos(grad_angle) * (x - s / 2.0) + std::sin(grad_angle) * (y - s / 2.0)) /
                         static_cast<double>(s);
        double tex = 0.0;
        for (int w = 0; w < 3; ++w) {
          tex += wave_amp[w] * std::sin(wave_k[w][0] * x + wave_k[w][1] * y + wave_phase[w]);
        }
        for (int c = 0; c < 3; ++c) {
          const double back = bg[c] + 2.0 * grad[c] * g + tex + 0.03 * rng.normal();
          const double fore = fg[c] + 0.03 * rng.normal();
          img[n][c][y][x] = static_cast<float>(std::clamp(alpha * fore + (1.0 - alpha) * back, -1.0, 1.0));
        }
      }
    }
  }
  return data;
}

}  // namespace peco
