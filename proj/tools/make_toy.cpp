// Writes the procedural shapes dataset as a packed file or an image directory.
#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "peco/dataset.hpp"
#include "peco/error.hpp"
#include "peco/image_io.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Generate the toy shapes dataset", "peco-make-toy"};
  peco::ToyDatasetOptions options;
  std::string out;
  std::string format = "packed-binary";
  app.add_option("--count", options.count, "number of images");
  app.add_option("--size", options.image_size, "image side in pixels");
  app.add_option("--seed", options.seed, "generator seed");
  app.add_option("--format", format, "packed-binary or image-directory")
      ->check(CLI::IsMember({"packed-binary", "image-directory"}));
  app.add_option("--out", out, "output file (packed) or directory")->required();
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const peco::Dataset data = peco::make_toy_dataset(options);
    if (format == "packed-binary") {
      peco::save_packed(data, out);
    } else {
      namespace fs = std::filesystem;
      for (int64_t i = 0; i < data.size(); ++i) {
        const fs::path dir = fs::path(out) / data.class_names[static_cast<size_t>(data.labels[i])];
        fs::create_directories(dir);
        peco::write_png(dir / (data.ids[static_cast<size_t>(i)] + ".png"), peco::to_rgb(data.images[i]));
      }
    }
    std::cout << "wrote " << data.size() << " images to " << out << "\n";
  } catch (const peco::Error& e) {
    std::cerr << "error[" << peco::to_string(e.code()) << "]: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
