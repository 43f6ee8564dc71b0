#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "peco/codec.hpp"
#include "peco/dataset.hpp"
#include "peco/image_io.hpp"
#include "peco/mim.hpp"
#include "peco/numerics.hpp"

namespace peco {

struct ProbeReport {
  double accuracy = 0.0;
  std::vector<double> per_class_accuracy;
  std::vector<int64_t> per_class_count;  // held-out items per class
  int64_t train_size = 0;
  int64_t test_size = 0;
  std::string tokenizer_hash;
  std::string dataset_id;
  uint64_t seed = 0;

  nlohmann::json to_json() const;
};

struct ProbeOptions {
  double test_fraction = 0.2;
  double l2 = 1e-4;          // weight decay on the probe weights
  int64_t max_iterations = 500;
  double tolerance = 1e-6;   // gradient and change tolerance of L-BFGS
};

/// Multinomial logistic regression on frozen features [N, F], trained with
/// L-BFGS (double precision) on a stratified split. Features are standardized
/// with training-set statistics.
ProbeReport logistic_probe(const torch::Tensor& features, const std::vector<int64_t>& labels,
                           int64_t num_classes, Rng& rng, const ProbeOptions& options = {});

/// Probe on the grid-mean of each image's quantized codewords.
ProbeReport linear_probe_codewords(Tokenizer& tokenizer, const Dataset& data, Rng& rng,
                                   const ProbeOptions& options = {});

struct ClassifierConfig {
  int64_t input_size = 32;
  int64_t num_classes = 8;
  std::vector<int64_t> channels = {32, 64, 128};
};

/// Small conv classifier (two conv3x3 + GroupNorm + SiLU per stage, 2x2 max pool).
class ConvClassifierImpl : public torch::nn::Module {
 public:
  explicit ConvClassifierImpl(const ClassifierConfig& cfg);
  torch::Tensor forward(const torch::Tensor& images);
  const ClassifierConfig& config() const { return cfg_; }

 private:
  ClassifierConfig cfg_;
  torch::nn::Sequential features_{nullptr};
  torch::nn::Linear head_{nullptr};
};
TORCH_MODULE(ConvClassifier);

struct ClassifierTrainOptions {
  int64_t epochs = 15;
  int64_t batch_size = 64;
  double lr = 2e-3;
  double weight_decay = 5e-4;
  bool augment = true;  // random flips and 2-pixel shifts
};

ConvClassifier train_classifier(const Dataset& train, const ClassifierConfig& cfg,
                                const ClassifierTrainOptions& options, Rng& rng);

/// Top-1 accuracy on a labeled image tensor.
double classifier_accuracy(ConvClassifier& classifier, const torch::Tensor& images,
                           const std::vector<int64_t>& labels);

using ReconstructFn = std::function<torch::Tensor(const torch::Tensor&)>;

double classify_reconstructions(const ReconstructFn& reconstruct_fn, ConvClassifier& classifier,
                                const Dataset& data);
double classify_reconstructions(Tokenizer& tokenizer, ConvClassifier& classifier,
                                const Dataset& data);

struct MosaicEntry {
  std::string image_id;
  int64_t image_index = 0;
  int64_t grid_row = 0;  // token position
  int64_t grid_col = 0;
  int64_t tile = 0;      // position in the mosaic, row-major
};

struct MosaicReport {
  int64_t codeword = 0;
  int64_t occurrences = 0;  // over the whole dataset
  int64_t emitted = 0;
  int64_t patch_size = 0;
  int64_t columns = 0;
  std::vector<MosaicEntry> entries;
  RgbImage image;

  nlohmann::json to_json() const;
};

/// Patches (one latent cell's receptive stride each) whose token is `codeword`,
/// scanned in dataset then raster order, first `count` kept. Each patch's
/// latent is re-assigned and must map back to `codeword`.
MosaicReport codeword_mosaic(Tokenizer& tokenizer, const Dataset& data, int64_t codeword,
                             int64_t count);

/// Writes the PNG grid and `<png>.json` sidecar.
void write_mosaic(const MosaicReport& report, const std::filesystem::path& png_path);

enum class EvalMode { kLinearProbe, kFineTune };

EvalMode parse_eval_mode(const std::string& name);

struct FinetuneOptions {
  int64_t epochs = 30;
  int64_t batch_size = 64;
  double lr = 1e-3;
  double weight_decay = 0.05;
  double layer_decay = 0.65;
  int64_t warmup_steps = 50;
  double test_fraction = 0.2;
  double drop_path = 0.1;
};

struct EvalReport {
  EvalMode mode = EvalMode::kFineTune;
  double accuracy = 0.0;
  int64_t train_size = 0;
  int64_t test_size = 0;
  std::vector<double> epoch_losses;  // fine-tune only

  nlohmann::json to_json() const;
};

/// Per-parameter learning-rate multipliers: layer_decay^(depth + 1 - layer_id).
std::vector<double> layer_lr_scales(MimTransformer& model, double layer_decay);

/// Classification with a MIM backbone: a frozen-feature logistic probe, or
/// end-to-end fine-tuning of a copy of the model plus a linear head with
/// layer-wise lr decay. The input model is never modified.
EvalReport evaluate_pretrained(MimTransformer& model, const Dataset& data, EvalMode mode,
                               const FinetuneOptions& options, Rng& rng);

/// Fresh model with the same configuration and copied weights.
MimTransformer clone_model(MimTransformer& model);

}  // namespace peco
