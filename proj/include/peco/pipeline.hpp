#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "peco/checkpoint.hpp"
#include "peco/codec.hpp"
#include "peco/config.hpp"
#include "peco/dataset.hpp"
#include "peco/eval.hpp"
#include "peco/mim.hpp"
#include "peco/perceptual.hpp"
#include "peco/token_dataset.hpp"
#include "peco/training.hpp"

namespace peco {

// Artifact file names inside a run directory.
inline constexpr const char* kResolvedConfigFile = "config.cfg";
inline constexpr const char* kLogFile = "log.jsonl";
inline constexpr const char* kTokenizerFile = "tokenizer.ckpt";
inline constexpr const char* kFeatureNetFile = "feature_net.ckpt";
inline constexpr const char* kMimFile = "mim.ckpt";
inline constexpr const char* kClassifierFile = "classifier.ckpt";
inline constexpr const char* kTokensFile = "tokens.bin";
inline constexpr const char* kReportFile = "report.json";

Checkpoint tokenizer_checkpoint(Tokenizer& tokenizer, const RunConfig& cfg, int64_t step,
                                const std::string& rng_state = "");
Tokenizer tokenizer_from_checkpoint(const Checkpoint& ckpt);

Checkpoint feature_net_checkpoint(FeatureNet& net, const RunConfig& cfg, int64_t step);
FeatureNet feature_net_from_checkpoint(const Checkpoint& ckpt);

Checkpoint mim_checkpoint(MimTransformer& model, const RunConfig& cfg, int64_t step);
MimTransformer mim_from_checkpoint(const Checkpoint& ckpt);

Checkpoint classifier_checkpoint(ConvClassifier& classifier, const RunConfig& cfg);
ConvClassifier classifier_from_checkpoint(const Checkpoint& ckpt);

/// Loads `dataset.path` in `dataset.format`.
Dataset load_run_dataset(const RunConfig& cfg);

/// The frozen perceptual network a tokenizer run uses: loaded from
/// `feature.checkpoint`, or seeded random weights when `feature.weights =
/// random`. Returns an empty holder when lambda == 0.
FeatureNet load_feature_net(const RunConfig& cfg, Rng& rng);

TokenizerTrainOptions tokenizer_train_options(const RunConfig& cfg);

/// Token cache path: `tokens.path` itself, or `tokens.path/tokens.bin` for a directory.
std::filesystem::path resolve_tokens_path(const RunConfig& cfg);

struct RunSummary {
  std::filesystem::path dir;
  std::filesystem::path artifact;  // checkpoint or token cache
  int64_t steps = 0;
  nlohmann::json summary;
};

/// Each run writes the resolved config, a JSONL log and its artifact into `out`.
RunSummary run_train_tokenizer(RunConfig cfg, const std::filesystem::path& out);
RunSummary run_train_feature_net(RunConfig cfg, const std::filesystem::path& out);
RunSummary run_train_mim(RunConfig cfg, const std::filesystem::path& out);
RunSummary run_tokenize(RunConfig cfg, const std::filesystem::path& out);

struct DecoderGradCheck {
  double max_relative_error = 0.0;
  std::string worst_tensor;
  GradCheckResult worst;
  int64_t tensors = 0;
};

/// grad_check through tokenizer_loss (L2 pixel term) on every decoder parameter
/// tensor and on the decoder input z_q of a small random 2-stage codec, with the
/// quantizer bypassed. Each tensor is probed along its normalized gradient.
DecoderGradCheck decoder_grad_check(double lambda, uint64_t seed, double eps = 3e-3);

}  // namespace peco
