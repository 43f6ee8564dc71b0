#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"
#include "peco/codec.hpp"
#include "peco/losses.hpp"
#include "peco/numerics.hpp"
#include "peco/schedule.hpp"

namespace peco {

/// Interval means of each weighted loss term, plus codebook perplexity over
/// the interval's tokens.
struct TrainLogRecord {
  int64_t step = 0;   // steps completed at the end of the interval
  int64_t epoch = 0;
  double lr = 0.0;
  double pixel = 0.0;
  double perceptual = 0.0;
  double commitment = 0.0;
  double codebook = 0.0;
  double adversarial = 0.0;
  double total = 0.0;
  double perplexity = 0.0;

  nlohmann::json to_json() const;
};

struct TokenizerTrainOptions {
  int64_t epochs = 20;
  int64_t batch_size = 128;
  int64_t log_interval = 20;
  bool adamw = false;
  OptimizerSettings optim{5e-5, 0.5, 0.95, 0.0, 500, LrSchedule::kCosine};
  double disc_lr = 5e-5;
  DiscriminatorConfig discriminator;
  KMeansOptions kmeans;
};

struct TokenizerTrainResult {
  Tokenizer tokenizer;
  std::vector<TrainLogRecord> log;
  int64_t steps = 0;
  /// Set when a non-finite loss stopped training; `tokenizer` then holds the
  /// state at the last logged step.
  bool diverged = false;
  int64_t last_good_step = 0;
};

using TrainLogger = std::function<void(const TrainLogRecord&)>;

/// VQ-VAE training: codebook from k-means on encoder outputs of the first
/// batch, EMA codebook updates (or a gradient-trained codebook when
/// `loss.codebook_term` is set), straight-through gradients to the encoder,
/// and an alternating discriminator step when `loss.adv_weight` > 0.
/// `feature_net` is frozen and may be null only when lambda == 0.
TokenizerTrainResult train_tokenizer(const torch::Tensor& images, const CodecConfig& codec,
                                     int64_t codebook_size, const LossConfig& loss,
                                     FeatureNet* feature_net, const TokenizerTrainOptions& options,
                                     Rng& rng, const TrainLogger& logger = {});

/// Total loss of the first record logged at or after the end of warmup.
double post_warmup_total(const std::vector<TrainLogRecord>& log, int64_t warmup_steps);

/// One training step's loss terms for a batch (used by training and by the
/// gradient checks): x -> z -> tokens -> z_q -> straight-through -> decode.
struct TokenizerForward {
  torch::Tensor z;
  torch::Tensor z_q;
  TokenGrid tokens;
  torch::Tensor x_hat;
  LossBreakdown loss;
};

TokenizerForward tokenizer_forward(Tokenizer& tokenizer, const torch::Tensor& x,
                                   const LossConfig& loss, FeatureNet* feature_net,
                                   PatchDiscriminator* disc = nullptr);

}  // namespace peco
