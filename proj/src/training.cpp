#include "peco/training.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "peco/dataset.hpp"

namespace peco {

using nlohmann::json;

json TrainLogRecord::to_json() const {
  return json{{"step", step},
              {"epoch", epoch},
              {"lr", lr},
              {"pixel", pixel},
              {"perceptual", perceptual},
              {"commitment", commitment},
              {"codebook", codebook},
              {"adversarial", adversarial},
              {"total", total},
              {"perplexity", perplexity}};
}

TokenizerForward tokenizer_forward(Tokenizer& tokenizer, const torch::Tensor& x,
                                   const LossConfig& loss, FeatureNet* feature_net,
                                   PatchDiscriminator* disc) {
  TokenizerForward f;
  f.z = encode(tokenizer.codec, x);
  f.tokens = assign(f.z.detach(), tokenizer.codebook);
  f.z_q = lookup(f.tokens, tokenizer.codebook);
  f.x_hat = decode(tokenizer.codec, straight_through(f.z, f.z_q));
  f.loss = tokenizer_loss(x, f.x_hat, f.z, f.z_q, feature_net, loss, disc);
  return f;
}

namespace {

struct Snapshot {
  std::vector<torch::Tensor> params;
  Codebook codebook;
  int64_t step = 0;
};

Snapshot take_snapshot(Tokenizer& t, int64_t step) {
  Snapshot s;
  for (const auto& p : t.codec->parameters()) s.params.push_back(p.detach().clone());
  s.codebook = t.codebook.clone();
  s.step = step;
  return s;
}

void restore_snapshot(Tokenizer& t, const Snapshot& s) {
  torch::NoGradGuard no_grad;
  auto params = t.codec->parameters();
  for (size_t i = 0; i < params.size(); ++i) params[i].copy_(s.params[i]);
  t.codebook = s.codebook.clone();
}

std::unique_ptr<torch::optim::Optimizer> make_optimizer(std::vector<torch::Tensor> params, bool adamw,
                                                        const OptimizerSettings& o, double lr) {
  if (adamw) {
    return std::make_unique<torch::optim::AdamW>(
        params, torch::optim::AdamWOptions(lr).betas({o.beta1, o.beta2}).weight_decay(o.weight_decay));
  }
  return std::make_unique<torch::optim::Adam>(
      params, torch::optim::AdamOptions(lr).betas({o.beta1, o.beta2}).weight_decay(o.weight_decay));
}

void set_lr(torch::optim::Optimizer& opt, bool adamw, double lr) {
  for (auto& g : opt.param_groups()) {
    if (adamw) {
      static_cast<torch::optim::AdamWOptions&>(g.options()).lr(lr);
    } else {
      static_cast<torch::optim::AdamOptions&>(g.options()).lr(lr);
    }
  }
}

}  // namespace

TokenizerTrainResult train_tokenizer(const torch::Tensor& images, const CodecConfig& codec,
                                     int64_t codebook_size, const LossConfig& loss,
                                     FeatureNet* feature_net, const TokenizerTrainOptions& options,
                                     Rng& rng, const TrainLogger& logger) {
  loss.validate();
  codec.validate();
  const int64_t n = images.size(0);
  if (n == 0) fail(ErrorCode::kConfig, "tokenizer training needs a non-empty dataset");
  if (images.size(2) != codec.input_size) fail(ErrorCode::kShape, "dataset resolution does not match codec.input_size");
  if (loss.lambda > 0.0 && feature_net == nullptr) {
    fail(ErrorCode::kConfig, "perceptual weight > 0 requires a feature network");
  }
  if (options.batch_size < 1 || options.epochs < 0 || options.log_interval < 1) {
    fail(ErrorCode::kConfig, "tokenizer training: batch size, epochs and log interval must be positive");
  }

  seed_torch(rng.next_u64());
  TokenizerTrainResult result;
  result.tokenizer = Tokenizer::create(codec, codebook_size);
  Tokenizer& tok = result.tokenizer;
  if (feature_net != nullptr) {
    (*feature_net)->eval();
    for (auto& p : (*feature_net)->parameters()) p.set_requires_grad(false);
  }

  // Codebook from k-means on encoder outputs of enough images to give >= 4K vectors.
  {
    torch::NoGradGuard no_grad;
    const int64_t cells = codec.latent_side() * codec.latent_side();
    const int64_t want = std::min(n, std::max(options.batch_size, (4 * codebook_size + cells - 1) / cells));
    std::vector<int64_t> perm = rng.permutation(n);
    perm.resize(static_cast<size_t>(want));
    const torch::Tensor z = encode(tok.codec, images.index_select(0, torch::tensor(perm, torch::kInt64)));
    const torch::Tensor vectors = z.permute({0, 2, 3, 1}).reshape({-1, codec.latent_dim});
    KMeansOptions km = options.kmeans;
    tok.codebook = kmeans_init(vectors, codebook_size, rng, km);
  }

  std::vector<torch::Tensor> params = tok.codec->parameters();
  if (loss.codebook_term) {
    tok.codebook.entries.set_requires_grad(true);
    params.push_back(tok.codebook.entries);
  }
  auto opt = make_optimizer(params, options.adamw, options.optim, options.optim.lr);

  PatchDiscriminator disc{nullptr};
  std::unique_ptr<torch::optim::Optimizer> disc_opt;
  if (loss.adv_weight > 0.0) {
    DiscriminatorConfig dc = options.discriminator;
    dc.input_size = codec.input_size;
    disc = PatchDiscriminator(dc);
    disc_opt = make_optimizer(disc->parameters(), options.adamw, options.optim, options.disc_lr);
  }

  const int64_t steps_per_epoch = (n + options.batch_size - 1) / options.batch_size;
  const int64_t total_steps = steps_per_epoch * options.epochs;
  Snapshot good = take_snapshot(tok, 0);
  TrainLogRecord acc;
  int64_t acc_count = 0;
  torch::Tensor histogram = torch::zeros({codebook_size}, torch::kInt64);
  int64_t step = 0;

  for (int64_t epoch = 0; epoch < options.epochs; ++epoch) {
    for (const auto& batch : shuffled_batches(n, options.batch_size, rng)) {
      const double lr = learning_rate_at(step, options.optim.lr, options.optim.warmup_steps,
                                         total_steps, options.optim.schedule);
      set_lr(*opt, options.adamw, lr);
      if (disc_opt) {
        set_lr(*disc_opt, options.adamw,
               learning_rate_at(step, options.disc_lr, options.optim.warmup_steps, total_steps,
                                options.optim.schedule));
      }
      const torch::Tensor x = images.index_select(0, torch::tensor(batch, torch::kInt64));
      TokenizerForward f = tokenizer_forward(tok, x, loss, feature_net, disc ? &disc : nullptr);
      const double total = f.loss.total.item<double>();
      if (!std::isfinite(total)) {
        restore_snapshot(tok, good);
        result.diverged = true;
        result.last_good_step = good.step;
        result.steps = step;
        return result;
      }
      opt->zero_grad();
      f.loss.total.backward();
      opt->step();

      if (!loss.codebook_term) {
        tok.codebook = ema_update(tok.codebook, f.z.detach(), f.tokens);
      }
      if (disc) {
        disc_opt->zero_grad();
        adversarial_losses(x, f.x_hat.detach(), disc).discriminator.backward();
        disc_opt->step();
      }

      acc.pixel += f.loss.pixel.item<double>();
      acc.perceptual += f.loss.perceptual.item<double>();
      acc.commitment += f.loss.commitment.item<double>();
      acc.codebook += f.loss.codebook.item<double>();
      acc.adversarial += f.loss.adversarial.item<double>();
      acc.total += total;
      acc.lr = lr;
      histogram += token_histogram(f.tokens.indices, codebook_size);
      ++acc_count;
      ++step;

      if (acc_count == options.log_interval || step == total_steps) {
        const double m = static_cast<double>(acc_count);
        TrainLogRecord r = acc;
        r.step = step;
        r.epoch = epoch;
        r.pixel /= m;
        r.perceptual /= m;
        r.commitment /= m;
        r.codebook /= m;
        r.adversarial /= m;
        r.total /= m;
        r.perplexity = perplexity_from_counts(histogram);
        result.log.push_back(r);
        if (logger) logger(r);
        acc = TrainLogRecord{};
        acc_count = 0;
        histogram.zero_();
        good = take_snapshot(tok, step);
      }
    }
  }
  if (loss.codebook_term) tok.codebook.entries = tok.codebook.entries.detach();
  result.steps = step;
  result.last_good_step = step;
  return result;
}

double post_warmup_total(const std::vector<TrainLogRecord>& log, int64_t warmup_steps) {
  for (const auto& r : log) {
    if (r.step >= warmup_steps) return r.total;
  }
  fail(ErrorCode::kConfig, "training log ends before warmup completes");
}

}  // namespace peco
