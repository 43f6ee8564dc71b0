#include "peco/pipeline.hpp"

#include <fstream>
#include <functional>

#include "peco/error.hpp"

namespace peco {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

RunConfig snapshot_config(const Checkpoint& ckpt) {
  RunConfig cfg = RunConfig::from_json(ckpt.config);
  cfg.resolve();
  return cfg;
}

void expect_stage(const Checkpoint& ckpt, const std::string& stage) {
  if (ckpt.stage != stage) {
    fail(ErrorCode::kConfig, "expected a " + stage + " checkpoint, got stage '" + ckpt.stage + "'");
  }
}

class JsonlWriter {
 public:
  explicit JsonlWriter(const fs::path& path) : out_(path, std::ios::trunc) {
    if (!out_) fail(ErrorCode::kIo, "cannot write " + path.string());
  }
  void write(const json& record) {
    out_ << record.dump() << "\n";
    out_.flush();
  }

 private:
  std::ofstream out_;
};

fs::path prepare_run(RunConfig& cfg, const std::string& stage, const fs::path& out) {
  cfg.set("stage", stage);
  cfg.set("out_dir", out.string());
  cfg.resolve();
  fs::create_directories(out);
  cfg.save(out / kResolvedConfigFile);
  return out;
}

}  // namespace

Checkpoint tokenizer_checkpoint(Tokenizer& tokenizer, const RunConfig& cfg, int64_t step,
                                const std::string& rng_state) {
  Checkpoint ckpt;
  ckpt.stage = "tokenizer";
  ckpt.step = step;
  ckpt.config = cfg.to_json();
  ckpt.rng_state = rng_state;
  put_module(ckpt, "codec", *tokenizer.codec);
  ckpt.add("codebook.entries", tokenizer.codebook.entries);
  ckpt.add("codebook.ema_counts", tokenizer.codebook.ema_counts);
  ckpt.add("codebook.ema_sums", tokenizer.codebook.ema_sums);
  return ckpt;
}

Tokenizer tokenizer_from_checkpoint(const Checkpoint& ckpt) {
  expect_stage(ckpt, "tokenizer");
  const RunConfig cfg = snapshot_config(ckpt);
  Tokenizer t = Tokenizer::create(codec_config(cfg), cfg.get_int("codebook.size"));
  get_module(ckpt, "codec", *t.codec);
  t.codebook.entries = ckpt.get("codebook.entries").clone();
  t.codebook.ema_counts = ckpt.get("codebook.ema_counts").clone();
  t.codebook.ema_sums = ckpt.get("codebook.ema_sums").clone();
  t.codebook.decay = cfg.get_double("codebook.decay");
  t.codebook.eps = cfg.get_double("codebook.eps");
  if (t.codebook.size() != cfg.get_int("codebook.size")) {
    fail(ErrorCode::kShape, "tokenizer checkpoint: codebook size disagrees with its config");
  }
  return t;
}

Checkpoint feature_net_checkpoint(FeatureNet& net, const RunConfig& cfg, int64_t step) {
  Checkpoint ckpt;
  ckpt.stage = "feature-net";
  ckpt.step = step;
  ckpt.config = cfg.to_json();
  put_module(ckpt, "feature", *net);
  return ckpt;
}

FeatureNet feature_net_from_checkpoint(const Checkpoint& ckpt) {
  expect_stage(ckpt, "feature-net");
  FeatureNet net(feature_net_config(snapshot_config(ckpt)));
  get_module(ckpt, "feature", *net);
  net->eval();
  return net;
}

Checkpoint mim_checkpoint(MimTransformer& model, const RunConfig& cfg, int64_t step) {
  Checkpoint ckpt;
  ckpt.stage = "mim";
  ckpt.step = step;
  ckpt.config = cfg.to_json();
  put_module(ckpt, "mim", *model);
  return ckpt;
}

MimTransformer mim_from_checkpoint(const Checkpoint& ckpt) {
  expect_stage(ckpt, "mim");
  MimTransformer model(mim_config(snapshot_config(ckpt)));
  get_module(ckpt, "mim", *model);
  model->eval();
  return model;
}

Checkpoint classifier_checkpoint(ConvClassifier& classifier, const RunConfig& cfg) {
  Checkpoint ckpt;
  ckpt.stage = "eval";
  ckpt.config = cfg.to_json();
  put_module(ckpt, "classifier", *classifier);
  return ckpt;
}

ConvClassifier classifier_from_checkpoint(const Checkpoint& ckpt) {
  expect_stage(ckpt, "eval");
  const RunConfig cfg = snapshot_config(ckpt);
  ClassifierConfig cc;
  cc.input_size = cfg.get_int("codec.input_size");
  cc.num_classes = ckpt.get("classifier.head.weight").size(0);
  ConvClassifier model(cc);
  get_module(ckpt, "classifier", *model);
  model->eval();
  return model;
}

Dataset load_run_dataset(const RunConfig& cfg) {
  const std::string& path = cfg.get("dataset.path");
  if (path.empty()) fail(ErrorCode::kConfig, "dataset.path is not set");
  return load_dataset(path, parse_dataset_format(cfg.get("dataset.format")));
}

FeatureNet load_feature_net(const RunConfig& cfg, Rng& rng) {
  if (cfg.get_double("loss.lambda") <= 0.0) return FeatureNet{nullptr};
  const std::string& path = cfg.get("feature.checkpoint");
  if (!path.empty()) return feature_net_from_checkpoint(load_checkpoint(path));
  FeatureNetConfig fc = feature_net_config(cfg);
  if (fc.weights != FeatureWeights::kRandomInit) {
    fail(ErrorCode::kConfig,
         "loss.lambda > 0 needs feature.checkpoint (see train-feature-net) or feature.weights = random");
  }
  seed_torch(rng.next_u64());
  FeatureNet net(fc);
  net->eval();
  return net;
}

TokenizerTrainOptions tokenizer_train_options(const RunConfig& cfg) {
  TokenizerTrainOptions o;
  o.epochs = cfg.get_int("train.epochs");
  o.batch_size = cfg.get_int("train.batch_size");
  o.log_interval = cfg.get_int("train.log_interval");
  o.adamw = cfg.get("optim.name") == "adamw";
  o.optim = optimizer_settings(cfg);
  o.disc_lr = cfg.get_double("disc.lr");
  o.discriminator = discriminator_config(cfg);
  o.kmeans.max_iterations = static_cast<int>(cfg.get_int("codebook.kmeans_iterations"));
  o.kmeans.decay = cfg.get_double("codebook.decay");
  o.kmeans.eps = cfg.get_double("codebook.eps");
  return o;
}

fs::path resolve_tokens_path(const RunConfig& cfg) {
  const std::string& p = cfg.get("tokens.path");
  if (p.empty()) fail(ErrorCode::kConfig, "tokens.path is not set");
  return fs::is_directory(p) ? fs::path(p) / kTokensFile : fs::path(p);
}

RunSummary run_train_tokenizer(RunConfig cfg, const fs::path& out) {
  prepare_run(cfg, "tokenizer", out);
  Rng rng(cfg.seed());
  const Dataset data = load_run_dataset(cfg);
  FeatureNet net = load_feature_net(cfg, rng);
  const TokenizerTrainOptions options = tokenizer_train_options(cfg);

  JsonlWriter log(out / kLogFile);
  TokenizerTrainResult r = train_tokenizer(data.images, codec_config(cfg), cfg.get_int("codebook.size"),
                                           loss_config(cfg), net ? &net : nullptr, options, rng,
                                           [&](const TrainLogRecord& rec) { log.write(rec.to_json()); });
  RunSummary s;
  s.dir = out;
  s.artifact = out / kTokenizerFile;
  s.steps = r.steps;
  save_checkpoint(tokenizer_checkpoint(r.tokenizer, cfg, r.last_good_step, rng.state()), s.artifact);
  if (r.diverged) {
    fail(ErrorCode::kDiverged, "non-finite loss at step " + std::to_string(r.steps) +
                                   "; kept the checkpoint from step " + std::to_string(r.last_good_step));
  }
  s.summary = {{"steps", r.steps},
               {"fingerprint", to_hex(r.tokenizer.fingerprint())},
               {"final_total", r.log.empty() ? 0.0 : r.log.back().total},
               {"final_perplexity", r.log.empty() ? 0.0 : r.log.back().perplexity}};
  return s;
}

RunSummary run_train_feature_net(RunConfig cfg, const fs::path& out) {
  prepare_run(cfg, "feature-net", out);
  Rng rng(cfg.seed());
  const Dataset data = load_run_dataset(cfg);
  const FeatureTrainConfig train = feature_train_config(cfg);
  FeatureTrainResult r = train_feature_net(data.images, feature_net_config(cfg), train, rng);
  JsonlWriter log(out / kLogFile);
  for (size_t i = 0; i < r.interval_losses.size(); ++i) {
    log.write({{"step", static_cast<int64_t>(i + 1) * train.log_interval}, {"loss", r.interval_losses[i]}});
  }
  const int64_t steps = train.epochs * ((data.size() + train.batch_size - 1) / train.batch_size);
  RunSummary s;
  s.dir = out;
  s.artifact = out / kFeatureNetFile;
  s.steps = steps;
  save_checkpoint(feature_net_checkpoint(r.net, cfg, steps), s.artifact);
  s.summary = {{"steps", steps}};
  return s;
}

RunSummary run_tokenize(RunConfig cfg, const fs::path& out) {
  const std::string ckpt_path = cfg.get("tokenizer.checkpoint");
  if (ckpt_path.empty()) fail(ErrorCode::kConfig, "tokenizer.checkpoint is not set");
  Tokenizer tok = tokenizer_from_checkpoint(load_checkpoint(ckpt_path));
  prepare_run(cfg, "eval", out);
  const Dataset data = load_run_dataset(cfg);
  const TokenDataset tokens = tokenize_dataset(tok, data);
  RunSummary s;
  s.dir = out;
  s.artifact = out / kTokensFile;
  save_tokens(tokens, s.artifact);
  s.summary = {{"images", tokens.size()},
               {"grid", {tokens.height, tokens.width}},
               {"vocab_size", tokens.vocab_size},
               {"fingerprint", to_hex(tokens.fingerprint)},
               {"perplexity", tokens.size() > 0 ? perplexity(tokens.tokens, tokens.vocab_size) : 0.0}};
  JsonlWriter log(out / kLogFile);
  log.write(s.summary);
  return s;
}

RunSummary run_train_mim(RunConfig cfg, const fs::path& out) {
  const std::string tok_path = cfg.get("tokenizer.checkpoint");
  if (tok_path.empty()) fail(ErrorCode::kConfig, "tokenizer.checkpoint is not set");
  const TokenDataset tokens = load_tokens(resolve_tokens_path(cfg));
  Tokenizer tok = tokenizer_from_checkpoint(load_checkpoint(tok_path));
  verify_fingerprint(tokens, tok.fingerprint());
  cfg.set("codebook.size", std::to_string(tokens.vocab_size));
  cfg.set("codec.input_size", std::to_string(tok.codec->config().input_size));
  prepare_run(cfg, "mim", out);

  const Dataset data = load_run_dataset(cfg);
  if (data.size() != tokens.size()) {
    fail(ErrorCode::kConfig, "token cache holds " + std::to_string(tokens.size()) + " grids for " +
                                 std::to_string(data.size()) + " images");
  }
  Rng rng(cfg.seed());
  JsonlWriter log(out / kLogFile);
  PretrainResult r = pretrain(data.images, tokens.tokens, mim_config(cfg), pretrain_options(cfg), rng,
                              [&](const PretrainLogEntry& e) {
                                log.write({{"step", e.step}, {"lr", e.lr}, {"loss", e.loss}});
                              });
  const int64_t steps = r.log.empty() ? 0 : r.log.back().step;
  RunSummary s;
  s.dir = out;
  s.artifact = out / kMimFile;
  s.steps = steps;
  save_checkpoint(mim_checkpoint(r.model, cfg, steps), s.artifact);
  s.summary = {{"steps", steps}, {"initial_loss", r.initial_loss}, {"epoch_losses", r.epoch_losses}};
  return s;
}

namespace {

// Points the module's own weight/bias member at `replacement` for one
// evaluation, so autograd sees the loss as a function of that tensor.
class ParameterSwap {
 public:
  ParameterSwap(torch::Tensor& slot, const torch::Tensor& replacement) : slot_(slot), saved_(slot) {
    slot_ = replacement;
  }
  ~ParameterSwap() { slot_ = saved_; }

 private:
  torch::Tensor& slot_;
  torch::Tensor saved_;
};

torch::Tensor* member_slot(torch::nn::Module& module, const std::string& leaf) {
  if (auto* conv = module.as<torch::nn::Conv2d>()) return leaf == "weight" ? &conv->weight : &conv->bias;
  if (auto* norm = module.as<torch::nn::GroupNorm>()) return leaf == "weight" ? &norm->weight : &norm->bias;
  if (auto* linear = module.as<torch::nn::Linear>()) return leaf == "weight" ? &linear->weight : &linear->bias;
  return nullptr;
}

}  // namespace

DecoderGradCheck decoder_grad_check(double lambda, uint64_t seed, double eps) {
  Rng rng(seed);
  seed_torch(rng.next_u64());
  CodecConfig cc;
  cc.input_size = 8;
  cc.downsample_stages = 2;
  cc.base_channels = 8;
  cc.residual_blocks = 1;
  cc.latent_dim = 8;
  cc.norm_groups = 4;
  Tokenizer tok = Tokenizer::create(cc, 8);
  FeatureNetConfig fc;
  fc.input_size = cc.input_size;
  fc.channels = {8, 8, 16, 16};
  fc.strides = {1, 1, 2, 1};
  fc.tap_layers = {2, 4};
  fc.norm_groups = 4;
  fc.weights = FeatureWeights::kRandomInit;
  FeatureNet net(fc);
  for (auto& p : net->parameters()) p.set_requires_grad(false);

  LossConfig lc;
  lc.lambda = lambda;
  lc.pixel_norm = PixelNorm::kL2;
  const torch::Tensor x = torch::rand({2, 3, cc.input_size, cc.input_size}) * 2 - 1;
  torch::Tensor z, z_q;
  {
    torch::NoGradGuard no_grad;
    z = encode(tok.codec, x);
    z_q = lookup(assign(z, tok.codebook), tok.codebook);
  }
  auto loss_of = [&](const torch::Tensor& decoder_input) {
    return tokenizer_loss(x, decode(tok.codec, decoder_input), z, z_q, lambda > 0 ? &net : nullptr, lc).total;
  };

  DecoderGradCheck out;
  auto consider = [&](const std::string& name, const GradCheckResult& r) {
    ++out.tensors;
    if (r.max_relative_error > out.max_relative_error || out.worst_tensor.empty()) {
      out.max_relative_error = r.max_relative_error;
      out.worst_tensor = name;
      out.worst = r;
    }
  };

  // Each tensor is checked along its own normalized gradient: t = t0 + a g / |g|.
  auto directional = [&](const torch::Tensor& base, const std::function<torch::Tensor(const torch::Tensor&)>& f) {
    const torch::Tensor t0 = base.detach();
    torch::Tensor probe = t0.clone().requires_grad_(true);
    torch::Tensor v = torch::autograd::grad({f(probe)}, {probe})[0].detach();
    const double norm = v.norm().item<double>();
    v = norm > 0.0 ? v / norm : torch::randn_like(t0) / std::sqrt(static_cast<double>(t0.numel()));
    const auto g = [&](const torch::Tensor& a) { return f(t0 + a * v); };
    return grad_check_detailed(g, torch::zeros({}), eps);
  };

  consider("z_q", directional(z_q, loss_of));
  for (const auto& item : tok.codec->decoder()->named_modules()) {
    torch::nn::Module& module = *item.value();
    for (const auto& param : module.named_parameters(/*recurse=*/false)) {
      torch::Tensor* slot = member_slot(module, param.key());
      if (slot == nullptr) fail(ErrorCode::kConfig, "grad check: unsupported module " + module.name());
      const auto f = [&](const torch::Tensor& t) {
        ParameterSwap swap(*slot, t);
        return loss_of(z_q);
      };
      consider(item.key() + "." + param.key(), directional(param.value(), f));
    }
  }
  return out;
}

}  // namespace peco
