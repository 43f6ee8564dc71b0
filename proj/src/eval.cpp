#include "peco/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "peco/schedule.hpp"

namespace peco {

namespace nn = torch::nn;
namespace F = torch::nn::functional;
using nlohmann::json;

namespace {

constexpr int64_t kEvalBatch = 256;

void require_labels(const Dataset& data, const char* what) {
  if (!data.labeled()) fail(ErrorCode::kConfig, std::string(what) + ": dataset has no labels");
}

torch::Tensor index_tensor(const std::vector<int64_t>& idx) {
  return torch::tensor(idx, torch::kInt64);
}

std::vector<int64_t> gather(const std::vector<int64_t>& values, const std::vector<int64_t>& idx) {
  std::vector<int64_t> out;
  out.reserve(idx.size());
  for (int64_t i : idx) out.push_back(values[static_cast<size_t>(i)]);
  return out;
}

/// Runs `fn` over [N, ...] in fixed-size chunks and concatenates along dim 0.
torch::Tensor batched(const torch::Tensor& images, const std::function<torch::Tensor(const torch::Tensor&)>& fn) {
  std::vector<torch::Tensor> parts;
  for (int64_t s = 0; s < images.size(0); s += kEvalBatch) {
    parts.push_back(fn(images.slice(0, s, std::min(images.size(0), s + kEvalBatch))));
  }
  return torch::cat(parts, 0);
}

/// Per-sample horizontal flip and integer shift (zero padded).
torch::Tensor augment_batch(const torch::Tensor& images, Rng& rng, int64_t max_shift) {
  const int64_t b = images.size(0), s = images.size(2);
  torch::Tensor padded = max_shift > 0
                             ? F::pad(images, F::PadFuncOptions({max_shift, max_shift, max_shift, max_shift})
                                                  .mode(torch::kReflect))
                             : images;
  std::vector<torch::Tensor> out;
  out.reserve(static_cast<size_t>(b));
  for (int64_t i = 0; i < b; ++i) {
    const int64_t dy = max_shift > 0 ? rng.uniform_int(2 * max_shift + 1) : 0;
    const int64_t dx = max_shift > 0 ? rng.uniform_int(2 * max_shift + 1) : 0;
    torch::Tensor img = padded[i].slice(1, dy, dy + s).slice(2, dx, dx + s);
    if (rng.bernoulli(0.5)) img = img.flip({2});
    out.push_back(img);
  }
  return torch::stack(out);
}

ProbeReport score(const torch::Tensor& predictions, const std::vector<int64_t>& labels,
                  int64_t num_classes) {
  ProbeReport r;
  r.per_class_accuracy.assign(static_cast<size_t>(num_classes), 0.0);
  r.per_class_count.assign(static_cast<size_t>(num_classes), 0);
  std::vector<int64_t> correct(static_cast<size_t>(num_classes), 0);
  auto pred = predictions.accessor<int64_t, 1>();
  int64_t total_correct = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    const auto c = static_cast<size_t>(labels[i]);
    ++r.per_class_count[c];
    if (pred[static_cast<int64_t>(i)] == labels[i]) {
      ++correct[c];
      ++total_correct;
    }
  }
  for (size_t c = 0; c < correct.size(); ++c) {
    if (r.per_class_count[c] > 0) {
      r.per_class_accuracy[c] = static_cast<double>(correct[c]) / static_cast<double>(r.per_class_count[c]);
    }
  }
  r.test_size = static_cast<int64_t>(labels.size());
  r.accuracy = labels.empty() ? 0.0 : static_cast<double>(total_correct) / static_cast<double>(labels.size());
  return r;
}

}  // namespace

json ProbeReport::to_json() const {
  return json{{"accuracy", accuracy},
              {"per_class_accuracy", per_class_accuracy},
              {"per_class_count", per_class_count},
              {"train_size", train_size},
              {"test_size", test_size},
              {"fingerprint", {{"tokenizer", tokenizer_hash}, {"dataset", dataset_id}, {"seed", seed}}}};
}

ProbeReport logistic_probe(const torch::Tensor& features, const std::vector<int64_t>& labels,
                           int64_t num_classes, Rng& rng, const ProbeOptions& options) {
  const int64_t n = features.size(0);
  if (features.dim() != 2 || static_cast<int64_t>(labels.size()) != n) {
    fail(ErrorCode::kShape, "probe: features must be [N, F] with one label per row");
  }
  std::vector<int64_t> present(static_cast<size_t>(std::max<int64_t>(num_classes, 0)), 0);
  for (int64_t y : labels) {
    if (y < 0 || y >= num_classes) fail(ErrorCode::kBounds, "probe: label out of range");
    present[static_cast<size_t>(y)] = 1;
  }
  if (std::count(present.begin(), present.end(), 1) < 2) {
    fail(ErrorCode::kConfig, "probe: need at least two classes");
  }

  const uint64_t seed = rng.seed();
  const Split split = split_indices(labels, n, options.test_fraction, rng);
  const torch::Tensor x_all = features.detach().to(torch::kFloat64);
  torch::Tensor x_train = x_all.index_select(0, index_tensor(split.train));
  torch::Tensor x_test = x_all.index_select(0, index_tensor(split.test));
  const torch::Tensor mean = x_train.mean(0);
  const torch::Tensor std = x_train.std(0, /*unbiased=*/false).clamp_min(1e-8);
  x_train = (x_train - mean) / std;
  x_test = (x_test - mean) / std;
  const torch::Tensor y_train = index_tensor(gather(labels, split.train));

  const int64_t f = features.size(1);
  torch::Tensor w = torch::zeros({f, num_classes}, torch::kFloat64).requires_grad_(true);
  torch::Tensor b = torch::zeros({num_classes}, torch::kFloat64).requires_grad_(true);
  torch::optim::LBFGS opt({w, b}, torch::optim::LBFGSOptions(1.0)
                                      .max_iter(options.max_iterations)
                                      .max_eval(options.max_iterations * 2)
                                      .tolerance_grad(options.tolerance)
                                      .tolerance_change(options.tolerance * 1e-3)
                                      .history_size(20)
                                      .line_search_fn("strong_wolfe"));
  auto closure = [&]() {
    opt.zero_grad();
    torch::Tensor loss = F::cross_entropy(torch::addmm(b, x_train, w), y_train) +
                         options.l2 * w.pow(2).sum();
    loss.backward();
    return loss;
  };
  opt.step(closure);

  torch::Tensor pred;
  {
    torch::NoGradGuard no_grad;
    pred = torch::addmm(b, x_test, w).argmax(1).contiguous();
  }
  ProbeReport report = score(pred, gather(labels, split.test), num_classes);
  report.train_size = static_cast<int64_t>(split.train.size());
  report.seed = seed;
  return report;
}

ProbeReport linear_probe_codewords(Tokenizer& tokenizer, const Dataset& data, Rng& rng,
                                   const ProbeOptions& options) {
  require_labels(data, "probe");
  if (data.image_size() != tokenizer.codec->config().input_size) {
    fail(ErrorCode::kShape, "probe: dataset resolution does not match the tokenizer");
  }
  const torch::Tensor pooled =
      batched(data.images, [&](const torch::Tensor& x) { return tokenizer.pooled_codewords(x); });
  ProbeReport report = logistic_probe(pooled, data.labels, data.num_classes(), rng, options);
  report.tokenizer_hash = to_hex(tokenizer.fingerprint());
  report.dataset_id = to_hex(data.fingerprint());
  return report;
}

ConvClassifierImpl::ConvClassifierImpl(const ClassifierConfig& cfg) : cfg_(cfg) {
  if (cfg.channels.empty() || cfg.num_classes < 2) fail(ErrorCode::kConfig, "classifier: bad configuration");
  if (cfg.input_size % (int64_t{1} << cfg.channels.size()) != 0) {
    fail(ErrorCode::kConfig, "classifier: input size not divisible by the pooling stages");
  }
  nn::Sequential seq;
  int64_t in = 3;
  for (int64_t c : cfg.channels) {
    const int64_t groups = std::min<int64_t>(8, c);
    seq->push_back(nn::Conv2d(nn::Conv2dOptions(in, c, 3).padding(1)));
    seq->push_back(nn::GroupNorm(groups, c));
    seq->push_back(nn::SiLU());
    seq->push_back(nn::Conv2d(nn::Conv2dOptions(c, c, 3).padding(1)));
    seq->push_back(nn::GroupNorm(groups, c));
    seq->push_back(nn::SiLU());
    seq->push_back(nn::MaxPool2d(2));
    in = c;
  }
  features_ = register_module("features", seq);
  head_ = register_module("head", nn::Linear(in, cfg.num_classes));
}

torch::Tensor ConvClassifierImpl::forward(const torch::Tensor& images) {
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != cfg_.input_size ||
      images.size(3) != cfg_.input_size) {
    fail(ErrorCode::kShape, "classifier: expected [B,3," + std::to_string(cfg_.input_size) + "," +
                                std::to_string(cfg_.input_size) + "] input");
  }
  return head_(features_->forward(images).mean({2, 3}));
}

ConvClassifier train_classifier(const Dataset& train, const ClassifierConfig& cfg,
                                const ClassifierTrainOptions& options, Rng& rng) {
  require_labels(train, "classifier");
  if (train.image_size() != cfg.input_size) fail(ErrorCode::kShape, "classifier: resolution mismatch");
  seed_torch(rng.next_u64());
  ConvClassifier model(cfg);
  model->train();
  torch::optim::AdamW opt(model->parameters(),
                          torch::optim::AdamWOptions(options.lr).weight_decay(options.weight_decay));
  const torch::Tensor labels = train.label_tensor();
  const int64_t n = train.size();
  const int64_t total = options.epochs * ((n + options.batch_size - 1) / options.batch_size);
  int64_t step = 0;
  for (int64_t epoch = 0; epoch < options.epochs; ++epoch) {
    for (const auto& batch : shuffled_batches(n, options.batch_size, rng)) {
      set_learning_rate<torch::optim::AdamW, torch::optim::AdamWOptions>(
          opt, learning_rate_at(step++, options.lr, 0, total, LrSchedule::kCosine));
      const torch::Tensor idx = index_tensor(batch);
      torch::Tensor x = train.images.index_select(0, idx);
      if (options.augment) x = augment_batch(x, rng, 2);
      const torch::Tensor loss = F::cross_entropy(model->forward(x), labels.index_select(0, idx));
      opt.zero_grad();
      loss.backward();
      opt.step();
    }
  }
  model->eval();
  return model;
}

double classifier_accuracy(ConvClassifier& classifier, const torch::Tensor& images,
                           const std::vector<int64_t>& labels) {
  if (images.size(0) != static_cast<int64_t>(labels.size())) {
    fail(ErrorCode::kShape, "classifier: image/label count mismatch");
  }
  if (labels.empty()) return 0.0;
  torch::NoGradGuard no_grad;
  const torch::Tensor pred =
      batched(images, [&](const torch::Tensor& x) { return classifier->forward(x).argmax(1); });
  return (pred == index_tensor(labels)).to(torch::kFloat64).mean().item<double>();
}

double classify_reconstructions(const ReconstructFn& reconstruct_fn, ConvClassifier& classifier,
                                const Dataset& data) {
  require_labels(data, "classify-recon");
  if (data.image_size() != classifier->config().input_size) {
    fail(ErrorCode::kShape, "classify-recon: dataset resolution does not match the classifier");
  }
  torch::Tensor recon;
  {
    torch::NoGradGuard no_grad;
    recon = batched(data.images, reconstruct_fn);
  }
  if (recon.sizes() != data.images.sizes()) {
    fail(ErrorCode::kShape, "classify-recon: reconstruction shape differs from the input");
  }
  return classifier_accuracy(classifier, recon, data.labels);
}

double classify_reconstructions(Tokenizer& tokenizer, ConvClassifier& classifier,
                                const Dataset& data) {
  if (data.size() > 0 && data.image_size() != tokenizer.codec->config().input_size) {
    fail(ErrorCode::kShape, "classify-recon: dataset resolution does not match the tokenizer");
  }
  return classify_reconstructions(
      [&](const torch::Tensor& x) { return reconstruct(tokenizer, x); }, classifier, data);
}

json MosaicReport::to_json() const {
  json patches = json::array();
  for (const auto& e : entries) {
    patches.push_back({{"image_id", e.image_id},
                       {"image_index", e.image_index},
                       {"token_row", e.grid_row},
                       {"token_col", e.grid_col},
                       {"tile", e.tile},
                       {"tile_row", e.tile / columns},
                       {"tile_col", e.tile % columns}});
  }
  return json{{"codeword", codeword}, {"occurrences", occurrences}, {"emitted", emitted},
              {"patch_size", patch_size}, {"columns", columns}, {"patches", patches}};
}

MosaicReport codeword_mosaic(Tokenizer& tokenizer, const Dataset& data, int64_t codeword,
                             int64_t count) {
  const int64_t k = tokenizer.codebook.size();
  if (codeword < 0 || codeword >= k) {
    fail(ErrorCode::kBounds, "mosaic: codeword " + std::to_string(codeword) + " outside [0, " +
                                 std::to_string(k) + ")");
  }
  if (count < 1) fail(ErrorCode::kConfig, "mosaic: count must be positive");
  if (data.size() > 0 && data.image_size() != tokenizer.codec->config().input_size) {
    fail(ErrorCode::kShape, "mosaic: dataset resolution does not match the tokenizer");
  }

  MosaicReport report;
  report.codeword = codeword;
  torch::Tensor histogram = torch::zeros({k}, torch::kInt64);
  std::vector<torch::Tensor> crops;
  for (int64_t s = 0; s < data.size(); s += kEvalBatch) {
    const torch::Tensor x = data.images.slice(0, s, std::min(data.size(), s + kEvalBatch));
    torch::Tensor z;
    {
      torch::NoGradGuard no_grad;
      z = encode(tokenizer.codec, x);
    }
    const torch::Tensor tokens = assign(z, tokenizer.codebook).indices.contiguous();
    histogram += token_histogram(tokens, k);
    const int64_t h = tokens.size(1), w = tokens.size(2);
    report.patch_size = data.image_size() / h;
    const int64_t p = report.patch_size;
    auto t = tokens.accessor<int64_t, 3>();
    for (int64_t b = 0; b < tokens.size(0); ++b) {
      for (int64_t i = 0; i < h; ++i) {
        for (int64_t j = 0; j < w; ++j) {
          if (t[b][i][j] != codeword) continue;
          ++report.occurrences;
          if (report.emitted >= count) continue;
          const torch::Tensor latent = z[b].select(1, i).select(1, j).unsqueeze(0);
          if (assign_vectors(latent, tokenizer.codebook)[0].item<int64_t>() != codeword) {
            fail(ErrorCode::kEvaluation, "mosaic: patch failed re-assignment self-check");
          }
          crops.push_back(x[b].slice(1, i * p, (i + 1) * p).slice(2, j * p, (j + 1) * p));
          MosaicEntry e;
          e.image_index = s + b;
          e.image_id = data.ids.empty() ? std::to_string(s + b) : data.ids[static_cast<size_t>(s + b)];
          e.grid_row = i;
          e.grid_col = j;
          e.tile = report.emitted++;
          report.entries.push_back(e);
        }
      }
    }
  }
  if (report.occurrences == 0) {
    const int64_t used = (histogram > 0).sum().item<int64_t>();
    const int64_t top = histogram.argmax().item<int64_t>();
    fail(ErrorCode::kEmptyCodeword,
         "mosaic: codeword " + std::to_string(codeword) + " is never used on this dataset (" +
             std::to_string(used) + "/" + std::to_string(k) + " codewords used; most frequent is " +
             std::to_string(top) + " with " + std::to_string(histogram[top].item<int64_t>()) +
             " occurrences)");
  }

  const int64_t p = report.patch_size;
  const int64_t cols = static_cast<int64_t>(std::ceil(std::sqrt(static_cast<double>(report.emitted))));
  const int64_t rows = (report.emitted + cols - 1) / cols;
  report.columns = cols;
  torch::Tensor canvas = torch::full({3, rows * (p + 1) + 1, cols * (p + 1) + 1}, 1.0f);
  for (size_t t = 0; t < crops.size(); ++t) {
    const int64_t r = static_cast<int64_t>(t) / cols, c = static_cast<int64_t>(t) % cols;
    canvas.slice(1, r * (p + 1) + 1, r * (p + 1) + 1 + p).slice(2, c * (p + 1) + 1, c * (p + 1) + 1 + p).copy_(crops[t]);
  }
  report.image = to_rgb(canvas);
  return report;
}

void write_mosaic(const MosaicReport& report, const std::filesystem::path& png_path) {
  write_png(png_path, report.image);
  std::ofstream sidecar(png_path.string() + ".json");
  if (!sidecar) fail(ErrorCode::kIo, "cannot write " + png_path.string() + ".json");
  sidecar << report.to_json().dump(2) << "\n";
}

EvalMode parse_eval_mode(const std::string& name) {
  if (name == "linear-probe") return EvalMode::kLinearProbe;
  if (name == "fine-tune") return EvalMode::kFineTune;
  fail(ErrorCode::kConfig, "unknown evaluation mode '" + name + "'");
}

json EvalReport::to_json() const {
  return json{{"mode", mode == EvalMode::kFineTune ? "fine-tune" : "linear-probe"},
              {"accuracy", accuracy},
              {"train_size", train_size},
              {"test_size", test_size},
              {"epoch_losses", epoch_losses}};
}

namespace {

MimTransformer copy_with_config(MimTransformer& model, const MimConfig& cfg) {
  MimTransformer copy(cfg);
  torch::NoGradGuard no_grad;
  auto src = model->named_parameters();
  for (auto& item : copy->named_parameters()) item.value().copy_(src[item.key()]);
  return copy;
}

}  // namespace

MimTransformer clone_model(MimTransformer& model) {
  return copy_with_config(model, model->config());
}

std::vector<double> layer_lr_scales(MimTransformer& model, double layer_decay) {
  std::vector<double> scales;
  const int64_t top = model->num_layers() + 1;
  for (const auto& item : model->named_parameters()) {
    scales.push_back(std::pow(layer_decay, static_cast<double>(top - model->layer_id(item.key()))));
  }
  return scales;
}

EvalReport evaluate_pretrained(MimTransformer& model, const Dataset& data, EvalMode mode,
                               const FinetuneOptions& options, Rng& rng) {
  require_labels(data, "evaluate");
  if (data.image_size() != model->config().input_size) {
    fail(ErrorCode::kConfig, "evaluate: model expects " + std::to_string(model->config().input_size) +
                                 "px images, dataset has " + std::to_string(data.image_size()) + "px");
  }
  EvalReport report;
  report.mode = mode;
  if (mode == EvalMode::kLinearProbe) {
    torch::Tensor features;
    {
      torch::NoGradGuard no_grad;
      model->eval();
      features = batched(data.images, [&](const torch::Tensor& x) { return model->pooled_features(x); });
    }
    ProbeOptions probe;
    probe.test_fraction = options.test_fraction;
    const ProbeReport r = logistic_probe(features, data.labels, data.num_classes(), rng, probe);
    report.accuracy = r.accuracy;
    report.train_size = r.train_size;
    report.test_size = r.test_size;
    return report;
  }

  const Split split = split_indices(data.labels, data.size(), options.test_fraction, rng);
  report.train_size = static_cast<int64_t>(split.train.size());
  report.test_size = static_cast<int64_t>(split.test.size());
  MimConfig cfg = model->config();
  cfg.drop_path = options.drop_path;
  seed_torch(rng.next_u64());
  MimTransformer net = copy_with_config(model, cfg);
  nn::Linear head(cfg.width, data.num_classes());
  {
    torch::NoGradGuard no_grad;
    head->weight.normal_(0.0, 0.02);
    head->bias.zero_();
  }

  // One param group per (layer, decayed?) pair; the head trains at the full rate.
  std::map<std::pair<int64_t, bool>, std::vector<torch::Tensor>> buckets;
  for (const auto& item : net->named_parameters()) {
    const bool decay = item.value().dim() > 1 && item.key() != "pos_embed";
    buckets[{net->layer_id(item.key()), decay}].push_back(item.value());
  }
  std::vector<torch::optim::OptimizerParamGroup> groups;
  std::vector<double> scales;
  const int64_t top = net->num_layers() + 1;
  auto add_group = [&](std::vector<torch::Tensor> params, double scale, bool decay) {
    auto opts = std::make_unique<torch::optim::AdamWOptions>(options.lr * scale);
    opts->weight_decay(decay ? options.weight_decay : 0.0);
    groups.emplace_back(std::move(params), std::move(opts));
    scales.push_back(scale);
  };
  for (auto& [key, params] : buckets) {
    add_group(params, std::pow(options.layer_decay, static_cast<double>(top - key.first)), key.second);
  }
  add_group({head->weight}, 1.0, true);
  add_group({head->bias}, 1.0, false);
  torch::optim::AdamW opt(std::move(groups), torch::optim::AdamWOptions(options.lr));

  const torch::Tensor labels = data.label_tensor();
  const int64_t n = report.train_size;
  const int64_t total = options.epochs * ((n + options.batch_size - 1) / options.batch_size);
  int64_t step = 0;
  net->train();
  for (int64_t epoch = 0; epoch < options.epochs; ++epoch) {
    double sum = 0.0;
    int64_t batches = 0;
    for (const auto& batch : shuffled_batches(n, options.batch_size, rng)) {
      const double lr = learning_rate_at(step++, options.lr, options.warmup_steps, total, LrSchedule::kCosine);
      set_learning_rate<torch::optim::AdamW, torch::optim::AdamWOptions>(opt, lr, scales);
      const torch::Tensor idx = index_tensor(gather(split.train, batch));
      const torch::Tensor x = augment_batch(data.images.index_select(0, idx), rng, 0);
      const torch::Tensor loss = F::cross_entropy(head(net->pooled_features(x)), labels.index_select(0, idx));
      opt.zero_grad();
      loss.backward();
      opt.step();
      const double v = loss.item<double>();
      if (!std::isfinite(v)) fail(ErrorCode::kDiverged, "fine-tuning diverged");
      sum += v;
      ++batches;
    }
    report.epoch_losses.push_back(sum / static_cast<double>(std::max<int64_t>(1, batches)));
  }

  net->eval();
  torch::NoGradGuard no_grad;
  const torch::Tensor test_images = data.images.index_select(0, index_tensor(split.test));
  const torch::Tensor pred = batched(test_images, [&](const torch::Tensor& x) {
    return head(net->pooled_features(x)).argmax(1);
  });
  report.accuracy = split.test.empty()
                        ? 0.0
                        : (pred == labels.index_select(0, index_tensor(split.test)))
                              .to(torch::kFloat64).mean().item<double>();
  return report;
}

}  // namespace peco
