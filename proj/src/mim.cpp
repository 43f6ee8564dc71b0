#include "peco/mim.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "peco/dataset.hpp"

namespace peco {

namespace nn = torch::nn;
namespace F = torch::nn::functional;

int64_t MaskSpec::count() const {
  int64_t c = 0;
  for (uint8_t f : flags) c += f != 0;
  return c;
}

std::vector<int64_t> MaskSpec::indices() const {
  std::vector<int64_t> out;
  for (size_t i = 0; i < flags.size(); ++i) {
    if (flags[i]) out.push_back(static_cast<int64_t>(i));
  }
  return out;
}

torch::Tensor MaskSpec::tensor() const {
  torch::Tensor t = torch::zeros({size()}, torch::kBool);
  auto a = t.accessor<bool, 1>();
  for (int64_t i = 0; i < size(); ++i) a[i] = flags[static_cast<size_t>(i)] != 0;
  return t;
}

MaskSpec MaskSpec::from_indices(int64_t h, int64_t w, const std::vector<int64_t>& indices) {
  MaskSpec m(h, w);
  for (int64_t i : indices) {
    if (i < 0 || i >= h * w) fail(ErrorCode::kBounds, "mask index " + std::to_string(i) + " out of range");
    m.flags[static_cast<size_t>(i)] = 1;
  }
  return m;
}

namespace {

int64_t effective_min_block(int64_t n, const BlockMaskOptions& options) {
  if (options.min_block > 0) return options.min_block;
  return n >= 16 ? 4 : 1;
}

int64_t uncovered_in(const MaskSpec& m, int64_t top, int64_t left, int64_t rows, int64_t cols) {
  int64_t c = 0;
  for (int64_t r = top; r < top + rows; ++r) {
    for (int64_t q = left; q < left + cols; ++q) c += m.flags[static_cast<size_t>(r * m.width + q)] == 0;
  }
  return c;
}

void cover(MaskSpec& m, int64_t top, int64_t left, int64_t rows, int64_t cols) {
  for (int64_t r = top; r < top + rows; ++r) {
    for (int64_t q = left; q < left + cols; ++q) m.flags[static_cast<size_t>(r * m.width + q)] = 1;
  }
}

}  // namespace

std::vector<std::pair<int64_t, int64_t>> valid_block_shapes(int64_t h, int64_t w,
                                                            const BlockMaskOptions& options) {
  const int64_t min_block = effective_min_block(h * w, options);
  std::vector<std::pair<int64_t, int64_t>> shapes;
  for (int64_t rows = 1; rows <= h; ++rows) {
    for (int64_t cols = 1; cols <= w; ++cols) {
      const double aspect = static_cast<double>(rows) / static_cast<double>(cols);
      if (rows * cols >= min_block && aspect >= options.min_aspect && aspect <= options.max_aspect) {
        shapes.emplace_back(rows, cols);
      }
    }
  }
  return shapes;
}

MaskSpec blockwise_mask(int64_t h, int64_t w, double ratio, Rng& rng,
                        const BlockMaskOptions& options) {
  if (h <= 0 || w <= 0) fail(ErrorCode::kConfig, "mask grid must be non-empty");
  if (!(ratio >= 0.0 && ratio <= 1.0)) fail(ErrorCode::kConfig, "mask ratio must lie in [0, 1]");
  MaskSpec mask(h, w);
  const int64_t n = h * w;
  const int64_t target = std::llround(ratio * static_cast<double>(n));
  const int64_t min_block = effective_min_block(n, options);
  const auto shapes = valid_block_shapes(h, w, options);
  if (shapes.empty()) fail(ErrorCode::kConfig, "no block shape satisfies the mask constraints");

  const double log_lo = std::log(options.min_aspect);
  const double log_hi = std::log(options.max_aspect);
  int64_t count = 0;
  while (count < target) {
    const int64_t remaining = target - count;
    bool placed = false;
    for (int attempt = 0; attempt < options.attempts && !placed; ++attempt) {
      const double area = rng.uniform(static_cast<double>(min_block),
                                      static_cast<double>(std::max(min_block, remaining)));
      const double aspect = std::exp(rng.uniform(log_lo, log_hi));
      const auto rows = static_cast<int64_t>(std::llround(std::sqrt(area * aspect)));
      const auto cols = static_cast<int64_t>(std::llround(std::sqrt(area / aspect)));
      if (rows < 1 || cols < 1 || rows > h || cols > w) continue;
      const double actual = static_cast<double>(rows) / static_cast<double>(cols);
      if (rows * cols < min_block || actual < options.min_aspect || actual > options.max_aspect) continue;
      const int64_t top = rng.uniform_int(h - rows + 1);
      const int64_t left = rng.uniform_int(w - cols + 1);
      const int64_t fresh = uncovered_in(mask, top, left, rows, cols);
      if (fresh >= 1 && fresh <= remaining) {
        cover(mask, top, left, rows, cols);
        count += fresh;
        placed = true;
      }
    }
    if (placed) continue;

    // Exhaustive fallback: prefer not overshooting, then closest to the remainder.
    int64_t best_key = std::numeric_limits<int64_t>::max();
    int64_t best_fresh = 0, bt = 0, bl = 0, br = 0, bc = 0;
    for (const auto& [rows, cols] : shapes) {
      for (int64_t top = 0; top + rows <= h; ++top) {
        for (int64_t left = 0; left + cols <= w; ++left) {
          const int64_t fresh = uncovered_in(mask, top, left, rows, cols);
          if (fresh < 1) continue;
          const int64_t over = fresh > remaining ? 1 : 0;
          const int64_t key = over * (n + 1) + std::abs(remaining - fresh);
          if (key < best_key) {
            best_key = key;
            best_fresh = fresh;
            bt = top, bl = left, br = rows, bc = cols;
          }
        }
      }
    }
    if (best_fresh == 0 || best_fresh > remaining + 2) break;
    cover(mask, bt, bl, br, bc);
    count += best_fresh;
  }
  return mask;
}

torch::Tensor corrupt(const torch::Tensor& embeddings, const torch::Tensor& mask,
                      const torch::Tensor& mask_token) {
  if (embeddings.dim() != mask.dim() + 1) {
    fail(ErrorCode::kShape, "corrupt: mask must index the rows of the embeddings");
  }
  for (int64_t d = 0; d < mask.dim(); ++d) {
    if (mask.size(d) != embeddings.size(d)) fail(ErrorCode::kBounds, "corrupt: mask/embedding size mismatch");
  }
  if (mask_token.dim() != 1 || mask_token.size(0) != embeddings.size(-1)) {
    fail(ErrorCode::kShape, "corrupt: mask token width mismatch");
  }
  return torch::where(mask.to(torch::kBool).unsqueeze(-1), mask_token.to(embeddings.dtype()),
                      embeddings);
}

void MimConfig::validate() const {
  if (patch_size <= 0 || input_size % patch_size != 0) {
    fail(ErrorCode::kConfig, "mim: input_size must be a multiple of patch_size");
  }
  if (depth < 1 || width < 1 || heads < 1 || width % heads != 0) {
    fail(ErrorCode::kConfig, "mim: width must be a positive multiple of heads");
  }
  if (vocab_size < 2) fail(ErrorCode::kConfig, "mim: vocabulary needs at least two tokens");
  if (mask_ratio < 0.0 || mask_ratio > 1.0 || drop_path < 0.0 || drop_path >= 1.0) {
    fail(ErrorCode::kConfig, "mim: ratios out of range");
  }
}

TransformerBlockImpl::TransformerBlockImpl(int64_t width, int64_t heads, int64_t mlp_ratio,
                                           double drop_path)
    : heads_(heads), drop_path_(drop_path) {
  norm1_ = register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({width}).eps(1e-6)));
  qkv_ = register_module("qkv", nn::Linear(width, 3 * width));
  proj_ = register_module("proj", nn::Linear(width, width));
  norm2_ = register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({width}).eps(1e-6)));
  fc1_ = register_module("fc1", nn::Linear(width, width * mlp_ratio));
  fc2_ = register_module("fc2", nn::Linear(width * mlp_ratio, width));
}

torch::Tensor TransformerBlockImpl::drop_path(const torch::Tensor& residual) const {
  if (!is_training() || drop_path_ <= 0.0) return residual;
  const double keep = 1.0 - drop_path_;
  const torch::Tensor gate =
      torch::bernoulli(torch::full({residual.size(0), 1, 1}, keep, residual.options()));
  return residual * gate / keep;
}

torch::Tensor TransformerBlockImpl::forward(const torch::Tensor& x) {
  const int64_t b = x.size(0), n = x.size(1), w = x.size(2);
  const int64_t hd = w / heads_;
  const torch::Tensor qkv = qkv_(norm1_(x)).reshape({b, n, 3, heads_, hd}).permute({2, 0, 3, 1, 4});
  const torch::Tensor q = qkv[0], k = qkv[1], v = qkv[2];  // [B, H, N, hd]
  const torch::Tensor attn =
      torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(hd)), -1);
  const torch::Tensor ctx = torch::matmul(attn, v).permute({0, 2, 1, 3}).reshape({b, n, w});
  torch::Tensor out = x + drop_path(proj_(ctx));
  out = out + drop_path(fc2_(torch::gelu(fc1_(norm2_(out)))));
  return out;
}

MimTransformerImpl::MimTransformerImpl(const MimConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int64_t patch_dim = 3 * cfg.patch_size * cfg.patch_size;
  patch_embed_ = register_module("patch_embed", nn::Linear(patch_dim, cfg.width));
  pos_embed_ = register_parameter("pos_embed", torch::randn({1, cfg.num_patches(), cfg.width}) * 0.02);
  mask_token_ = register_parameter("mask_token", torch::randn({cfg.width}) * 0.02);
  for (int64_t i = 0; i < cfg.depth; ++i) {
    const double rate = cfg.depth > 1 ? cfg.drop_path * static_cast<double>(i) / static_cast<double>(cfg.depth - 1)
                                      : cfg.drop_path;
    blocks_.push_back(register_module("block" + std::to_string(i),
                                      TransformerBlock(cfg.width, cfg.heads, cfg.mlp_ratio, rate)));
  }
  norm_ = register_module("norm", nn::LayerNorm(nn::LayerNormOptions({cfg.width}).eps(1e-6)));
  head_ = register_module("head", nn::Linear(cfg.width, cfg.vocab_size));

  torch::NoGradGuard no_grad;
  for (auto& module : modules(/*include_self=*/false)) {
    if (auto* linear = module->as<nn::Linear>()) {
      linear->weight.normal_(0.0, 0.02);
      linear->bias.zero_();
    }
  }
}

torch::Tensor MimTransformerImpl::patchify(const torch::Tensor& images) const {
  const int64_t s = cfg_.input_size, p = cfg_.patch_size, g = cfg_.grid_side();
  if (images.dim() != 4 || images.size(1) != 3 || images.size(2) != s || images.size(3) != s) {
    fail(ErrorCode::kShape, "mim: expected [B,3," + std::to_string(s) + "," + std::to_string(s) + "] images");
  }
  const int64_t b = images.size(0);
  return images.reshape({b, 3, g, p, g, p}).permute({0, 2, 4, 1, 3, 5}).reshape({b, g * g, 3 * p * p});
}

torch::Tensor MimTransformerImpl::embed(const torch::Tensor& images) {
  return patch_embed_(patchify(images));
}

torch::Tensor MimTransformerImpl::encode(const torch::Tensor& embeddings) {
  if (embeddings.dim() != 3 || embeddings.size(1) != cfg_.num_patches() || embeddings.size(2) != cfg_.width) {
    fail(ErrorCode::kShape, "mim: expected [B," + std::to_string(cfg_.num_patches()) + "," +
                                std::to_string(cfg_.width) + "] embeddings, got " +
                                c10::str(embeddings.sizes()));
  }
  torch::Tensor h = embeddings + pos_embed_;
  for (auto& block : blocks_) h = block->forward(h);
  return norm_(h);
}

torch::Tensor MimTransformerImpl::mim_forward(const torch::Tensor& corrupted) {
  return head_(encode(corrupted));
}

torch::Tensor MimTransformerImpl::pooled_features(const torch::Tensor& images) {
  return encode(embed(images)).mean(1);
}

int64_t MimTransformerImpl::layer_id(const std::string& name) const {
  if (name.rfind("patch_embed", 0) == 0 || name == "pos_embed" || name == "mask_token") return 0;
  if (name.rfind("block", 0) == 0) {
    const size_t dot = name.find('.');
    return std::stoll(name.substr(5, dot - 5)) + 1;
  }
  return num_layers() + 1;
}

torch::Tensor mim_loss(const torch::Tensor& logits, const torch::Tensor& targets,
                       const torch::Tensor& mask) {
  if (logits.dim() != targets.dim() + 1 || targets.sizes() != mask.sizes()) {
    fail(ErrorCode::kShape, "mim_loss: logits [.., K] must match targets and mask");
  }
  const int64_t k = logits.size(-1);
  const torch::Tensor flat_mask = mask.reshape({-1}).to(torch::kBool);
  const torch::Tensor rows = flat_mask.nonzero().reshape({-1});
  if (rows.numel() == 0) fail(ErrorCode::kUndefinedLoss, "mim_loss: no masked positions");
  const torch::Tensor picked = logits.reshape({-1, k}).index_select(0, rows);
  const torch::Tensor labels = targets.reshape({-1}).to(torch::kInt64).index_select(0, rows);
  return F::cross_entropy(picked, labels);
}

PretrainResult pretrain(const torch::Tensor& images, const torch::Tensor& targets,
                        const MimConfig& cfg, const PretrainOptions& options, Rng& rng,
                        const PretrainLogger& logger) {
  cfg.validate();
  const int64_t g = cfg.grid_side();
  if (targets.dim() != 3 || targets.size(1) != g || targets.size(2) != g) {
    fail(ErrorCode::kConfig, "mim: token grid " + c10::str(targets.sizes()) + " does not match the " +
                                 std::to_string(g) + "x" + std::to_string(g) + " patch grid");
  }
  if (images.size(0) != targets.size(0)) fail(ErrorCode::kConfig, "mim: image/token count mismatch");
  if (images.size(0) == 0) fail(ErrorCode::kConfig, "mim: empty dataset");
  if (targets.max().item<int64_t>() >= cfg.vocab_size) {
    fail(ErrorCode::kConfig, "mim: token ids exceed the vocabulary size");
  }

  seed_torch(rng.next_u64());
  PretrainResult result;
  result.model = MimTransformer(cfg);
  auto& model = result.model;
  model->train();
  torch::optim::AdamW opt(model->parameters(),
                          torch::optim::AdamWOptions(options.optim.lr)
                              .betas({options.optim.beta1, options.optim.beta2})
                              .weight_decay(options.optim.weight_decay));

  const int64_t n = images.size(0);
  const int64_t steps_per_epoch = (n + options.batch_size - 1) / options.batch_size;
  const int64_t total_steps = steps_per_epoch * options.epochs;
  const torch::Tensor flat_targets = targets.reshape({n, g * g}).to(torch::kInt64);
  int64_t step = 0;
  double interval_sum = 0.0;
  int64_t interval_count = 0;
  for (int64_t epoch = 0; epoch < options.epochs; ++epoch) {
    double epoch_sum = 0.0;
    int64_t epoch_batches = 0;
    for (const auto& batch : shuffled_batches(n, options.batch_size, rng)) {
      const double lr = learning_rate_at(step, options.optim.lr, options.optim.warmup_steps,
                                         total_steps, options.optim.schedule);
      set_learning_rate<torch::optim::AdamW, torch::optim::AdamWOptions>(opt, lr);
      const torch::Tensor idx = torch::tensor(batch, torch::kInt64);
      torch::Tensor mask = torch::empty({static_cast<int64_t>(batch.size()), g * g}, torch::kBool);
      for (size_t i = 0; i < batch.size(); ++i) {
        mask[static_cast<int64_t>(i)].copy_(blockwise_mask(g, g, cfg.mask_ratio, rng).tensor());
      }
      const torch::Tensor corrupted = corrupt(model->embed(images.index_select(0, idx)), mask,
                                              model->mask_token());
      const torch::Tensor loss =
          mim_loss(model->mim_forward(corrupted), flat_targets.index_select(0, idx), mask);
      opt.zero_grad();
      loss.backward();
      opt.step();

      const double v = loss.item<double>();
      if (!std::isfinite(v)) fail(ErrorCode::kDiverged, "mim pre-training diverged at step " + std::to_string(step));
      if (step == 0) result.initial_loss = v;
      epoch_sum += v;
      ++epoch_batches;
      interval_sum += v;
      ++interval_count;
      ++step;
      if (interval_count == options.log_interval || step == total_steps) {
        PretrainLogEntry entry{step, lr, interval_sum / static_cast<double>(interval_count)};
        result.log.push_back(entry);
        if (logger) logger(entry);
        interval_sum = 0.0;
        interval_count = 0;
      }
    }
    result.epoch_losses.push_back(epoch_sum / static_cast<double>(std::max<int64_t>(1, epoch_batches)));
  }
  model->eval();
  return result;
}

}  // namespace peco
