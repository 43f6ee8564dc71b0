#include "peco/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "peco/error.hpp"
#include "peco/numerics.hpp"

namespace peco {

namespace {

const std::vector<std::pair<std::string, std::string>>& defaults() {
  static const std::vector<std::pair<std::string, std::string>> table = {
      {"stage", "tokenizer"},
      {"seed", "0"},
      {"out_dir", ""},
      {"threads", "0"},
      {"dataset.path", ""},
      {"dataset.format", "auto"},
      {"dataset.test_fraction", "0.2"},
      {"codec.input_size", "32"},
      {"codec.downsample_stages", "2"},
      {"codec.base_channels", "64"},
      {"codec.residual_blocks", "2"},
      {"codec.latent_dim", "64"},
      {"codec.attention", "true"},
      {"codec.norm_groups", "8"},
      {"codebook.size", "512"},
      {"codebook.decay", "0.99"},
      {"codebook.eps", "1e-5"},
      {"codebook.kmeans_iterations", "10"},
      {"loss.beta", "0.25"},
      {"loss.lambda", "1"},
      {"loss.adv_weight", "0"},
      {"loss.pixel_norm", "l1"},
      {"loss.codebook_term", "false"},
      {"disc.base_channels", "32"},
      {"disc.stages", "3"},
      {"disc.lr", "auto"},
      {"feature.checkpoint", ""},
      {"feature.weights", "self-supervised"},
      {"feature.channels", "32,32,64,64,128,128,128,128"},
      {"feature.strides", "1,1,2,1,2,1,2,1"},
      {"feature.taps", "2,4,6,8"},
      {"feature.norm_groups", "8"},
      {"feature.temperature", "0.2"},
      {"feature.projection_dim", "64"},
      {"mim.patch_size", "4"},
      {"mim.depth", "6"},
      {"mim.width", "256"},
      {"mim.heads", "4"},
      {"mim.mlp_ratio", "4"},
      {"mim.mask_ratio", "0.4"},
      {"mim.drop_path", "0.1"},
      {"mim.checkpoint", ""},
      {"optim.name", "auto"},
      {"optim.lr", "auto"},
      {"optim.beta1", "auto"},
      {"optim.beta2", "auto"},
      {"optim.weight_decay", "auto"},
      {"optim.warmup_steps", "auto"},
      {"optim.schedule", "cosine"},
      {"train.epochs", "auto"},
      {"train.batch_size", "128"},
      {"train.log_interval", "20"},
      {"tokenizer.checkpoint", ""},
      {"tokens.path", ""},
      {"eval.mode", "fine-tune"},
      {"eval.epochs", "30"},
      {"eval.batch_size", "64"},
      {"eval.lr", "1e-3"},
      {"eval.weight_decay", "0.05"},
      {"eval.layer_decay", "0.65"},
      {"eval.warmup_steps", "50"},
      {"eval.drop_path", "0.1"},
      {"probe.l2", "1e-4"},
      {"probe.max_iterations", "500"},
      {"classifier.checkpoint", ""},
      {"classifier.epochs", "15"},
      {"classifier.lr", "2e-3"},
      {"mosaic.codeword", "-1"},
      {"mosaic.count", "64"},
      {"reconstruct.count", "16"},
  };
  return table;
}

// Per-stage values for keys left at `auto`.
const std::map<std::string, std::map<std::string, std::string>>& stage_defaults() {
  static const std::map<std::string, std::map<std::string, std::string>> table = {
      {"tokenizer",
       {{"optim.name", "adam"}, {"optim.lr", "5e-5"}, {"optim.beta1", "0.5"}, {"optim.beta2", "0.95"},
        {"optim.weight_decay", "0"}, {"optim.warmup_steps", "500"}, {"train.epochs", "20"}}},
      {"feature-net",
       {{"optim.name", "adamw"}, {"optim.lr", "1e-3"}, {"optim.beta1", "0.9"}, {"optim.beta2", "0.999"},
        {"optim.weight_decay", "1e-4"}, {"optim.warmup_steps", "0"}, {"train.epochs", "10"}}},
      {"mim",
       {{"optim.name", "adamw"}, {"optim.lr", "1.5e-3"}, {"optim.beta1", "0.9"}, {"optim.beta2", "0.999"},
        {"optim.weight_decay", "0.05"}, {"optim.warmup_steps", "100"}, {"train.epochs", "20"}}},
      {"eval",
       {{"optim.name", "adamw"}, {"optim.lr", "1e-3"}, {"optim.beta1", "0.9"}, {"optim.beta2", "0.999"},
        {"optim.weight_decay", "0.05"}, {"optim.warmup_steps", "0"}, {"train.epochs", "1"}}},
  };
  return table;
}

std::string trim(const std::string& s) {
  const size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  fail(ErrorCode::kConfig, "config key '" + key + "': expected " + expected + ", got '" + value + "'");
}

}  // namespace

std::vector<std::string> known_config_keys() {
  std::vector<std::string> keys;
  for (const auto& [k, v] : defaults()) keys.push_back(k);
  return keys;
}

RunConfig::RunConfig() {
  for (const auto& [k, v] : defaults()) values_[k] = v;
}

RunConfig RunConfig::parse(const std::string& text, const std::string& origin) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      fail(ErrorCode::kConfig, origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    try {
      cfg.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const Error& e) {
      fail(ErrorCode::kConfig, origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kConfig, "cannot read config file " + path.string());
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse(buffer.str(), path.string());
}

RunConfig RunConfig::from_json(const nlohmann::json& values) {
  RunConfig cfg;
  if (!values.is_object()) fail(ErrorCode::kConfig, "config snapshot is not an object");
  for (const auto& [k, v] : values.items()) {
    if (!v.is_string()) fail(ErrorCode::kConfig, "config snapshot value for '" + k + "' is not a string");
    cfg.set(k, v.get<std::string>());
  }
  return cfg;
}

void RunConfig::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) fail(ErrorCode::kConfig, "unknown config key '" + key + "'");
  if (key == "stage" && stage_defaults().count(value) == 0) {
    fail(ErrorCode::kConfig, "stage must be tokenizer, feature-net, mim or eval (got '" + value + "')");
  }
  it->second = value;
}

void RunConfig::set_assignment(const std::string& assignment) {
  const size_t eq = assignment.find('=');
  if (eq == std::string::npos) fail(ErrorCode::kConfig, "override '" + assignment + "' is not key=value");
  set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

const std::string& RunConfig::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) fail(ErrorCode::kConfig, "unknown config key '" + key + "'");
  return it->second;
}

int64_t RunConfig::get_int(const std::string& key) const {
  const std::string& v = get(key);
  int64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, v, "an integer");
  return out;
}

double RunConfig::get_double(const std::string& key) const {
  const std::string& v = get(key);
  try {
    size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) bad_value(key, v, "a number");
    return out;
  } catch (const std::logic_error&) {
    bad_value(key, v, "a number");
  }
}

bool RunConfig::get_bool(const std::string& key) const {
  const std::string& v = get(key);
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  bad_value(key, v, "true or false");
}

std::vector<int64_t> RunConfig::get_ints(const std::string& key) const {
  const std::string& v = get(key);
  std::vector<int64_t> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    int64_t x = 0;
    const auto [ptr, ec] = std::from_chars(item.data(), item.data() + item.size(), x);
    if (item.empty() || ec != std::errc() || ptr != item.data() + item.size()) {
      bad_value(key, v, "a comma-separated integer list");
    }
    out.push_back(x);
  }
  return out;
}

void RunConfig::resolve() {
  const auto& stage_table = stage_defaults().at(stage());
  for (auto& [k, v] : values_) {
    if (v != "auto") continue;
    auto it = stage_table.find(k);
    if (it != stage_table.end()) v = it->second;
  }
  if (values_.at("disc.lr") == "auto") values_["disc.lr"] = values_.at("optim.lr");
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
  return out;
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : values_) j[k] = v;
  return j;
}

void RunConfig::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path.string());
  out << to_text();
}

uint64_t RunConfig::fingerprint() const {
  const std::string text = to_text();
  return fnv1a64(text.data(), text.size());
}

CodecConfig codec_config(const RunConfig& cfg) {
  CodecConfig c;
  c.input_size = cfg.get_int("codec.input_size");
  c.downsample_stages = cfg.get_int("codec.downsample_stages");
  c.base_channels = cfg.get_int("codec.base_channels");
  c.residual_blocks = cfg.get_int("codec.residual_blocks");
  c.latent_dim = cfg.get_int("codec.latent_dim");
  c.attention = cfg.get_bool("codec.attention");
  c.norm_groups = cfg.get_int("codec.norm_groups");
  c.validate();
  return c;
}

LossConfig loss_config(const RunConfig& cfg) {
  LossConfig l;
  l.beta = cfg.get_double("loss.beta");
  l.lambda = cfg.get_double("loss.lambda");
  l.adv_weight = cfg.get_double("loss.adv_weight");
  const std::string& norm = cfg.get("loss.pixel_norm");
  if (norm == "l1") {
    l.pixel_norm = PixelNorm::kL1;
  } else if (norm == "l2") {
    l.pixel_norm = PixelNorm::kL2;
  } else {
    bad_value("loss.pixel_norm", norm, "l1 or l2");
  }
  l.codebook_term = cfg.get_bool("loss.codebook_term");
  l.validate();
  return l;
}

DiscriminatorConfig discriminator_config(const RunConfig& cfg) {
  DiscriminatorConfig d;
  d.input_size = cfg.get_int("codec.input_size");
  d.base_channels = cfg.get_int("disc.base_channels");
  d.stages = cfg.get_int("disc.stages");
  d.validate();
  return d;
}

FeatureNetConfig feature_net_config(const RunConfig& cfg) {
  FeatureNetConfig f;
  f.input_size = cfg.get_int("codec.input_size");
  f.channels = cfg.get_ints("feature.channels");
  f.strides = cfg.get_ints("feature.strides");
  f.tap_layers = cfg.get_ints("feature.taps");
  f.norm_groups = cfg.get_int("feature.norm_groups");
  const std::string& w = cfg.get("feature.weights");
  if (w == "self-supervised") {
    f.weights = FeatureWeights::kSelfSupervised;
  } else if (w == "random") {
    f.weights = FeatureWeights::kRandomInit;
  } else {
    bad_value("feature.weights", w, "self-supervised or random");
  }
  f.validate();
  return f;
}

FeatureTrainConfig feature_train_config(const RunConfig& cfg) {
  FeatureTrainConfig t;
  t.epochs = cfg.get_int("train.epochs");
  t.batch_size = cfg.get_int("train.batch_size");
  t.lr = cfg.get_double("optim.lr");
  t.weight_decay = cfg.get_double("optim.weight_decay");
  t.temperature = cfg.get_double("feature.temperature");
  t.projection_dim = cfg.get_int("feature.projection_dim");
  t.log_interval = cfg.get_int("train.log_interval");
  return t;
}

MimConfig mim_config(const RunConfig& cfg) {
  MimConfig m;
  m.input_size = cfg.get_int("codec.input_size");
  m.patch_size = cfg.get_int("mim.patch_size");
  m.depth = cfg.get_int("mim.depth");
  m.width = cfg.get_int("mim.width");
  m.heads = cfg.get_int("mim.heads");
  m.mlp_ratio = cfg.get_int("mim.mlp_ratio");
  m.vocab_size = cfg.get_int("codebook.size");
  m.mask_ratio = cfg.get_double("mim.mask_ratio");
  m.drop_path = cfg.get_double("mim.drop_path");
  m.validate();
  return m;
}

OptimizerSettings optimizer_settings(const RunConfig& cfg) {
  OptimizerSettings o;
  o.lr = cfg.get_double("optim.lr");
  o.beta1 = cfg.get_double("optim.beta1");
  o.beta2 = cfg.get_double("optim.beta2");
  o.weight_decay = cfg.get_double("optim.weight_decay");
  o.warmup_steps = cfg.get_int("optim.warmup_steps");
  o.schedule = parse_schedule(cfg.get("optim.schedule"));
  const std::string& name = cfg.get("optim.name");
  if (name != "adam" && name != "adamw") bad_value("optim.name", name, "adam or adamw");
  if (!(o.lr > 0.0)) bad_value("optim.lr", cfg.get("optim.lr"), "a positive learning rate");
  return o;
}

PretrainOptions pretrain_options(const RunConfig& cfg) {
  PretrainOptions p;
  p.epochs = cfg.get_int("train.epochs");
  p.batch_size = cfg.get_int("train.batch_size");
  p.log_interval = cfg.get_int("train.log_interval");
  p.optim = optimizer_settings(cfg);
  return p;
}

FinetuneOptions finetune_options(const RunConfig& cfg) {
  FinetuneOptions f;
  f.epochs = cfg.get_int("eval.epochs");
  f.batch_size = cfg.get_int("eval.batch_size");
  f.lr = cfg.get_double("eval.lr");
  f.weight_decay = cfg.get_double("eval.weight_decay");
  f.layer_decay = cfg.get_double("eval.layer_decay");
  f.warmup_steps = cfg.get_int("eval.warmup_steps");
  f.test_fraction = cfg.get_double("dataset.test_fraction");
  f.drop_path = cfg.get_double("eval.drop_path");
  return f;
}

ProbeOptions probe_options(const RunConfig& cfg) {
  ProbeOptions p;
  p.test_fraction = cfg.get_double("dataset.test_fraction");
  p.l2 = cfg.get_double("probe.l2");
  p.max_iterations = cfg.get_int("probe.max_iterations");
  return p;
}

ClassifierTrainOptions classifier_train_options(const RunConfig& cfg) {
  ClassifierTrainOptions c;
  c.epochs = cfg.get_int("classifier.epochs");
  c.lr = cfg.get_double("classifier.lr");
  return c;
}

}  // namespace peco
