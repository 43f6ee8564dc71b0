#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "peco/codec.hpp"
#include "peco/eval.hpp"
#include "peco/losses.hpp"
#include "peco/mim.hpp"
#include "peco/perceptual.hpp"
#include "peco/schedule.hpp"

namespace peco {

/// Flat `key = value` run configuration.
///
/// Every key has a default; `#` starts a comment; unknown keys are rejected.
/// Values spelled `auto` are filled in per stage by resolve(), so a resolved
/// config never contains `auto`.
class RunConfig {
 public:
  RunConfig();

  static RunConfig parse(const std::string& text, const std::string& origin = "<config>");
  static RunConfig load(const std::filesystem::path& path);
  static RunConfig from_json(const nlohmann::json& values);

  /// Throws a configuration error for unknown keys.
  void set(const std::string& key, const std::string& value);
  /// "key=value" form used by command-line overrides.
  void set_assignment(const std::string& assignment);

  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& get(const std::string& key) const;
  int64_t get_int(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<int64_t> get_ints(const std::string& key) const;

  const std::string& stage() const { return get("stage"); }
  uint64_t seed() const { return static_cast<uint64_t>(get_int("seed")); }

  /// Replaces `auto` values with the stage's defaults.
  void resolve();

  std::string to_text() const;
  nlohmann::json to_json() const;
  void save(const std::filesystem::path& path) const;
  /// Hash of the resolved text.
  uint64_t fingerprint() const;

  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

/// The names every configuration accepts.
std::vector<std::string> known_config_keys();

CodecConfig codec_config(const RunConfig& cfg);
LossConfig loss_config(const RunConfig& cfg);
DiscriminatorConfig discriminator_config(const RunConfig& cfg);
FeatureNetConfig feature_net_config(const RunConfig& cfg);
FeatureTrainConfig feature_train_config(const RunConfig& cfg);
MimConfig mim_config(const RunConfig& cfg);
OptimizerSettings optimizer_settings(const RunConfig& cfg);
PretrainOptions pretrain_options(const RunConfig& cfg);
FinetuneOptions finetune_options(const RunConfig& cfg);
ProbeOptions probe_options(const RunConfig& cfg);
ClassifierTrainOptions classifier_train_options(const RunConfig& cfg);

}  // namespace peco
