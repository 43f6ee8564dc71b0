#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>

#include <torch/torch.h>

#include "peco/error.hpp"

namespace peco {

enum class LrSchedule { kConstant, kCosine };

inline LrSchedule parse_schedule(const std::string& name) {
  if (name == "constant") return LrSchedule::kConstant;
  if (name == "cosine") return LrSchedule::kCosine;
  fail(ErrorCode::kConfig, "unknown lr schedule '" + name + "'");
}

/// Linear warmup from 0 over `warmup` steps, then constant or cosine decay to 0
/// at `total` steps. `step` counts from 0.
inline double learning_rate_at(int64_t step, double base_lr, int64_t warmup, int64_t total,
                               LrSchedule schedule) {
  if (warmup > 0 && step < warmup) {
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  }
  if (schedule == LrSchedule::kConstant || total <= warmup) return base_lr;
  const double progress =
      std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(total - warmup));
  return 0.5 * base_lr * (1.0 + std::cos(std::numbers::pi * progress));
}

struct OptimizerSettings {
  double lr = 1.5e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 0.05;
  int64_t warmup_steps = 0;
  LrSchedule schedule = LrSchedule::kCosine;
};

/// Sets lr on every param group, scaled by the group's multiplier (if any).
template <typename Optimizer, typename Options>
void set_learning_rate(Optimizer& opt, double lr, const std::vector<double>& group_scales = {}) {
  auto& groups = opt.param_groups();
  for (size_t i = 0; i < groups.size(); ++i) {
    const double scale = i < group_scales.size() ? group_scales[i] : 1.0;
    static_cast<Options&>(groups[i].options()).lr(lr * scale);
  }
}

}  // namespace peco
