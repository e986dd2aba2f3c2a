#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "condenser/tensor.hpp"

namespace condenser {

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;

  bool operator==(const AdamWOptions&) const = default;
};

/// First/second moments for one parameter tensor plus the shared step count.
struct AdamWState {
  std::int64_t step = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

/// One AdamW update. `decay_mask[i]` selects which parameters get weight
/// decay (empty = all). Decay is decoupled: weights shrink by lr * weight_decay
/// before the bias-corrected Adam step is applied.
void adamw_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads,
                AdamWState& state, double lr, const AdamWOptions& options,
                const std::vector<bool>& decay_mask = {});

/// Linear warmup from 0 to `peak_lr` over warmup_ratio * total_steps, then
/// linear decay to 0 at total_steps.
double linear_warmup_schedule(std::int64_t step, std::int64_t total_steps, double warmup_ratio,
                              double peak_lr);

}  // namespace condenser
