#include "condenser/optim.hpp"

#include <cmath>

namespace condenser {

void adamw_step(std::vector<Tensor>& params, const std::vector<std::vector<double>>& grads,
                AdamWState& state, double lr, const AdamWOptions& options,
                const std::vector<bool>& decay_mask) {
  if (grads.size() != params.size())
    throw ShapeError("adamw_step: " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(params.size()) + " parameters");
  if (!decay_mask.empty() && decay_mask.size() != params.size())
    throw ShapeError("adamw_step: decay mask size mismatch");
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(p.numel(), 0.0);
      state.second_moment.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.first_moment.size() != params.size())
    throw ShapeError("adamw_step: optimizer state does not match parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].numel() || state.first_moment[i].size() != params[i].numel())
      throw ShapeError("adamw_step: shape mismatch for parameter " + std::to_string(i));
  }

  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(options.beta1, t);
  const double bc2 = 1.0 - std::pow(options.beta2, t);

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].mutable_data();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    const auto& g = grads[i];
    const bool decay = decay_mask.empty() || decay_mask[i];
    const double shrink = 1.0 - lr * options.weight_decay;
    for (std::size_t j = 0; j < w.size(); ++j) {
      if (decay) w[j] *= shrink;
      m[j] = options.beta1 * m[j] + (1.0 - options.beta1) * g[j];
      v[j] = options.beta2 * v[j] + (1.0 - options.beta2) * g[j] * g[j];
      const double m_hat = m[j] / bc1;
      const double v_hat = v[j] / bc2;
      w[j] -= lr * m_hat / (std::sqrt(v_hat) + options.eps);
    }
  }
}

double linear_warmup_schedule(std::int64_t step, std::int64_t total_steps, double warmup_ratio,
                              double peak_lr) {
  if (!(warmup_ratio >= 0.0 && warmup_ratio < 1.0))
    throw Error("linear_warmup_schedule: warmup_ratio must lie in [0, 1)");
  if (total_steps <= 0) throw Error("linear_warmup_schedule: total_steps must be positive");
  if (step < 0 || step > total_steps)
    throw Error("linear_warmup_schedule: step outside [0, total_steps]");
  const double warmup = warmup_ratio * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  if (s < warmup) return peak_lr * s / warmup;
  const double remaining = static_cast<double>(total_steps) - warmup;
  return peak_lr * (static_cast<double>(total_steps) - s) / remaining;
}

}  // namespace condenser
