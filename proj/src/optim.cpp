#include "mscreen/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace mscreen {

void OptimConfig::validate() const {
  if (!(lr > 0.0)) throw std::invalid_argument("optim: lr must be positive");
  if (!(0.0 < beta1 && beta1 < beta2 && beta2 < 1.0)) {
    throw std::invalid_argument("optim: need 0 < beta1 < beta2 < 1");
  }
  if (!(eps > 0.0)) throw std::invalid_argument("optim: eps must be positive");
  if (weight_decay < 0.0) throw std::invalid_argument("optim: weight_decay must be >= 0");
  if (clip_threshold && !(*clip_threshold > 0.0)) {
    throw std::invalid_argument("optim: clip threshold must be positive");
  }
  if (warmup_steps < 0 || total_steps < 0) {
    throw std::invalid_argument("optim: step counts must be non-negative");
  }
  if (seq_len <= 0 || batch_tokens < seq_len) {
    throw std::invalid_argument("optim: need 0 < seq_len <= batch_tokens");
  }
}

AdamState AdamState::zeros_for(std::span<const ParamRef> params) {
  AdamState s;
  for (const ParamRef& p : params) {
    s.m.emplace_back(p.values.size(), 0.0);
    s.v.emplace_back(p.values.size(), 0.0);
  }
  return s;
}

double lr_at(std::int64_t step, const OptimConfig& config) {
  if (config.warmup_steps <= 0 || step >= config.warmup_steps) return config.lr;
  return config.lr * static_cast<double>(step) / static_cast<double>(config.warmup_steps);
}

double global_grad_norm(std::span<const ParamRef> grads) {
  double s = 0.0;
  for (const ParamRef& g : grads)
    for (double v : g.values) s += v * v;
  return std::sqrt(s);
}

StepStatus adamw_step(std::span<const ParamRef> params, std::span<const ParamRef> grads,
                      AdamState& state, const OptimConfig& config, std::int64_t step) {
  if (params.size() != grads.size() || state.m.size() != params.size()) {
    throw std::invalid_argument("adamw_step: parameter, gradient and state blocks differ");
  }
  if (step < 1) throw std::invalid_argument("adamw_step: step must be >= 1");

  const double norm = global_grad_norm(grads);
  if (!std::isfinite(norm)) return StepStatus::rejected_non_finite;
  double clip = 1.0;
  if (config.clip_threshold && norm > *config.clip_threshold) {
    clip = *config.clip_threshold / norm;
  }

  const double lr = lr_at(step, config);
  const double b1 = config.beta1, b2 = config.beta2;
  const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step));

  for (std::size_t p = 0; p < params.size(); ++p) {
    auto w = params[p].values;
    const auto g = grads[p].values;
    if (w.size() != g.size() || state.m[p].size() != w.size()) {
      throw std::invalid_argument("adamw_step: block '" + params[p].name + "' size mismatch");
    }
    auto& m = state.m[p];
    auto& v = state.v[p];
    const bool decay = params[p].is_matrix && config.weight_decay > 0.0;
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double gk = g[k] * clip;
      m[k] = b1 * m[k] + (1.0 - b1) * gk;
      v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
      const double mhat = m[k] / bc1;
      const double vhat = v[k] / bc2;
      if (decay) w[k] -= lr * config.weight_decay * w[k];
      w[k] -= lr * mhat / (std::sqrt(vhat) + config.eps);
    }
  }
  state.step = step;
  return StepStatus::applied;
}

}  // namespace mscreen
