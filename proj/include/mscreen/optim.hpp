#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mscreen/model.hpp"

namespace mscreen {

struct OptimConfig {
  double lr = 0.0625;  // 2^-4
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::optional<double> clip_threshold;
  std::int64_t warmup_steps = 0;
  std::int64_t total_steps = 4096;
  std::int64_t batch_tokens = 1 << 14;
  std::int64_t seq_len = 256;
  std::uint64_t seed = 0;

  void validate() const;
};

/// First and second moments per parameter block, in param_refs order.
struct AdamState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::int64_t step = 0;

  static AdamState zeros_for(std::span<const ParamRef> params);
};

/// Linear warmup from 0 to lr over warmup_steps, constant afterwards. step >= 1.
double lr_at(std::int64_t step, const OptimConfig& config);

/// sqrt(sum of squares) over all gradient blocks.
double global_grad_norm(std::span<const ParamRef> grads);

enum class StepStatus { applied, rejected_non_finite };

/// One decoupled-weight-decay Adam update with bias correction at the given
/// step (>= 1). Scalars (is_matrix == false) are never decayed. Gradients are
/// clipped first when clip_threshold is set. Non-finite gradients leave
/// params and state untouched.
StepStatus adamw_step(std::span<const ParamRef> params, std::span<const ParamRef> grads,
                      AdamState& state, const OptimConfig& config, std::int64_t step);

}  // namespace mscreen
