#pragma once

// Training loop and learning-rate sweep.
//
// TrainLog text format, one record per line:
//   # step loss grad_norm lr
//   1 5.5451774444795623 0.83 0.0625
//   ...
//   # status completed
//   # status diverged at <step>
// Steps whose gradients were non-finite carry a trailing "rejected" field.

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mscreen/lm.hpp"
#include "mscreen/optim.hpp"
#include "mscreen/tasks.hpp"

namespace mscreen {

struct TrainRecord {
  std::int64_t step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  bool rejected = false;
};

enum class TrainStatus { completed, diverged };

struct TrainLog {
  std::vector<TrainRecord> records;
  TrainStatus status = TrainStatus::completed;
  std::int64_t diverged_step = 0;

  bool diverged() const { return status == TrainStatus::diverged; }
  /// Mean loss over the last `window` records (fewer if the log is shorter).
  double final_loss(std::size_t window = 16) const;
  std::string to_text() const;
};

struct TrainOptions {
  double divergence_ceiling = 1e4;
  /// Called after every step; return false to stop early.
  std::function<bool(const TrainRecord&)> on_step;
};

struct TrainResult {
  AnyModel model;
  AdamState optimizer;
  TrainLog log;
};

/// Recommended optimizer settings: Multiscreen lr 2^-4 without decay or
/// clipping; baseline lr 1e-3, decay 0.1, clip 1.0.
OptimConfig default_optim(ModelKind kind);

/// True if the loss is non-finite or above the ceiling.
bool is_divergent(double loss, double ceiling);

/// Runs optim.total_steps steps. Each step draws batch_tokens / seq_len
/// sequences of length optim.seq_len from a stream seeded with optim.seed and
/// minimizes their mean per-sequence loss. `resume` continues from saved
/// optimizer state; step numbering continues from resume->step.
TrainResult train(AnyModel model, const OptimConfig& optim, TaskParams task,
                  const TrainOptions& options = {}, const AdamState* resume = nullptr);

struct SweepRow {
  double lr = 0.0;
  bool diverged = false;
  std::int64_t diverged_step = 0;
  double final_loss = 0.0;  // meaningful only if !diverged
};

/// One run per learning rate from identical initial weights and data seed.
std::vector<SweepRow> lr_sweep(const AnyModel& initial, const OptimConfig& base,
                               const std::vector<double>& lrs, const TaskParams& task,
                               const TrainOptions& options = {});

/// Tab-separated "lr log2_lr final_loss" with DIVERGED in place of the loss.
std::string sweep_table(const std::vector<SweepRow>& rows);

}  // namespace mscreen
