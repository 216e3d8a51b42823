#include "mscreen/train.hpp"

#include <array>
#include <charconv>
#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace mscreen {

namespace {

std::string real_text(double v) {
  std::array<char, 64> buf{};
  const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), res.ptr);
}

}  // namespace

double TrainLog::final_loss(std::size_t window) const {
  if (records.empty()) return std::numeric_limits<double>::quiet_NaN();
  const std::size_t n = std::min(window == 0 ? 1 : window, records.size());
  double s = 0.0;
  for (std::size_t k = records.size() - n; k < records.size(); ++k) s += records[k].loss;
  return s / static_cast<double>(n);
}

std::string TrainLog::to_text() const {
  std::ostringstream os;
  os << "# step loss grad_norm lr\n";
  for (const TrainRecord& r : records) {
    os << r.step << ' ' << real_text(r.loss) << ' ' << real_text(r.grad_norm) << ' '
       << real_text(r.lr);
    if (r.rejected) os << " rejected";
    os << '\n';
  }
  if (status == TrainStatus::completed) {
    os << "# status completed\n";
  } else {
    os << "# status diverged at " << diverged_step << '\n';
  }
  return os.str();
}

OptimConfig default_optim(ModelKind kind) {
  OptimConfig c;
  if (kind == ModelKind::multiscreen) {
    c.lr = 0.0625;
    c.weight_decay = 0.0;
    c.clip_threshold.reset();
  } else {
    c.lr = 1e-3;
    c.weight_decay = 0.1;
    c.clip_threshold = 1.0;
  }
  return c;
}

bool is_divergent(double loss, double ceiling) { return !std::isfinite(loss) || loss > ceiling; }

TrainResult train(AnyModel model, const OptimConfig& optim, TaskParams task,
                  const TrainOptions& options, const AdamState* resume) {
  optim.validate();
  task.seq_len = static_cast<std::size_t>(optim.seq_len);
  task.batch_size = static_cast<std::size_t>(optim.batch_tokens / optim.seq_len);
  TaskStream stream(task, optim.seed);

  TrainResult result{std::move(model), {}, {}};
  auto params = param_refs(result.model);
  if (resume != nullptr) {
    result.optimizer = *resume;
    if (result.optimizer.m.size() != params.size()) {
      throw std::invalid_argument("train: resumed optimizer state does not match the model");
    }
  } else {
    result.optimizer = AdamState::zeros_for(params);
  }

  AnyModel grads = zero_grads(result.model);
  auto grad_refs = param_refs(grads);
  const std::int64_t first = result.optimizer.step + 1;
  for (std::int64_t step = first; step < first + optim.total_steps; ++step) {
    for (const ParamRef& g : grad_refs) std::fill(g.values.begin(), g.values.end(), 0.0);
    const Batch batch = stream.next_batch();
    const double weight = 1.0 / static_cast<double>(batch.sequences.size());
    double loss = 0.0;
    for (const Sequence& seq : batch.sequences) {
      loss += weight * loss_and_grad(result.model, seq.tokens, seq.targets, grads, weight);
    }

    TrainRecord rec;
    rec.step = step;
    rec.loss = loss;
    rec.grad_norm = global_grad_norm(grad_refs);
    rec.lr = lr_at(step, optim);
    if (is_divergent(loss, options.divergence_ceiling)) {
      result.log.records.push_back(rec);
      result.log.status = TrainStatus::diverged;
      result.log.diverged_step = step;
      break;
    }
    rec.rejected = adamw_step(params, grad_refs, result.optimizer, optim, step) ==
                   StepStatus::rejected_non_finite;
    result.log.records.push_back(rec);
    if (options.on_step && !options.on_step(rec)) break;
  }
  return result;
}

std::vector<SweepRow> lr_sweep(const AnyModel& initial, const OptimConfig& base,
                               const std::vector<double>& lrs, const TaskParams& task,
                               const TrainOptions& options) {
  if (lrs.empty()) throw std::invalid_argument("lr_sweep: need at least one learning rate");
  std::vector<SweepRow> rows;
  for (double lr : lrs) {
    OptimConfig c = base;
    c.lr = lr;
    const TrainResult r = train(initial, c, task, options);
    SweepRow row;
    row.lr = lr;
    row.diverged = r.log.diverged();
    row.diverged_step = r.log.diverged_step;
    row.final_loss = r.log.final_loss();
    if (!row.diverged && is_divergent(row.final_loss, options.divergence_ceiling)) {
      row.diverged = true;
    }
    rows.push_back(row);
  }
  return rows;
}

std::string sweep_table(const std::vector<SweepRow>& rows) {
  std::ostringstream os;
  os << "lr\tlog2_lr\tfinal_loss\n";
  for (const SweepRow& r : rows) {
    os << real_text(r.lr) << '\t' << real_text(std::log2(r.lr)) << '\t';
    if (r.diverged) {
      os << "DIVERGED";
    } else {
      os << real_text(r.final_loss);
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace mscreen
