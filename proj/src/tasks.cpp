#include "mscreen/tasks.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <stdexcept>

#include "mscreen/abcdigits.hpp"

namespace mscreen {

TaskKind parse_task_kind(const std::string& name) {
  if (name == "copy") return TaskKind::copy;
  if (name == "associative_recall" || name == "recall") return TaskKind::associative_recall;
  if (name == "abcdigits_lm" || name == "abcdigits") return TaskKind::abcdigits_lm;
  throw std::invalid_argument("unknown task '" + name +
                              "' (expected copy, associative_recall or abcdigits_lm)");
}

std::string task_kind_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::copy: return "copy";
    case TaskKind::associative_recall: return "associative_recall";
    case TaskKind::abcdigits_lm: return "abcdigits_lm";
  }
  return "?";
}

void TaskParams::validate() const {
  if (seq_len < 2) throw std::invalid_argument("task: seq_len must be at least 2");
  if (batch_size == 0) throw std::invalid_argument("task: batch_size must be positive");
  switch (kind) {
    case TaskKind::copy:
      if (period == 0 || alphabet == 0 || alphabet > 256) {
        throw std::invalid_argument("copy task: need period >= 1 and alphabet in [1, 256]");
      }
      break;
    case TaskKind::associative_recall:
      if (n_keys == 0 || n_keys > 26 || n_values == 0 || n_values > 26) {
        throw std::invalid_argument("recall task: n_keys and n_values must be in [1, 26]");
      }
      break;
    case TaskKind::abcdigits_lm:
      if (seq_len < abcd::min_context_tokens(n_digits) + n_digits + 1) {
        throw std::invalid_argument("abcdigits_lm task: seq_len must be at least " +
                                    std::to_string(abcd::min_context_tokens(n_digits) + n_digits + 1));
      }
      break;
  }
}

TaskStream::TaskStream(TaskParams params, std::uint64_t seed) : params_(params), rng_(seed) {
  params_.validate();
}

Sequence TaskStream::next_sequence() {
  switch (params_.kind) {
    case TaskKind::copy: return make_copy();
    case TaskKind::associative_recall: return make_recall();
    case TaskKind::abcdigits_lm: return make_abcdigits();
  }
  throw std::logic_error("unreachable task kind");
}

Batch TaskStream::next_batch() {
  Batch b;
  b.sequences.reserve(params_.batch_size);
  for (std::size_t k = 0; k < params_.batch_size; ++k) b.sequences.push_back(next_sequence());
  return b;
}

Sequence TaskStream::make_copy() {
  const std::size_t n = params_.seq_len;
  std::uniform_int_distribution<int> sym(0, static_cast<int>(params_.alphabet) - 1);
  std::vector<int> block(params_.period);
  // Letters when they suffice, printable bytes otherwise.
  for (std::size_t k = 0; k < block.size(); ++k) {
    const int s = sym(rng_);
    block[k] = params_.alphabet <= 26 ? 'a' + s : (s + 32) % 256;
  }
  Sequence seq;
  seq.tokens.resize(n);
  seq.targets.assign(n, kIgnoreTarget);
  for (std::size_t t = 0; t < n; ++t) seq.tokens[t] = block[t % params_.period];
  for (std::size_t t = params_.period - 1; t < n; ++t) seq.targets[t] = block[(t + 1) % params_.period];
  return seq;
}

Sequence TaskStream::make_recall() {
  const std::size_t n = params_.seq_len;
  std::vector<int> mapping(params_.n_keys);
  std::uniform_int_distribution<int> val(0, static_cast<int>(params_.n_values) - 1);
  for (int& m : mapping) m = val(rng_);
  std::uniform_int_distribution<int> key(0, static_cast<int>(params_.n_keys) - 1);

  std::vector<int> stream{kBosToken};
  while (stream.size() < n + 1) {
    const int k = key(rng_);
    stream.push_back('a' + k);
    stream.push_back('A' + mapping[static_cast<std::size_t>(k)]);
  }
  Sequence seq;
  seq.tokens.assign(stream.begin(), stream.begin() + static_cast<std::ptrdiff_t>(n));
  seq.targets.assign(n, kIgnoreTarget);
  std::vector<bool> seen(params_.n_keys, false);
  for (std::size_t t = 1; t < n; t += 2) {
    const auto k = static_cast<std::size_t>(stream[t] - 'a');
    if (seen[k]) seq.targets[t] = stream[t + 1];
    seen[k] = true;
  }
  return seq;
}

Sequence TaskStream::make_abcdigits() {
  const std::size_t n = params_.seq_len;
  abcd::Spec spec;
  spec.n_digits = params_.n_digits;
  spec.context_tokens = n - params_.n_digits - 1;
  spec.depth = std::uniform_real_distribution<double>(0.0, 1.0)(rng_);
  spec.seed = rng_();
  const abcd::Instance inst = abcd::generate(spec);
  std::vector<int> text = abcd::tokenize(inst.prompt + inst.answer + "\n");

  Sequence seq;
  seq.tokens.assign(n, kBosToken);
  seq.targets.assign(n, kIgnoreTarget);
  // Right-align so the answer always ends the sequence; BOS padding in front.
  const std::size_t offset = n - text.size();
  std::copy(text.begin(), text.end(), seq.tokens.begin() + static_cast<std::ptrdiff_t>(offset));
  for (std::size_t t = offset; t + 1 < n; ++t) seq.targets[t] = seq.tokens[t + 1];
  if (offset > 0) seq.targets[offset - 1] = seq.tokens[offset];
  return seq;
}

TaskStream make_task(const TaskParams& params, std::uint64_t seed) { return TaskStream(params, seed); }

bool recall_targets_consistent(const Sequence& seq, const TaskParams& params) {
  if (seq.tokens.size() != seq.targets.size() || seq.tokens.empty()) return false;
  if (seq.tokens[0] != kBosToken) return false;
  std::map<int, int> derived;
  for (std::size_t t = 1; t + 1 < seq.tokens.size(); t += 2) {
    const int k = seq.tokens[t];
    const int v = seq.tokens[t + 1];
    if (k < 'a' || k >= 'a' + static_cast<int>(params.n_keys)) return false;
    if (v < 'A' || v >= 'A' + static_cast<int>(params.n_values)) return false;
    const auto [it, fresh] = derived.emplace(k, v);
    if (!fresh && it->second != v) return false;
  }
  std::map<int, bool> seen;
  for (std::size_t t = 0; t < seq.tokens.size(); ++t) {
    const int target = seq.targets[t];
    const bool is_key = t % 2 == 1;
    if (!is_key) {
      if (target != kIgnoreTarget) return false;
      continue;
    }
    const int k = seq.tokens[t];
    if (seen[k]) {
      if (target != derived.at(k)) return false;
    } else if (target != kIgnoreTarget) {
      return false;
    }
    seen[k] = true;
  }
  return true;
}

RecallAccuracy evaluate_recall(const LanguageModel& model, TaskParams params,
                               std::size_t n_sequences, std::uint64_t seed) {
  params.kind = TaskKind::associative_recall;
  TaskStream stream(params, seed);
  RecallAccuracy acc;
  for (std::size_t s = 0; s < n_sequences; ++s) {
    const Sequence seq = stream.next_sequence();
    const Tensor logits = model.all_logits(seq.tokens);
    for (std::size_t t = 0; t < seq.tokens.size(); ++t) {
      if (seq.targets[t] == kIgnoreTarget) continue;
      const auto row = logits.row(t);
      const auto best = std::max_element(row.begin(), row.end()) - row.begin();
      ++acc.total;
      if (best == seq.targets[t]) ++acc.correct;
    }
  }
  return acc;
}

}  // namespace mscreen
