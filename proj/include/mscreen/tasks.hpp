#pragma once

// Deterministic toy token streams over the byte vocabulary.
//
//   copy                a random block of `period` symbols repeated to fill the
//                       sequence; every token after the first block is determined
//   associative_recall  a stream of key/value byte pairs under a per-sequence
//                       key -> value mapping; every repeated key is a query whose
//                       answer is the value seen with it earlier
//   abcdigits_lm        ABCDigits prompts followed by their answers, as plain
//                       next-token sequences

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mscreen/lm.hpp"

namespace mscreen {

enum class TaskKind { copy, associative_recall, abcdigits_lm };

TaskKind parse_task_kind(const std::string& name);
std::string task_kind_name(TaskKind kind);

struct TaskParams {
  TaskKind kind = TaskKind::associative_recall;
  std::size_t seq_len = 256;
  std::size_t batch_size = 16;  // sequences per batch
  std::size_t period = 16;      // copy
  std::size_t alphabet = 16;    // copy symbols
  std::size_t n_keys = 16;      // associative_recall
  std::size_t n_values = 16;    // associative_recall
  std::size_t n_digits = 6;     // abcdigits_lm

  void validate() const;
};

struct Sequence {
  std::vector<int> tokens;
  std::vector<int> targets;  // next-token targets, kIgnoreTarget where undetermined
};

struct Batch {
  std::vector<Sequence> sequences;
};

class TaskStream {
 public:
  TaskStream(TaskParams params, std::uint64_t seed);

  Sequence next_sequence();
  Batch next_batch();
  const TaskParams& params() const { return params_; }

 private:
  Sequence make_copy();
  Sequence make_recall();
  Sequence make_abcdigits();

  TaskParams params_;
  std::mt19937_64 rng_;
};

TaskStream make_task(const TaskParams& params, std::uint64_t seed);

/// Re-derives the key -> value mapping of a recall sequence from its tokens and
/// checks every query target against it. False if any key maps to two values
/// or a target disagrees with the derived mapping.
bool recall_targets_consistent(const Sequence& seq, const TaskParams& params);

struct RecallAccuracy {
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const {
    return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total);
  }
};

/// Greedy exact match on every query of n_sequences fresh recall sequences.
RecallAccuracy evaluate_recall(const LanguageModel& model, TaskParams params,
                               std::size_t n_sequences, std::uint64_t seed);

}  // namespace mscreen
