#pragma once

// ABCDigits: semantics-free key/value retrieval. A prompt lists equations
// "X=dddddd" mapping the 26 uppercase letters to distinct n-digit values; the
// target letter's equation occurs exactly once at a controlled depth and the
// prompt ends with the query "T=".
//
// Tokenization is byte-level: one character is one token, so an equation
// line costs n_digits + 3 tokens and the query costs 2.

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mscreen/lm.hpp"

namespace mscreen::abcd {

inline constexpr std::size_t kLetters = 26;

struct Spec {
  std::size_t n_digits = 6;
  std::size_t context_tokens = 4096;
  double depth = 0.5;  // 0 = first equation, 1 = last
  std::uint64_t seed = 0;
};

struct Instance {
  std::string prompt;  // ends with "<target>=", no trailing newline
  std::string answer;
  std::array<std::string, kLetters> mapping;
  char target_letter = 'A';
  std::size_t insertion_index = 0;  // position of the target among all equations
  std::size_t equation_count = 0;   // non-target equations the target is inserted into
  /// Fill-weight exponent of each letter (weight 2^e); -1 for the target.
  std::array<int, kLetters> weight_exponent{};
  double depth = 0.0;
  std::size_t context_tokens = 0;
  std::uint64_t seed = 0;
};

std::size_t equation_tokens(std::size_t n_digits);
/// Smallest budget that fits 26 equations and the query.
std::size_t min_context_tokens(std::size_t n_digits);
std::size_t count_tokens(const std::string& text);

/// Throws std::invalid_argument if the budget cannot hold 26 equations plus
/// the query (the message names the minimum).
Instance generate(const Spec& spec);

/// Draws letters (indices into `letters`) with probability proportional to
/// 2^exponents[k].
std::vector<std::size_t> sample_weighted(std::span<const int> exponents, std::size_t count,
                                         std::mt19937_64& rng);

struct ParsedPrompt {
  std::map<char, std::vector<std::string>> values;  // every value seen per letter, in order
  std::map<char, std::size_t> counts;
  char query = 0;
  bool well_formed = true;
};

/// Independent line-by-line parser used to audit generated prompts.
ParsedPrompt parse_prompt(const std::string& prompt);

/// True if the prompt determines exactly one answer: every letter maps to one
/// value, the 26 values are distinct, the query letter occurs exactly once and
/// its value equals `answer`.
bool answer_uniquely_determined(const std::string& prompt, const std::string& answer);

struct EvalResult {
  bool correct = false;
  std::string produced;
};

/// Greedy decoding of n_digits tokens after the prompt; exact match.
EvalResult evaluate(const LanguageModel& model, const Instance& instance);

struct GridResult {
  std::vector<std::size_t> lengths;
  std::vector<double> depths;
  std::vector<std::vector<double>> accuracy;  // [depth][length]
};

/// Per-cell seeds derive from master_seed and the cell coordinates.
std::uint64_t cell_seed(std::uint64_t master_seed, std::size_t length_index,
                        std::size_t depth_index);

GridResult grid_run(const LanguageModel& model, const std::vector<std::size_t>& lengths,
                    const std::vector<double>& depths, std::size_t instances_per_cell,
                    std::uint64_t master_seed, std::size_t n_digits = 6);

/// One JSON object per line: prompt, answer, target_letter, depth,
/// context_tokens, insertion_index, seed.
std::string to_jsonl(const Instance& instance);
/// Rows are depths, columns are lengths.
std::string to_csv(const GridResult& grid);

/// Byte tokenization of a prompt.
std::vector<int> tokenize(const std::string& text);

// Sanity-check "models" that read the prompt text directly.

/// Answers every query correctly from the prompt's own equations.
class LookupOracle final : public LanguageModel {
 public:
  std::size_t vocab_size() const override { return kByteVocab; }
  std::vector<double> next_token_logits(std::span<const int> tokens) const override;
  Tensor all_logits(std::span<const int> tokens) const override;
};

/// Always emits the same digit string.
class ConstantOracle final : public LanguageModel {
 public:
  explicit ConstantOracle(std::string digits) : digits_(std::move(digits)) {}
  std::size_t vocab_size() const override { return kByteVocab; }
  std::vector<double> next_token_logits(std::span<const int> tokens) const override;
  Tensor all_logits(std::span<const int> tokens) const override;

 private:
  std::string digits_;
};

/// Answers with the value of the most frequent letter in the context.
class UnigramOracle final : public LanguageModel {
 public:
  std::size_t vocab_size() const override { return kByteVocab; }
  std::vector<double> next_token_logits(std::span<const int> tokens) const override;
  Tensor all_logits(std::span<const int> tokens) const override;
};

}  // namespace mscreen::abcd
