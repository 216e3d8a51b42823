#pragma once

// Latency, position-dependent perplexity and relevance-map export.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mscreen/lm.hpp"

namespace mscreen {

/// Threads available to the OpenMP kernels (1 without OpenMP).
int math_threads();
void set_math_threads(int n);

struct LatencyReport {
  std::string model_tag;
  std::size_t context = 0;
  std::size_t reps = 0;
  double mean_seconds = 0.0;
  double std_seconds = 0.0;  // sample standard deviation over the recorded runs
  std::vector<double> samples;
  double infinite_fraction = 0.0;
  int threads = 1;
  /// Every timed forward produced bit-identical logits.
  bool outputs_identical = true;
  /// Set instead of throwing when the forward cannot run (e.g. out of memory).
  std::optional<std::string> failure;
};

/// Times `reps` single next-token forwards (last position only, batch 1, no
/// cache) over a fixed random context of length T after `warmup` untimed runs.
/// Needs reps >= 2 and warmup >= 1.
LatencyReport bench_latency(const AnyModel& model, std::size_t context, std::size_t reps,
                            std::size_t warmup = 1, std::uint64_t seed = 0);

struct PerplexityCurve {
  std::vector<std::size_t> positions;  // 1-based
  std::vector<double> cross_entropy;   // unsmoothed, nats
  std::vector<double> perplexity;      // exp of the window-mean cross-entropy
};

/// Integer positions q with (1 - frac) p <= q <= (1 + frac) p, clipped to [1, max_pos].
std::pair<std::size_t, std::size_t> smoothing_window(std::size_t p, std::size_t max_pos,
                                                     double frac);

/// Scores tokens[0..max_T) against the next tokens; the stream needs at least
/// max_T + 1 tokens. window_frac = 0.1 gives the centered +-10% window.
PerplexityCurve eval_ppl(const LanguageModel& model, const std::vector<int>& stream,
                         std::size_t max_T, double window_frac = 0.1);

/// One map per tile, layer-major, from the dense reference path.
std::vector<RelevanceMap> dump_relevance(const MultiscreenModel& model,
                                         const std::vector<int>& tokens);

/// Writes tile_<l>_<h>.f32 (T x T little-endian float32, row-major, -1 outside
/// the window) and index.tsv into dir.
void write_relevance(const std::filesystem::path& dir, const std::vector<RelevanceMap>& maps);

std::string latency_csv(const std::vector<LatencyReport>& reports);
std::string perplexity_csv(const PerplexityCurve& curve);

}  // namespace mscreen
