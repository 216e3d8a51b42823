#include "mscreen/bench.hpp"

#include <bit>
#include <chrono>
#include <cmath>
#include <fstream>
#include <new>
#include <random>
#include <sstream>
#include <stdexcept>

#ifdef MSCREEN_HAVE_OPENMP
#include <omp.h>
#endif

namespace mscreen {

int math_threads() {
#ifdef MSCREEN_HAVE_OPENMP
  return omp_get_max_threads();
#else
  return 1;
#endif
}

void set_math_threads(int n) {
  if (n < 1) throw std::invalid_argument("thread count must be positive");
#ifdef MSCREEN_HAVE_OPENMP
  omp_set_num_threads(n);
#endif
}

LatencyReport bench_latency(const AnyModel& model, std::size_t context, std::size_t reps,
                            std::size_t warmup, std::uint64_t seed) {
  if (reps < 2) throw std::invalid_argument("bench_latency: reps must be at least 2");
  if (warmup < 1) throw std::invalid_argument("bench_latency: warmup must be at least 1");
  if (context == 0) throw std::invalid_argument("bench_latency: context must be positive");

  LatencyReport rep;
  rep.context = context;
  rep.reps = reps;
  rep.threads = math_threads();
  rep.model_tag = kind_name(kind_of(model));
  if (const auto* ms = std::get_if<MultiscreenModel>(&model)) {
    std::size_t inf = 0, total = 0;
    for (const auto& layer : ms->params.tiles)
      for (const auto& tile : layer) {
        ++total;
        if (tile.scalars.inference_infinite) ++inf;
      }
    rep.infinite_fraction = total == 0 ? 0.0 : static_cast<double>(inf) / static_cast<double>(total);
    rep.model_tag += "-psi" + std::to_string(ms->config.psi);
  }

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> byte(0, static_cast<int>(vocab_size(model)) - 1);
  std::vector<int> tokens(context);
  for (int& t : tokens) t = byte(rng);

  try {
    Tensor reference;
    for (std::size_t k = 0; k < warmup; ++k) reference = forward_logits(model, tokens, true);
    for (std::size_t k = 0; k < reps; ++k) {
      const auto t0 = std::chrono::steady_clock::now();
      const Tensor out = forward_logits(model, tokens, true);
      const auto t1 = std::chrono::steady_clock::now();
      rep.samples.push_back(std::chrono::duration<double>(t1 - t0).count());
      if (out.storage() != reference.storage()) rep.outputs_identical = false;
    }
  } catch (const std::bad_alloc&) {
    rep.failure = "out of memory at context " + std::to_string(context);
    return rep;
  }

  double sum = 0.0;
  for (double s : rep.samples) sum += s;
  rep.mean_seconds = sum / static_cast<double>(rep.samples.size());
  double ss = 0.0;
  for (double s : rep.samples) ss += (s - rep.mean_seconds) * (s - rep.mean_seconds);
  rep.std_seconds = std::sqrt(ss / static_cast<double>(rep.samples.size() - 1));
  return rep;
}

std::pair<std::size_t, std::size_t> smoothing_window(std::size_t p, std::size_t max_pos,
                                                     double frac) {
  const double pd = static_cast<double>(p);
  // Small slack so that e.g. 0.9 * 10 counts as exactly 9.
  auto lo = static_cast<std::size_t>(std::ceil((1.0 - frac) * pd - 1e-9));
  auto hi = static_cast<std::size_t>(std::floor((1.0 + frac) * pd + 1e-9));
  lo = std::max<std::size_t>(lo, 1);
  hi = std::min(hi, max_pos);
  return {lo, hi};
}

PerplexityCurve eval_ppl(const LanguageModel& model, const std::vector<int>& stream,
                         std::size_t max_T, double window_frac) {
  if (max_T == 0) throw std::invalid_argument("eval_ppl: max_T must be positive");
  if (stream.size() < max_T + 1) {
    throw std::invalid_argument("eval_ppl: stream has " + std::to_string(stream.size()) +
                                " tokens, need at least " + std::to_string(max_T + 1));
  }
  if (window_frac < 0.0) throw std::invalid_argument("eval_ppl: window fraction must be >= 0");

  const std::span<const int> input(stream.data(), max_T);
  const Tensor logits = model.all_logits(input);
  PerplexityCurve curve;
  curve.cross_entropy.resize(max_T);
  for (std::size_t t = 0; t < max_T; ++t) {
    const auto row = logits.row(t);
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    curve.cross_entropy[t] = mx + std::log(z) - row[static_cast<std::size_t>(stream[t + 1])];
  }

  // Prefix sums give each window mean in O(1).
  std::vector<double> prefix(max_T + 1, 0.0);
  for (std::size_t t = 0; t < max_T; ++t) prefix[t + 1] = prefix[t] + curve.cross_entropy[t];
  for (std::size_t p = 1; p <= max_T; ++p) {
    const auto [lo, hi] = smoothing_window(p, max_T, window_frac);
    const double mean = (prefix[hi] - prefix[lo - 1]) / static_cast<double>(hi - lo + 1);
    curve.positions.push_back(p);
    curve.perplexity.push_back(std::exp(mean));
  }
  return curve;
}

std::vector<RelevanceMap> dump_relevance(const MultiscreenModel& model,
                                         const std::vector<int>& tokens) {
  if (tokens.size() < 2) throw std::invalid_argument("dump_relevance: need at least 2 tokens");
  std::vector<RelevanceMap> maps;
  ForwardOptions opts;
  opts.kernel = ScreeningKernel::dense_reference;
  opts.relevance = &maps;
  model_forward(tokens, model.params, model.config, opts);
  return maps;
}

void write_relevance(const std::filesystem::path& dir, const std::vector<RelevanceMap>& maps) {
  std::filesystem::create_directories(dir);
  std::ostringstream index;
  index << "layer\thead\tT\twindow\tacceptance_width\tnonzero_fraction\tfile\n";
  for (const RelevanceMap& m : maps) {
    const std::string name =
        "tile_" + std::to_string(m.layer) + "_" + std::to_string(m.head) + ".f32";
    const std::size_t T = m.alpha.rows();
    std::string blob;
    blob.reserve(T * T * 4);
    for (std::size_t i = 0; i < T; ++i) {
      for (std::size_t j = 0; j < T; ++j) {
        const float v = m.in_window(i, j) ? static_cast<float>(m.alpha(i, j)) : -1.0f;
        const auto bits = std::bit_cast<std::uint32_t>(v);
        for (int b = 0; b < 4; ++b) blob.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
      }
    }
    const auto path = dir / name;
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw std::runtime_error("write failed: " + path.string());
    index << m.layer << '\t' << m.head << '\t' << T << '\t'
          << (std::isinf(m.window) ? std::string("inf") : std::to_string(m.window)) << '\t'
          << m.acceptance_width << '\t' << m.nonzero_fraction << '\t' << name << '\n';
  }
  const auto index_path = dir / "index.tsv";
  std::ofstream out(index_path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + index_path.string());
  out << index.str();
  if (!out) throw std::runtime_error("write failed: " + index_path.string());
}

std::string latency_csv(const std::vector<LatencyReport>& reports) {
  std::ostringstream os;
  os.precision(9);
  os << "model,context,reps,mean_s,std_s,infinite_fraction,threads,status\n";
  for (const LatencyReport& r : reports) {
    os << r.model_tag << ',' << r.context << ',' << r.reps << ',' << r.mean_seconds << ','
       << r.std_seconds << ',' << r.infinite_fraction << ',' << r.threads << ','
       << (r.failure ? "failed: " + *r.failure : std::string("ok")) << '\n';
  }
  return os.str();
}

std::string perplexity_csv(const PerplexityCurve& curve) {
  std::ostringstream os;
  os.precision(10);
  os << "position,cross_entropy,perplexity\n";
  for (std::size_t k = 0; k < curve.positions.size(); ++k) {
    os << curve.positions[k] << ',' << curve.cross_entropy[k] << ',' << curve.perplexity[k] << '\n';
  }
  return os.str();
}

}  // namespace mscreen
