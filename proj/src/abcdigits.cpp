#include "mscreen/abcdigits.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace mscreen::abcd {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::string detokenize(std::span<const int> tokens) {
  std::string s;
  s.reserve(tokens.size());
  for (int t : tokens) {
    if (t >= 0 && t < 256) s.push_back(static_cast<char>(t));
  }
  return s;
}

std::vector<double> one_hot(char c) {
  std::vector<double> logits(kByteVocab, 0.0);
  logits[static_cast<unsigned char>(c)] = 1.0;
  return logits;
}

// Splits decoder input into (prompt, digits produced after the final "X=").
struct DecodeState {
  std::string context;   // everything before the query line
  char query = 0;
  std::string produced;
};

DecodeState split_decode_state(std::span<const int> tokens) {
  const std::string text = detokenize(tokens);
  DecodeState st;
  const auto nl = text.rfind('\n');
  const std::string last = nl == std::string::npos ? text : text.substr(nl + 1);
  st.context = nl == std::string::npos ? std::string() : text.substr(0, nl + 1);
  if (last.size() >= 2 && last[1] == '=') {
    st.query = last[0];
    st.produced = last.substr(2);
  }
  return st;
}

std::vector<double> emit_next(const std::string& answer, const DecodeState& st) {
  if (st.produced.size() < answer.size()) return one_hot(answer[st.produced.size()]);
  return one_hot('\n');
}

}  // namespace

std::size_t equation_tokens(std::size_t n_digits) { return n_digits + 3; }

std::size_t min_context_tokens(std::size_t n_digits) {
  return kLetters * equation_tokens(n_digits) + 2;
}

std::size_t count_tokens(const std::string& text) { return text.size(); }

std::vector<int> tokenize(const std::string& text) {
  std::vector<int> t;
  t.reserve(text.size());
  for (char c : text) t.push_back(static_cast<unsigned char>(c));
  return t;
}

std::vector<std::size_t> sample_weighted(std::span<const int> exponents, std::size_t count,
                                         std::mt19937_64& rng) {
  std::vector<double> weights;
  weights.reserve(exponents.size());
  for (int e : exponents) weights.push_back(std::ldexp(1.0, e));
  std::discrete_distribution<std::size_t> dist(weights.begin(), weights.end());
  std::vector<std::size_t> out(count);
  for (auto& o : out) o = dist(rng);
  return out;
}

Instance generate(const Spec& spec) {
  if (spec.n_digits == 0 || spec.n_digits > 18) {
    throw std::invalid_argument("abcdigits: n_digits must be in [1, 18]");
  }
  const std::size_t min_budget = min_context_tokens(spec.n_digits);
  if (spec.context_tokens < min_budget) {
    throw std::invalid_argument("abcdigits: context budget " + std::to_string(spec.context_tokens) +
                                " is below the minimum " + std::to_string(min_budget));
  }
  if (!(spec.depth >= 0.0 && spec.depth <= 1.0)) {
    throw std::invalid_argument("abcdigits: depth must lie in [0, 1]");
  }

  std::mt19937_64 rng(spec.seed);
  Instance inst;
  inst.depth = spec.depth;
  inst.context_tokens = spec.context_tokens;
  inst.seed = spec.seed;

  // (1) 26 distinct values without leading zeros.
  std::uint64_t lo = 1;
  for (std::size_t k = 1; k < spec.n_digits; ++k) lo *= 10;
  const std::uint64_t hi = lo * 10 - 1;
  std::uniform_int_distribution<std::uint64_t> value_dist(spec.n_digits == 1 ? 0 : lo, hi);
  if (spec.n_digits == 1) {
    throw std::invalid_argument("abcdigits: one-digit values cannot give 26 distinct values");
  }
  std::set<std::uint64_t> used;
  for (std::size_t l = 0; l < kLetters; ++l) {
    std::uint64_t v;
    do {
      v = value_dist(rng);
    } while (!used.insert(v).second);
    inst.mapping[l] = std::to_string(v);
  }

  // (2) target letter.
  const std::size_t target = std::uniform_int_distribution<std::size_t>(0, kLetters - 1)(rng);
  inst.target_letter = static_cast<char>('A' + target);
  inst.answer = inst.mapping[target];

  // (3) one equation per non-target letter.
  std::vector<std::size_t> others;
  for (std::size_t l = 0; l < kLetters; ++l)
    if (l != target) others.push_back(l);
  std::vector<std::size_t> equations = others;

  // (4) skewed fill with a per-instance letter -> weight assignment.
  const std::size_t eq_tok = equation_tokens(spec.n_digits);
  const std::size_t total_equations = (spec.context_tokens - 2) / eq_tok;
  const std::size_t fill = total_equations - kLetters;
  std::vector<int> exponents(others.size());
  for (std::size_t k = 0; k < exponents.size(); ++k) exponents[k] = static_cast<int>(k);
  std::shuffle(exponents.begin(), exponents.end(), rng);
  inst.weight_exponent.fill(-1);
  for (std::size_t k = 0; k < others.size(); ++k) inst.weight_exponent[others[k]] = exponents[k];
  for (std::size_t pick : sample_weighted(exponents, fill, rng)) equations.push_back(others[pick]);

  // (5) shuffle, (6) insert the target at the requested depth.
  std::shuffle(equations.begin(), equations.end(), rng);
  inst.equation_count = equations.size();
  const double pos = std::round(spec.depth * static_cast<double>(inst.equation_count));
  inst.insertion_index =
      std::min(inst.equation_count, static_cast<std::size_t>(std::max(0.0, pos)));
  equations.insert(equations.begin() + static_cast<std::ptrdiff_t>(inst.insertion_index), target);

  // (7) render with the query line last.
  std::string prompt;
  prompt.reserve(total_equations * eq_tok + 2);
  for (std::size_t l : equations) {
    prompt.push_back(static_cast<char>('A' + l));
    prompt.push_back('=');
    prompt += inst.mapping[l];
    prompt.push_back('\n');
  }
  prompt.push_back(inst.target_letter);
  prompt.push_back('=');
  inst.prompt = std::move(prompt);
  return inst;
}

ParsedPrompt parse_prompt(const std::string& prompt) {
  ParsedPrompt parsed;
  std::istringstream in(prompt);
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  if (lines.empty()) {
    parsed.well_formed = false;
    return parsed;
  }
  const std::string query = lines.back();
  lines.pop_back();
  if (query.size() != 2 || query[1] != '=' || query[0] < 'A' || query[0] > 'Z') {
    parsed.well_formed = false;
  } else {
    parsed.query = query[0];
  }
  for (const std::string& l : lines) {
    if (l.size() < 3 || l[1] != '=' || l[0] < 'A' || l[0] > 'Z' ||
        !std::all_of(l.begin() + 2, l.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      parsed.well_formed = false;
      continue;
    }
    parsed.values[l[0]].push_back(l.substr(2));
    ++parsed.counts[l[0]];
  }
  return parsed;
}

bool answer_uniquely_determined(const std::string& prompt, const std::string& answer) {
  const ParsedPrompt p = parse_prompt(prompt);
  if (!p.well_formed || p.query == 0) return false;
  std::set<std::string> distinct;
  for (const auto& [letter, vals] : p.values) {
    for (const auto& v : vals)
      if (v != vals.front()) return false;
    if (vals.front().size() > 1 && vals.front()[0] == '0') return false;
    distinct.insert(vals.front());
  }
  if (p.values.size() != kLetters || distinct.size() != kLetters) return false;
  const auto it = p.counts.find(p.query);
  if (it == p.counts.end() || it->second != 1) return false;
  return p.values.at(p.query).front() == answer;
}

EvalResult evaluate(const LanguageModel& model, const Instance& instance) {
  std::vector<int> tokens = tokenize(instance.prompt);
  EvalResult result;
  for (std::size_t k = 0; k < instance.answer.size(); ++k) {
    const std::vector<double> logits = model.next_token_logits(tokens);
    const auto best = static_cast<int>(std::max_element(logits.begin(), logits.end()) -
                                       logits.begin());
    if (best < 256) result.produced.push_back(static_cast<char>(best));
    if (best < '0' || best > '9') {
      result.correct = false;
      return result;
    }
    tokens.push_back(best);
  }
  result.correct = result.produced == instance.answer;
  return result;
}

std::uint64_t cell_seed(std::uint64_t master_seed, std::size_t length_index,
                        std::size_t depth_index) {
  return splitmix64(splitmix64(master_seed ^ (0x1000003ULL * (length_index + 1))) ^
                    (0x9e3779b1ULL * (depth_index + 1)));
}

GridResult grid_run(const LanguageModel& model, const std::vector<std::size_t>& lengths,
                    const std::vector<double>& depths, std::size_t instances_per_cell,
                    std::uint64_t master_seed, std::size_t n_digits) {
  if (instances_per_cell == 0) throw std::invalid_argument("grid_run: need at least one instance per cell");
  GridResult grid;
  grid.lengths = lengths;
  grid.depths = depths;
  grid.accuracy.assign(depths.size(), std::vector<double>(lengths.size(), 0.0));
  const std::size_t cells = lengths.size() * depths.size();
#pragma omp parallel for schedule(dynamic, 1)
  for (std::ptrdiff_t c = 0; c < static_cast<std::ptrdiff_t>(cells); ++c) {
    const std::size_t di = static_cast<std::size_t>(c) / lengths.size();
    const std::size_t li = static_cast<std::size_t>(c) % lengths.size();
    const std::uint64_t base = cell_seed(master_seed, li, di);
    std::size_t correct = 0;
    for (std::size_t n = 0; n < instances_per_cell; ++n) {
      Spec spec;
      spec.n_digits = n_digits;
      spec.context_tokens = lengths[li];
      spec.depth = depths[di];
      spec.seed = splitmix64(base + n);
      if (evaluate(model, generate(spec)).correct) ++correct;
    }
    grid.accuracy[di][li] = static_cast<double>(correct) / static_cast<double>(instances_per_cell);
  }
  return grid;
}

std::string to_jsonl(const Instance& instance) {
  nlohmann::ordered_json j;
  j["prompt"] = instance.prompt;
  j["answer"] = instance.answer;
  j["target_letter"] = std::string(1, instance.target_letter);
  j["depth"] = instance.depth;
  j["context_tokens"] = instance.context_tokens;
  j["insertion_index"] = instance.insertion_index;
  j["seed"] = instance.seed;
  return j.dump() + "\n";
}

std::string to_csv(const GridResult& grid) {
  std::ostringstream os;
  os << "depth";
  for (std::size_t len : grid.lengths) os << ',' << len;
  os << '\n';
  for (std::size_t d = 0; d < grid.depths.size(); ++d) {
    os << grid.depths[d];
    for (double a : grid.accuracy[d]) os << ',' << a;
    os << '\n';
  }
  return os.str();
}

std::vector<double> LookupOracle::next_token_logits(std::span<const int> tokens) const {
  const DecodeState st = split_decode_state(tokens);
  const ParsedPrompt p = parse_prompt(st.context + st.query + "=");
  const auto it = p.values.find(st.query);
  if (it == p.values.end()) return one_hot('?');
  return emit_next(it->second.front(), st);
}

Tensor LookupOracle::all_logits(std::span<const int>) const {
  throw std::logic_error("LookupOracle only supports next-token queries");
}

std::vector<double> ConstantOracle::next_token_logits(std::span<const int> tokens) const {
  return emit_next(digits_, split_decode_state(tokens));
}

Tensor ConstantOracle::all_logits(std::span<const int>) const {
  throw std::logic_error("ConstantOracle only supports next-token queries");
}

std::vector<double> UnigramOracle::next_token_logits(std::span<const int> tokens) const {
  const DecodeState st = split_decode_state(tokens);
  // Most frequent letter; ties go to the letter whose first equation comes first.
  std::map<char, std::size_t> counts;
  std::vector<char> order;
  std::map<char, std::string> value;
  std::istringstream in(st.context);
  std::string line;
  while (std::getline(in, line)) {
    if (line.size() < 3 || line[1] != '=') continue;
    if (counts[line[0]]++ == 0) {
      order.push_back(line[0]);
      value[line[0]] = line.substr(2);
    }
  }
  if (order.empty()) return one_hot('?');
  char best = order.front();
  for (char c : order)
    if (counts[c] > counts[best]) best = c;
  return emit_next(value[best], st);
}

Tensor UnigramOracle::all_logits(std::span<const int>) const {
  throw std::logic_error("UnigramOracle only supports next-token queries");
}

}  // namespace mscreen::abcd
