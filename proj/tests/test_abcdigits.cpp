#include <array>
#include <map>
#include <regex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "doctest.h"
#include "helpers.hpp"
#include "json.hpp"
#include "mscreen/abcdigits.hpp"

using namespace mscreen;
using namespace mscreen::abcd;

namespace {

Instance make(std::size_t context, double depth, std::uint64_t seed) {
  Spec s;
  s.context_tokens = context;
  s.depth = depth;
  s.seed = seed;
  return generate(s);
}

// Letter chosen by the unigram rule, recomputed from the raw prompt lines:
// highest count, earliest first appearance on ties.
char modal_letter(const std::string& prompt) {
  std::map<char, int> count;
  std::map<char, std::size_t> first;
  std::istringstream in(prompt);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    if (line.size() < 3 || line[1] != '=') continue;
    ++count[line[0]];
    first.emplace(line[0], n++);
  }
  char best = 0;
  for (const auto& [c, k] : count) {
    if (best == 0 || k > count[best] || (k == count[best] && first[c] < first[best])) best = c;
  }
  return best;
}

}  // namespace

TEST_SUITE("abcdigits") {

TEST_CASE("token budget helpers") {
  CHECK(equation_tokens(6) == 9);
  CHECK(min_context_tokens(6) == 26 * 9 + 2);
  CHECK(count_tokens("A=123456\n") == 9);
  CHECK(tokenize("A=")[0] == 'A');
}

TEST_CASE("generated instances satisfy the construction invariants") {
  const std::regex line_re("^[A-Z]=[1-9][0-9]{5}$");
  for (std::size_t context : {236ul, 300ul, 1000ul, 4096ul}) {
    for (double depth : {0.0, 0.1, 0.5, 0.9, 1.0}) {
      for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const Instance x = make(context, depth, seed);
        CHECK(answer_uniquely_determined(x.prompt, x.answer));
        CHECK(count_tokens(x.prompt) <= context);
        CHECK(count_tokens(x.prompt) + equation_tokens(6) >= context);
        CHECK(x.prompt.substr(x.prompt.size() - 2) == std::string(1, x.target_letter) + "=");
        CHECK(x.mapping[static_cast<std::size_t>(x.target_letter - 'A')] == x.answer);

        const std::set<std::string> distinct(x.mapping.begin(), x.mapping.end());
        CHECK(distinct.size() == 26);

        std::istringstream in(x.prompt);
        std::string line;
        std::vector<std::string> lines;
        while (std::getline(in, line)) lines.push_back(line);
        const std::string query = lines.back();
        lines.pop_back();
        std::size_t target_lines = 0, target_at = 0;
        std::set<char> seen;
        for (std::size_t n = 0; n < lines.size(); ++n) {
          CHECK(std::regex_match(lines[n], line_re));
          seen.insert(lines[n][0]);
          if (lines[n][0] == x.target_letter) {
            ++target_lines;
            target_at = n;
          }
        }
        CHECK(query == std::string(1, x.target_letter) + "=");
        CHECK(target_lines == 1);
        CHECK(seen.size() == 26);
        CHECK(x.equation_count == lines.size() - 1);
        const auto expect = static_cast<std::size_t>(
            std::llround(depth * static_cast<double>(x.equation_count)));
        CHECK(target_at == expect);
        CHECK(x.insertion_index == expect);
      }
    }
  }
}

TEST_CASE("generation rejects infeasible specs") {
  try {
    (void)make(200, 0.5, 1);
    FAIL("expected an exception");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("236") != std::string::npos);
  }
  CHECK_THROWS_AS((void)make(4096, 1.5, 1), std::invalid_argument);
  CHECK_THROWS_AS((void)make(4096, -0.1, 1), std::invalid_argument);
  Spec s;
  s.n_digits = 1;
  CHECK_THROWS_AS((void)generate(s), std::invalid_argument);
}

TEST_CASE("generation is deterministic under the seed") {
  const Instance a = make(2048, 0.3, 17), b = make(2048, 0.3, 17), c = make(2048, 0.3, 18);
  CHECK(a.prompt == b.prompt);
  CHECK(a.answer == b.answer);
  CHECK(a.prompt != c.prompt);
}

TEST_CASE("uniqueness parser flags broken prompts") {
  const Instance x = make(600, 0.5, 3);
  CHECK_FALSE(answer_uniquely_determined(x.prompt, "000000"));
  // Duplicate the target line.
  const std::string line = std::string(1, x.target_letter) + "=" + x.answer + "\n";
  CHECK_FALSE(answer_uniquely_determined(line + x.prompt, x.answer));
}

TEST_CASE("fill frequencies follow the exponential weights") {
  std::vector<double> by_exponent(25, 0.0);
  for (std::uint64_t seed = 0; seed < 2000; ++seed) {
    const Instance x = make(4096, 0.5, seed);
    const ParsedPrompt p = parse_prompt(x.prompt);
    for (std::size_t k = 0; k < 26; ++k) {
      const int e = x.weight_exponent[k];
      if (e < 0) continue;
      const auto it = p.counts.find(static_cast<char>('A' + k));
      REQUIRE(it != p.counts.end());
      by_exponent[static_cast<std::size_t>(e)] += static_cast<double>(it->second - 1);
    }
  }
  std::vector<double> exponents(25);
  for (std::size_t e = 0; e < 25; ++e) exponents[e] = static_cast<double>(e);
  CHECK(testutil::spearman(exponents, by_exponent) > 0.99);

  std::mt19937_64 rng(4);
  std::vector<int> ex(25);
  for (int e = 0; e < 25; ++e) ex[static_cast<std::size_t>(e)] = e;
  const auto draws = sample_weighted(ex, 10000, rng);
  std::vector<double> counts(25, 0.0);
  for (std::size_t d : draws) counts[d] += 1;
  // The top weight carries half the mass.
  CHECK(counts[24] / 10000.0 == doctest::Approx(0.5).epsilon(0.05));
}

TEST_CASE("oracle evaluations") {
  const LookupOracle lookup;
  const ConstantOracle zeros("000000");
  const UnigramOracle unigram;
  std::size_t unigram_hits = 0, modal_hits = 0, n = 0;
  for (std::size_t context : {236ul, 245ul, 300ul, 512ul}) {
    for (std::uint64_t seed = 0; seed < 40; ++seed) {
      const Instance x = make(context, seed % 2 == 0 ? 0.0 : 0.5, 100 + seed);
      const EvalResult l = evaluate(lookup, x);
      CHECK(l.correct);
      CHECK(l.produced == x.answer);
      const EvalResult z = evaluate(zeros, x);
      CHECK_FALSE(z.correct);
      CHECK(z.produced == "000000");
      const bool u = evaluate(unigram, x).correct;
      const bool modal = modal_letter(x.prompt.substr(0, x.prompt.size() - 2)) == x.target_letter;
      CHECK(u == modal);
      unigram_hits += u;
      modal_hits += modal;
      ++n;
    }
  }
  CHECK(unigram_hits == modal_hits);
  CHECK(unigram_hits > 0);  // depth 0 at the minimum budget wins the tie
  CHECK(unigram_hits < n);
  CHECK_THROWS_AS((void)lookup.all_logits(tokenize("A=")), std::logic_error);
}

TEST_CASE("a non-digit aborts decoding") {
  const ConstantOracle letters("12ab56");
  const Instance x = make(512, 0.5, 9);
  const EvalResult r = evaluate(letters, x);
  CHECK_FALSE(r.correct);
  CHECK(r.produced == "12a");
}

TEST_CASE("grid run with the lookup oracle") {
  const LookupOracle lookup;
  const std::vector<std::size_t> lengths{256, 512};
  const std::vector<double> depths{0.1, 0.5, 0.9};
  const GridResult g = grid_run(lookup, lengths, depths, 3, 42);
  REQUIRE(g.accuracy.size() == 3);
  for (const auto& row : g.accuracy) {
    REQUIRE(row.size() == 2);
    for (double a : row) CHECK(a == 1.0);
  }
  CHECK(to_csv(g) == "depth,256,512\n0.1,1,1\n0.5,1,1\n0.9,1,1\n");
  const GridResult z = grid_run(ConstantOracle("000000"), lengths, depths, 1, 42);
  for (const auto& row : z.accuracy)
    for (double a : row) CHECK(a == 0.0);
  CHECK(cell_seed(42, 0, 1) != cell_seed(42, 1, 0));
  CHECK(cell_seed(42, 0, 1) == cell_seed(42, 0, 1));
}

TEST_CASE("jsonl records carry the documented fields") {
  const Instance x = make(300, 0.7, 5);
  const std::string line = to_jsonl(x);
  CHECK(line.back() == '\n');
  const auto j = nlohmann::json::parse(line);
  CHECK(j.at("prompt") == x.prompt);
  CHECK(j.at("answer") == x.answer);
  CHECK(j.at("target_letter") == std::string(1, x.target_letter));
  CHECK(j.at("depth") == 0.7);
  CHECK(j.at("context_tokens") == 300);
  CHECK(j.at("insertion_index") == x.insertion_index);
  CHECK(j.at("seed") == 5);
}

}  // TEST_SUITE
