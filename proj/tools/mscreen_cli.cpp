// mscreen: command-line front end.
//
// Every subcommand merges --config (flat key = value) with flags, flags
// winning, and writes the merged result to <out>/effective_config.txt.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mscreen/abcdigits.hpp"
#include "mscreen/bench.hpp"
#include "mscreen/checkpoint.hpp"
#include "mscreen/keyvalue_config.hpp"
#include "mscreen/lm.hpp"
#include "mscreen/tasks.hpp"
#include "mscreen/train.hpp"

namespace fs = std::filesystem;
using namespace mscreen;

namespace {

// Raised for files we cannot read or write; maps to exit status 1.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Flags {
  std::string config_path;
  std::string out = ".";
  std::string checkpoint;
  std::string model;
  std::string task;
  std::string input;
  std::string oracle;
  std::string lengths;
  std::string depths;
  std::string lrs;
  std::uint64_t seed = 0;
  std::size_t psi = 0;
  double lr = 0;
  std::int64_t steps = -1;
  std::size_t seq_len = 0;
  std::size_t context = 0;
  double depth = -1;
  std::size_t cells = 0;
  std::size_t reps = 0;
  int threads = 0;
  std::size_t vocab = 0;
  std::size_t count = 0;
  std::size_t batch_tokens = 0;
  bool freeze = false;
};

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> parts;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep))
    if (!item.empty()) parts.push_back(item);
  return parts;
}

std::vector<double> parse_reals(const std::string& key, const std::string& s) {
  std::vector<double> v;
  for (const auto& p : split(s, ',')) v.push_back(KeyValueConfig::parse(key + "=" + p).get_real(key, 0));
  return v;
}

class Run {
 public:
  Run(const Flags& f, const CLI::App& sub) : flags_(f) {
    if (!f.config_path.empty()) {
      try {
        cfg_ = KeyValueConfig::load(f.config_path);
      } catch (const std::runtime_error& e) {
        throw IoError(e.what());
      }
    }
    auto given = [&](const char* name) { return sub.get_option_no_throw(name) && sub.count(name) > 0; };
    auto put = [&](const char* flag, const std::string& key, const std::string& value) {
      if (given(flag)) cfg_.set(key, value);
    };
    put("--seed", "seed", std::to_string(f.seed));
    put("--checkpoint", "checkpoint", f.checkpoint);
    put("--model", "model", f.model);
    put("--task", "task", f.task);
    put("--input", "input", f.input);
    put("--oracle", "oracle", f.oracle);
    put("--lengths", "lengths", f.lengths);
    put("--depths", "depths", f.depths);
    put("--lrs", "lrs", f.lrs);
    put("--psi", "psi", std::to_string(f.psi));
    put("--lr", "lr", real(f.lr));
    put("--steps", "steps", std::to_string(f.steps));
    put("--seq-len", "seq_len", std::to_string(f.seq_len));
    put("--context", "context", std::to_string(f.context));
    put("--depth", "depth", real(f.depth));
    put("--cells", "cells", std::to_string(f.cells));
    put("--reps", "reps", std::to_string(f.reps));
    put("--threads", "threads", std::to_string(f.threads));
    put("--vocab", "vocab", std::to_string(f.vocab));
    put("--count", "count", std::to_string(f.count));
    put("--batch-tokens", "batch_tokens", std::to_string(f.batch_tokens));
    if (f.freeze) cfg_.set("freeze", "1");
    cfg_.set("command", sub.get_name());
    out_ = f.out;
  }

  static std::string real(double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  }

  // Read a value and record the effective setting.
  std::string str(const std::string& key, const std::string& fallback) {
    const std::string v = cfg_.get_string(key, fallback);
    cfg_.set(key, v);
    return v;
  }
  std::int64_t num(const std::string& key, std::int64_t fallback) {
    const auto v = cfg_.get_int(key, fallback);
    cfg_.set(key, std::to_string(v));
    return v;
  }
  std::uint64_t unum(const std::string& key, std::uint64_t fallback) {
    const auto v = cfg_.get_uint(key, fallback);
    cfg_.set(key, std::to_string(v));
    return v;
  }
  double dbl(const std::string& key, double fallback) {
    const double v = cfg_.get_real(key, fallback);
    cfg_.set(key, real(v));
    return v;
  }
  std::string require(const std::string& key) {
    const auto v = cfg_.get(key);
    if (!v || v->empty()) throw std::invalid_argument("missing required setting '" + key + "'");
    return *v;
  }

  fs::path out_dir() {
    std::error_code ec;
    fs::create_directories(out_, ec);
    if (ec) throw IoError("cannot create output directory " + out_.string());
    return out_;
  }

  void write(const fs::path& name, const std::string& text) {
    const fs::path p = out_dir() / name;
    std::ofstream o(p, std::ios::binary | std::ios::trunc);
    if (!o) throw IoError("cannot write " + p.string());
    o << text;
    if (!o) throw IoError("write failed: " + p.string());
  }

  void finish() { write("effective_config.txt", cfg_.to_text()); }

  void apply_threads(int fallback) { set_math_threads(static_cast<int>(num("threads", fallback))); }

  AnyModel model_from_settings() {
    const std::string path = cfg_.get_string("checkpoint", "");
    if (!path.empty()) {
      try {
        Checkpoint c = load_checkpoint(path);
        if (unum("freeze", 0) != 0) freeze(c.model);
        return c.model;
      } catch (const std::invalid_argument&) {
        throw;
      } catch (const std::runtime_error& e) {
        throw IoError(e.what());
      }
    }
    const ModelKind kind = parse_kind(str("model", "multiscreen"));
    const auto vocab = static_cast<std::size_t>(unum("vocab", kByteVocab));
    const auto seed = unum("seed", 0);
    if (kind == ModelKind::multiscreen) {
      MultiscreenModel m;
      m.config = ModelConfig::from_psi(unum("psi", 4), vocab);
      m.config.d_k = unum("d_k", m.config.d_k);
      m.config.d_v = unum("d_v", m.config.d_v);
      m.config.w_th = dbl("w_th", m.config.w_th);
      m.config.max_trained_len = unum("max_trained_len", unum("seq_len", 256));
      m.config.validate();
      m.params = init_params(m.config, seed);
      AnyModel any = m;
      if (unum("freeze", 0) != 0) freeze(any);
      return any;
    }
    BaselineModel b;
    b.config = BaselineConfig::make(unum("baseline.n_layers", 2), unum("baseline.n_heads", 2),
                                    unum("baseline.d_e", 16), vocab);
    b.config.rope_theta = dbl("baseline.rope_theta", b.config.rope_theta);
    b.config.validate();
    b.params = init_baseline(b.config, seed);
    return b;
  }

  void freeze(AnyModel& model) {
    if (auto* ms = std::get_if<MultiscreenModel>(&model)) {
      FreezeResult r = freeze_for_inference(ms->params, ms->config);
      ms->params = std::move(r.params);
      std::cerr << "frozen tiles: " << r.frozen_tiles << "/" << r.total_tiles << " ("
                << r.fraction() << ")\n";
    }
  }

  TaskParams task_from_settings() {
    TaskParams t;
    t.kind = parse_task_kind(str("task", "associative_recall"));
    t.period = unum("task.period", t.period);
    t.alphabet = unum("task.alphabet", t.alphabet);
    t.n_keys = unum("task.n_keys", t.n_keys);
    t.n_values = unum("task.n_values", t.n_values);
    t.n_digits = unum("task.n_digits", t.n_digits);
    return t;
  }

  OptimConfig optim_from_settings(ModelKind kind) {
    OptimConfig o = default_optim(kind);
    o.lr = dbl("lr", o.lr);
    o.weight_decay = dbl("weight_decay", o.weight_decay);
    const double clip = dbl("clip", o.clip_threshold.value_or(0.0));
    o.clip_threshold.reset();
    if (clip > 0) o.clip_threshold = clip;
    o.warmup_steps = num("warmup_steps", 0);
    o.total_steps = num("steps", 4096);
    o.seq_len = num("seq_len", 256);
    o.batch_tokens = num("batch_tokens", 1 << 14);
    o.seed = unum("seed", 0);
    o.validate();
    return o;
  }

  std::vector<int> read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    std::vector<int> tokens;
    char c;
    while (in.get(c)) tokens.push_back(static_cast<unsigned char>(c));
    return tokens;
  }

  KeyValueConfig& cfg() { return cfg_; }

 private:
  Flags flags_;
  KeyValueConfig cfg_;
  fs::path out_;
};

int cmd_count_params(Run& run) {
  const auto psi = std::stoull(run.require("psi"));
  const auto vocab = run.unum("vocab", kByteVocab);
  const ModelConfig c = ModelConfig::from_psi(psi, vocab);
  std::cout << count_params(c) << '\n';
  return 0;
}

int cmd_train(Run& run) {
  run.apply_threads(1);
  AnyModel model = run.model_from_settings();
  std::optional<AdamState> resume;
  if (const auto ck = run.cfg().get("checkpoint"); ck && !ck->empty()) {
    try {
      resume = load_checkpoint(*ck).optimizer;
    } catch (const std::runtime_error& e) {
      throw IoError(e.what());
    }
  }
  const OptimConfig optim = run.optim_from_settings(kind_of(model));
  if (auto* ms = std::get_if<MultiscreenModel>(&model)) {
    ms->config.max_trained_len = std::max<std::size_t>(ms->config.max_trained_len,
                                                       static_cast<std::size_t>(optim.seq_len));
  }
  const TaskParams task = run.task_from_settings();
  const std::int64_t every = run.num("log_every", 50);
  TrainOptions opts;
  opts.divergence_ceiling = run.dbl("divergence_ceiling", 1e4);
  opts.on_step = [every](const TrainRecord& r) {
    if (every > 0 && r.step % every == 0) {
      std::cerr << "step " << r.step << " loss " << r.loss << " grad_norm " << r.grad_norm << '\n';
    }
    return true;
  };
  const TrainResult res = train(model, optim, task, opts, resume ? &*resume : nullptr);
  run.write("train_log.txt", res.log.to_text());
  try {
    save_checkpoint(run.out_dir() / "model", res.model, &res.optimizer);
  } catch (const std::runtime_error& e) {
    throw IoError(e.what());
  }
  std::cout << (res.log.diverged() ? "diverged" : "completed") << " final_loss "
            << res.log.final_loss() << '\n';
  return 0;
}

int cmd_lr_sweep(Run& run) {
  run.apply_threads(1);
  const AnyModel model = run.model_from_settings();
  const OptimConfig optim = run.optim_from_settings(kind_of(model));
  const TaskParams task = run.task_from_settings();
  std::vector<double> lrs;
  for (double e : parse_reals("lrs", run.str("lrs", "-10,-8,-6,-4,-2,0"))) lrs.push_back(std::exp2(e));
  TrainOptions opts;
  opts.divergence_ceiling = run.dbl("divergence_ceiling", 1e4);
  const auto rows = lr_sweep(model, optim, lrs, task, opts);
  const std::string table = sweep_table(rows);
  run.write("sweep.tsv", table);
  std::cout << table;
  return 0;
}

int cmd_eval_ppl(Run& run) {
  run.apply_threads(1);
  run.require("checkpoint");
  const AnyModel model = run.model_from_settings();
  const std::vector<int> stream = run.read_bytes(run.require("input"));
  const auto max_T = run.unum("context", stream.empty() ? 0 : stream.size() - 1);
  const double frac = run.dbl("window_frac", 0.1);
  const PerplexityCurve curve = eval_ppl(ModelLM(model), stream, max_T, frac);
  run.write("perplexity.csv", perplexity_csv(curve));
  return 0;
}

int cmd_abcdigits_gen(Run& run) {
  abcd::Spec spec;
  spec.n_digits = run.unum("digits", 6);
  spec.context_tokens = run.unum("context", 4096);
  spec.depth = run.dbl("depth", 0.5);
  const auto seed = run.unum("seed", 0);
  const auto count = run.unum("count", 1);
  std::string jsonl;
  std::mt19937_64 seeds(seed);
  for (std::uint64_t k = 0; k < count; ++k) {
    spec.seed = seeds();
    jsonl += abcd::to_jsonl(abcd::generate(spec));
  }
  run.write("instances.jsonl", jsonl);
  return 0;
}

int cmd_abcdigits_eval(Run& run) {
  run.apply_threads(1);
  std::vector<std::size_t> lengths;
  for (double l : parse_reals("lengths", run.str("lengths", "512,1024,2048,4096"))) {
    lengths.push_back(static_cast<std::size_t>(l));
  }
  const std::vector<double> depths = parse_reals("depths", run.str("depths", "0.1,0.3,0.5,0.7,0.9"));
  const auto cells = run.unum("cells", 10);
  const auto seed = run.unum("seed", 0);
  const auto digits = run.unum("digits", 6);
  const std::string oracle = run.str("oracle", "");
  abcd::GridResult grid;
  if (oracle == "lookup") {
    grid = abcd::grid_run(abcd::LookupOracle(), lengths, depths, cells, seed, digits);
  } else if (oracle == "unigram") {
    grid = abcd::grid_run(abcd::UnigramOracle(), lengths, depths, cells, seed, digits);
  } else if (oracle.empty()) {
    run.require("checkpoint");
    grid = abcd::grid_run(ModelLM(run.model_from_settings()), lengths, depths, cells, seed, digits);
  } else {
    throw std::invalid_argument("unknown oracle '" + oracle + "' (expected lookup or unigram)");
  }
  const std::string csv = abcd::to_csv(grid);
  run.write("grid.csv", csv);
  std::cout << csv;
  return 0;
}

int cmd_bench_latency(Run& run) {
  run.apply_threads(1);
  const AnyModel model = run.model_from_settings();
  std::vector<std::size_t> contexts;
  for (double c : parse_reals("contexts", run.str("contexts", std::to_string(run.unum("context", 4096))))) {
    contexts.push_back(static_cast<std::size_t>(c));
  }
  const auto reps = run.unum("reps", 5);
  const auto warmup = run.unum("warmup", 1);
  std::vector<LatencyReport> reports;
  for (std::size_t T : contexts) reports.push_back(bench_latency(model, T, reps, warmup, run.unum("seed", 0)));
  const std::string csv = latency_csv(reports);
  run.write("latency.csv", csv);
  std::cout << csv;
  for (const auto& r : reports)
    if (r.failure) return 1;
  return 0;
}

int cmd_dump_relevance(Run& run) {
  run.apply_threads(1);
  const AnyModel model = run.model_from_settings();
  const auto* ms = std::get_if<MultiscreenModel>(&model);
  if (ms == nullptr) throw std::invalid_argument("dump-relevance needs a multiscreen model");
  std::vector<int> tokens;
  if (const auto in = run.cfg().get("input"); in && !in->empty()) {
    tokens = run.read_bytes(*in);
    const auto T = run.unum("context", tokens.size());
    if (T < tokens.size()) tokens.resize(T);
  } else {
    const auto T = run.unum("context", 64);
    std::mt19937_64 rng(run.unum("seed", 0));
    std::uniform_int_distribution<int> b(0, 255);
    for (std::size_t k = 0; k < T; ++k) tokens.push_back(b(rng));
  }
  const auto maps = dump_relevance(*ms, tokens);
  try {
    write_relevance(run.out_dir() / "relevance", maps);
  } catch (const std::runtime_error& e) {
    throw IoError(e.what());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multiscreen language models: training, evaluation and benchmarks"};
  app.require_subcommand(1);
  Flags f;

  auto common = [&f](CLI::App* s) {
    s->add_option("--config", f.config_path, "key = value configuration file");
    s->add_option("--seed", f.seed, "random seed");
    s->add_option("--out", f.out, "output directory");
    s->add_option("--checkpoint", f.checkpoint, "checkpoint to load (manifest path or stem)");
    s->add_option("--threads", f.threads, "math threads");
  };
  auto modelopts = [&f](CLI::App* s) {
    s->add_option("--model", f.model, "multiscreen | baseline");
    s->add_option("--psi", f.psi, "scale parameter");
    s->add_option("--vocab", f.vocab, "vocabulary size");
    s->add_flag("--freeze", f.freeze, "apply the inference-time infinite-window rule");
  };
  auto trainopts = [&f](CLI::App* s) {
    s->add_option("--task", f.task, "copy | associative_recall | abcdigits_lm");
    s->add_option("--lr", f.lr, "learning rate");
    s->add_option("--steps", f.steps, "optimizer steps");
    s->add_option("--seq-len", f.seq_len, "training sequence length");
    s->add_option("--batch-tokens", f.batch_tokens, "tokens per batch");
  };

  auto* count = app.add_subcommand("count-params", "print the parameter count for a scale");
  count->add_option("--psi", f.psi, "scale parameter")->required();
  count->add_option("--vocab", f.vocab, "vocabulary size");
  count->add_option("--config", f.config_path, "key = value configuration file");
  count->add_option("--out", f.out, "output directory");

  auto* tr = app.add_subcommand("train", "train a model on a toy task");
  common(tr);
  modelopts(tr);
  trainopts(tr);

  auto* sw = app.add_subcommand("lr-sweep", "one training run per learning rate");
  common(sw);
  modelopts(sw);
  trainopts(sw);
  sw->add_option("--lrs", f.lrs, "comma-separated log2 learning rates");

  auto* ppl = app.add_subcommand("eval-ppl", "position-dependent perplexity of a byte file");
  common(ppl);
  ppl->add_option("--input", f.input, "byte stream to score");
  ppl->add_option("--context", f.context, "positions to score");

  auto* gen = app.add_subcommand("abcdigits-gen", "write ABCDigits instances as JSON lines");
  gen->add_option("--config", f.config_path, "key = value configuration file");
  gen->add_option("--seed", f.seed, "master seed");
  gen->add_option("--out", f.out, "output directory");
  gen->add_option("--context", f.context, "token budget per prompt");
  gen->add_option("--depth", f.depth, "target depth in [0, 1]");
  gen->add_option("--count", f.count, "number of instances");

  auto* ev = app.add_subcommand("abcdigits-eval", "exact-match accuracy grid");
  common(ev);
  ev->add_option("--cells", f.cells, "instances per (length, depth) cell");
  ev->add_option("--lengths", f.lengths, "comma-separated context lengths");
  ev->add_option("--depths", f.depths, "comma-separated depths");
  ev->add_option("--oracle", f.oracle, "lookup | unigram instead of a checkpoint");
  ev->add_flag("--freeze", f.freeze, "apply the inference-time infinite-window rule");

  auto* lat = app.add_subcommand("bench-latency", "time single next-token forwards");
  common(lat);
  modelopts(lat);
  lat->add_option("--context", f.context, "context length");
  lat->add_option("--reps", f.reps, "timed repetitions");

  auto* rel = app.add_subcommand("dump-relevance", "export per-tile relevance maps");
  common(rel);
  modelopts(rel);
  rel->add_option("--input", f.input, "byte file used as the context");
  rel->add_option("--context", f.context, "context length");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return 2;
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    Run run(f, *sub);
    int status = 0;
    const std::string name = sub->get_name();
    if (name == "count-params") status = cmd_count_params(run);
    else if (name == "train") status = cmd_train(run);
    else if (name == "lr-sweep") status = cmd_lr_sweep(run);
    else if (name == "eval-ppl") status = cmd_eval_ppl(run);
    else if (name == "abcdigits-gen") status = cmd_abcdigits_gen(run);
    else if (name == "abcdigits-eval") status = cmd_abcdigits_eval(run);
    else if (name == "bench-latency") status = cmd_bench_latency(run);
    else if (name == "dump-relevance") status = cmd_dump_relevance(run);
    if (sub->count("--out") > 0 || name != "count-params") run.finish();
    return status;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n' << sub->help();
    return 2;
  }
}
