#include "mscreen/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

namespace mscreen {

namespace {

Tensor gaussian(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

void check_tokens(std::span<const int> tokens, std::size_t vocab) {
  if (tokens.empty()) throw std::invalid_argument("model_forward: empty token sequence");
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= vocab) {
      throw std::invalid_argument("token " + std::to_string(tokens[i]) + " at index " +
                                  std::to_string(i) + " is outside [0, " +
                                  std::to_string(vocab) + ")");
    }
  }
}

void add_scaled(Tensor& dst, const Tensor& src, double s) {
  auto d = dst.values();
  const auto v = src.values();
  for (std::size_t k = 0; k < d.size(); ++k) d[k] += s * v[k];
}

}  // namespace

ModelConfig ModelConfig::from_psi(std::size_t psi, std::size_t vocab_size) {
  ModelConfig c;
  c.psi = psi;
  c.n_layers = psi;
  c.n_heads = psi;
  c.d_e = psi * psi;
  c.vocab_size = vocab_size;
  return c;
}

void ModelConfig::validate() const {
  if (n_layers == 0 || n_heads == 0) throw std::invalid_argument("config: empty tile grid");
  if (d_e == 0) throw std::invalid_argument("config: d_e must be positive");
  if (d_k < 2) {
    throw std::invalid_argument("config: d_k must be at least 2 for the positional rotation, got " +
                                std::to_string(d_k));
  }
  if (d_v == 0) throw std::invalid_argument("config: d_v must be positive");
  if (!(w_th > 0.0)) throw std::invalid_argument("config: w_th must be positive");
  if (vocab_size == 0) throw std::invalid_argument("config: vocab_size must be positive");
  if (max_trained_len == 0) throw std::invalid_argument("config: max_trained_len must be positive");
}

std::vector<ParamRef> param_refs(ModelParams& params) {
  std::vector<ParamRef> refs;
  refs.push_back({"W_E", params.w_e.values(), true, params.w_e.shape()});
  refs.push_back({"s_E", {&params.s_e, 1}, false, {1}});
  refs.push_back({"s_F", {&params.s_f, 1}, false, {1}});
  for (std::size_t l = 0; l < params.tiles.size(); ++l) {
    for (std::size_t h = 0; h < params.tiles[l].size(); ++h) {
      TileParams& t = params.tiles[l][h];
      const std::string p = "tile." + std::to_string(l) + "." + std::to_string(h) + ".";
      refs.push_back({p + "W_Q", t.w_q.values(), true, t.w_q.shape()});
      refs.push_back({p + "W_K", t.w_k.values(), true, t.w_k.shape()});
      refs.push_back({p + "W_V", t.w_v.values(), true, t.w_v.shape()});
      refs.push_back({p + "W_G", t.w_g.values(), true, t.w_g.shape()});
      refs.push_back({p + "W_O", t.w_o.values(), true, t.w_o.shape()});
      refs.push_back({p + "s_O", {&t.s_o, 1}, false, {1}});
      refs.push_back({p + "s_w", {&t.scalars.s_w, 1}, false, {1}});
      refs.push_back({p + "s_r", {&t.scalars.s_r, 1}, false, {1}});
    }
  }
  return refs;
}

ModelParams zero_grads(const ModelParams& params) {
  ModelParams g = params;
  for (ParamRef& ref : param_refs(g)) std::fill(ref.values.begin(), ref.values.end(), 0.0);
  return g;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const double de = static_cast<double>(config.d_e);
  const double dk = static_cast<double>(config.d_k);
  const double dv = static_cast<double>(config.d_v);

  ModelParams p;
  p.w_e = gaussian(config.vocab_size, config.d_e, 0.1 / std::sqrt(de), rng);
  p.s_e = 0.0;
  p.s_f = std::log(std::sqrt(de));
  const double s_o =
      std::log(1.0 / std::sqrt(static_cast<double>(config.n_heads * config.n_layers)));
  const double log_wth = std::log(config.w_th);

  p.tiles.resize(config.n_layers);
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    p.tiles[l].resize(config.n_heads);
    for (std::size_t h = 0; h < config.n_heads; ++h) {
      TileParams& t = p.tiles[l][h];
      t.w_q = gaussian(config.d_e, config.d_k, 0.1 / std::sqrt(dk), rng);
      t.w_k = gaussian(config.d_e, config.d_k, 0.1 / std::sqrt(dk), rng);
      t.w_v = gaussian(config.d_e, config.d_v, 0.1 / std::sqrt(dv), rng);
      t.w_g = gaussian(config.d_e, config.d_v, 0.1, rng);
      t.w_o = gaussian(config.d_v, config.d_e, 0.1 / std::sqrt(de), rng);
      t.s_o = s_o;
      // Inclusive linear grid 0 .. log(w_th) across heads.
      t.scalars.s_w = config.n_heads == 1
                          ? 0.0
                          : log_wth * static_cast<double>(h) /
                                static_cast<double>(config.n_heads - 1);
      t.scalars.s_r = 0.0;
      t.scalars.w_th = config.w_th;
      t.scalars.inference_infinite = false;
    }
  }
  return p;
}

std::size_t count_params(const ModelConfig& config) {
  config.validate();
  const std::size_t per_tile = 2 * config.d_e * config.d_k  // W_Q, W_K
                               + 2 * config.d_e * config.d_v  // W_V, W_G
                               + config.d_v * config.d_e      // W_O
                               + 3;                           // s_O, s_w, s_r
  return config.vocab_size * config.d_e + 2 + config.n_layers * config.n_heads * per_tile;
}

double gate_activation(double x) { return std::tanh(x * sigmoid(x)); }

namespace {

// Derivative at x given the already computed activation th = tanh(SiLU(x)).
double gate_derivative_given(double x, double th) {
  const double sg = sigmoid(x);
  return (1.0 - th * th) * sg * (1.0 + x * (1.0 - sg));
}

}  // namespace

double gate_activation_derivative(double x) { return gate_derivative_given(x, gate_activation(x)); }

Tensor tile_forward(const Tensor& x, const TileParams& tile, ScreeningKernel kernel,
                    TileCache* cache, RelevanceMap* relevance) {
  if (x.cols() != tile.w_q.rows()) {
    throw std::invalid_argument("tile_forward: input " + x.shape_string() +
                                " does not match W_Q " + tile.w_q.shape_string());
  }
  const Tensor q = matmul(x, tile.w_q);
  const Tensor k = matmul(x, tile.w_k);
  const Tensor v = matmul(x, tile.w_v);
  Tensor g = matmul(x, tile.w_g);

  Tensor u;
  if (kernel == ScreeningKernel::dense_reference || relevance != nullptr) {
    if (cache != nullptr) {
      throw std::invalid_argument("tile_forward: the dense reference kernel is forward-only");
    }
    ScreeningOutput so = screening_forward(q, k, v, tile.scalars, relevance != nullptr);
    u = std::move(so.u);
    if (relevance != nullptr) *relevance = std::move(*so.relevance);
  } else {
    u = screening_forward_windowed(q, k, v, tile.scalars,
                                   cache != nullptr ? &cache->screening : nullptr);
  }

  Tensor g_hat = g;
  for (double& e : g_hat.values()) e = gate_activation(e);
  Tensor gated = u;
  for (std::size_t n = 0; n < gated.size(); ++n) gated[n] *= g_hat[n];

  Tensor out = matmul(gated, tile.w_o);
  out *= std::exp(tile.s_o);

  if (cache != nullptr) {
    cache->g = std::move(g);
    cache->g_hat = std::move(g_hat);
    cache->u = std::move(u);
    cache->gated = std::move(gated);
    cache->out = out;
  }
  return out;
}

Tensor tile_backward(const Tensor& x, const TileParams& tile, const TileCache& cache,
                     const Tensor& d_out, TileParams& grads) {
  const double scale = std::exp(tile.s_o);

  // out = scale * gated @ W_O
  Tensor d_gated = matmul_nt(d_out, tile.w_o);
  d_gated *= scale;
  add_scaled(grads.w_o, matmul_tn(cache.gated, d_out), scale);
  grads.s_o += dot(d_out.values(), cache.out.values());

  Tensor du = d_gated;
  Tensor dg = d_gated;
  for (std::size_t n = 0; n < du.size(); ++n) {
    du[n] *= cache.g_hat[n];
    dg[n] *= cache.u[n] * gate_derivative_given(cache.g[n], cache.g_hat[n]);
  }

  const ScreeningGrads sg = screening_backward(cache.screening, du);
  grads.scalars.s_w += sg.d_s_w;
  grads.scalars.s_r += sg.d_s_r;

  grads.w_q += matmul_tn(x, sg.dq);
  grads.w_k += matmul_tn(x, sg.dk);
  grads.w_v += matmul_tn(x, sg.dv);
  grads.w_g += matmul_tn(x, dg);

  Tensor dx = matmul_nt(sg.dq, tile.w_q);
  dx += matmul_nt(sg.dk, tile.w_k);
  dx += matmul_nt(sg.dv, tile.w_v);
  dx += matmul_nt(dg, tile.w_g);
  return dx;
}

Tensor model_forward(std::span<const int> tokens, const ModelParams& params,
                     const ModelConfig& config, const ForwardOptions& options,
                     ForwardCache* cache) {
  check_tokens(tokens, config.vocab_size);
  if (cache != nullptr && options.last_position_only) {
    throw std::invalid_argument("model_forward: gradients need logits at every position");
  }
  const std::size_t T = tokens.size();
  Tensor e_unit = rownorm(params.w_e);

  const double in_scale = std::exp(params.s_e);
  Tensor x = Tensor::matrix(T, config.d_e);
  for (std::size_t i = 0; i < T; ++i) {
    const auto src = e_unit.row(static_cast<std::size_t>(tokens[i]));
    auto dst = x.row(i);
    for (std::size_t c = 0; c < dst.size(); ++c) dst[c] = in_scale * src[c];
  }

  if (cache != nullptr) {
    cache->tokens.assign(tokens.begin(), tokens.end());
    cache->layer_inputs.clear();
    cache->tiles.assign(params.tiles.size(), {});
  }

  for (std::size_t l = 0; l < params.tiles.size(); ++l) {
    Tensor next = x;
    if (cache != nullptr) cache->tiles[l].resize(params.tiles[l].size());
    for (std::size_t h = 0; h < params.tiles[l].size(); ++h) {
      TileCache* tc = cache != nullptr ? &cache->tiles[l][h] : nullptr;
      if (options.relevance != nullptr) {
        RelevanceMap map;
        next += tile_forward(x, params.tiles[l][h], options.kernel, tc, &map);
        map.layer = l;
        map.head = h;
        options.relevance->push_back(std::move(map));
      } else {
        next += tile_forward(x, params.tiles[l][h], options.kernel, tc);
      }
    }
    if (cache != nullptr) cache->layer_inputs.push_back(std::move(x));
    x = std::move(next);
  }

  const double out_scale = std::exp(params.s_f);
  Tensor logits;
  if (options.last_position_only) {
    Tensor last({1, config.d_e}, std::vector<double>(x.row(T - 1).begin(), x.row(T - 1).end()));
    logits = matmul_nt(last, e_unit);
  } else {
    logits = matmul_nt(x, e_unit);
  }
  logits *= out_scale;

  if (cache != nullptr) {
    cache->e_unit = std::move(e_unit);
    cache->final_x = std::move(x);
    cache->logits = logits;
  }
  return logits;
}

void model_backward(const ModelParams& params, const ModelConfig& config,
                    const ForwardCache& cache, const Tensor& dlogits, ModelParams& grads) {
  const std::size_t T = cache.tokens.size();
  const double out_scale = std::exp(params.s_f);
  const double in_scale = std::exp(params.s_e);

  // logits = out_scale * x @ E^T
  Tensor dx = matmul(dlogits, cache.e_unit);
  dx *= out_scale;
  Tensor de_unit = matmul_tn(dlogits, cache.final_x);
  de_unit *= out_scale;
  grads.s_f += dot(dlogits.values(), cache.logits.values());

  for (std::size_t l = params.tiles.size(); l-- > 0;) {
    const Tensor& x_in = cache.layer_inputs[l];
    Tensor d_in = dx;
    for (std::size_t h = 0; h < params.tiles[l].size(); ++h) {
      d_in += tile_backward(x_in, params.tiles[l][h], cache.tiles[l][h], dx, grads.tiles[l][h]);
    }
    dx = std::move(d_in);
  }

  for (std::size_t i = 0; i < T; ++i) {
    const auto tok = static_cast<std::size_t>(cache.tokens[i]);
    const auto g = dx.row(i);
    const auto e = cache.e_unit.row(tok);
    auto dst = de_unit.row(tok);
    for (std::size_t c = 0; c < config.d_e; ++c) dst[c] += in_scale * g[c];
    grads.s_e += in_scale * dot(g, e);
  }
  grads.w_e += rownorm_backward(params.w_e, de_unit);
}

CrossEntropy cross_entropy(const Tensor& logits, std::span<const int> targets, Tensor* dlogits,
                           double grad_scale) {
  if (logits.rows() != targets.size()) {
    throw std::invalid_argument("cross_entropy: " + std::to_string(targets.size()) +
                                " targets for logits " + logits.shape_string());
  }
  const std::size_t V = logits.cols();
  if (dlogits != nullptr) *dlogits = zeros_like(logits);
  CrossEntropy ce;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] == kIgnoreTarget) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= V) {
      throw std::invalid_argument("cross_entropy: target " + std::to_string(targets[i]) +
                                  " outside vocabulary of " + std::to_string(V));
    }
    const auto row = logits.row(i);
    const double mx = *std::max_element(row.begin(), row.end());
    double z = 0.0;
    for (double v : row) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    ce.sum += lse - row[static_cast<std::size_t>(targets[i])];
    ++ce.count;
    if (dlogits != nullptr) {
      auto d = dlogits->row(i);
      for (std::size_t c = 0; c < V; ++c) d[c] = grad_scale * std::exp(row[c] - lse);
      d[static_cast<std::size_t>(targets[i])] -= grad_scale;
    }
  }
  return ce;
}

double loss(const Tensor& logits, std::span<const int> targets) {
  return cross_entropy(logits, targets).mean();
}

double loss_and_grad(std::span<const int> tokens, std::span<const int> targets,
                     const ModelParams& params, const ModelConfig& config, ModelParams& grads) {
  ForwardCache cache;
  const Tensor logits = model_forward(tokens, params, config, {}, &cache);
  const CrossEntropy count_only = cross_entropy(logits, targets);
  if (count_only.count == 0) return 0.0;
  Tensor dlogits;
  const CrossEntropy ce =
      cross_entropy(logits, targets, &dlogits, 1.0 / static_cast<double>(count_only.count));
  model_backward(params, config, cache, dlogits, grads);
  return ce.mean();
}

FreezeResult freeze_for_inference(ModelParams params, const ModelConfig& config) {
  FreezeResult result;
  const double limit = static_cast<double>(config.max_trained_len);
  for (auto& layer : params.tiles) {
    for (TileParams& tile : layer) {
      ++result.total_tiles;
      if (derive_window(tile.scalars.s_w) > limit) {
        tile.scalars.inference_infinite = true;
        ++result.frozen_tiles;
      }
    }
  }
  result.params = std::move(params);
  return result;
}

}  // namespace mscreen
