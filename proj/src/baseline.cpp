#include "mscreen/baseline.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <stdexcept>

namespace mscreen {

namespace {

constexpr double kRmsEps = 1e-6;

Tensor gaussian(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t = Tensor::matrix(rows, cols);
  for (double& v : t.values()) v = dist(rng);
  return t;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// y = x / rms(x) * gain, row-wise. inv receives 1/rms per row.
Tensor rms_norm(const Tensor& x, const Tensor& gain, Tensor& inv) {
  const std::size_t d = x.cols();
  inv = Tensor::matrix(x.rows(), 1);
  Tensor y = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto xr = x.row(i);
    const double r = 1.0 / std::sqrt(dot(xr, xr) / static_cast<double>(d) + kRmsEps);
    inv(i, 0) = r;
    auto yr = y.row(i);
    for (std::size_t c = 0; c < d; ++c) yr[c] = xr[c] * r * gain[c];
  }
  return y;
}

Tensor rms_norm_backward(const Tensor& x, const Tensor& gain, const Tensor& inv, const Tensor& dy,
                         Tensor& dgain) {
  const std::size_t d = x.cols();
  Tensor dx = zeros_like(x);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto xr = x.row(i);
    const auto gr = dy.row(i);
    const double r = inv(i, 0);
    double proj = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      const double n = xr[c] * r;
      dgain[c] += gr[c] * n;
      proj += gr[c] * gain[c] * n;
    }
    proj /= static_cast<double>(d);
    auto out = dx.row(i);
    for (std::size_t c = 0; c < d; ++c) out[c] = r * (gr[c] * gain[c] - xr[c] * r * proj);
  }
  return dx;
}

struct RopeTable {
  std::size_t pairs = 0;
  std::vector<double> cos, sin;  // [position][pair]
};

RopeTable make_rope_table(const BaselineConfig& config, std::size_t T) {
  RopeTable tab;
  tab.pairs = config.head_dim() / 2;
  tab.cos.resize(T * tab.pairs);
  tab.sin.resize(T * tab.pairs);
  for (std::size_t p = 0; p < T; ++p) {
    for (std::size_t m = 0; m < tab.pairs; ++m) {
      const double a = rope_angle(config, p, m);
      tab.cos[p * tab.pairs + m] = std::cos(a);
      tab.sin[p * tab.pairs + m] = std::sin(a);
    }
  }
  return tab;
}

// Rotates every head's coordinate pairs in place; inverse applies the transpose.
void apply_rope(Tensor& x, const BaselineConfig& config, const RopeTable& tab, bool inverse) {
  const std::size_t hd = config.head_dim();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    auto row = x.row(i);
    for (std::size_t h = 0; h < config.n_heads; ++h) {
      for (std::size_t m = 0; m < tab.pairs; ++m) {
        const double c = tab.cos[i * tab.pairs + m];
        const double s = inverse ? -tab.sin[i * tab.pairs + m] : tab.sin[i * tab.pairs + m];
        double& a = row[h * hd + 2 * m];
        double& b = row[h * hd + 2 * m + 1];
        const double a0 = a, b0 = b;
        a = a0 * c - b0 * s;
        b = a0 * s + b0 * c;
      }
    }
  }
}

// Multi-head causal attention over column blocks of q, k, v. If probs is
// non-null it receives one T x T matrix per head.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                            std::size_t n_heads, std::vector<Tensor>* probs) {
  const std::size_t T = q.rows();
  const std::size_t d = q.cols();
  const std::size_t hd = d / n_heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Tensor out = Tensor::matrix(T, d);
  if (probs != nullptr) probs->assign(n_heads, Tensor::matrix(T, T));

  for (std::size_t h = 0; h < n_heads; ++h) {
    const std::size_t off = h * hd;
    Tensor* ph = probs != nullptr ? &(*probs)[h] : nullptr;
#pragma omp parallel
    {
      std::vector<double> buf(ph == nullptr ? T : 0);
#pragma omp for schedule(dynamic, 16)
      for (std::ptrdiff_t si = 0; si < static_cast<std::ptrdiff_t>(T); ++si) {
        const std::size_t i = static_cast<std::size_t>(si);
        double* p = ph != nullptr ? ph->row(i).data() : buf.data();
        const double* qi = q.row(i).data() + off;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j <= i; ++j) {
          const double* kj = k.row(j).data() + off;
          double s = 0.0;
          for (std::size_t c = 0; c < hd; ++c) s += qi[c] * kj[c];
          p[j] = s * scale;
          mx = std::max(mx, p[j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          p[j] = std::exp(p[j] - mx);
          z += p[j];
        }
        const double inv = 1.0 / z;
        double* oi = out.row(i).data() + off;
        for (std::size_t j = 0; j <= i; ++j) {
          p[j] *= inv;
          const double* vj = v.row(j).data() + off;
          for (std::size_t c = 0; c < hd; ++c) oi[c] += p[j] * vj[c];
        }
      }
    }
  }
  return out;
}

void add_into(Tensor& dst, const Tensor& src) { dst += src; }

}  // namespace

BaselineConfig BaselineConfig::make(std::size_t n_layers, std::size_t n_heads, std::size_t d_e,
                                    std::size_t vocab_size) {
  BaselineConfig c;
  c.n_layers = n_layers;
  c.n_heads = n_heads;
  c.d_e = d_e;
  c.ffn_dim = (8 * d_e) / 3;
  c.vocab_size = vocab_size;
  return c;
}

void BaselineConfig::validate() const {
  if (n_layers == 0 || n_heads == 0 || d_e == 0) {
    throw std::invalid_argument("baseline config: layers, heads and d_e must be positive");
  }
  if (d_e % n_heads != 0) {
    throw std::invalid_argument("baseline config: d_e " + std::to_string(d_e) +
                                " is not divisible by " + std::to_string(n_heads) + " heads");
  }
  if (head_dim() % 2 != 0) {
    throw std::invalid_argument("baseline config: rotary embedding needs an even head dimension");
  }
  if (ffn_dim == 0 || vocab_size == 0) {
    throw std::invalid_argument("baseline config: ffn_dim and vocab_size must be positive");
  }
  if (!(rope_scale > 0.0) || !(rope_theta > 0.0)) {
    throw std::invalid_argument("baseline config: rope_theta and rope_scale must be positive");
  }
}

BaselineConfig set_rope_scale(BaselineConfig config, double factor) {
  if (!(factor > 0.0)) throw std::invalid_argument("set_rope_scale: factor must be positive");
  config.rope_scale = factor;
  return config;
}

double rope_angle(const BaselineConfig& config, std::size_t position, std::size_t pair) {
  const double freq = std::pow(config.rope_theta, -2.0 * static_cast<double>(pair) /
                                                      static_cast<double>(config.head_dim()));
  return static_cast<double>(position) / config.rope_scale * freq;
}

std::vector<ParamRef> param_refs(BaselineParams& params) {
  std::vector<ParamRef> refs;
  refs.push_back({"embed", params.embed.values(), true, params.embed.shape()});
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    BaselineLayer& L = params.layers[l];
    const std::string p = "layer." + std::to_string(l) + ".";
    refs.push_back({p + "attn_norm", L.attn_norm.values(), false, L.attn_norm.shape()});
    refs.push_back({p + "W_q", L.w_q.values(), true, L.w_q.shape()});
    refs.push_back({p + "W_k", L.w_k.values(), true, L.w_k.shape()});
    refs.push_back({p + "W_v", L.w_v.values(), true, L.w_v.shape()});
    refs.push_back({p + "W_o", L.w_o.values(), true, L.w_o.shape()});
    refs.push_back({p + "ffn_norm", L.ffn_norm.values(), false, L.ffn_norm.shape()});
    refs.push_back({p + "W_gate", L.w_gate.values(), true, L.w_gate.shape()});
    refs.push_back({p + "W_up", L.w_up.values(), true, L.w_up.shape()});
    refs.push_back({p + "W_down", L.w_down.values(), true, L.w_down.shape()});
  }
  refs.push_back({"final_norm", params.final_norm.values(), false, params.final_norm.shape()});
  return refs;
}

BaselineParams zero_grads(const BaselineParams& params) {
  BaselineParams g = params;
  for (ParamRef& ref : param_refs(g)) std::fill(ref.values.begin(), ref.values.end(), 0.0);
  return g;
}

BaselineParams init_baseline(const BaselineConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const double std0 = 0.02;
  const double resid = std0 / std::sqrt(2.0 * static_cast<double>(config.n_layers));
  const std::size_t d = config.d_e, f = config.ffn_dim;
  BaselineParams p;
  p.embed = gaussian(config.vocab_size, d, std0, rng);
  p.layers.resize(config.n_layers);
  for (BaselineLayer& L : p.layers) {
    L.attn_norm = Tensor::matrix(1, d, 1.0);
    L.w_q = gaussian(d, d, std0, rng);
    L.w_k = gaussian(d, d, std0, rng);
    L.w_v = gaussian(d, d, std0, rng);
    L.w_o = gaussian(d, d, resid, rng);
    L.ffn_norm = Tensor::matrix(1, d, 1.0);
    L.w_gate = gaussian(d, f, std0, rng);
    L.w_up = gaussian(d, f, std0, rng);
    L.w_down = gaussian(f, d, resid, rng);
  }
  p.final_norm = Tensor::matrix(1, d, 1.0);
  return p;
}

std::size_t count_params(const BaselineConfig& config) {
  const std::size_t d = config.d_e, f = config.ffn_dim;
  return config.vocab_size * d + config.n_layers * (4 * d * d + 3 * d * f + 2 * d) + d;
}

Tensor causal_softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                Tensor* weights) {
  if (q.rows() != k.rows() || q.rows() != v.rows() || q.cols() != k.cols() ||
      q.cols() != v.cols()) {
    throw std::invalid_argument("causal_softmax_attention: shapes Q " + q.shape_string() + " K " +
                                k.shape_string() + " V " + v.shape_string());
  }
  std::vector<Tensor> probs;
  Tensor out = multi_head_attention(q, k, v, 1, weights != nullptr ? &probs : nullptr);
  if (weights != nullptr) *weights = std::move(probs[0]);
  return out;
}

Tensor baseline_forward(std::span<const int> tokens, const BaselineParams& params,
                        const BaselineConfig& config, BaselineCache* cache,
                        bool last_position_only) {
  if (tokens.empty()) throw std::invalid_argument("baseline_forward: empty token sequence");
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= config.vocab_size) {
      throw std::invalid_argument("token " + std::to_string(tokens[i]) + " at index " +
                                  std::to_string(i) + " is outside [0, " +
                                  std::to_string(config.vocab_size) + ")");
    }
  }
  if (cache != nullptr && last_position_only) {
    throw std::invalid_argument("baseline_forward: gradients need logits at every position");
  }
  const std::size_t T = tokens.size();
  const std::size_t d = config.d_e;
  const RopeTable rope = make_rope_table(config, T);

  Tensor x = Tensor::matrix(T, d);
  for (std::size_t i = 0; i < T; ++i) {
    const auto src = params.embed.row(static_cast<std::size_t>(tokens[i]));
    std::copy(src.begin(), src.end(), x.row(i).begin());
  }
  if (cache != nullptr) {
    cache->tokens.assign(tokens.begin(), tokens.end());
    cache->layers.assign(params.layers.size(), {});
  }

  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const BaselineLayer& L = params.layers[l];
    Tensor a_inv;
    Tensor a = rms_norm(x, L.attn_norm, a_inv);
    Tensor q = matmul(a, L.w_q);
    Tensor k = matmul(a, L.w_k);
    Tensor v = matmul(a, L.w_v);
    apply_rope(q, config, rope, false);
    apply_rope(k, config, rope, false);
    std::vector<Tensor> probs;
    Tensor attn = multi_head_attention(q, k, v, config.n_heads, cache != nullptr ? &probs : nullptr);
    Tensor h = x;
    h += matmul(attn, L.w_o);

    Tensor b_inv;
    Tensor b = rms_norm(h, L.ffn_norm, b_inv);
    Tensor gate_pre = matmul(b, L.w_gate);
    Tensor up = matmul(b, L.w_up);
    Tensor act = gate_pre;
    for (std::size_t n = 0; n < act.size(); ++n) {
      const double g = gate_pre[n];
      act[n] = g * sigmoid(g) * up[n];
    }
    Tensor next = h;
    next += matmul(act, L.w_down);

    if (cache != nullptr) {
      BaselineLayerCache& c = cache->layers[l];
      c.x_in = std::move(x);
      c.a_norm_inv = std::move(a_inv);
      c.a = std::move(a);
      c.q = std::move(q);
      c.k = std::move(k);
      c.v = std::move(v);
      c.probs = std::move(probs);
      c.attn = std::move(attn);
      c.h = std::move(h);
      c.b_norm_inv = std::move(b_inv);
      c.b = std::move(b);
      c.gate_pre = std::move(gate_pre);
      c.up = std::move(up);
      c.act = std::move(act);
    }
    x = std::move(next);
  }

  Tensor f_inv;
  Tensor f = rms_norm(x, params.final_norm, f_inv);
  Tensor logits;
  if (last_position_only) {
    Tensor last({1, d}, std::vector<double>(f.row(T - 1).begin(), f.row(T - 1).end()));
    logits = matmul_nt(last, params.embed);
  } else {
    logits = matmul_nt(f, params.embed);
  }
  if (cache != nullptr) {
    cache->x_final = std::move(x);
    cache->f_norm_inv = std::move(f_inv);
    cache->f = std::move(f);
    cache->logits = logits;
  }
  return logits;
}

void baseline_backward(const BaselineParams& params, const BaselineConfig& config,
                       const BaselineCache& cache, const Tensor& dlogits, BaselineParams& grads) {
  const std::size_t T = cache.tokens.size();
  const std::size_t hd = config.head_dim();
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const RopeTable rope = make_rope_table(config, T);

  // logits = f @ E^T
  Tensor df = matmul(dlogits, params.embed);
  grads.embed += matmul_tn(dlogits, cache.f);
  Tensor dx = rms_norm_backward(cache.x_final, params.final_norm, cache.f_norm_inv, df,
                                grads.final_norm);

  for (std::size_t l = params.layers.size(); l-- > 0;) {
    const BaselineLayer& L = params.layers[l];
    BaselineLayer& G = grads.layers[l];
    const BaselineLayerCache& c = cache.layers[l];

    // next = h + act @ W_down
    Tensor dh = dx;
    Tensor dact = matmul_nt(dx, L.w_down);
    add_into(G.w_down, matmul_tn(c.act, dx));
    Tensor dgate = dact;
    Tensor dup = dact;
    for (std::size_t n = 0; n < dact.size(); ++n) {
      const double g = c.gate_pre[n];
      const double sg = sigmoid(g);
      dup[n] = dact[n] * g * sg;
      dgate[n] = dact[n] * c.up[n] * sg * (1.0 + g * (1.0 - sg));
    }
    add_into(G.w_gate, matmul_tn(c.b, dgate));
    add_into(G.w_up, matmul_tn(c.b, dup));
    Tensor db = matmul_nt(dgate, L.w_gate);
    db += matmul_nt(dup, L.w_up);
    dh += rms_norm_backward(c.h, L.ffn_norm, c.b_norm_inv, db, G.ffn_norm);

    // h = x + attn @ W_o
    Tensor dx_in = dh;
    Tensor dattn = matmul_nt(dh, L.w_o);
    add_into(G.w_o, matmul_tn(c.attn, dh));

    Tensor dq = zeros_like(c.q);
    Tensor dk = zeros_like(c.k);
    Tensor dv = zeros_like(c.v);
    std::vector<double> dp(T);
    for (std::size_t h = 0; h < config.n_heads; ++h) {
      const std::size_t off = h * hd;
      const Tensor& P = c.probs[h];
      for (std::size_t i = 0; i < T; ++i) {
        const double* doi = dattn.row(i).data() + off;
        double sum = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          const double* vj = c.v.row(j).data() + off;
          double s = 0.0;
          for (std::size_t e = 0; e < hd; ++e) s += doi[e] * vj[e];
          dp[j] = s;
          sum += P(i, j) * s;
          double* dvj = dv.row(j).data() + off;
          for (std::size_t e = 0; e < hd; ++e) dvj[e] += P(i, j) * doi[e];
        }
        const double* qi = c.q.row(i).data() + off;
        double* dqi = dq.row(i).data() + off;
        for (std::size_t j = 0; j <= i; ++j) {
          const double ds = P(i, j) * (dp[j] - sum) * scale;
          if (ds == 0.0) continue;
          const double* kj = c.k.row(j).data() + off;
          double* dkj = dk.row(j).data() + off;
          for (std::size_t e = 0; e < hd; ++e) {
            dqi[e] += ds * kj[e];
            dkj[e] += ds * qi[e];
          }
        }
      }
    }
    apply_rope(dq, config, rope, true);
    apply_rope(dk, config, rope, true);
    add_into(G.w_q, matmul_tn(c.a, dq));
    add_into(G.w_k, matmul_tn(c.a, dk));
    add_into(G.w_v, matmul_tn(c.a, dv));
    Tensor da = matmul_nt(dq, L.w_q);
    da += matmul_nt(dk, L.w_k);
    da += matmul_nt(dv, L.w_v);
    dx_in += rms_norm_backward(c.x_in, L.attn_norm, c.a_norm_inv, da, G.attn_norm);
    dx = std::move(dx_in);
  }

  for (std::size_t i = 0; i < T; ++i) {
    const auto g = dx.row(i);
    auto dst = grads.embed.row(static_cast<std::size_t>(cache.tokens[i]));
    for (std::size_t e = 0; e < g.size(); ++e) dst[e] += g[e];
  }
}

double baseline_loss_and_grad(std::span<const int> tokens, std::span<const int> targets,
                              const BaselineParams& params, const BaselineConfig& config,
                              BaselineParams& grads) {
  BaselineCache cache;
  const Tensor logits = baseline_forward(tokens, params, config, &cache);
  const CrossEntropy counted = cross_entropy(logits, targets);
  if (counted.count == 0) return 0.0;
  Tensor dlogits;
  const CrossEntropy ce =
      cross_entropy(logits, targets, &dlogits, 1.0 / static_cast<double>(counted.count));
  baseline_backward(params, config, cache, dlogits, grads);
  return ce.mean();
}

}  // namespace mscreen
