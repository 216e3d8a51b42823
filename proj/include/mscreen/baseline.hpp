#pragma once

// Minimal LLaMA-style causal softmax-attention decoder: RMS pre-normalization,
// rotary position embeddings, SwiGLU feed-forward and a tied output head.
// Used as the comparison point for latency scaling, learning-rate sweeps and
// the softmax-competition contrast.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "mscreen/model.hpp"
#include "mscreen/tensor.hpp"

namespace mscreen {

struct BaselineConfig {
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t d_e = 16;
  std::size_t ffn_dim = 42;  // floor(8/3 * d_e)
  double rope_theta = 10000.0;
  double rope_scale = 1.0;
  std::size_t vocab_size = kByteVocab;

  static BaselineConfig make(std::size_t n_layers, std::size_t n_heads, std::size_t d_e,
                             std::size_t vocab_size = kByteVocab);
  std::size_t head_dim() const { return d_e / n_heads; }
  void validate() const;
};

/// Returns a copy whose position angles are divided by factor.
BaselineConfig set_rope_scale(BaselineConfig config, double factor);

struct BaselineLayer {
  Tensor attn_norm;  // 1 x d_e
  Tensor w_q, w_k, w_v, w_o;
  Tensor ffn_norm;   // 1 x d_e
  Tensor w_gate, w_up, w_down;
};

struct BaselineParams {
  Tensor embed;  // |V| x d_e, shared with the output head
  std::vector<BaselineLayer> layers;
  Tensor final_norm;  // 1 x d_e
};

/// Fixed order: embed, per layer (attn_norm, W_q, W_k, W_v, W_o, ffn_norm,
/// W_gate, W_up, W_down), final_norm. Norm gains are flagged non-matrix so
/// they are excluded from weight decay.
std::vector<ParamRef> param_refs(BaselineParams& params);
BaselineParams zero_grads(const BaselineParams& params);

/// N(0, 0.02) everywhere, residual projections additionally scaled by
/// 1/sqrt(2 N_L); norm gains start at one.
BaselineParams init_baseline(const BaselineConfig& config, std::uint64_t seed);
std::size_t count_params(const BaselineConfig& config);

/// Angle of rotary pair m at a position: (position / rope_scale) * theta^(-2m/head_dim).
double rope_angle(const BaselineConfig& config, std::size_t position, std::size_t pair);

/// Single-head causal softmax attention with 1/sqrt(d) scaling. If weights is
/// given it receives the T x T attention matrix.
Tensor causal_softmax_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                Tensor* weights = nullptr);

struct BaselineLayerCache {
  Tensor x_in, a_norm_inv, a;        // a = RMSNorm(x) * gain
  Tensor q, k, v;                    // after rotary embedding (q, k)
  std::vector<Tensor> probs;         // per head, T x T
  Tensor attn;                       // concatenated head outputs
  Tensor h;                          // x + attn @ W_o
  Tensor b_norm_inv, b;              // b = RMSNorm(h) * gain
  Tensor gate_pre, up, act;          // act = SiLU(gate_pre) * up
};

struct BaselineCache {
  std::vector<int> tokens;
  std::vector<BaselineLayerCache> layers;
  Tensor x_final, f_norm_inv, f;
  Tensor logits;
};

Tensor baseline_forward(std::span<const int> tokens, const BaselineParams& params,
                        const BaselineConfig& config, BaselineCache* cache = nullptr,
                        bool last_position_only = false);

void baseline_backward(const BaselineParams& params, const BaselineConfig& config,
                       const BaselineCache& cache, const Tensor& dlogits, BaselineParams& grads);

double baseline_loss_and_grad(std::span<const int> tokens, std::span<const int> targets,
                              const BaselineParams& params, const BaselineConfig& config,
                              BaselineParams& grads);

}  // namespace mscreen
