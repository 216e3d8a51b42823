#pragma once

// Multiscreen language model: tied, row-normalized embeddings with learned
// input/output scales, and an N_L x N_H grid of gated screening tiles whose
// updates are summed into a residual stream.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mscreen/screening.hpp"
#include "mscreen/tensor.hpp"

namespace mscreen {

/// 256 byte values plus one BOS/pad symbol.
inline constexpr std::size_t kByteVocab = 257;
inline constexpr int kBosToken = 256;
/// Target value excluded from the loss.
inline constexpr int kIgnoreTarget = -1;

struct ModelConfig {
  std::size_t psi = 4;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_e = 16;
  std::size_t d_k = 16;
  std::size_t d_v = 64;
  double w_th = kDefaultMipeThreshold;
  std::size_t vocab_size = kByteVocab;
  std::size_t max_trained_len = 256;

  /// Default scaling rule: N_L = N_H = psi, d_E = psi^2.
  static ModelConfig from_psi(std::size_t psi, std::size_t vocab_size = kByteVocab);

  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
};

struct TileParams {
  Tensor w_q, w_k, w_v, w_g, w_o;
  double s_o = 0.0;
  ScreeningScalars scalars;
};

struct ModelParams {
  Tensor w_e;
  double s_e = 0.0;
  double s_f = 0.0;
  std::vector<std::vector<TileParams>> tiles;  // [layer][head]
};

/// Mutable view of one trainable tensor or scalar.
struct ParamRef {
  std::string name;
  std::span<double> values;
  bool is_matrix = true;
  std::vector<std::size_t> shape;  // {1} for scalars
};

/// Every trainable value in a fixed order: W_E, s_E, s_F, then per tile
/// W_Q, W_K, W_V, W_G, W_O, s_O, s_w, s_r.
std::vector<ParamRef> param_refs(ModelParams& params);

/// Same structure as params with every trainable value zero.
ModelParams zero_grads(const ModelParams& params);

ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

std::size_t count_params(const ModelConfig& config);

enum class ScreeningKernel { dense_reference, windowed };

struct TileCache {
  ScreeningCache screening;
  Tensor g;       // gate pre-activation
  Tensor g_hat;   // tanh(SiLU(g))
  Tensor u;       // screening output
  Tensor gated;   // u * g_hat
  Tensor out;     // tile update
};

/// Elementwise tanh(SiLU(x)).
double gate_activation(double x);
double gate_activation_derivative(double x);

/// If relevance is given the dense reference kernel runs and fills it.
Tensor tile_forward(const Tensor& x, const TileParams& tile,
                    ScreeningKernel kernel = ScreeningKernel::windowed, TileCache* cache = nullptr,
                    RelevanceMap* relevance = nullptr);

/// Accumulates parameter gradients into grads and returns dL/dx.
Tensor tile_backward(const Tensor& x, const TileParams& tile, const TileCache& cache,
                     const Tensor& d_out, TileParams& grads);

struct ForwardOptions {
  ScreeningKernel kernel = ScreeningKernel::windowed;
  /// Only compute the logits of the final position (returns a 1 x |V| tensor).
  bool last_position_only = false;
  /// Receives one relevance map per tile, layer-major (dense reference path).
  std::vector<RelevanceMap>* relevance = nullptr;
};

struct ForwardCache {
  std::vector<int> tokens;
  Tensor e_unit;                              // row-normalized W_E
  std::vector<Tensor> layer_inputs;           // x^(0) .. x^(N_L - 1)
  Tensor final_x;                             // x^(N_L)
  Tensor logits;
  std::vector<std::vector<TileCache>> tiles;  // [layer][head]
};

/// Throws std::invalid_argument for an empty sequence or an out-of-range token.
Tensor model_forward(std::span<const int> tokens, const ModelParams& params,
                     const ModelConfig& config, const ForwardOptions& options = {},
                     ForwardCache* cache = nullptr);

/// Accumulates gradients of the loss whose logit gradient is dlogits.
void model_backward(const ModelParams& params, const ModelConfig& config,
                    const ForwardCache& cache, const Tensor& dlogits, ModelParams& grads);

struct CrossEntropy {
  double sum = 0.0;
  std::size_t count = 0;
  double mean() const { return count == 0 ? 0.0 : sum / static_cast<double>(count); }
};

/// Summed next-token cross-entropy over positions whose target is not
/// kIgnoreTarget. If dlogits is given it receives grad_scale * dCE/dlogits.
CrossEntropy cross_entropy(const Tensor& logits, std::span<const int> targets,
                           Tensor* dlogits = nullptr, double grad_scale = 1.0);

/// Mean cross-entropy.
double loss(const Tensor& logits, std::span<const int> targets);

/// Mean loss over one sequence; accumulates its gradient into grads.
double loss_and_grad(std::span<const int> tokens, std::span<const int> targets,
                     const ModelParams& params, const ModelConfig& config, ModelParams& grads);

struct FreezeResult {
  ModelParams params;
  std::size_t frozen_tiles = 0;
  std::size_t total_tiles = 0;
  double fraction() const {
    return total_tiles == 0 ? 0.0
                            : static_cast<double>(frozen_tiles) / static_cast<double>(total_tiles);
  }
};

/// Marks tiles whose learned window exceeds config.max_trained_len as
/// infinite-window tiles.
FreezeResult freeze_for_inference(ModelParams params, const ModelConfig& config);

}  // namespace mscreen
