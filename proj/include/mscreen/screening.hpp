#pragma once

// Screening unit: unit-normalized queries/keys/values, a single-pair rotary
// positional rotation (MiPE), thresholded relevance (Trim-and-Square), a
// raised-cosine causal window (softmask), unnormalized aggregation and
// TanhNorm.
//
// Two forward kernels produce identical outputs:
//   screening_forward           serial dense O(T^2) reference, optional relevance map
//   screening_forward_windowed  OpenMP over query rows, visits only in-window keys
// Positions are 0-based.

#include <cstddef>
#include <optional>
#include <vector>

#include "mscreen/tensor.hpp"

namespace mscreen {

inline constexpr double kDefaultMipeThreshold = 256.0;

struct ScreeningScalars {
  double s_w = 0.0;  // log(w - 1)
  double s_r = 0.0;  // log(r - 1)
  double w_th = kDefaultMipeThreshold;
  bool inference_infinite = false;

  double window() const;     // w = exp(s_w) + 1, +inf when inference_infinite
  double sharpness() const;  // r = exp(s_r) + 1
};

double derive_window(double s_w);
double derive_sharpness(double s_r);

/// MiPE angle scale: 1/2 (cos(pi w / w_th) + 1) below the threshold, 0 at or above it.
double mipe_gamma(double w, double w_th);
double mipe_gamma_derivative(double w, double w_th);

/// Per-position rotation rate pi * gamma(w) / w (zero for infinite w).
double mipe_rate(double w, double w_th);
double mipe_rate_derivative(double w, double w_th);

/// Rotates the first two coordinates of a row vector by position * mipe_rate(w).
Tensor mipe_rotate(const Tensor& z, std::size_t position, double w, double w_th);

/// [max(1 - r(1 - s), 0)]^2 with s clamped to [-1, 1]. Exactly zero for s <= 1 - 1/r.
double trim_square(double s, double r);

/// Raised-cosine causal mask over -w < delta <= 0, delta = j - i.
double softmask(long delta, double w, bool infinite = false);
/// d softmask / d w (zero outside the window and in the infinite limit).
double softmask_dw(long delta, double w, bool infinite = false);

/// x * tanh(||x||) / ||x||, zero at the origin. Works row-wise on matrices.
Tensor tanh_norm(const Tensor& x);
Tensor tanh_norm_backward(const Tensor& x, const Tensor& dy);

/// Distance-aware relevance of one tile, as exported for inspection.
struct RelevanceMap {
  Tensor alpha;  // T x T, alpha(i, j) in [0, 1]
  std::size_t layer = 0;
  std::size_t head = 0;
  double window = 0.0;  // +inf for infinite tiles
  double acceptance_width = 0.0;  // 1 / r
  double nonzero_fraction = 0.0;  // Pr(alpha > 0) over in-window cells

  /// j <= i and (infinite window or j - i > -w).
  bool in_window(std::size_t i, std::size_t j) const;
};

/// Computes the in-window nonzero fraction from the matrix and window.
double relevance_nonzero_fraction(const RelevanceMap& map);

struct ScreeningOutput {
  Tensor u;
  std::optional<RelevanceMap> relevance;
};

/// Serial dense reference. Throws std::invalid_argument on shape errors or
/// non-finite input.
ScreeningOutput screening_forward(const Tensor& q, const Tensor& k, const Tensor& v,
                                  const ScreeningScalars& scalars, bool want_relevance = false);

/// Intermediate values kept by the windowed forward for the backward pass.
struct ScreeningCache {
  ScreeningScalars scalars;
  Tensor q_raw, k_raw, v_raw;  // inputs, needed for the normalization backward
  Tensor q_rot, k_rot;         // normalized then rotated
  Tensor v_unit;               // normalized values
  Tensor h;                    // aggregated values before TanhNorm
};

/// Windowed kernel. Visits key positions i - ceil(w) < j <= i only.
Tensor screening_forward_windowed(const Tensor& q, const Tensor& k, const Tensor& v,
                                  const ScreeningScalars& scalars,
                                  ScreeningCache* cache = nullptr);

struct ScreeningGrads {
  Tensor dq, dk, dv;
  double d_s_w = 0.0;
  double d_s_r = 0.0;
};

ScreeningGrads screening_backward(const ScreeningCache& cache, const Tensor& du);

/// Number of key positions visited per query row (T for infinite windows).
std::size_t window_span(double w, bool infinite, std::size_t seq_len);

}  // namespace mscreen
