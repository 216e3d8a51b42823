#include "mscreen/screening.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace mscreen {

namespace {

constexpr double kPi = std::numbers::pi;

void check_inputs(const Tensor& q, const Tensor& k, const Tensor& v, const char* who) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) {
    throw std::invalid_argument(std::string(who) + ": Q, K, V must be matrices");
  }
  if (q.rows() == 0) throw std::invalid_argument(std::string(who) + ": empty sequence");
  if (q.rows() != k.rows() || q.rows() != v.rows()) {
    throw std::invalid_argument(std::string(who) + ": sequence lengths differ, Q " +
                                q.shape_string() + " K " + k.shape_string() + " V " +
                                v.shape_string());
  }
  if (q.cols() != k.cols()) {
    throw std::invalid_argument(std::string(who) + ": key widths differ, Q " + q.shape_string() +
                                " K " + k.shape_string());
  }
  if (q.cols() < 2) {
    throw std::invalid_argument(std::string(who) + ": key width must be at least 2, got " +
                                std::to_string(q.cols()));
  }
  if (!q.all_finite() || !k.all_finite() || !v.all_finite()) {
    throw std::invalid_argument(std::string(who) + ": non-finite input");
  }
}

// Rotates the leading coordinate pair in place by angle.
void rotate_pair(std::span<double> z, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  const double z0 = z[0], z1 = z[1];
  z[0] = z0 * c + z1 * s;
  z[1] = -z0 * s + z1 * c;
}

// Normalizes rows and applies the positional rotation.
Tensor normalize_and_rotate(const Tensor& x, double rate) {
  Tensor y = rownorm(x);
  if (rate != 0.0) {
    for (std::size_t i = 0; i < y.rows(); ++i) rotate_pair(y.row(i), rate * static_cast<double>(i));
  }
  return y;
}

// Softmask (or its w-derivative) for offsets 0, -1, ..., -(span - 1).
std::vector<double> mask_table(std::size_t span, double w, bool infinite, bool derivative) {
  std::vector<double> m(span);
  for (std::size_t d = 0; d < span; ++d) {
    const long delta = -static_cast<long>(d);
    m[d] = derivative ? softmask_dw(delta, w, infinite) : softmask(delta, w, infinite);
  }
  return m;
}

double effective_rate(const ScreeningScalars& sc) {
  return sc.inference_infinite ? 0.0 : mipe_rate(sc.window(), sc.w_th);
}

}  // namespace

double ScreeningScalars::window() const {
  return inference_infinite ? std::numeric_limits<double>::infinity() : derive_window(s_w);
}

double ScreeningScalars::sharpness() const { return derive_sharpness(s_r); }

double derive_window(double s_w) { return std::exp(s_w) + 1.0; }
double derive_sharpness(double s_r) { return std::exp(s_r) + 1.0; }

double mipe_gamma(double w, double w_th) {
  if (w >= w_th) return 0.0;
  return 0.5 * (std::cos(kPi * w / w_th) + 1.0);
}

double mipe_gamma_derivative(double w, double w_th) {
  if (w >= w_th) return 0.0;
  return -0.5 * std::sin(kPi * w / w_th) * kPi / w_th;
}

double mipe_rate(double w, double w_th) {
  if (!std::isfinite(w)) return 0.0;
  return kPi * mipe_gamma(w, w_th) / w;
}

double mipe_rate_derivative(double w, double w_th) {
  if (!std::isfinite(w)) return 0.0;
  return kPi * (mipe_gamma_derivative(w, w_th) * w - mipe_gamma(w, w_th)) / (w * w);
}

Tensor mipe_rotate(const Tensor& z, std::size_t position, double w, double w_th) {
  if (z.cols() < 2) {
    throw std::invalid_argument("mipe_rotate: need at least two coordinates, got " +
                                z.shape_string());
  }
  Tensor out = z;
  const double angle = mipe_rate(w, w_th) * static_cast<double>(position);
  if (angle != 0.0) {
    for (std::size_t i = 0; i < out.rows(); ++i) rotate_pair(out.row(i), angle);
  }
  return out;
}

namespace {

// 1 - r(1 - s), or 0 at and below the threshold s = 1 - 1/r. The explicit
// comparison keeps the boundary an exact zero despite rounding in r(1 - s).
double trim_base(double s, double r) {
  if (s <= 1.0 - 1.0 / r) return 0.0;
  return std::max(1.0 - r * (1.0 - s), 0.0);
}

}  // namespace

double trim_square(double s, double r) {
  const double t = trim_base(std::clamp(s, -1.0, 1.0), r);
  return t * t;
}

double softmask(long delta, double w, bool infinite) {
  if (delta > 0) return 0.0;
  if (infinite || !std::isfinite(w)) return 1.0;
  const double d = static_cast<double>(delta);
  if (d <= -w) return 0.0;
  return 0.5 * (std::cos(kPi * d / w) + 1.0);
}

double softmask_dw(long delta, double w, bool infinite) {
  if (delta > 0 || infinite || !std::isfinite(w)) return 0.0;
  const double d = static_cast<double>(delta);
  if (d <= -w) return 0.0;
  return 0.5 * std::sin(kPi * d / w) * kPi * d / (w * w);
}

Tensor tanh_norm(const Tensor& x) {
  Tensor y = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double n = l2_norm(x.row(i));
    auto out = y.row(i);
    if (n == 0.0) {
      std::fill(out.begin(), out.end(), 0.0);
      continue;
    }
    const double scale = std::tanh(n) / n;
    for (double& v : out) v *= scale;
  }
  return y;
}

Tensor tanh_norm_backward(const Tensor& x, const Tensor& dy) {
  Tensor dx = zeros_like(x);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto xr = x.row(i);
    const auto gr = dy.row(i);
    auto out = dx.row(i);
    const double n = l2_norm(xr);
    // f(x) = g(n) x with g = tanh(n)/n; J = g I + (g'(n)/n) x x^T.
    double g, gp_over_n;
    if (n < 1e-4) {
      const double n2 = n * n;
      g = 1.0 - n2 / 3.0 + 2.0 * n2 * n2 / 15.0;
      gp_over_n = -2.0 / 3.0 + 8.0 * n2 / 15.0;
    } else {
      const double th = std::tanh(n);
      g = th / n;
      gp_over_n = ((1.0 - th * th) * n - th) / (n * n * n);
    }
    const double xg = dot(xr, gr);
    for (std::size_t k = 0; k < xr.size(); ++k) out[k] = g * gr[k] + gp_over_n * xg * xr[k];
  }
  return dx;
}

bool RelevanceMap::in_window(std::size_t i, std::size_t j) const {
  if (j > i) return false;
  if (!std::isfinite(window)) return true;
  return static_cast<double>(j) - static_cast<double>(i) > -window;
}

double relevance_nonzero_fraction(const RelevanceMap& map) {
  std::size_t inside = 0, nonzero = 0;
  for (std::size_t i = 0; i < map.alpha.rows(); ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      if (!map.in_window(i, j)) continue;
      ++inside;
      if (map.alpha(i, j) > 0.0) ++nonzero;
    }
  }
  return inside == 0 ? 0.0 : static_cast<double>(nonzero) / static_cast<double>(inside);
}

std::size_t window_span(double w, bool infinite, std::size_t seq_len) {
  if (infinite || !std::isfinite(w)) return seq_len;
  const double c = std::ceil(w);
  if (c >= static_cast<double>(seq_len)) return seq_len;
  return static_cast<std::size_t>(c);
}

ScreeningOutput screening_forward(const Tensor& q, const Tensor& k, const Tensor& v,
                                  const ScreeningScalars& scalars, bool want_relevance) {
  check_inputs(q, k, v, "screening_forward");
  const std::size_t T = q.rows();
  const double w = scalars.window();
  const double r = scalars.sharpness();
  const double rate = effective_rate(scalars);

  const Tensor qt = normalize_and_rotate(q, rate);
  const Tensor kt = normalize_and_rotate(k, rate);
  const Tensor vb = rownorm(v);

  Tensor alpha = Tensor::matrix(T, T);
  for (std::size_t i = 0; i < T; ++i) {
    for (std::size_t j = 0; j < T; ++j) {
      const double s = dot(qt.row(i), kt.row(j));
      const long delta = static_cast<long>(j) - static_cast<long>(i);
      alpha(i, j) = trim_square(s, r) * softmask(delta, w, scalars.inference_infinite);
    }
  }

  Tensor h = Tensor::matrix(T, v.cols());
  for (std::size_t i = 0; i < T; ++i) {
    auto hi = h.row(i);
    for (std::size_t j = 0; j < T; ++j) {
      const double a = alpha(i, j);
      const auto vj = vb.row(j);
      for (std::size_t c = 0; c < hi.size(); ++c) hi[c] += a * vj[c];
    }
  }

  ScreeningOutput out{tanh_norm(h), std::nullopt};
  if (want_relevance) {
    RelevanceMap map;
    map.alpha = std::move(alpha);
    map.window = w;
    map.acceptance_width = 1.0 / r;
    map.nonzero_fraction = relevance_nonzero_fraction(map);
    out.relevance = std::move(map);
  }
  return out;
}

Tensor screening_forward_windowed(const Tensor& q, const Tensor& k, const Tensor& v,
                                  const ScreeningScalars& scalars, ScreeningCache* cache) {
  check_inputs(q, k, v, "screening_forward_windowed");
  const std::size_t T = q.rows();
  const std::size_t dv = v.cols();
  const bool inf = scalars.inference_infinite;
  const double w = scalars.window();
  const double r = scalars.sharpness();
  const double rate = effective_rate(scalars);
  const std::size_t span = window_span(w, inf, T);

  Tensor qt = normalize_and_rotate(q, rate);
  Tensor kt = normalize_and_rotate(k, rate);
  Tensor vb = rownorm(v);
  Tensor h = Tensor::matrix(T, dv);
  const std::vector<double> mask = mask_table(span, w, inf, false);

#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t si = 0; si < static_cast<std::ptrdiff_t>(T); ++si) {
    const std::size_t i = static_cast<std::size_t>(si);
    const std::size_t j0 = i + 1 >= span ? i + 1 - span : 0;
    const auto qi = qt.row(i);
    auto hi = h.row(i);
    for (std::size_t j = j0; j <= i; ++j) {
      const double a = trim_square(dot(qi, kt.row(j)), r);
      if (a == 0.0) continue;
      const double ad = a * mask[i - j];
      const auto vj = vb.row(j);
      for (std::size_t c = 0; c < dv; ++c) hi[c] += ad * vj[c];
    }
  }

  Tensor u = tanh_norm(h);
  if (cache != nullptr) {
    cache->scalars = scalars;
    cache->q_raw = q;
    cache->k_raw = k;
    cache->v_raw = v;
    cache->q_rot = std::move(qt);
    cache->k_rot = std::move(kt);
    cache->v_unit = std::move(vb);
    cache->h = std::move(h);
  }
  return u;
}

ScreeningGrads screening_backward(const ScreeningCache& cache, const Tensor& du) {
  const ScreeningScalars& sc = cache.scalars;
  const std::size_t T = cache.q_rot.rows();
  const std::size_t dk = cache.q_rot.cols();
  const std::size_t dv = cache.v_unit.cols();
  const bool inf = sc.inference_infinite;
  const double w = sc.window();
  const double r = sc.sharpness();
  const double rate = effective_rate(sc);
  const std::size_t span = window_span(w, inf, T);
  const Tensor& qt = cache.q_rot;
  const Tensor& kt = cache.k_rot;
  const Tensor& vb = cache.v_unit;

  const Tensor dh = tanh_norm_backward(cache.h, du);

  Tensor dqt = Tensor::matrix(T, dk);
  Tensor dkt = Tensor::matrix(T, dk);
  Tensor dvb = Tensor::matrix(T, dv);
  // Per-row partial sums of the scalar gradients; reduced serially below so
  // the result does not depend on the thread count.
  std::vector<double> dr_rows(T, 0.0), dw_rows(T, 0.0);
  const std::vector<double> mask = mask_table(span, w, inf, false);
  const std::vector<double> mask_dw = mask_table(span, w, inf, true);

  // Query side: rows are independent.
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t si = 0; si < static_cast<std::ptrdiff_t>(T); ++si) {
    const std::size_t i = static_cast<std::size_t>(si);
    const std::size_t j0 = i + 1 >= span ? i + 1 - span : 0;
    const auto qi = qt.row(i);
    const auto dhi = dh.row(i);
    auto dqi = dqt.row(i);
    double dr = 0.0, dw = 0.0;
    for (std::size_t j = j0; j <= i; ++j) {
      const auto kj = kt.row(j);
      const double s = std::clamp(dot(qi, kj), -1.0, 1.0);
      const double t = trim_base(s, r);
      if (t <= 0.0) continue;
      const double m = mask[i - j];
      const double g = dot(dhi, vb.row(j));
      const double da = g * m;
      const double ds = da * 2.0 * t * r;
      for (std::size_t c = 0; c < dk; ++c) dqi[c] += ds * kj[c];
      dr += da * (-2.0 * t * (1.0 - s));
      dw += g * t * t * mask_dw[i - j];
    }
    dr_rows[i] = dr;
    dw_rows[i] = dw;
  }

  // Key/value side: iterate over the queries that can see key j.
#pragma omp parallel for schedule(static)
  for (std::ptrdiff_t sj = 0; sj < static_cast<std::ptrdiff_t>(T); ++sj) {
    const std::size_t j = static_cast<std::size_t>(sj);
    const std::size_t i1 = std::min(T, j + span);
    const auto kj = kt.row(j);
    const auto vj = vb.row(j);
    auto dkj = dkt.row(j);
    auto dvj = dvb.row(j);
    for (std::size_t i = j; i < i1; ++i) {
      const auto qi = qt.row(i);
      const double s = std::clamp(dot(qi, kj), -1.0, 1.0);
      const double t = trim_base(s, r);
      if (t <= 0.0) continue;
      const double m = mask[i - j];
      const double ad = t * t * m;
      const auto dhi = dh.row(i);
      const double ds = dot(dhi, vj) * m * 2.0 * t * r;
      for (std::size_t c = 0; c < dk; ++c) dkj[c] += ds * qi[c];
      for (std::size_t c = 0; c < dv; ++c) dvj[c] += ad * dhi[c];
    }
  }

  // Undo the rotation; collect the gradient of the rotation rate.
  double drate = 0.0;
  auto unrotate = [&](Tensor& grad, const Tensor& rotated) {
    for (std::size_t i = 0; i < T; ++i) {
      auto g = grad.row(i);
      const auto z = rotated.row(i);
      const double pos = static_cast<double>(i);
      drate += pos * (g[0] * z[1] - g[1] * z[0]);
      if (rate == 0.0) continue;
      const double angle = rate * pos;
      const double c = std::cos(angle), s = std::sin(angle);
      const double g0 = g[0], g1 = g[1];
      g[0] = g0 * c - g1 * s;
      g[1] = g0 * s + g1 * c;
    }
  };
  unrotate(dqt, qt);
  unrotate(dkt, kt);

  ScreeningGrads grads;
  grads.dq = rownorm_backward(cache.q_raw, dqt);
  grads.dk = rownorm_backward(cache.k_raw, dkt);
  grads.dv = rownorm_backward(cache.v_raw, dvb);

  double dr_total = 0.0, dw_total = 0.0;
  for (std::size_t i = 0; i < T; ++i) {
    dr_total += dr_rows[i];
    dw_total += dw_rows[i];
  }
  grads.d_s_r = dr_total * std::exp(sc.s_r);
  if (!inf) {
    dw_total += drate * mipe_rate_derivative(w, sc.w_th);
    grads.d_s_w = dw_total * std::exp(sc.s_w);
  }
  return grads;
}

}  // namespace mscreen
