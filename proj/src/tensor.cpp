#include "mscreen/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace mscreen {

namespace {

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    throw std::invalid_argument(std::string(what) + ": expected a matrix, got shape " +
                                t.shape_string());
  }
}

// Parallelize only when the product is large enough to amortize the fork.
constexpr std::size_t kParallelFlops = 1 << 16;

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(product(shape_), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (product(shape_) != data_.size()) {
    throw std::invalid_argument("Tensor: shape " + shape_string() + " does not match " +
                                std::to_string(data_.size()) + " values");
  }
}

Tensor Tensor::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw std::invalid_argument("Tensor::from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t = matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
  return t;
}



void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor& Tensor::operator+=(const Tensor& other) {
  if (!same_shape(other)) {
    throw std::invalid_argument("Tensor +=: shape " + shape_string() + " vs " +
                                other.shape_string());
  }
  for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += other.data_[k];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (double& v : data_) v *= s;
  return *this;
}

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t k = 0; k < shape_.size(); ++k) {
    if (k) os << 'x';
    os << shape_[k];
  }
  os << ']';
  return os.str();
}

Tensor zeros_like(const Tensor& t) { return Tensor(t.shape(), 0.0); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner extents differ, " + a.shape_string() + " @ " +
                                b.shape_string());
  }
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c = Tensor::matrix(m, n);
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* pc = c.values().data();
  const bool par = m * k * n >= kParallelFlops;
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    double* crow = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = pa[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  return c;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_tn");
  require_matrix(b, "matmul_tn");
  if (a.rows() != b.rows()) {
    throw std::invalid_argument("matmul_tn: row extents differ, " + a.shape_string() + "^T @ " +
                                b.shape_string());
  }
  const std::size_t m = a.cols(), k = a.rows(), n = b.cols();
  Tensor c = Tensor::matrix(m, n);
  const double* pa = a.values().data();
  const double* pb = b.values().data();
  double* pc = c.values().data();
  const bool par = m * k * n >= kParallelFlops;
#pragma omp parallel for schedule(static) if (par)
  for (std::ptrdiff_t i = 0; i < static_cast<std::ptrdiff_t>(m); ++i) {
    double* crow = pc + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double api = pa[p * m + i];
      if (api == 0.0) continue;
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += api * brow[j];
    }
  }
  return c;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw std::invalid_argument("matmul_nt: column extents differ, " + a.shape_string() +
                                " @ " + b.shape_string() + "^T");
  }
  // An explicit transpose lets the row-streaming kernel vectorize.
  return matmul(a, transpose(b));
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  Tensor t = Tensor::matrix(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
  return t;
}

MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& dc) {
  return {matmul_nt(dc, b), matmul_tn(a, dc)};
}


double l2_norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

std::vector<double> row_norms(const Tensor& x) {
  std::vector<double> n(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) n[i] = l2_norm(x.row(i));
  return n;
}

Tensor rownorm(const Tensor& x, double eps) {
  Tensor y = x;
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const double inv = 1.0 / std::max(l2_norm(x.row(i)), eps);
    for (double& v : y.row(i)) v *= inv;
  }
  return y;
}

Tensor rownorm_backward(const Tensor& x, const Tensor& dy, double eps) {
  Tensor dx = zeros_like(x);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    const auto xr = x.row(i);
    const auto gr = dy.row(i);
    auto out = dx.row(i);
    const double n = l2_norm(xr);
    if (n < eps) {
      for (std::size_t k = 0; k < xr.size(); ++k) out[k] = gr[k] / eps;
      continue;
    }
    // y = x/n, dx = (dy - y (y.dy)) / n
    const double proj = dot(xr, gr) / (n * n);
    for (std::size_t k = 0; k < xr.size(); ++k) out[k] = (gr[k] - xr[k] * proj) / n;
  }
  return dx;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument("max_abs_diff: shape " + a.shape_string() + " vs " +
                                b.shape_string());
  }
  double m = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a[k] - b[k]));
  return m;
}

GradCheckReport grad_check(const std::function<double()>& f, std::span<const ParamSlot> slots,
                           double h) {
  GradCheckReport report;
  for (const ParamSlot& slot : slots) {
    if (slot.value.size() != slot.analytic.size()) {
      throw std::invalid_argument("grad_check: slot '" + slot.name +
                                  "' has mismatched value/gradient sizes");
    }
    double diff2 = 0.0, an2 = 0.0, num2 = 0.0;
    for (std::size_t k = 0; k < slot.value.size(); ++k) {
      const double saved = slot.value[k];
      slot.value[k] = saved + h;
      const double fp = f();
      slot.value[k] = saved - h;
      const double fm = f();
      slot.value[k] = saved;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        report.ok = false;
        report.failure = "non-finite objective at " + slot.name + "[" + std::to_string(k) +
                         "] +/- " + std::to_string(h);
        return report;
      }
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic = slot.analytic[k];
      diff2 += (analytic - numeric) * (analytic - numeric);
      an2 += analytic * analytic;
      num2 += numeric * numeric;
    }
    const double denom = std::max({std::sqrt(an2), std::sqrt(num2), 1e-8});
    const double rel = std::sqrt(diff2) / denom;
    report.slots.push_back({slot.name, slot.value.size(), std::sqrt(an2), std::sqrt(num2),
                            std::sqrt(diff2)});
    if (report.worst_param.empty() || rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_param = slot.name;
    }
  }
  return report;
}

}  // namespace mscreen
