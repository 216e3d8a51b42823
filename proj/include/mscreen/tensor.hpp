#pragma once

// Dense row-major tensors and the handful of differentiable primitives the
// models are built from. Every backward pass here is checked against central
// differences in tests/test_tensor.cpp.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mscreen {

/// Floor applied to every norm before dividing by it.
inline constexpr double kNormEps = 1e-12;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor({rows, cols}, fill);
  }
  static Tensor from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor identity(std::size_t n);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Matrix view. Rank-1 tensors behave as a single row.
  std::size_t rows() const { return shape_.size() < 2 ? 1 : shape_[0]; }
  std::size_t cols() const {
    if (shape_.empty()) return 1;
    return shape_.size() == 1 ? shape_[0] : shape_[1];
  }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols() + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols() + j]; }
  double& operator[](std::size_t k) { return data_[k]; }
  double operator[](std::size_t k) const { return data_[k]; }

  std::span<double> row(std::size_t i) { return {data_.data() + i * cols(), cols()}; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols(), cols()}; }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  void fill(double v);
  bool all_finite() const;
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(double s);

  std::string shape_string() const;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

Tensor zeros_like(const Tensor& t);

/// a @ b. Throws std::invalid_argument naming both shapes on mismatch.
Tensor matmul(const Tensor& a, const Tensor& b);
/// a^T @ b without materializing the transpose.
Tensor matmul_tn(const Tensor& a, const Tensor& b);
/// a @ b^T without materializing the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// Gradients of C = A @ B given dC.
struct MatmulGrads {
  Tensor da;
  Tensor db;
};
MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& dc);

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}
double l2_norm(std::span<const double> a);

/// Divides each row by max(||row||, eps).
Tensor rownorm(const Tensor& x, double eps = kNormEps);
/// Row norms as used by rownorm (unfloored).
std::vector<double> row_norms(const Tensor& x);
/// Gradient of rownorm given the input and upstream gradient.
Tensor rownorm_backward(const Tensor& x, const Tensor& dy, double eps = kNormEps);

double max_abs_diff(const Tensor& a, const Tensor& b);

// ---------------------------------------------------------------------------
// Finite-difference gradient checking.

/// One parameter block: its live values (perturbed in place during the check)
/// and the analytic gradient to compare against.
struct ParamSlot {
  std::string name;
  std::span<double> value;
  std::span<const double> analytic;
};

struct SlotError {
  std::string name;
  std::size_t size = 0;
  double analytic_norm = 0.0;
  double numeric_norm = 0.0;
  double diff_norm = 0.0;
};

struct GradCheckReport {
  std::vector<SlotError> slots;
  double max_rel_error = 0.0;
  std::string worst_param;
  bool ok = true;  // false if f was non-finite at some probe
  std::string failure;
};

/// Compares each slot's analytic gradient with central differences of f.
/// Error per slot is ||analytic - numeric|| / max(||analytic||, ||numeric||, 1e-8);
/// the report carries the maximum over slots.
GradCheckReport grad_check(const std::function<double()>& f, std::span<const ParamSlot> slots,
                           double h = 1e-5);

}  // namespace mscreen
