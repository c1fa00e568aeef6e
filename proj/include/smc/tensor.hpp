#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace smc {

/// Raised when a caller breaks a documented precondition (shape mismatch,
/// out-of-range index, non-scalar loss root, ...).
class ContractViolation : public std::logic_error {
public:
  using std::logic_error::logic_error;
};

/// A NaN or infinity appeared while evaluating a primitive.
class NumericFault : public std::runtime_error {
public:
  NumericFault(std::string primitive, const std::string& detail)
      : std::runtime_error("numeric fault in '" + primitive + "': " + detail),
        primitive_(std::move(primitive)) {}

  const std::string& primitive() const noexcept { return primitive_; }

private:
  std::string primitive_;
};

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ContractViolation(message);
}

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

/// Dense row-major array of doubles. The gradient buffer is only populated
/// on tensors handed back by Tape::eval_with_grad.
struct Tensor {
  Shape shape;
  std::vector<double> values;
  std::optional<std::vector<double>> grad;

  Tensor() : shape{1}, values(1, 0.0) {}

  Tensor(Shape s, std::vector<double> v) : shape(std::move(s)), values(std::move(v)) {
    for (auto d : shape) require(d > 0, "tensor dimensions must be positive, got " + shape_string(shape));
    require(shape_size(shape) == values.size(),
            "tensor shape " + shape_string(shape) + " does not match " + std::to_string(values.size()) + " values");
  }

  static Tensor zeros(Shape s) {
    const auto n = shape_size(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
  }
  static Tensor filled(Shape s, double value) {
    const auto n = shape_size(s);
    return Tensor(std::move(s), std::vector<double>(n, value));
  }
  static Tensor scalar(double value) { return Tensor({1}, {value}); }
  static Tensor vector(std::vector<double> v) {
    const auto n = v.size();
    return Tensor({n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
  }

  std::size_t size() const noexcept { return values.size(); }
  std::size_t rank() const noexcept { return shape.size(); }
  bool is_scalar() const noexcept { return values.size() == 1; }

  /// Leading dimension; a rank-1 tensor is one row.
  std::size_t rows() const noexcept { return shape.size() >= 2 ? shape[0] : 1; }
  std::size_t cols() const noexcept { return shape.empty() ? 1 : values.size() / rows(); }

  double& operator()(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }

  double item() const {
    require(is_scalar(), "item() on non-scalar tensor " + shape_string(shape));
    return values[0];
  }
};

}  // namespace smc
