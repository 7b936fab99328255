#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cpkd/common.hpp"

namespace cpkd {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

namespace detail {
struct Node;
}

// Handle to one node of a dynamically taped computation graph. Values are
// immutable once created; ops build new nodes that keep their inputs alive.
// Everything is double precision. Scalars are represented with shape {1}.
class Value {
 public:
  Value() = default;

  // Graph input without gradient tracking.
  static Value constant(std::vector<double> data, Shape shape);
  // Graph input that accumulates a gradient during backward().
  static Value variable(std::vector<double> data, Shape shape);
  static Value scalar(double x);                       // constant, shape {1}
  static Value from_mat(const Mat& m, bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const;
  std::size_t numel() const;
  const std::vector<double>& data() const;
  double item() const;  // numel() must be 1
  Mat to_mat() const;   // rank must be 2

  bool requires_grad() const;
  // Gradient accumulated by backward(); error if none was populated.
  const std::vector<double>& grad() const;
  // Gradient, or zeros when this value did not participate in backward().
  std::vector<double> grad_or_zero() const;

 private:
  explicit Value(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}
  std::shared_ptr<detail::Node> n_;
  friend struct ValueAccess;
};

// --- op suite -------------------------------------------------------------
// Elementwise binary ops broadcast rank<=2 shapes numpy-style; equal shapes
// of any rank pass through directly. Shape mismatches raise ValidationError
// naming both shapes.

Value add(const Value& a, const Value& b);
Value sub(const Value& a, const Value& b);
Value mul(const Value& a, const Value& b);
Value divide(const Value& a, const Value& b);
Value neg(const Value& a);
Value affine(const Value& a, double scale, double shift);  // scale*a + shift

Value matmul(const Value& a, const Value& b);  // [m,k]x[k,n] -> [m,n]

Value exp_v(const Value& a);
Value log_v(const Value& a);  // error on any element <= 0
Value sigmoid(const Value& a);
Value tanh_v(const Value& a);
Value softplus(const Value& a);  // log(1 + e^x), evaluated stably

// Gradient passes through on the closed interval [lo, hi] (boundary
// included) and is zero outside of it.
Value clamp(const Value& a, double lo, double hi);
Value max_const(const Value& a, double c);  // max(a, c) elementwise
Value min_const(const Value& a, double c);  // min(a, c) elementwise

Value sum(const Value& a, int axis);   // rank-2 -> rank-1
Value mean(const Value& a, int axis);  // rank-2 -> rank-1
Value sum_all(const Value& a);         // -> {1}
Value mean_all(const Value& a);        // -> {1}

Value softmax(const Value& a, int axis);    // rank-2, axis 0 or 1
Value logsumexp(const Value& a, int axis);  // rank-2 -> rank-1
Value logsumexp_all(const Value& a);        // any rank -> {1}, stable

Value concat(std::span<const Value> parts, int axis);  // rank-1 axis 0, rank-2 axis 0/1
Value slice_rows(const Value& a, std::size_t i0, std::size_t i1);  // axis-0 slice
Value column(const Value& a, std::size_t j);                       // rank-2 -> rank-1
Value element(const Value& a, std::size_t i, std::size_t j);       // rank-2 -> {1}
Value element(const Value& a, std::size_t i);                      // rank-1 -> {1}
Value reshape(const Value& a, Shape shape);

// Temporal convolution over axis 0 with zero padding chosen so the output
// has the same length as the input. x: [T, Cin], w: [K, Cin, Cout] with
// taps at offsets (j - (K-1)/2) * dilation.
Value conv1d(const Value& x, const Value& w, std::size_t dilation);

inline Value operator+(const Value& a, const Value& b) { return add(a, b); }
inline Value operator-(const Value& a, const Value& b) { return sub(a, b); }
inline Value operator*(const Value& a, const Value& b) { return mul(a, b); }
inline Value operator/(const Value& a, const Value& b) { return divide(a, b); }
inline Value operator-(const Value& a) { return neg(a); }

// Reverse-mode sweep from a scalar root. Visits each reachable node exactly
// once in reverse topological order. A second call on the same root is a
// contract violation and throws.
void backward(const Value& root);

// Max over coordinates of |analytic - central_difference| / max(1, |cd|).
// `fn` receives the flat point as a Value (variable for the analytic pass,
// constant for the 2n numeric evaluations) and must return a scalar.
double grad_check(const std::function<Value(const Value&)>& fn, std::vector<double> point, double step);

}  // namespace cpkd
