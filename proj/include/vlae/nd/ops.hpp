#pragma once

#include <cstddef>
#include <vector>

#include "vlae/nd/tape.hpp"

namespace vlae::nd {

enum class Unary { negate, exp, log, sigmoid, softplus, elu, relu, square };
enum class Binary { add, sub, mul, div };
enum class Reduce { sum, mean, logsumexp };

/// Binary ops accept identical shapes or a single-element operand on either side.
Var elementwise(Binary kind, Var a, Var b);
Var elementwise(Unary kind, Var a);

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
Var neg(Var a);
Var exp(Var a);
Var log(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
/// ELU with unit alpha.
Var elu(Var a);
Var relu(Var a);
Var square(Var a);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
/// Elementwise clamp; gradient is zero where the bound is active.
Var clamp(Var a, double lo, double hi);

/// Multiplication by a constant tensor of the same shape.
Var mul(Var a, const Tensor& c);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator-(Var a) { return neg(a); }
inline Var operator*(Var a, double c) { return scale(a, c); }
inline Var operator*(double c, Var a) { return scale(a, c); }
inline Var operator+(Var a, double c) { return add_scalar(a, c); }
inline Var operator-(Var a, double c) { return add_scalar(a, -c); }

Var matmul(Var a, Var b);

/// Adds b (one value per entry of axis 1) to x of rank >= 2.
Var add_bias(Var x, Var b);

struct Padding {
  std::size_t top = 0, bottom = 0, left = 0, right = 0;

  static Padding same(std::size_t kh, std::size_t kw) { return {kh / 2, kh / 2, kw / 2, kw / 2}; }
};

/// Cross-correlation of input [C_in x H x W] or [N x C_in x H x W] with
/// kernel [C_out x C_in x kh x kw]. When a mask is given the effective kernel
/// is kernel * mask and masked taps receive zero gradient.
Var conv2d(Var input, Var kernel, const Tensor* mask, Padding pad, std::size_t stride = 1);
inline Var conv2d(Var input, Var kernel, const Tensor& mask, Padding pad) {
  return conv2d(input, kernel, &mask, pad, 1);
}

/// Reduction over the given axes; reduced axes are removed from the result.
Var reduce(Reduce kind, Var x, std::vector<std::size_t> axes);
Var sum(Var x);
Var mean(Var x);
Var logsumexp(Var x, std::vector<std::size_t> axes);
/// Sums every axis except the leading (batch) axis: [N x ...] -> [N].
Var sum_per_row(Var x);

Var reshape(Var x, Shape shape);
Var slice(Var x, std::size_t axis, std::size_t start, std::size_t length);
Var concat(const std::vector<Var>& parts, std::size_t axis);

/// Per-element Bernoulli log-mass of targets under sigmoid(logits), with the
/// probability clamped to [1e-7, 1 - 1e-7] before the log.
struct BernoulliLogMass {
  Var log_mass;
  std::size_t clamp_events = 0;
};
inline constexpr double kProbClamp = 1e-7;
BernoulliLogMass bernoulli_log_mass(Var logits, const Tensor& targets);

}  // namespace vlae::nd
