#include "vlae/nd/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

namespace vlae::nd {
namespace {

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double stable_softplus(double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); }

void require_same_tape(Var a, Var b, const char* op) {
  if (&a.tape() != &b.tape()) throw std::invalid_argument(std::string(op) + ": operands on different tapes");
}

Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.size() == 1) return a.shape();
  if (a.size() == 1) return b.shape();
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a.shape()) + " and " +
                   shape_str(b.shape()));
}

void accumulate(Tensor* slot, std::size_t i, double v, bool reduce_to_scalar) {
  if (!slot) return;
  (*slot)[reduce_to_scalar ? 0 : i] += v;
}

}  // namespace

Var elementwise(Binary kind, Var a, Var b) {
  static constexpr const char* names[] = {"add", "sub", "mul", "div"};
  const char* op = names[static_cast<int>(kind)];
  require_same_tape(a, b, op);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  Shape out_shape = broadcast_shape(av, bv, op);
  const bool a_scalar = av.size() == 1 && av.shape() != out_shape;
  const bool b_scalar = bv.size() == 1 && bv.shape() != out_shape;
  Tensor out(out_shape);
  const std::size_t n = out.size();
  auto A = [&](std::size_t i) { return a_scalar ? av[0] : av[i]; };
  auto B = [&](std::size_t i) { return b_scalar ? bv[0] : bv[i]; };
  if (kind == Binary::div) {
    for (std::size_t i = 0; i < bv.size(); ++i) {
      if (bv[i] == 0.0) throw DomainError("div: division by zero");
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    switch (kind) {
      case Binary::add: out[i] = A(i) + B(i); break;
      case Binary::sub: out[i] = A(i) - B(i); break;
      case Binary::mul: out[i] = A(i) * B(i); break;
      case Binary::div: out[i] = A(i) / B(i); break;
    }
  }
  Tape* tape = &a.tape();
  const auto ia = a.id(), ib = b.id();
  return tape->record(
      std::move(out), {a, b},
      [tape, ia, ib, kind, a_scalar, b_scalar](const Tensor& g, GradSlots gin) {
        const Tensor& av = tape->value(ia);
        const Tensor& bv = tape->value(ib);
        auto A = [&](std::size_t i) { return a_scalar ? av[0] : av[i]; };
        auto B = [&](std::size_t i) { return b_scalar ? bv[0] : bv[i]; };
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double gi = g[i];
          switch (kind) {
            case Binary::add:
              accumulate(gin[0], i, gi, a_scalar);
              accumulate(gin[1], i, gi, b_scalar);
              break;
            case Binary::sub:
              accumulate(gin[0], i, gi, a_scalar);
              accumulate(gin[1], i, -gi, b_scalar);
              break;
            case Binary::mul:
              accumulate(gin[0], i, gi * B(i), a_scalar);
              accumulate(gin[1], i, gi * A(i), b_scalar);
              break;
            case Binary::div: {
              const double bi = B(i);
              accumulate(gin[0], i, gi / bi, a_scalar);
              accumulate(gin[1], i, -gi * A(i) / (bi * bi), b_scalar);
              break;
            }
          }
        }
      },
      op);
}

Var elementwise(Unary kind, Var a) {
  static constexpr const char* names[] = {"negate", "exp", "log", "sigmoid", "softplus", "elu", "relu", "square"};
  const char* op = names[static_cast<int>(kind)];
  const Tensor& av = a.value();
  if (kind == Unary::log) {
    for (double v : av.data()) {
      if (!(v > 0.0)) throw DomainError("log: non-positive operand " + std::to_string(v));
    }
  }
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) {
    const double x = av[i];
    switch (kind) {
      case Unary::negate: out[i] = -x; break;
      case Unary::exp: out[i] = std::exp(x); break;
      case Unary::log: out[i] = std::log(x); break;
      case Unary::sigmoid: out[i] = stable_sigmoid(x); break;
      case Unary::softplus: out[i] = stable_softplus(x); break;
      case Unary::elu: out[i] = x > 0 ? x : std::expm1(x); break;
      case Unary::relu: out[i] = x > 0 ? x : 0.0; break;
      case Unary::square: out[i] = x * x; break;
    }
  }
  Tape* tape = &a.tape();
  const auto ia = a.id();
  Var result;
  // The output id is only known after recording; capture it through a shared slot.
  auto out_id = std::make_shared<std::uint32_t>(0);
  result = tape->record(
      std::move(out), {a},
      [tape, ia, kind, out_id](const Tensor& g, GradSlots gin) {
        if (!gin[0]) return;
        const Tensor& x = tape->value(ia);
        const Tensor& y = tape->value(*out_id);
        Tensor& gx = *gin[0];
        for (std::size_t i = 0; i < g.size(); ++i) {
          double d = 0.0;
          switch (kind) {
            case Unary::negate: d = -1.0; break;
            case Unary::exp: d = y[i]; break;
            case Unary::log: d = 1.0 / x[i]; break;
            case Unary::sigmoid: d = y[i] * (1.0 - y[i]); break;
            case Unary::softplus: d = stable_sigmoid(x[i]); break;
            case Unary::elu: d = x[i] > 0 ? 1.0 : y[i] + 1.0; break;
            case Unary::relu: d = x[i] > 0 ? 1.0 : 0.0; break;
            case Unary::square: d = 2.0 * x[i]; break;
          }
          gx[i] += g[i] * d;
        }
      },
      op);
  *out_id = result.id();
  return result;
}

Var add(Var a, Var b) { return elementwise(Binary::add, a, b); }
Var sub(Var a, Var b) { return elementwise(Binary::sub, a, b); }
Var mul(Var a, Var b) { return elementwise(Binary::mul, a, b); }
Var div(Var a, Var b) { return elementwise(Binary::div, a, b); }
Var neg(Var a) { return elementwise(Unary::negate, a); }
Var exp(Var a) { return elementwise(Unary::exp, a); }
Var log(Var a) { return elementwise(Unary::log, a); }
Var sigmoid(Var a) { return elementwise(Unary::sigmoid, a); }
Var softplus(Var a) { return elementwise(Unary::softplus, a); }
Var elu(Var a) { return elementwise(Unary::elu, a); }
Var relu(Var a) { return elementwise(Unary::relu, a); }
Var square(Var a) { return elementwise(Unary::square, a); }

Var scale(Var a, double c) {
  Tensor out = a.value();
  for (auto& v : out.data()) v *= c;
  return a.tape().record(
      std::move(out), {a},
      [c](const Tensor& g, GradSlots gin) {
        if (!gin[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += c * g[i];
      },
      "scale");
}

Var add_scalar(Var a, double c) {
  Tensor out = a.value();
  for (auto& v : out.data()) v += c;
  return a.tape().record(
      std::move(out), {a},
      [](const Tensor& g, GradSlots gin) {
        if (!gin[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
      },
      "add_scalar");
}

Var clamp(Var a, double lo, double hi) {
  Tensor out = a.value();
  for (auto& v : out.data()) v = std::clamp(v, lo, hi);
  Tape* tape = &a.tape();
  const auto ia = a.id();
  return tape->record(
      std::move(out), {a},
      [tape, ia, lo, hi](const Tensor& g, GradSlots gin) {
        if (!gin[0]) return;
        const Tensor& x = tape->value(ia);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (x[i] >= lo && x[i] <= hi) (*gin[0])[i] += g[i];
        }
      },
      "clamp");
}

Var mul(Var a, const Tensor& c) { return mul(a, a.tape().constant(c)); }

namespace {

// Dot product with four independent partial sums (fixed order, so still deterministic).
double dot_lanes(const double* a, const double* b, std::size_t n) {
  double l0 = 0, l1 = 0, l2 = 0, l3 = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    l0 += a[i] * b[i];
    l1 += a[i + 1] * b[i + 1];
    l2 += a[i + 2] * b[i + 2];
    l3 += a[i + 3] * b[i + 3];
  }
  for (; i < n; ++i) l0 += a[i] * b[i];
  return (l0 + l1) + (l2 + l3);
}

}  // namespace

Var matmul(Var a, Var b) {
  require_same_tape(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul: cannot multiply " + shape_str(av.shape()) + " by " + shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out(Shape{m, n});
  const double* A = av.data().data();
  const double* B = bv.data().data();
  double* C = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = A[i * k + p];
      if (aip == 0.0) continue;
      const double* brow = B + p * n;
      double* crow = C + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
  Tape* tape = &a.tape();
  const auto ia = a.id(), ib = b.id();
  return tape->record(
      std::move(out), {a, b},
      [tape, ia, ib, m, k, n](const Tensor& g, GradSlots gin) {
        const double* A = tape->value(ia).data().data();
        const double* B = tape->value(ib).data().data();
        const double* G = g.data().data();
        if (gin[0]) {
          double* gA = gin[0]->data().data();
          for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t p = 0; p < k; ++p) {
              const double* brow = B + p * n;
              const double* grow = G + i * n;
              gA[i * k + p] += dot_lanes(grow, brow, n);
            }
          }
        }
        if (gin[1]) {
          double* gB = gin[1]->data().data();
          for (std::size_t i = 0; i < m; ++i) {
            const double* grow = G + i * n;
            for (std::size_t p = 0; p < k; ++p) {
              const double aip = A[i * k + p];
              if (aip == 0.0) continue;
              double* gbrow = gB + p * n;
              for (std::size_t j = 0; j < n; ++j) gbrow[j] += aip * grow[j];
            }
          }
        }
      },
      "matmul");
}

Var add_bias(Var x, Var b) {
  require_same_tape(x, b, "add_bias");
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  if (xv.rank() < 2 || bv.size() != xv.dim(1)) {
    throw ShapeError("add_bias: bias " + shape_str(bv.shape()) + " does not match axis 1 of " +
                     shape_str(xv.shape()));
  }
  const std::size_t outer = xv.dim(0), ch = xv.dim(1), inner = xv.size() / (outer * ch);
  Tensor out = xv;
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t c = 0; c < ch; ++c) {
      double* row = out.data().data() + (o * ch + c) * inner;
      for (std::size_t i = 0; i < inner; ++i) row[i] += bv[c];
    }
  }
  return x.tape().record(
      std::move(out), {x, b},
      [outer, ch, inner](const Tensor& g, GradSlots gin) {
        if (gin[0]) {
          for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
        }
        if (gin[1]) {
          for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t c = 0; c < ch; ++c) {
              const double* row = g.data().data() + (o * ch + c) * inner;
              double acc = 0.0;
              for (std::size_t i = 0; i < inner; ++i) acc += row[i];
              (*gin[1])[c] += acc;
            }
          }
        }
      },
      "add_bias");
}

namespace {

struct ConvGeometry {
  std::size_t n, cin, h, w, cout, kh, kw, ho, wo, stride;
  Padding pad;

  // Output columns ox whose input column ox*stride + kx - left lies inside [0, w).
  std::pair<std::size_t, std::size_t> ox_range(std::size_t kx) const {
    const long lo_num = static_cast<long>(pad.left) - static_cast<long>(kx);
    const long s = static_cast<long>(stride);
    long lo = lo_num <= 0 ? 0 : (lo_num + s - 1) / s;
    long hi_num = static_cast<long>(w) - 1 + lo_num;
    if (hi_num < 0) return {1, 0};
    long hi = std::min(hi_num / s, static_cast<long>(wo) - 1);
    if (lo > hi) return {1, 0};
    return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
  }
};

}  // namespace

Var conv2d(Var input, Var kernel, const Tensor* mask, Padding pad, std::size_t stride) {
  require_same_tape(input, kernel, "conv2d");
  const Tensor& xv = input.value();
  const Tensor& kv = kernel.value();
  if (kv.rank() != 4) throw ShapeError("conv2d: kernel must be rank 4, got " + shape_str(kv.shape()));
  if (xv.rank() != 3 && xv.rank() != 4) {
    throw ShapeError("conv2d: input must be rank 3 or 4, got " + shape_str(xv.shape()));
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (mask) {
    if (mask->shape() != kv.shape()) {
      throw ShapeError("conv2d: mask shape " + shape_str(mask->shape()) + " differs from kernel shape " +
                       shape_str(kv.shape()));
    }
    for (double m : mask->data()) {
      if (m != 0.0 && m != 1.0) throw std::invalid_argument("conv2d: mask entries must be 0 or 1");
    }
  }
  const bool batched = xv.rank() == 4;
  ConvGeometry geo{};
  geo.n = batched ? xv.dim(0) : 1;
  geo.cin = xv.dim(batched ? 1 : 0);
  geo.h = xv.dim(batched ? 2 : 1);
  geo.w = xv.dim(batched ? 3 : 2);
  geo.cout = kv.dim(0);
  geo.kh = kv.dim(2);
  geo.kw = kv.dim(3);
  geo.stride = stride;
  geo.pad = pad;
  if (kv.dim(1) != geo.cin) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(kv.dim(1)) + " input channels, input has " +
                     std::to_string(geo.cin));
  }
  if (geo.h + pad.top + pad.bottom < geo.kh || geo.w + pad.left + pad.right < geo.kw) {
    throw ShapeError("conv2d: kernel larger than padded input");
  }
  geo.ho = (geo.h + pad.top + pad.bottom - geo.kh) / stride + 1;
  geo.wo = (geo.w + pad.left + pad.right - geo.kw) / stride + 1;

  Tensor eff = kv;
  if (mask) {
    for (std::size_t i = 0; i < eff.size(); ++i) eff[i] *= (*mask)[i];
  }

  Shape out_shape = batched ? Shape{geo.n, geo.cout, geo.ho, geo.wo} : Shape{geo.cout, geo.ho, geo.wo};
  Tensor out(out_shape);
  const double* X = xv.data().data();
  const double* K = eff.data().data();
  double* Y = out.data().data();
  const std::size_t in_plane = geo.h * geo.w, out_plane = geo.ho * geo.wo;
  for (std::size_t b = 0; b < geo.n; ++b) {
    for (std::size_t co = 0; co < geo.cout; ++co) {
      double* yp = Y + (b * geo.cout + co) * out_plane;
      for (std::size_t ci = 0; ci < geo.cin; ++ci) {
        const double* xp = X + (b * geo.cin + ci) * in_plane;
        for (std::size_t ky = 0; ky < geo.kh; ++ky) {
          for (std::size_t kx = 0; kx < geo.kw; ++kx) {
            const double wgt = K[((co * geo.cin + ci) * geo.kh + ky) * geo.kw + kx];
            if (wgt == 0.0) continue;
            auto [ox0, ox1] = geo.ox_range(kx);
            if (ox0 > ox1) continue;
            for (std::size_t oy = 0; oy < geo.ho; ++oy) {
              const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(pad.top);
              if (iy < 0 || iy >= static_cast<long>(geo.h)) continue;
              const double* xrow = xp + static_cast<std::size_t>(iy) * geo.w;
              double* yrow = yp + oy * geo.wo;
              const long off = static_cast<long>(kx) - static_cast<long>(pad.left);
              if (stride == 1) {
                const double* xs = xrow + off;
                for (std::size_t ox = ox0; ox <= ox1; ++ox) yrow[ox] += wgt * xs[ox];
              } else {
                for (std::size_t ox = ox0; ox <= ox1; ++ox) {
                  yrow[ox] += wgt * xrow[static_cast<long>(ox * stride) + off];
                }
              }
            }
          }
        }
      }
    }
  }

  Tape* tape = &input.tape();
  const auto ix = input.id(), ik = kernel.id();
  std::shared_ptr<const Tensor> mask_copy = mask ? std::make_shared<const Tensor>(*mask) : nullptr;
  return tape->record(
      std::move(out), {input, kernel},
      [tape, ix, ik, geo, mask_copy](const Tensor& g, GradSlots gin) {
        const Tensor& xv = tape->value(ix);
        const Tensor& kv = tape->value(ik);
        const double* X = xv.data().data();
        const double* G = g.data().data();
        const std::size_t in_plane = geo.h * geo.w, out_plane = geo.ho * geo.wo;
        const long pt = static_cast<long>(geo.pad.top), pl = static_cast<long>(geo.pad.left);
        const long s = static_cast<long>(geo.stride);
        for (std::size_t b = 0; b < geo.n; ++b) {
          for (std::size_t co = 0; co < geo.cout; ++co) {
            const double* gp = G + (b * geo.cout + co) * out_plane;
            for (std::size_t ci = 0; ci < geo.cin; ++ci) {
              const double* xp = X + (b * geo.cin + ci) * in_plane;
              double* gxp = gin[0] ? gin[0]->data().data() + (b * geo.cin + ci) * in_plane : nullptr;
              for (std::size_t ky = 0; ky < geo.kh; ++ky) {
                for (std::size_t kx = 0; kx < geo.kw; ++kx) {
                  const std::size_t kidx = ((co * geo.cin + ci) * geo.kh + ky) * geo.kw + kx;
                  const double m = mask_copy ? (*mask_copy)[kidx] : 1.0;
                  if (m == 0.0) continue;
                  const double wgt = kv[kidx] * m;
                  auto [ox0, ox1] = geo.ox_range(kx);
                  if (ox0 > ox1) continue;
                  const long off = static_cast<long>(kx) - pl;
                  double acc = 0.0;
                  for (std::size_t oy = 0; oy < geo.ho; ++oy) {
                    const long iy = static_cast<long>(oy) * s + static_cast<long>(ky) - pt;
                    if (iy < 0 || iy >= static_cast<long>(geo.h)) continue;
                    const double* xrow = xp + static_cast<std::size_t>(iy) * geo.w;
                    const double* grow = gp + oy * geo.wo;
                    if (gxp && wgt != 0.0) {
                      double* gxrow = gxp + static_cast<std::size_t>(iy) * geo.w;
                      if (s == 1) {
                        double* gxs = gxrow + off;
                        for (std::size_t ox = ox0; ox <= ox1; ++ox) gxs[ox] += wgt * grow[ox];
                      } else {
                        for (std::size_t ox = ox0; ox <= ox1; ++ox) gxrow[static_cast<long>(ox) * s + off] += wgt * grow[ox];
                      }
                    }
                    if (gin[1]) {
                      if (s == 1) {
                        acc += dot_lanes(grow + ox0, xrow + off + static_cast<long>(ox0), ox1 - ox0 + 1);
                      } else {
                        for (std::size_t ox = ox0; ox <= ox1; ++ox) acc += grow[ox] * xrow[static_cast<long>(ox) * s + off];
                      }
                    }
                  }
                  if (gin[1]) (*gin[1])[kidx] += acc;
                }
              }
            }
          }
        }
      },
      "conv2d");
}

Var reduce(Reduce kind, Var x, std::vector<std::size_t> axes) {
  const Tensor& xv = x.value();
  if (axes.empty()) throw ShapeError("reduce: empty reduction axis list");
  std::sort(axes.begin(), axes.end());
  if (std::adjacent_find(axes.begin(), axes.end()) != axes.end()) throw ShapeError("reduce: duplicate axis");
  if (axes.back() >= xv.rank()) {
    throw ShapeError("reduce: axis " + std::to_string(axes.back()) + " invalid for " + shape_str(xv.shape()));
  }
  std::vector<bool> reduced(xv.rank(), false);
  for (auto a : axes) reduced[a] = true;
  Shape out_shape;
  for (std::size_t d = 0; d < xv.rank(); ++d) {
    if (!reduced[d]) out_shape.push_back(xv.dim(d));
  }
  // Map each input element to its output slot.
  const std::size_t n = xv.size();
  std::vector<std::size_t> target(n);
  {
    std::vector<std::size_t> idx(xv.rank(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t t = 0;
      for (std::size_t d = 0; d < xv.rank(); ++d) {
        if (!reduced[d]) t = t * xv.dim(d) + idx[d];
      }
      target[i] = t;
      for (std::size_t d = xv.rank(); d-- > 0;) {
        if (++idx[d] < xv.dim(d)) break;
        idx[d] = 0;
      }
    }
  }
  Tensor out(out_shape, 0.0);
  const std::size_t group = n / out.size();
  Tensor maxes;
  switch (kind) {
    case Reduce::sum:
    case Reduce::mean:
      for (std::size_t i = 0; i < n; ++i) out[target[i]] += xv[i];
      if (kind == Reduce::mean) {
        for (auto& v : out.data()) v /= static_cast<double>(group);
      }
      break;
    case Reduce::logsumexp: {
      maxes = Tensor(out_shape, -std::numeric_limits<double>::infinity());
      for (std::size_t i = 0; i < n; ++i) maxes[target[i]] = std::max(maxes[target[i]], xv[i]);
      for (std::size_t i = 0; i < n; ++i) out[target[i]] += std::exp(xv[i] - maxes[target[i]]);
      for (std::size_t j = 0; j < out.size(); ++j) out[j] = maxes[j] + std::log(out[j]);
      break;
    }
  }
  Tape* tape = &x.tape();
  const auto ixv = x.id();
  auto out_id = std::make_shared<std::uint32_t>(0);
  Var result = tape->record(
      std::move(out), {x},
      [tape, ixv, kind, group, out_id, target = std::move(target)](const Tensor& g, GradSlots gin) {
        if (!gin[0]) return;
        Tensor& gx = *gin[0];
        const Tensor& xv = tape->value(ixv);
        const Tensor& y = tape->value(*out_id);
        for (std::size_t i = 0; i < gx.size(); ++i) {
          const double gi = g[target[i]];
          switch (kind) {
            case Reduce::sum: gx[i] += gi; break;
            case Reduce::mean: gx[i] += gi / static_cast<double>(group); break;
            case Reduce::logsumexp: gx[i] += gi * std::exp(xv[i] - y[target[i]]); break;
          }
        }
      },
      kind == Reduce::sum ? "sum" : kind == Reduce::mean ? "mean" : "logsumexp");
  *out_id = result.id();
  return result;
}

namespace {
std::vector<std::size_t> all_axes(std::size_t rank, std::size_t from) {
  std::vector<std::size_t> axes(rank - from);
  std::iota(axes.begin(), axes.end(), from);
  return axes;
}
}  // namespace

Var sum(Var x) {
  if (x.value().rank() == 0) return scale(x, 1.0);
  return reduce(Reduce::sum, x, all_axes(x.value().rank(), 0));
}

Var mean(Var x) {
  if (x.value().rank() == 0) return scale(x, 1.0);
  return reduce(Reduce::mean, x, all_axes(x.value().rank(), 0));
}

Var logsumexp(Var x, std::vector<std::size_t> axes) { return reduce(Reduce::logsumexp, x, std::move(axes)); }

Var sum_per_row(Var x) {
  if (x.value().rank() < 2) throw ShapeError("sum_per_row: need rank >= 2, got " + shape_str(x.shape()));
  return reduce(Reduce::sum, x, all_axes(x.value().rank(), 1));
}

Var reshape(Var x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return x.tape().record(
      std::move(out), {x},
      [](const Tensor& g, GradSlots gin) {
        if (!gin[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
      },
      "reshape");
}

Var slice(Var x, std::size_t axis, std::size_t start, std::size_t length) {
  const Tensor& xv = x.value();
  if (axis >= xv.rank() || length == 0 || start + length > xv.dim(axis)) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") invalid on axis " + std::to_string(axis) + " of " + shape_str(xv.shape()));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= xv.dim(d);
  for (std::size_t d = axis + 1; d < xv.rank(); ++d) inner *= xv.dim(d);
  const std::size_t full = xv.dim(axis);
  Shape shape = xv.shape();
  shape[axis] = length;
  Tensor out(shape);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(xv.data().data() + (o * full + start) * inner, length * inner,
                out.data().data() + o * length * inner);
  }
  return x.tape().record(
      std::move(out), {x},
      [outer, inner, full, start, length](const Tensor& g, GradSlots gin) {
        if (!gin[0]) return;
        for (std::size_t o = 0; o < outer; ++o) {
          double* dst = gin[0]->data().data() + (o * full + start) * inner;
          const double* src = g.data().data() + o * length * inner;
          for (std::size_t i = 0; i < length * inner; ++i) dst[i] += src[i];
        }
      },
      "slice");
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no operands");
  const Tensor& first = parts.front().value();
  if (axis >= first.rank()) throw ShapeError("concat: axis out of range");
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    require_same_tape(parts.front(), p, "concat");
    const Tensor& v = p.value();
    if (v.rank() != first.rank()) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < v.rank(); ++d) {
      if (d != axis && v.dim(d) != first.dim(d)) {
        throw ShapeError("concat: shape mismatch " + shape_str(v.shape()) + " vs " + shape_str(first.shape()));
      }
    }
    widths.push_back(v.dim(axis));
    total += v.dim(axis);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first.dim(d);
  for (std::size_t d = axis + 1; d < first.rank(); ++d) inner *= first.dim(d);
  Shape shape = first.shape();
  shape[axis] = total;
  Tensor out(shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& v = parts[k].value();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(v.data().data() + o * widths[k] * inner, widths[k] * inner,
                  out.data().data() + (o * total + offset) * inner);
    }
    offset += widths[k];
  }
  return parts.front().tape().record(
      std::move(out), parts,
      [outer, inner, total, widths](const Tensor& g, GradSlots gin) {
        std::size_t offset = 0;
        for (std::size_t k = 0; k < widths.size(); ++k) {
          if (gin[k]) {
            for (std::size_t o = 0; o < outer; ++o) {
              const double* src = g.data().data() + (o * total + offset) * inner;
              double* dst = gin[k]->data().data() + o * widths[k] * inner;
              for (std::size_t i = 0; i < widths[k] * inner; ++i) dst[i] += src[i];
            }
          }
          offset += widths[k];
        }
      },
      "concat");
}

BernoulliLogMass bernoulli_log_mass(Var logits, const Tensor& targets) {
  const Tensor& lv = logits.value();
  if (lv.shape() != targets.shape()) {
    throw ShapeError("bernoulli_log_mass: logits " + shape_str(lv.shape()) + " vs targets " +
                     shape_str(targets.shape()));
  }
  Tensor out(lv.shape());
  std::vector<char> clamped(lv.size(), 0);
  std::size_t events = 0;
  for (std::size_t i = 0; i < lv.size(); ++i) {
    double p = stable_sigmoid(lv[i]);
    if (p < kProbClamp || p > 1.0 - kProbClamp) {
      p = std::clamp(p, kProbClamp, 1.0 - kProbClamp);
      clamped[i] = 1;
      ++events;
    }
    const double t = targets[i];
    out[i] = t * std::log(p) + (1.0 - t) * std::log1p(-p);
  }
  Tape* tape = &logits.tape();
  const auto il = logits.id();
  Var lm = tape->record(
      std::move(out), {logits},
      [tape, il, targets, clamped = std::move(clamped)](const Tensor& g, GradSlots gin) {
        if (!gin[0]) return;
        const Tensor& lv = tape->value(il);
        for (std::size_t i = 0; i < g.size(); ++i) {
          if (clamped[i]) continue;
          (*gin[0])[i] += g[i] * (targets[i] - stable_sigmoid(lv[i]));
        }
      },
      "bernoulli_log_mass");
  return {lm, events};
}

}  // namespace vlae::nd
