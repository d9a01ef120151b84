#include <doctest.h>

#include <cmath>
#include <sstream>

#include "vlae/nd/grad_check.hpp"
#include "vlae/nd/ops.hpp"
#include "vlae/nd/rng.hpp"
#include "vlae/nd/serialize.hpp"

using namespace vlae::nd;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = scale * rng.normal();
  return t;
}

Tensor random_mask(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (auto& v : t.data()) v = rng.bernoulli(0.6) ? 1.0 : 0.0;
  return t;
}

// Direct summation, independent of the library loop structure.
double conv_oracle(const Tensor& x, const Tensor& k, int co, int oy, int ox, int pad_top, int pad_left) {
  const int cin = static_cast<int>(x.dim(0)), h = static_cast<int>(x.dim(1)), w = static_cast<int>(x.dim(2));
  const int kh = static_cast<int>(k.dim(2)), kw = static_cast<int>(k.dim(3));
  double acc = 0.0;
  for (int ci = 0; ci < cin; ++ci) {
    for (int dy = 0; dy < kh; ++dy) {
      for (int dx = 0; dx < kw; ++dx) {
        const int iy = oy + dy - pad_top, ix = ox + dx - pad_left;
        if (iy < 0 || iy >= h || ix < 0 || ix >= w) continue;
        acc += x[(ci * h + iy) * w + ix] * k[((co * cin + ci) * kh + dy) * kw + dx];
      }
    }
  }
  return acc;
}

}  // namespace

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor(Shape{2, 0}), ShapeError);
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  Tensor s = Tensor::scalar(3.0);
  CHECK(s.rank() == 0);
  CHECK(s.item() == 3.0);
  CHECK(Tensor::matrix({{1, 2}, {3, 4}}).dim(1) == 2);
}

TEST_CASE("elementwise values") {
  Tape t;
  auto x = [&](double v) { return t.constant(Tensor::scalar(v)); };
  CHECK(sigmoid(x(0)).value().item() == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(softplus(x(0)).value().item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(elu(x(-1)).value().item() == doctest::Approx(std::exp(-1.0) - 1.0).epsilon(1e-15));
  CHECK(softplus(x(800)).value().item() == doctest::Approx(800.0));
  CHECK(sigmoid(x(-800)).value().item() >= 0.0);
}

TEST_CASE("elementwise errors") {
  Tape t;
  Var a = t.constant(Tensor::from({1, 2, 3}));
  Var b = t.constant(Tensor::from({1, 2}));
  CHECK_THROWS_AS(add(a, b), ShapeError);
  CHECK_THROWS_AS(log(t.constant(Tensor::from({1, 0}))), DomainError);
  CHECK_THROWS_AS(log(t.constant(Tensor::from({-1}))), DomainError);
  CHECK_THROWS_AS(div(a, t.constant(Tensor::scalar(0.0))), DomainError);
  CHECK_THROWS_AS(exp(t.constant(Tensor::scalar(1e6))), NumericError);
  // Scalar broadcast on either side.
  CHECK((a * 2.0).value() == Tensor::from({2, 4, 6}));
  CHECK(sub(t.constant(Tensor::scalar(1.0)), a).value() == Tensor::from({0, -1, -2}));
}

TEST_CASE("matmul") {
  Tape t;
  Tensor a = Tensor::matrix({{1, 2}, {3, 4}});
  Tensor eye = Tensor::matrix({{1, 0}, {0, 1}});
  CHECK(matmul(t.constant(eye), t.constant(a)).value() == a);
  CHECK(matmul(t.constant(a), t.constant(Tensor::matrix({{1}, {1}}))).value() == Tensor::matrix({{3}, {7}}));
  CHECK_THROWS_AS(matmul(t.constant(a), t.constant(Tensor::matrix({{1, 2, 3}}))), ShapeError);

  Rng rng(3);
  Tensor A = random_tensor({5, 4}, rng), B = random_tensor({4, 3}, rng);
  Tape g;
  Var va = g.input(A);
  g.backward(sum(matmul(va, g.constant(B))));
  Tensor ga = g.grad(va);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t p = 0; p < 4; ++p) {
      CHECK(ga[i * 4 + p] == doctest::Approx(B[p * 3] + B[p * 3 + 1] + B[p * 3 + 2]).epsilon(1e-13));
    }
  }
  CHECK(grad_check([&](Tape& tp, Var x) { return sum(square(matmul(x, tp.constant(B)))); }, A) < 1e-6);
  CHECK(grad_check([&](Tape& tp, Var x) { return sum(square(matmul(tp.constant(A), x))); }, B) < 1e-6);
}

TEST_CASE("conv2d values") {
  Tape t;
  Rng rng(5);
  Tensor x = random_tensor({2, 5, 5}, rng);
  Tensor one({1, 1, 1, 1}, 1.0);
  Tensor x1 = random_tensor({1, 4, 4}, rng);
  CHECK(conv2d(t.constant(x1), t.constant(one), one, Padding{}).value() == x1);

  Tensor k = random_tensor({3, 2, 3, 3}, rng);
  Tensor zero_mask(k.shape(), 0.0);
  Tensor annihilated = conv2d(t.constant(x), t.constant(k), zero_mask, Padding::same(3, 3)).value();
  for (double v : annihilated.data()) CHECK(v == 0.0);

  Tensor y = conv2d(t.constant(x), t.constant(k), nullptr, Padding::same(3, 3)).value();
  REQUIRE(y.shape() == Shape{3, 5, 5});
  for (int co = 0; co < 3; ++co) {
    for (int oy = 0; oy < 5; ++oy) {
      for (int ox = 0; ox < 5; ++ox) {
        CHECK(y[(co * 5 + oy) * 5 + ox] == doctest::Approx(conv_oracle(x, k, co, oy, ox, 1, 1)).epsilon(1e-13));
      }
    }
  }

  // Asymmetric padding and stride 2.
  Tensor ys = conv2d(t.constant(x), t.constant(k), nullptr, Padding{0, 1, 0, 1}, 2).value();
  REQUIRE(ys.shape() == Shape{3, 2, 2});
  for (int co = 0; co < 3; ++co) {
    for (int oy = 0; oy < 2; ++oy) {
      for (int ox = 0; ox < 2; ++ox) {
        CHECK(ys[(co * 2 + oy) * 2 + ox] ==
              doctest::Approx(conv_oracle(x, k, co, 2 * oy, 2 * ox, 0, 0)).epsilon(1e-13));
      }
    }
  }
}

TEST_CASE("conv2d mask equals pre-masked kernel bit-exactly") {
  Rng rng(7);
  Tensor x = random_tensor({2, 3, 6, 6}, rng);
  Tensor k = random_tensor({4, 3, 3, 3}, rng);
  Tensor m = random_mask(k.shape(), rng);
  Tensor km = k;
  for (std::size_t i = 0; i < km.size(); ++i) km[i] *= m[i];
  Tape t;
  Tensor a = conv2d(t.constant(x), t.constant(k), m, Padding::same(3, 3)).value();
  Tensor b = conv2d(t.constant(x), t.constant(km), nullptr, Padding::same(3, 3)).value();
  CHECK(a == b);
}

TEST_CASE("conv2d errors") {
  Tape t;
  Var x = t.constant(Tensor({1, 4, 4}, 1.0));
  Var k = t.constant(Tensor({1, 1, 3, 3}, 1.0));
  CHECK_THROWS_AS(conv2d(x, k, Tensor({1, 1, 3, 2}, 1.0), Padding::same(3, 3)), ShapeError);
  CHECK_THROWS_AS(conv2d(x, k, Tensor({1, 1, 3, 3}, 0.5), Padding::same(3, 3)), std::invalid_argument);
  CHECK_THROWS_AS(conv2d(x, t.constant(Tensor({1, 2, 3, 3}, 1.0)), nullptr, Padding{}), ShapeError);
}

TEST_CASE("conv2d gradients, masked taps get zero gradient") {
  Rng rng(11);
  Tensor x = random_tensor({2, 2, 5, 5}, rng);
  Tensor k = random_tensor({3, 2, 3, 3}, rng);
  Tensor m = random_mask(k.shape(), rng);
  for (std::size_t stride : {1, 2}) {
    Padding pad = stride == 1 ? Padding::same(3, 3) : Padding{1, 0, 1, 0};
    CHECK(grad_check([&](Tape& t, Var v) { return sum(square(conv2d(v, t.constant(k), &m, pad, stride))); }, x) <
          1e-6);
    CHECK(grad_check([&](Tape& t, Var v) { return sum(square(conv2d(t.constant(x), v, &m, pad, stride))); }, k) <
          1e-6);
  }
  Tape t;
  Var vk = t.input(k);
  t.backward(sum(conv2d(t.constant(x), vk, m, Padding::same(3, 3))));
  Tensor gk = t.grad(vk);
  for (std::size_t i = 0; i < m.size(); ++i) {
    if (m[i] == 0.0) CHECK(gk[i] == 0.0);
  }
  // A masked-in weight that happens to be zero still receives gradient.
  Tensor kz = k;
  std::size_t live = 0;
  while (m[live] == 0.0) ++live;
  kz[live] = 0.0;
  Tape t2;
  Var vkz = t2.input(kz);
  t2.backward(sum(conv2d(t2.constant(x), vkz, m, Padding::same(3, 3))));
  CHECK(t2.grad(vkz)[live] != 0.0);
}

TEST_CASE("reductions") {
  Tape t;
  CHECK(logsumexp(t.constant(Tensor::from({0, 0})), {0}).value().item() == doctest::Approx(std::log(2.0)));
  CHECK(logsumexp(t.constant(Tensor::from({1000, 1000})), {0}).value().item() ==
        doctest::Approx(1000.0 + std::log(2.0)).epsilon(1e-15));
  CHECK(mean(t.constant(Tensor({4, 4}, 1.0))).value().item() == 1.0);
  CHECK_THROWS_AS(reduce(Reduce::sum, t.constant(Tensor({2, 2}, 1.0)), {}), ShapeError);
  CHECK_THROWS_AS(reduce(Reduce::sum, t.constant(Tensor({2, 2}, 1.0)), {2}), ShapeError);
  CHECK_THROWS_AS(reduce(Reduce::sum, t.constant(Tensor({2, 2}, 1.0)), {1, 1}), ShapeError);

  Tensor m = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  CHECK(reduce(Reduce::sum, t.constant(m), {0}).value() == Tensor::from({5, 7, 9}));
  CHECK(reduce(Reduce::sum, t.constant(m), {1}).value() == Tensor::from({6, 15}));
  CHECK(sum_per_row(t.constant(m)).value() == Tensor::from({6, 15}));

  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    Tensor x = random_tensor({7}, rng, 10.0);
    const double lse = logsumexp(t.constant(x), {0}).value().item();
    const double mx = *std::max_element(x.data().begin(), x.data().end());
    CHECK(lse - mx >= 0.0);
    CHECK(lse - mx <= std::log(7.0) + 1e-12);
  }
  Tensor x = random_tensor({3, 4, 5}, rng);
  CHECK(grad_check([](Tape&, Var v) { return sum(logsumexp(v, {2})); }, x) < 1e-6);
  CHECK(grad_check([](Tape&, Var v) { return sum(square(logsumexp(v, {0, 2}))); }, x) < 1e-6);
  CHECK(grad_check([](Tape&, Var v) { return square(mean(v)); }, x) < 1e-6);
  CHECK(grad_check([](Tape&, Var v) { return sum(v); }, x) <= 1e-10);
}

TEST_CASE("shape ops") {
  Tape t;
  Tensor m = Tensor::matrix({{1, 2, 3}, {4, 5, 6}});
  CHECK(slice(t.constant(m), 1, 1, 2).value() == Tensor::matrix({{2, 3}, {5, 6}}));
  CHECK(concat({t.constant(m), t.constant(m)}, 0).value().shape() == Shape{4, 3});
  CHECK(concat({t.constant(m), t.constant(m)}, 1).value() == Tensor::matrix({{1, 2, 3, 1, 2, 3}, {4, 5, 6, 4, 5, 6}}));
  CHECK_THROWS_AS(slice(t.constant(m), 1, 2, 2), ShapeError);
  Rng rng(17);
  Tensor x = random_tensor({2, 3, 4}, rng);
  CHECK(grad_check(
            [](Tape&, Var v) {
              Var a = slice(v, 1, 0, 2);
              Var b = slice(v, 1, 1, 2);
              return sum(square(concat({a, b, reshape(v, {2, 3, 4})}, 1)));
            },
            x) < 1e-6);
}

TEST_CASE("unary and binary gradients") {
  Rng rng(19);
  Tensor x = random_tensor({6}, rng);
  Tensor pos = x;
  for (auto& v : pos.data()) v = std::abs(v) + 0.5;
  Tensor y = random_tensor({6}, rng);
  for (auto u : {Unary::exp, Unary::sigmoid, Unary::softplus, Unary::elu, Unary::negate, Unary::square}) {
    CHECK(grad_check([u](Tape&, Var v) { return sum(square(elementwise(u, v))); }, x) < 1e-6);
  }
  CHECK(grad_check([](Tape&, Var v) { return sum(log(v)); }, pos) < 1e-6);
  CHECK(grad_check([&](Tape& t, Var v) { return sum(div(t.constant(y), v)); }, pos) < 1e-6);
  CHECK(grad_check([&](Tape& t, Var v) { return sum(square(mul(v, t.constant(y)) - v)); }, x) < 1e-6);
  CHECK(grad_check([&](Tape& t, Var v) { return sum(mul(t.constant(Tensor::scalar(2.0)), square(v))); }, x) < 1e-6);
  CHECK(grad_check([&](Tape& t, Var v) { return sum(square(mul(t.constant(y), slice(v, 0, 2, 1)))); }, x) < 1e-6);
  CHECK(grad_check([](Tape&, Var v) { return sum(clamp(v, -0.5, 0.5) * 3.0 + 1.0); }, x) < 1e-6);
}

TEST_CASE("backward contract") {
  Tape t;
  Var x = t.input(Tensor::from({1, 2}));
  t.backward(sum(mul(x, x)));
  CHECK(t.grad(x) == Tensor::from({2, 4}));
  Var s = sum(x);
  t.backward(s);
  CHECK(t.grad(x) == Tensor::from({1, 1}));
  CHECK_THROWS_AS(t.backward(x), ShapeError);
  Tape other;
  CHECK_THROWS_AS(other.backward(s), std::invalid_argument);

  ParameterStore store;
  Parameter& p = store.create("w", Tensor::from({1, 2, 3}));
  Tape pt;
  Var loss = sum(square(pt.param(p)));
  pt.backward(loss);
  pt.backward(loss);
  CHECK(p.grad == Tensor::from({4, 8, 12}));
  store.zero_grad();
  CHECK(p.grad == Tensor::from({0, 0, 0}));
}

TEST_CASE("backward is linear") {
  Rng rng(23);
  ParameterStore store;
  Parameter& p = store.create("w", random_tensor({4, 3}, rng));
  Tensor in = random_tensor({2, 4}, rng);
  auto loss1 = [&](Tape& t) { return sum(softplus(matmul(t.constant(in), t.param(p)))); };
  auto loss2 = [&](Tape& t) { return logsumexp(reshape(elu(t.param(p)), {12}), {0}); };
  auto grad_of = [&](auto&& f) {
    store.zero_grad();
    Tape t;
    t.backward(f(t));
    return p.grad;
  };
  const double a = 0.7, b = -1.3;
  Tensor g1 = grad_of(loss1), g2 = grad_of(loss2);
  Tensor g = grad_of([&](Tape& t) { return loss1(t) * a + loss2(t) * b; });
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(std::abs(g[i] - (a * g1[i] + b * g2[i])) < 1e-12);
}

TEST_CASE("composite conv-elu-matmul-logsumexp graph") {
  Rng rng(29);
  ParameterStore store;
  store.create("k", random_tensor({2, 1, 3, 3}, rng, 0.5));
  store.create("w", random_tensor({2 * 4 * 4, 5}, rng, 0.3));
  Tensor img = random_tensor({3, 1, 4, 4}, rng);
  Tensor mask({2, 1, 3, 3}, 1.0);
  mask[4] = mask[5] = 0.0;
  auto f = [&](Tape& t) {
    Var h = elu(conv2d(t.constant(img), t.param(*store.find("k")), &mask, Padding::same(3, 3)));
    Var logits = matmul(reshape(h, {3, 2 * 4 * 4}), t.param(*store.find("w")));
    return sum(logsumexp(logits, {1}));
  };
  CHECK(grad_check_params(f, store) < 1e-4);
}

TEST_CASE("bernoulli log mass") {
  Tape t;
  Tensor logits({28 * 28}, 0.0), targets({28 * 28}, 1.0);
  auto r = bernoulli_log_mass(t.constant(logits), targets);
  CHECK(sum(r.log_mass).value().item() == doctest::Approx(-784 * std::log(2.0)).epsilon(1e-14));
  CHECK(r.clamp_events == 0);
  auto sat = bernoulli_log_mass(t.constant(Tensor({4}, 40.0)), Tensor({4}, 1.0));
  CHECK(sat.clamp_events == 4);
  CHECK(sum(sat.log_mass).value().item() == doctest::Approx(4 * std::log1p(-kProbClamp)));
  Rng rng(31);
  Tensor l = random_tensor({10}, rng, 2.0), tg({10});
  for (auto& v : tg.data()) v = rng.bernoulli(0.5) ? 1.0 : 0.0;
  CHECK(grad_check([&](Tape&, Var v) { return sum(bernoulli_log_mass(v, tg).log_mass); }, l) < 1e-6);
}

TEST_CASE("tensor blob round trip") {
  Rng rng(37);
  Tensor x = random_tensor({3, 1, 4}, rng);
  std::stringstream ss;
  write_tensor(ss, x);
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "NDT1");
  CHECK(bytes.size() == 4 + 4 + 4 + 3 * 8 + 12 * 8);
  CHECK(read_tensor(ss) == x);
  std::stringstream bad("NDT2xxxxxxxx");
  CHECK_THROWS_WITH(read_tensor(bad), doctest::Contains("magic"));
  std::stringstream cut(bytes.substr(0, bytes.size() - 3));
  CHECK_THROWS_WITH(read_tensor(cut), doctest::Contains("truncated"));
  std::stringstream scalar_ss;
  write_tensor(scalar_ss, Tensor::scalar(2.5));
  CHECK(read_tensor(scalar_ss) == Tensor::scalar(2.5));
}

TEST_CASE("rng split is usage independent") {
  Rng a(42), b(42);
  a.normal();
  a.uniform();
  Rng ca = a.split(5), cb = b.split(5);
  CHECK(ca.next_u64() == cb.next_u64());
  CHECK(b.split(5).next_u64() != b.split(6).next_u64());
}
