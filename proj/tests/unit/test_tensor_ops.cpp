#include <cmath>
#include <numeric>

#include "doctest.h"
#include "helpers.hpp"
#include "kdse/layers.hpp"

using namespace kdse;
using testutil::max_abs_diff;
using testutil::random_tensor;

TEST_CASE("tensor shape, views and copies") {
  Tensor t(Shape{2, 3}, Real(1.5));
  CHECK(t.numel() == 6);
  CHECK(t.rank() == 2);
  CHECK(t.dim(-1) == 3);
  CHECK_THROWS_AS(t.dim(2), std::out_of_range);

  Tensor v = t.reshape({3, -1});
  CHECK(v.shape() == Shape{3, 2});
  CHECK(v.shares_storage(t));
  v[0] = 7;
  CHECK(t[0] == 7);

  Tensor c = t.clone();
  CHECK_FALSE(c.shares_storage(t));
  c[0] = 0;
  CHECK(t[0] == 7);

  CHECK_THROWS(t.reshape({4, 2}));
  CHECK_THROWS(t.reshape({-1, -1}));
  CHECK_THROWS(Tensor(Shape{2}, std::vector<Real>{1, 2, 3}));
  t.at({1, 2}) = 4;
  CHECK(t[5] == 4);
  CHECK_THROWS_AS(t.at({2, 0}), std::out_of_range);
}

TEST_CASE("broadcasting arithmetic and reduce_to") {
  CHECK(broadcast_shape({2, 1, 3}, {4, 1}) == Shape{2, 4, 3});
  CHECK_THROWS(broadcast_shape({2, 3}, {4}));

  const Var a = parameter(Tensor(Shape{2, 3}, {1, 2, 3, 4, 5, 6}));
  const Var b = parameter(Tensor(Shape{3}, {10, 20, 30}));
  const Var c = add(a, b);
  CHECK(c.value().at({1, 2}) == doctest::Approx(36));
  backward(sum(mul(c, c)));
  // d/db sum((a+b)^2) = 2 * sum over rows of (a+b)
  CHECK(b.grad()[0] == doctest::Approx(2 * (11 + 14)));
  CHECK(a.grad()[4] == doctest::Approx(2 * 25));

  const Tensor g(Shape{2, 4, 3}, Real(1));
  const Tensor r = reduce_to(g, {4, 1});
  CHECK(r.shape() == Shape{4, 1});
  CHECK(r[0] == doctest::Approx(6));
}

TEST_CASE("elementwise gradients match closed forms") {
  const Tensor x0 = random_tensor({5}, 3, 0.2, 2.0);
  auto grad_of = [&](auto f) {
    const Var x = parameter(x0.clone());
    backward(sum(f(x)));
    return x.grad();
  };
  const Tensor gl = grad_of([](const Var& x) { return log(x); });
  const Tensor gs = grad_of([](const Var& x) { return sigmoid(x); });
  const Tensor gt = grad_of([](const Var& x) { return tanh(x); });
  const Tensor gq = grad_of([](const Var& x) { return sqrt(x); });
  for (Index i = 0; i < 5; ++i) {
    const double v = x0[i];
    const double s = 1 / (1 + std::exp(-v));
    CHECK(gl[i] == doctest::Approx(1 / v).epsilon(1e-5));
    CHECK(gs[i] == doctest::Approx(s * (1 - s)).epsilon(1e-5));
    CHECK(gt[i] == doctest::Approx(1 - std::tanh(v) * std::tanh(v)).epsilon(1e-5));
    CHECK(gq[i] == doctest::Approx(0.5 / std::sqrt(v)).epsilon(1e-5));
  }
}

TEST_CASE("clamp passes gradient only inside the interval") {
  const Var x = parameter(Tensor(Shape{3}, {-1, 0.5, 2}));
  backward(sum(clamp(x, 0, 1)));
  CHECK(x.grad()[0] == 0);
  CHECK(x.grad()[1] == 1);
  CHECK(x.grad()[2] == 0);
}

TEST_CASE("mean_trailing averages the trailing axes") {
  const Var x = constant(Tensor(Shape{2, 2, 2}, {1, 2, 3, 4, 5, 6, 7, 8}));
  const Var m = mean_trailing(x, 2);
  CHECK(m.shape() == Shape{2});
  CHECK(m.value()[0] == doctest::Approx(2.5));
  CHECK(m.value()[1] == doctest::Approx(6.5));
  CHECK(mean(x).item() == doctest::Approx(4.5));
}

TEST_CASE("permute, concat, slice and stack") {
  const Tensor t = random_tensor({2, 3, 4}, 5);
  const Var x = constant(t);
  const Var p = permute(x, {2, 0, 1});
  CHECK(p.shape() == Shape{4, 2, 3});
  CHECK(p.value().at({3, 1, 2}) == t.at({1, 2, 3}));

  const Var c = concat({x, x}, 1);
  CHECK(c.shape() == Shape{2, 6, 4});
  CHECK(c.value().at({1, 4, 2}) == t.at({1, 1, 2}));
  const Var s = slice(c, 1, 3, 6);
  CHECK(max_abs_diff(s.value(), t) == 0);

  const Var st = stack({x, x, x});
  CHECK(st.shape() == Shape{3, 2, 3, 4});
  CHECK_THROWS(stack({x, constant(Tensor(Shape{2, 3}))}));

  // Gradients route back through the layout changes.
  const Var a = parameter(t.clone());
  backward(sum(slice(permute(a, {1, 0, 2}), 0, 1, 2)));
  for (Index b = 0; b < 2; ++b)
    for (Index i = 0; i < 3; ++i)
      for (Index k = 0; k < 4; ++k) CHECK(a.grad().at({b, i, k}) == (i == 1 ? 1 : 0));
}

TEST_CASE("linear and bmm agree with naive loops") {
  const Tensor xt = random_tensor({2, 3, 4}, 11);
  const Tensor wt = random_tensor({4, 5}, 12);
  const Tensor bt = random_tensor({5}, 13);
  const Var y = linear(constant(xt), constant(wt), constant(bt));
  CHECK(y.shape() == Shape{2, 3, 5});
  for (Index r = 0; r < 6; ++r) {
    for (Index o = 0; o < 5; ++o) {
      double acc = bt[o];
      for (Index i = 0; i < 4; ++i) acc += xt[r * 4 + i] * wt[i * 5 + o];
      CHECK(y.value()[r * 5 + o] == doctest::Approx(acc).epsilon(1e-5));
    }
  }

  const Tensor at = random_tensor({3, 4, 2}, 14);
  const Tensor ct = random_tensor({3, 5, 2}, 15);
  const Var z = bmm(constant(at), constant(ct), false, true);
  CHECK(z.shape() == Shape{3, 4, 5});
  for (Index n = 0; n < 3; ++n)
    for (Index i = 0; i < 4; ++i)
      for (Index j = 0; j < 5; ++j) {
        double acc = 0;
        for (Index k = 0; k < 2; ++k) acc += at.at({n, i, k}) * ct.at({n, j, k});
        CHECK(z.value().at({n, i, j}) == doctest::Approx(acc).epsilon(1e-5));
      }
}

TEST_CASE("softmax_last rows are positive and sum to one") {
  const Var p = softmax_last(constant(random_tensor({4, 7}, 21, -30, 30)));
  for (Index r = 0; r < 4; ++r) {
    double s = 0;
    for (Index j = 0; j < 7; ++j) {
      CHECK(p.value()[r * 7 + j] >= 0);
      s += p.value()[r * 7 + j];
    }
    CHECK(s == doctest::Approx(1).epsilon(1e-6));
  }
}

TEST_CASE("layer_norm normalizes each row") {
  const Var y = layer_norm(constant(random_tensor({3, 16}, 31, -5, 5)), constant(Tensor(Shape{16}, Real(1))),
                           constant(Tensor(Shape{16})));
  for (Index r = 0; r < 3; ++r) {
    double m = 0, v = 0;
    for (Index j = 0; j < 16; ++j) m += y.value()[r * 16 + j];
    m /= 16;
    for (Index j = 0; j < 16; ++j) v += std::pow(y.value()[r * 16 + j] - m, 2);
    CHECK(std::abs(m) < 1e-5);
    CHECK(v / 16 == doctest::Approx(1).epsilon(1e-3));
  }
}

TEST_CASE("conv2d on a hand example") {
  // 1x1x3x3 input, 2x2 kernel of ones, stride 1, no padding: window sums.
  const Var x = constant(Tensor(Shape{1, 1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9}));
  const Var w = constant(Tensor(Shape{1, 1, 2, 2}, Real(1)));
  const Var y = conv2d(x, w, Var(), Conv2dSpec{});
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  CHECK(y.value()[0] == doctest::Approx(12));
  CHECK(y.value()[3] == doctest::Approx(28));

  Conv2dSpec s;
  s.stride_w = 2;
  s.pad_left = s.pad_right = 1;
  const Var w13 = constant(Tensor(Shape{1, 1, 1, 3}, {0, 1, 0}));
  const Var z = conv2d(x, w13, Var(), s);
  CHECK(z.shape() == Shape{1, 1, 3, 2});
  CHECK(z.value().at({0, 0, 1, 0}) == 4);
  CHECK(z.value().at({0, 0, 1, 1}) == 6);
}

TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
  Conv2dSpec s;
  s.stride_w = 2;
  s.pad_left = s.pad_right = 1;
  const Tensor xt = random_tensor({2, 3, 4, 9}, 41);
  const Tensor wt = random_tensor({5, 3, 1, 3}, 42);
  const Var y = conv2d(constant(xt), constant(wt), Var(), s);
  const Tensor gt = random_tensor(y.shape(), 43);
  // <conv(x), g> == <x, conv^T(g)> with the same kernel tensor.
  const Var xt_back = conv_transpose2d(constant(gt), constant(wt), Var(), s);
  REQUIRE(xt_back.shape() == xt.shape());
  double lhs = 0, rhs = 0;
  for (Index i = 0; i < y.numel(); ++i) lhs += static_cast<double>(y.value()[i]) * gt[i];
  for (Index i = 0; i < xt.numel(); ++i) rhs += static_cast<double>(xt[i]) * xt_back.value()[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-4));
}

TEST_CASE("causal attention ignores later positions") {
  const Tensor q = random_tensor({1, 6, 12}, 51);
  Tensor q2 = q.clone();
  for (Index k = 0; k < 12; ++k) q2.at({0, 5, k}) += 3;
  const Var a = multi_head_attention(constant(q), 2, true);
  const Var b = multi_head_attention(constant(q2), 2, true);
  CHECK(a.shape() == Shape{1, 6, 4});
  for (Index t = 0; t < 5; ++t)
    for (Index k = 0; k < 4; ++k) CHECK(a.value().at({0, t, k}) == b.value().at({0, t, k}));
  // First position attends only to itself: output is its own value slice.
  for (Index k = 0; k < 4; ++k) CHECK(a.value().at({0, 0, k}) == doctest::Approx(q.at({0, 0, 8 + k})));
}

TEST_CASE("gru matches a hand-rolled recurrence") {
  const Index h = 3, len = 4;
  const Tensor gx = random_tensor({1, len, 3 * h}, 61);
  const Tensor whh = random_tensor({h, 3 * h}, 62);
  const Tensor bhh = random_tensor({3 * h}, 63);
  const Var out = gru(constant(gx), constant(whh), constant(bhh));
  std::vector<double> hp(h, 0.0);
  auto sig = [](double v) { return 1 / (1 + std::exp(-v)); };
  for (Index t = 0; t < len; ++t) {
    std::vector<double> gh(3 * h, 0.0);
    for (Index j = 0; j < 3 * h; ++j) {
      gh[j] = bhh[j];
      for (Index i = 0; i < h; ++i) gh[j] += hp[i] * whh[i * 3 * h + j];
    }
    std::vector<double> hn(h);
    for (Index j = 0; j < h; ++j) {
      const double r = sig(gx.at({0, t, j}) + gh[j]);
      const double z = sig(gx.at({0, t, h + j}) + gh[h + j]);
      const double n = std::tanh(gx.at({0, t, 2 * h + j}) + r * gh[2 * h + j]);
      hn[j] = (1 - z) * n + z * hp[j];
      CHECK(out.value().at({0, t, j}) == doctest::Approx(hn[j]).epsilon(1e-5));
    }
    hp = hn;
  }
}

TEST_CASE("resize_nearest_last and l2_normalize_last") {
  const Var x = constant(Tensor(Shape{1, 3}, {1, 2, 3}));
  const Var y = resize_nearest_last(x, 6);
  CHECK(y.value()[0] == 1);
  CHECK(y.value()[1] == 1);
  CHECK(y.value()[5] == 3);
  const Var d = resize_nearest_last(constant(Tensor(Shape{1, 6}, {1, 2, 3, 4, 5, 6})), 3);
  CHECK(d.value()[1] == 3);

  const Var n = l2_normalize_last(constant(Tensor(Shape{2, 2}, {3, 4, 0, 0})));
  CHECK(n.value()[0] == doctest::Approx(0.6));
  CHECK(n.value()[1] == doctest::Approx(0.8));
  CHECK(n.value()[2] == 0);
  CHECK(n.value()[3] == 0);
}

TEST_CASE("cosine_similarity_map conventions") {
  // Rows: e1, 2*e1, e2, zero.
  const Var x = constant(Tensor(Shape{1, 4, 2}, {1, 0, 2, 0, 0, 1, 0, 0}));
  const Tensor m = cosine_similarity_map(x).value();
  CHECK(m.at({0, 0, 1}) == doctest::Approx(1));
  CHECK(m.at({0, 0, 2}) == doctest::Approx(0.5));
  CHECK(m.at({0, 3, 0}) == doctest::Approx(0.5));
  for (Index i = 0; i < 4; ++i) CHECK(m.at({0, i, i}) == 1);
}

TEST_CASE("no-grad scope records nothing") {
  const Var w = parameter(Tensor(Shape{2}, Real(1)));
  Var y;
  {
    NoGradGuard g;
    CHECK_FALSE(grad_enabled());
    y = sum(mul(w, w));
  }
  CHECK(grad_enabled());
  CHECK_FALSE(y.requires_grad());
  backward(y);
  CHECK_FALSE(w.has_grad());
  CHECK_THROWS_AS(backward(w), std::logic_error);
}

TEST_CASE("gradients accumulate across backward calls") {
  Var w = parameter(Tensor(Shape{1}, Real(3)));
  backward(sum(mul(w, w)));
  backward(sum(mul(w, w)));
  CHECK(w.grad()[0] == doctest::Approx(12));
  w.zero_grad();
  CHECK_FALSE(w.has_grad());
}

TEST_CASE("parameter registry") {
  ParamSet ps;
  CHECK(ps.count() == 0);
  Rng rng(1);
  Linear fc(ps, "fc", 7, 3, rng);
  CHECK(ps.count() == 7 * 3 + 3);
  CHECK(count_params(ps) == 24);
  CHECK(ps.find("fc.weight").shape() == Shape{7, 3});
  CHECK_THROWS_AS(ps.find("missing"), std::out_of_range);
  CHECK_THROWS(ps.add("fc.weight", Tensor(Shape{1})));

  const Tensor u = uniform_init({1000}, 16, rng);
  CHECK(testutil::max_abs(u) <= 0.25);
}
