// Reverse-mode gradients against central finite differences, in double precision.

#include <type_traits>

#include "doctest.h"
#include "gradcheck.hpp"
#include "helpers.hpp"
#include "kdse/distill.hpp"

using namespace kdse;
using gradcheck::tiny_backbone;
using gradcheck::tiny_mrstft;
using gradcheck::tiny_stft;
using testutil::random_tensor;

static_assert(std::is_same_v<Real, double>, "gradient tests need the double-precision build");

namespace {

constexpr double kTol = 1e-4;

Var param(const Shape& s, std::uint64_t seed, double lo = -1, double hi = 1) {
  return parameter(random_tensor(s, seed, lo, hi));
}

/// Values in [lo, hi] with random signs, away from kinks at zero.
Var signed_param(const Shape& s, std::uint64_t seed, double lo, double hi) {
  Tensor t = random_tensor(s, seed, lo, hi);
  Rng rng(seed + 7);
  for (Real& v : t.values()) v *= rng.below(2) ? 1 : -1;
  return parameter(std::move(t));
}

/// Scalar <y, R> with a fixed random R.
Var contract(const Var& y, std::uint64_t seed) { return sum(mul(y, constant(random_tensor(y.shape(), seed)))); }

void expect_grad(const gradcheck::LossFn& f, const std::vector<std::pair<std::string, Var>>& vars,
                 gradcheck::Options opt = {}) {
  const gradcheck::Result r = gradcheck::check(f, vars, opt);
  CHECK(r.probes > 0);
  CHECK_MESSAGE(r.max_rel < kTol, r.worst);
}

}  // namespace

TEST_CASE("elementwise gradients") {
  Var a = param({3, 4}, 1), b = param({4}, 2, 0.5, 2), pos = param({3, 4}, 3, 0.2, 2);
  Var away = signed_param({3, 4}, 4, 0.1, 1);
  expect_grad([&] { return contract(add(a, b), 10); }, {{"a", a}, {"b", b}});
  expect_grad([&] { return contract(sub(b, a), 11); }, {{"a", a}, {"b", b}});
  expect_grad([&] { return contract(mul(a, b), 12); }, {{"a", a}, {"b", b}});
  expect_grad([&] { return contract(div(a, b), 13); }, {{"a", a}, {"b", b}});
  expect_grad([&] { return contract(exp(a), 14); }, {{"a", a}});
  expect_grad([&] { return contract(log(pos), 15); }, {{"pos", pos}});
  expect_grad([&] { return contract(sqrt(pos), 16); }, {{"pos", pos}});
  expect_grad([&] { return contract(tanh(a), 17); }, {{"a", a}});
  expect_grad([&] { return contract(sigmoid(a), 18); }, {{"a", a}});
  expect_grad([&] { return contract(square(a), 19); }, {{"a", a}});
  expect_grad([&] { return contract(add_scalar(scale(a, 3), 2), 20); }, {{"a", a}});
  expect_grad([&] { return contract(relu(away), 21); }, {{"away", away}});
  expect_grad([&] { return contract(abs(away), 22); }, {{"away", away}});
  expect_grad([&] { return contract(clamp(a, -2, 2), 23); }, {{"a", a}});
}

TEST_CASE("reduction and shape gradients") {
  Var x = param({2, 3, 4}, 30), y = param({2, 2, 4}, 31);
  expect_grad([&] { return scale(sum(square(x)), 0.5); }, {{"x", x}});
  expect_grad([&] { return mean(exp(x)); }, {{"x", x}});
  expect_grad([&] { return contract(mean_trailing(x, 2), 32); }, {{"x", x}});
  expect_grad([&] { return contract(reshape(x, {4, 6}), 33); }, {{"x", x}});
  expect_grad([&] { return contract(permute(x, {2, 0, 1}), 34); }, {{"x", x}});
  expect_grad([&] { return contract(concat({x, y}, 1), 35); }, {{"x", x}, {"y", y}});
  expect_grad([&] { return contract(slice(x, 2, 1, 3), 36); }, {{"x", x}});
  expect_grad([&] { return contract(stack({x, square(x)}), 37); }, {{"x", x}});
}

TEST_CASE("matrix product gradients") {
  Var x = param({2, 3, 5}, 40), w = param({5, 4}, 41), bias = param({4}, 42);
  expect_grad([&] { return contract(linear(x, w, bias), 43); }, {{"x", x}, {"w", w}, {"bias", bias}});
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      Var a = param(ta ? Shape{2, 4, 3} : Shape{2, 3, 4}, 44), b = param(tb ? Shape{2, 5, 4} : Shape{2, 4, 5}, 45);
      expect_grad([&] { return contract(bmm(a, b, ta, tb), 46); }, {{"a", a}, {"b", b}});
    }
  }
}

TEST_CASE("normalization gradients") {
  Var x = param({3, 6}, 50, -2, 2), g = param({6}, 51), b = param({6}, 52);
  expect_grad([&] { return contract(softmax_last(x), 53); }, {{"x", x}});
  expect_grad([&] { return contract(layer_norm(x, g, b), 54); }, {{"x", x}, {"g", g}, {"b", b}});
  Var xc = param({2, 3, 4, 5}, 55, -2, 2), gc = param({3}, 56), bc = param({3}, 57);
  expect_grad([&] { return contract(channel_freq_norm(xc, gc, bc), 58); }, {{"x", xc}, {"g", gc}, {"b", bc}});
}

TEST_CASE("convolution gradients") {
  std::vector<Conv2dSpec> specs(3);
  specs[0].stride_w = 2;
  specs[0].pad_left = specs[0].pad_right = 1;
  specs[1].dilation_h = 2;
  specs[1].pad_top = 2;
  specs[1].pad_left = specs[1].pad_right = 1;
  specs[2].pad_top = specs[2].pad_bottom = specs[2].pad_left = specs[2].pad_right = 1;
  const std::vector<Shape> kernels{{4, 3, 1, 3}, {4, 3, 2, 3}, {4, 3, 3, 3}};
  for (std::size_t i = 0; i < specs.size(); ++i) {
    Var x = param({2, 3, 5, 6}, 60 + i), w = param(kernels[i], 70 + i), b = param({4}, 80 + i);
    expect_grad([&] { return contract(conv2d(x, w, b, specs[i]), 90 + i); }, {{"x", x}, {"w", w}, {"b", b}});
  }
  Conv2dSpec up;
  up.stride_w = 2;
  up.pad_left = up.pad_right = 1;
  Var x = param({2, 4, 3, 5}, 100), w = param({4, 3, 1, 3}, 101), b = param({3}, 102);
  expect_grad([&] { return contract(conv_transpose2d(x, w, b, up), 103); }, {{"x", x}, {"w", w}, {"b", b}});
}

TEST_CASE("sequence model gradients") {
  for (bool causal : {false, true}) {
    Var qkv = param({2, 5, 12}, 110);
    expect_grad([&] { return contract(multi_head_attention(qkv, 2, causal), 111); }, {{"qkv", qkv}});
  }
  Var gx = param({2, 5, 9}, 112), whh = param({3, 9}, 113), bhh = param({9}, 114);
  expect_grad([&] { return contract(gru(gx, whh, bhh), 115); }, {{"gx", gx}, {"w_hh", whh}, {"b_hh", bhh}});
}

TEST_CASE("resampling, normalization and cosine-map gradients") {
  Var x = param({2, 3, 5}, 120);
  expect_grad([&] { return contract(resize_nearest_last(x, 9), 121); }, {{"x", x}});
  expect_grad([&] { return contract(resize_nearest_last(x, 3), 122); }, {{"x", x}});
  expect_grad([&] { return contract(l2_normalize_last(x), 123); }, {{"x", x}});
  expect_grad([&] { return contract(cosine_similarity_map(x), 124); }, {{"x", x}});
}

TEST_CASE("spectral op gradients") {
  const StftConfig s = tiny_stft();
  Var wave = param({2, 28}, 130, -0.5, 0.5);
  expect_grad([&] { return contract(stft_op(wave, s), 131); }, {{"wave", wave}});
  Var spec = param({2, 2, 8, 5}, 132);
  expect_grad([&] { return contract(istft_op(spec, s, 28), 133); }, {{"spec", spec}});
  Var mask = param({2, 2, 8, 5}, 134);
  expect_grad([&] { return contract(complex_mul(spec, mask), 135); }, {{"spec", spec}, {"mask", mask}});
  expect_grad([&] { return contract(magnitude(spec, 1e-8), 136); }, {{"spec", spec}});
}

TEST_CASE("multi-resolution STFT loss gradient") {
  Var est = param({2, 28}, 140, -0.5, 0.5);
  const Var ref = constant(random_tensor({2, 28}, 141, -0.5, 0.5));
  expect_grad([&] { return mrstft_loss(est, ref, tiny_mrstft()); }, {{"est", est}}, {.probes_per_var = 56});
  MrstftConfig weighted = tiny_mrstft();
  weighted.sc_weight = 0.3;
  weighted.mag_weight = 2;
  expect_grad([&] { return mrstft_loss(est, ref, weighted); }, {{"est", est}});
}

TEST_CASE("similarity map and probabilistic distance gradients") {
  Var f = param({2, 3, 6, 5}, 150);
  const SimilarityMap target_t = time_similarity_map(constant(random_tensor({2, 3, 6, 5}, 151)));
  const SimilarityMap target_f = freq_similarity_map(constant(random_tensor({2, 3, 6, 5}, 152)));
  expect_grad([&] { return d_prop(time_similarity_map(f), target_t); }, {{"f", f}});
  expect_grad([&] { return d_prop(freq_similarity_map(f), target_f); }, {{"f", f}});

  Var p = param({3, 4, 4}, 153, 0.05, 0.95), q = param({3, 4, 4}, 154, 0.05, 0.95);
  expect_grad([&] { return d_prop(p, q); }, {{"p", p}, {"q", q}});
  expect_grad([&] { return contract(d_prop_instances(p, q), 155); }, {{"p", p}, {"q", q}});
}

TEST_CASE("pair loss gradient") {
  Var fs = param({2, 3, 6, 5}, 160), ft = param({2, 4, 6, 6}, 161);
  expect_grad([&] { return tfckd_pair_loss(fs, ft, 0.7, 1.3); }, {{"fs", fs}, {"ft", ft}});
}

TEST_CASE("embedding and calibration gradients") {
  ParamSet ps;
  Rng rng(170);
  const EmbeddingParams eq(ps, "q", Flow::Time, 6, 2, rng), ek(ps, "k", Flow::Time, 6, 2, rng);
  Var a = param({2, 3, 6, 5}, 171), b = param({2, 4, 6, 4}, 172), c = param({2, 2, 6, 3}, 173);
  auto loss = [&] {
    const Var qa = embed(time_similarity_map(a), eq), kb = embed(time_similarity_map(b), ek),
              kc = embed(time_similarity_map(c), ek);
    return contract(calibration_weights({qa}, {kb, kc}), 174);
  };
  auto vars = gradcheck::named(ps);
  vars.insert(vars.end(), {{"a", a}, {"b", b}, {"c", c}});
  expect_grad(loss, vars, {.probes_per_var = 8});
}

TEST_CASE("residual fusion gradients") {
  ParamSet ps;
  Rng rng(180);
  const std::vector<TapShape> layers{{"x", SetId::Encoder, 3, 6}, {"y", SetId::Encoder, 2, 4}};
  const FusionParams fp(ps, "fuse", layers, 3, rng);
  Var f = param({2, 2, 5, 4}, 181), r_prev = param({2, 3, 5, 6}, 182);
  auto vars = gradcheck::named(ps);
  vars.insert(vars.end(), {{"f", f}, {"r_prev", r_prev}});
  expect_grad(
      [&] {
        const FuseStep s = residual_fuse_step(f, r_prev, fp, 1);
        return add(contract(s.t, 183), contract(s.r, 184));
      },
      vars, {.probes_per_var = 8});

  Var f0 = param({2, 3, 5, 6}, 185);
  expect_grad([&] { return contract(residual_fuse_step(f0, Var(), fp, 0).t, 186); }, {{"f0", f0}});

  const CorrelatedSet set{{f0, "x", SetId::Encoder}, {f, "y", SetId::Encoder}};
  for (Direction d : {Direction::Forward, Direction::Reverse}) {
    expect_grad([&] { return contract(set_representative(set, d, fp), 187); }, {{"f0", f0}, {"f", f}},
                {.probes_per_var = 12});
  }
}

TEST_CASE("total student loss gradient for every strategy") {
  const StftConfig stft = tiny_stft();
  const MrstftConfig mr = tiny_mrstft();
  const Model student(tiny_backbone(4, 1), 190), teacher(tiny_backbone(6, 2), 191);
  const Tensor noisy = random_tensor({2, 1, 28}, 192, -0.5, 0.5), clean = random_tensor({2, 1, 28}, 193, -0.5, 0.5);
  for (StrategyId s : {StrategyId::None, StrategyId::BaseMse, StrategyId::M1, StrategyId::M2, StrategyId::M3,
                       StrategyId::M4}) {
    CAPTURE(strategy_name(s));
    DistillConfig dc;
    dc.strategy = s;
    dc.batch_size = 2;
    dc.frames = stft.frames(28);
    dc.factor = 2;
    dc.student_recursive_channels = 3;
    dc.teacher_recursive_channels = 4;
    REQUIRE(dc.frames == 8);
    const DistillState st(student.config(), teacher.config(), dc, 194);
    auto vars = gradcheck::named(student.params());
    const auto extra = gradcheck::named(st.params());
    vars.insert(vars.end(), extra.begin(), extra.end());
    expect_grad(
        [&] { return total_student_loss(noisy, clean, student, teacher, &st, s, {1, 0.5, 2}, stft, mr).total; }, vars,
        {.probes_per_var = 2, .seed = 195});
  }
}
