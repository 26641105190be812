#include <cmath>

#include "doctest.h"
#include "helpers.hpp"
#include "kdse/backbone.hpp"
#include "kdse/dataset.hpp"

using namespace kdse;
using testutil::random_tensor;

namespace {

/// Parameter count written out from the layer list: strided convs, dense
/// dilated blocks, F-T blocks of attention + GRU branches, deconvs.
Index expected_params(const BackboneConfig& c) {
  const Index C = c.conv_channels, H = c.ft_hidden, in = c.in_channels;
  const Index norm = 2 * C;
  Index enc = in * C * 3 + C + norm + C * C * 3 + C + norm;
  Index dense = 0;
  for (std::size_t k = 1; k <= c.dilations.size(); ++k) dense += static_cast<Index>(k) * C * C * 2 * 3 + C + norm;
  const Index attn = (C * 3 * C + 3 * C) + (C * C + C);
  const Index gru = (C * 3 * H + 3 * H) + H * 3 * H + 3 * H;
  const Index branch = attn + 2 * (2 * C) + gru + (H * C + C);
  const Index dec = C * C * 3 + C + norm + C * 2 * 3 + 2;
  return enc + 2 * dense + c.n_ft_blocks * 2 * branch + dec;
}

Tensor random_features(Index b, Index t, std::uint64_t seed, Index channels = 2) {
  return random_tensor({b, channels, t, 257}, seed);
}

}  // namespace

TEST_CASE("backbone config validation") {
  CHECK_NOTHROW(BackboneConfig::teacher().validate());
  BackboneConfig c = BackboneConfig::student();
  c.dilations = {1, 4, 2, 8};
  CHECK_THROWS(c.validate());
  c = BackboneConfig::student();
  c.n_ft_blocks = 0;
  CHECK_THROWS(c.validate());
  c = BackboneConfig::student();
  c.conv_channels = 0;
  CHECK_THROWS(c.validate());
  c = BackboneConfig::student();
  c.tap_plan = {"enc.conv1", "nope"};
  CHECK_THROWS(c.validate());
  CHECK_THROWS(BackboneConfig::student_variant("XL"));
  CHECK(BackboneConfig::student_variant("M") == BackboneConfig::student());
}

TEST_CASE("teacher and student defaults") {
  const auto t = BackboneConfig::teacher(), s = BackboneConfig::student();
  CHECK(t.conv_channels == 128);
  CHECK(t.n_ft_blocks == 4);
  CHECK(t.ft_hidden == 128);
  CHECK(s.conv_channels == 64);
  CHECK(s.n_ft_blocks == 1);
  CHECK(s.ft_hidden == 64);
  CHECK(t.dilations == std::vector<Index>{1, 2, 4, 8});
  CHECK(t.in_channels == 2);
}

TEST_CASE("parameter counts follow the layer list") {
  for (const auto& cfg : {BackboneConfig::teacher(), BackboneConfig::student(), BackboneConfig::student_variant("S"),
                          BackboneConfig::student_variant("L")}) {
    const Model m(cfg, 1);
    CHECK(count_params(m.params()) == expected_params(cfg));
  }
  BackboneConfig multi = BackboneConfig::student();
  multi.in_channels = 16;
  CHECK(count_params(Model(multi, 1).params()) == expected_params(multi));
}

TEST_CASE("parameter counts match the published model sizes") {
  const double teacher = static_cast<double>(Model(BackboneConfig::teacher(), 1).params().count());
  const double student = static_cast<double>(Model(BackboneConfig::student(), 1).params().count());
  CHECK(std::abs(teacher - 3.5e6) <= 0.35e6);
  CHECK(std::abs(student - 0.6e6) <= 0.06e6);
  CHECK(student / teacher >= 0.14);
  CHECK(student / teacher <= 0.20);
  const double small = static_cast<double>(Model(BackboneConfig::student_variant("S"), 1).params().count());
  const double large = static_cast<double>(Model(BackboneConfig::student_variant("L"), 1).params().count());
  CHECK(small < student);
  CHECK(large > student);
  CHECK(large < teacher);
}

TEST_CASE("frequency widths halve along the encoder") {
  CHECK(downsampled_width(257, 1) == 129);
  CHECK(downsampled_width(257, 2) == 65);
  CHECK(downsampled_width(256, 1) == 128);
}

TEST_CASE("forward shapes and taps agree with tap_shapes") {
  for (const auto& cfg : {BackboneConfig::teacher(), BackboneConfig::student()}) {
    const Model m(cfg, 3);
    NoGradGuard g;
    const Index t = 6;
    const ForwardOutput out = m.forward(constant(random_features(2, t, 4)));
    CHECK(out.mask.shape() == Shape{2, 2, t, 257});
    CHECK(out.taps.encoder.size() == 3);
    CHECK(out.taps.ft.size() == static_cast<std::size_t>(cfg.n_ft_blocks));
    CHECK(out.taps.decoder.size() == 3);

    const auto shapes = tap_shapes(cfg);
    std::size_t k = 0;
    for (SetId id : {SetId::Encoder, SetId::Ft, SetId::Decoder}) {
      for (const auto& f : out.taps.set(id)) {
        REQUIRE(k < shapes.size());
        CHECK(f.tap == shapes[k].tap);
        CHECK(f.set == shapes[k].set);
        CHECK(f.data.shape() == Shape{2, shapes[k].channels, t, shapes[k].width});
        CHECK(testutil::all_finite(f.data.value()));
        ++k;
      }
    }
    CHECK(k == shapes.size());
    CHECK(shapes[0].width == 129);
    CHECK(shapes[1].width == 65);
  }
}

TEST_CASE("mask shape for a default training batch") {
  const Model m(BackboneConfig::student(), 5);
  NoGradGuard g;
  const StftConfig stft;
  const Index frames = stft.frames(40000);
  CHECK(frames == 157);
  const ForwardOutput out = m.forward(constant(random_features(8, frames, 6)));
  CHECK(out.mask.shape() == Shape{8, 2, 157, 257});
}

TEST_CASE("tap plans restrict the recorded taps") {
  BackboneConfig cfg = BackboneConfig::student();
  cfg.tap_plan = {"enc.conv2", "dec.deconv2"};
  const Model m(cfg, 1);
  NoGradGuard g;
  const ForwardOutput out = m.forward(constant(random_features(1, 3, 7)));
  CHECK(out.taps.encoder.size() == 1);
  CHECK(out.taps.ft.empty());
  CHECK(out.taps.decoder.size() == 1);
  CHECK(out.taps.decoder[0].tap == "dec.deconv2");
  CHECK(tap_shapes(cfg).size() == 2);
}

TEST_CASE("forward input checks") {
  const Model m(BackboneConfig::student(), 1);
  CHECK_THROWS(m.forward(constant(Tensor(Shape{1, 2, 4, 256}))));
  CHECK_THROWS(m.forward(constant(Tensor(Shape{1, 4, 4, 257}))));
  CHECK_THROWS(m.forward(constant(Tensor(Shape{1, 2, 0, 257}))));
}

TEST_CASE("zero input gives a finite mask") {
  const Model m(BackboneConfig::teacher(), 2);
  NoGradGuard g;
  const ForwardOutput out = m.forward(constant(Tensor(Shape{1, 2, 5, 257})));
  CHECK(testutil::all_finite(out.mask.value()));
}

TEST_CASE("future frames do not influence the mask") {
  for (const auto& cfg : {BackboneConfig::teacher(), BackboneConfig::student()}) {
    for (std::uint64_t seed : {1u, 2u}) {
      const Model m(cfg, seed);
      NoGradGuard g;
      const Index frames = 10;
      const Tensor x = random_features(2, frames, seed + 10);
      const Tensor base = m.forward(constant(x)).mask.value();
      for (Index t : {Index(2), Index(6)}) {
        Tensor y = x.clone();
        Rng rng(seed * 100 + static_cast<std::uint64_t>(t));
        for (Index b = 0; b < 2; ++b)
          for (Index c = 0; c < 2; ++c)
            for (Index tt = t + 1; tt < frames; ++tt)
              for (Index f = 0; f < 257; ++f) y.at({b, c, tt, f}) += static_cast<Real>(rng.uniform(-5, 5));
        const Tensor pert = m.forward(constant(y)).mask.value();
        double worst = 0, later = 0;
        for (Index b = 0; b < 2; ++b)
          for (Index c = 0; c < 2; ++c)
            for (Index tt = 0; tt < frames; ++tt)
              for (Index f = 0; f < 257; ++f) {
                const double d = std::abs(base.at({b, c, tt, f}) - pert.at({b, c, tt, f}));
                double& slot = tt <= t ? worst : later;
                slot = std::max(slot, d);
              }
        CHECK(worst <= 1e-5);
        CHECK(later > 1e-3);  // the perturbation is visible downstream
      }
    }
  }
}

TEST_CASE("backbone loss reaches every parameter with a finite gradient") {
  const Model m(BackboneConfig::student(), 9);
  const Tensor noisy = random_tensor({2, 1, 2048}, 1, -0.3, 0.3);
  const Tensor clean = random_tensor({2, 1, 2048}, 2, -0.3, 0.3);
  const BackbonePass pass = backbone_pass(m, noisy, clean, StftConfig{}, MrstftConfig{});
  CHECK(pass.estimate.shape() == Shape{2, 2048});
  CHECK(std::isfinite(pass.loss.item()));
  backward(pass.loss);
  for (const auto& p : m.params().items()) {
    REQUIRE_MESSAGE(p.var.has_grad(), p.name);
    CHECK_MESSAGE(testutil::all_finite(p.var.grad()), p.name);
  }
}

TEST_CASE("identity mask enhancement returns the input") {
  const IdentityMask id;
  const auto s = synthesize_speech(3, 0.5);
  const Tensor wave(Shape{static_cast<Index>(s.size())}, s);
  const Tensor out = enhance(id, wave, StftConfig{});
  CHECK(out.numel() == wave.numel());
  CHECK(testutil::max_abs_diff(out, wave) < 1e-5);
  CHECK(si_snr(out.values(), wave.values()) > 80);

  const Tensor silent(Shape{8000});
  const Tensor quiet = enhance(id, silent, StftConfig{});
  double energy = 0;
  for (Real v : quiet.values()) energy += static_cast<double>(v) * v;
  CHECK(energy < 1e-8);
}

TEST_CASE("model enhancement keeps the signal length") {
  const Model m(BackboneConfig::student(), 4);
  const Tensor wave = random_tensor({5000}, 8, -0.5, 0.5);
  const Tensor out = enhance(m, wave, StftConfig{});
  CHECK(out.shape() == Shape{5000});
  CHECK(testutil::all_finite(out));
  CHECK_THROWS(enhance(m, random_tensor({2, 5000}, 9), StftConfig{}));
}

TEST_CASE("multichannel features keep channel pairs") {
  const Tensor waves = random_tensor({2, 3, 4096}, 12);
  const Var feats = wave_features(constant(waves), StftConfig{});
  CHECK(feats.shape() == Shape{2, 6, StftConfig{}.frames(4096), 257});
}
