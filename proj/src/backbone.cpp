#include "kdse/backbone.hpp"

#include <algorithm>
#include <stdexcept>

namespace kdse::inline KDSE_PRECISION {

std::string set_name(SetId id) {
  switch (id) {
    case SetId::Encoder: return "encoder";
    case SetId::Ft: return "ft";
    case SetId::Decoder: return "decoder";
  }
  return "encoder";
}

const CorrelatedSet& TapBundle::set(SetId id) const {
  return id == SetId::Encoder ? encoder : id == SetId::Ft ? ft : decoder;
}

CorrelatedSet& TapBundle::set(SetId id) {
  return id == SetId::Encoder ? encoder : id == SetId::Ft ? ft : decoder;
}

BackboneConfig BackboneConfig::teacher() { return BackboneConfig{}; }

BackboneConfig BackboneConfig::student() {
  BackboneConfig c;
  c.conv_channels = 64;
  c.n_ft_blocks = 1;
  c.ft_hidden = 64;
  return c;
}

BackboneConfig BackboneConfig::student_variant(const std::string& size) {
  BackboneConfig c = student();
  if (size == "S") {
    c.conv_channels = c.ft_hidden = 32;
  } else if (size == "L") {
    c.conv_channels = c.ft_hidden = 96;
    c.n_ft_blocks = 2;
  } else if (size != "M") {
    throw std::invalid_argument("unknown student size '" + size + "' (expected S, M or L)");
  }
  return c;
}

void BackboneConfig::validate() const {
  if (in_channels < 1 || in_channels % 2 != 0) throw std::invalid_argument("in_channels must be a positive even number");
  if (conv_channels <= 0) throw std::invalid_argument("conv_channels must be positive");
  if (n_ft_blocks < 1) throw std::invalid_argument("n_ft_blocks must be at least 1");
  if (ft_hidden <= 0) throw std::invalid_argument("ft_hidden must be positive");
  if (attention_heads < 1 || conv_channels % attention_heads != 0) {
    throw std::invalid_argument("conv_channels must be divisible by attention_heads");
  }
  if (dilations.empty()) throw std::invalid_argument("dilations must not be empty");
  for (std::size_t i = 0; i < dilations.size(); ++i) {
    if (dilations[i] < 1 || (i > 0 && dilations[i] <= dilations[i - 1])) {
      throw std::invalid_argument("dilations must be positive and strictly increasing");
    }
  }
  if (bins < 5) throw std::invalid_argument("too few frequency bins");
  const auto all = all_taps();
  for (const auto& t : tap_plan) {
    if (std::find(all.begin(), all.end(), t) == all.end()) throw std::invalid_argument("unknown tap '" + t + "'");
  }
}

std::vector<std::string> BackboneConfig::all_taps() const {
  std::vector<std::string> t{"enc.conv1", "enc.conv2", "enc.dilated"};
  for (Index i = 0; i < n_ft_blocks; ++i) t.push_back("ft." + std::to_string(i));
  t.insert(t.end(), {"dec.dilated", "dec.deconv1", "dec.deconv2"});
  return t;
}

bool BackboneConfig::wants_tap(const std::string& name) const {
  return tap_plan.empty() || std::find(tap_plan.begin(), tap_plan.end(), name) != tap_plan.end();
}

Index downsampled_width(Index bins, int times) {
  for (int i = 0; i < times; ++i) bins = (bins - 1) / 2 + 1;
  return bins;
}

std::vector<TapShape> tap_shapes(const BackboneConfig& cfg) {
  const Index c = cfg.conv_channels;
  const Index w1 = downsampled_width(cfg.bins, 1), w2 = downsampled_width(cfg.bins, 2);
  std::vector<TapShape> all{{"enc.conv1", SetId::Encoder, c, w1},
                            {"enc.conv2", SetId::Encoder, c, w2},
                            {"enc.dilated", SetId::Encoder, c, w2}};
  for (Index i = 0; i < cfg.n_ft_blocks; ++i) all.push_back({"ft." + std::to_string(i), SetId::Ft, c, w2});
  all.push_back({"dec.dilated", SetId::Decoder, c, w2});
  all.push_back({"dec.deconv1", SetId::Decoder, c, w1});
  all.push_back({"dec.deconv2", SetId::Decoder, 2, cfg.bins});
  std::vector<TapShape> out;
  for (auto& t : all) {
    if (cfg.wants_tap(t.tap)) out.push_back(std::move(t));
  }
  return out;
}

namespace {

Conv2dSpec freq_stride_spec() {
  Conv2dSpec s;
  s.stride_w = 2;
  s.pad_left = s.pad_right = 1;
  return s;
}

}  // namespace

Model::DenseBlock Model::make_dense(const std::string& prefix, Rng& rng) {
  DenseBlock b;
  const Index c = cfg_.conv_channels;
  for (std::size_t i = 0; i < cfg_.dilations.size(); ++i) {
    Conv2dSpec s;
    s.dilation_h = cfg_.dilations[i];
    s.pad_top = cfg_.dilations[i];
    s.pad_left = s.pad_right = 1;
    const std::string name = prefix + "." + std::to_string(i);
    b.convs.emplace_back(params_, name + ".conv", c * static_cast<Index>(i + 1), c, 2, 3, s, rng);
    b.norms.emplace_back(params_, name + ".norm", c);
  }
  return b;
}

Model::Model(BackboneConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  cfg_.validate();
  Rng rng(derive_seed(seed, 0xbac6b0e));
  const Index c = cfg_.conv_channels;
  enc_conv1_ = Conv2d(params_, "enc.conv1", cfg_.in_channels, c, 1, 3, freq_stride_spec(), rng);
  enc_norm1_ = ChannelFreqNorm(params_, "enc.norm1", c);
  enc_conv2_ = Conv2d(params_, "enc.conv2", c, c, 1, 3, freq_stride_spec(), rng);
  enc_norm2_ = ChannelFreqNorm(params_, "enc.norm2", c);
  enc_dense_ = make_dense("enc.dilated", rng);
  for (Index i = 0; i < cfg_.n_ft_blocks; ++i) {
    const std::string p = "ft." + std::to_string(i);
    FtBlock blk;
    for (int which = 0; which < 2; ++which) {
      const std::string bp = p + (which == 0 ? ".freq" : ".time");
      Branch br{SelfAttention(params_, bp + ".attn", c, cfg_.attention_heads, which == 1, rng),
                LayerNorm(params_, bp + ".norm1", c), LayerNorm(params_, bp + ".norm2", c),
                Gru(params_, bp + ".gru", c, cfg_.ft_hidden, rng), Linear(params_, bp + ".dense", cfg_.ft_hidden, c, rng)};
      (which == 0 ? blk.freq : blk.time) = std::move(br);
    }
    ft_.push_back(std::move(blk));
  }
  dec_dense_ = make_dense("dec.dilated", rng);
  dec_deconv1_ = ConvTranspose2d(params_, "dec.deconv1", c, c, 1, 3, freq_stride_spec(), rng);
  dec_norm1_ = ChannelFreqNorm(params_, "dec.norm1", c);
  dec_deconv2_ = ConvTranspose2d(params_, "dec.deconv2", c, 2, 1, 3, freq_stride_spec(), rng);
  // Start near the identity mask.
  for (Real& v : dec_deconv2_.w.mutable_value().values()) v *= Real(0.1);
  dec_deconv2_.b.mutable_value()[0] = 1;
  dec_deconv2_.b.mutable_value()[1] = 0;
}

Var Model::run_dense(const DenseBlock& block, const Var& x) const {
  std::vector<Var> inputs{x};
  Var out;
  for (std::size_t i = 0; i < block.convs.size(); ++i) {
    const Var in = inputs.size() == 1 ? inputs[0] : concat(inputs, 1);
    out = relu(block.norms[i](block.convs[i](in)));
    inputs.push_back(out);
  }
  return out;
}

Var Model::run_branch(const Branch& br, const Var& seq) const {
  const Var y = br.norm1(add(seq, br.attn(seq)));
  return br.norm2(add(y, br.dense(relu(br.gru(y)))));
}

Var Model::run_ft(const FtBlock& blk, const Var& x) const {
  const Index b = x.dim(0), c = x.dim(1), t = x.dim(2), d = x.dim(3);
  // Frequency branch: sequences along D, one per (b, t).
  Var f = reshape(permute(x, {0, 2, 3, 1}), {b * t, d, c});
  f = run_branch(blk.freq, f);
  f = reshape(f, {b, t, d, c});
  // Temporal branch: causal sequences along T, one per (b, d).
  Var s = reshape(permute(f, {0, 2, 1, 3}), {b * d, t, c});
  s = run_branch(blk.time, s);
  return permute(reshape(s, {b, d, t, c}), {0, 3, 2, 1});
}

ForwardOutput Model::forward(const Var& x) const {
  if (x.rank() != 4) throw std::invalid_argument("model input must be (B, C, T, F)");
  if (x.dim(1) != cfg_.in_channels) {
    throw std::invalid_argument("model expects " + std::to_string(cfg_.in_channels) + " input channels, got " +
                                std::to_string(x.dim(1)));
  }
  if (x.dim(3) != cfg_.bins) {
    throw std::invalid_argument("model expects " + std::to_string(cfg_.bins) + " bins, got " + std::to_string(x.dim(3)));
  }
  if (x.dim(2) < 1) throw std::invalid_argument("input has no frames");
  ForwardOutput out;
  auto tap = [&](const std::string& name, SetId set, const Var& v) {
    if (cfg_.wants_tap(name)) out.taps.set(set).push_back({v, name, set});
  };
  const Var e1 = relu(enc_norm1_(enc_conv1_(x)));
  tap("enc.conv1", SetId::Encoder, e1);
  const Var e2 = relu(enc_norm2_(enc_conv2_(e1)));
  tap("enc.conv2", SetId::Encoder, e2);
  const Var e3 = run_dense(enc_dense_, e2);
  tap("enc.dilated", SetId::Encoder, e3);
  Var h = e3;
  for (std::size_t i = 0; i < ft_.size(); ++i) {
    h = run_ft(ft_[i], h);
    tap("ft." + std::to_string(i), SetId::Ft, h);
  }
  const Var d1 = run_dense(dec_dense_, add(h, e3));
  tap("dec.dilated", SetId::Decoder, d1);
  const Var d2 = relu(dec_norm1_(dec_deconv1_(add(d1, e2))));
  tap("dec.deconv1", SetId::Decoder, d2);
  out.mask = dec_deconv2_(add(d2, e1));
  tap("dec.deconv2", SetId::Decoder, out.mask);
  return out;
}

ForwardOutput IdentityMask::forward(const Var& x) const {
  if (x.rank() != 4 || x.dim(1) != in_channels_) throw std::invalid_argument("identity mask: bad input shape");
  Tensor m(Shape{x.dim(0), 2, x.dim(2), x.dim(3)});
  const Index plane = x.dim(2) * x.dim(3);
  for (Index b = 0; b < x.dim(0); ++b) std::fill_n(m.data() + b * 2 * plane, plane, Real(1));
  return {constant(std::move(m)), {}};
}

Var wave_features(const Var& waves, const StftConfig& cfg) {
  if (waves.rank() != 3) throw std::invalid_argument("waves must be (B, channels, samples)");
  const Index b = waves.dim(0), c = waves.dim(1), s = waves.dim(2);
  const Var spec = stft_op(reshape(waves, {b * c, s}), cfg);
  return reshape(spec, {b, 2 * c, spec.dim(2), spec.dim(3)});
}

Var masked_waveform(const Var& features, const Var& mask, const StftConfig& cfg, Index length) {
  const Var ref = features.dim(1) == 2 ? features : slice(features, 1, 0, 2);
  return istft_op(complex_mul(ref, mask), cfg, length);
}

BackbonePass backbone_pass(const MaskEstimator& model, const Tensor& noisy, const Tensor& clean,
                           const StftConfig& stft, const MrstftConfig& mrstft) {
  if (noisy.rank() != 3 || noisy.shape() != clean.shape()) {
    throw std::invalid_argument("noisy and clean must share a (B, channels, samples) shape");
  }
  const Index b = noisy.dim(0), c = noisy.dim(1), s = noisy.dim(2);
  Tensor ref(Shape{b, s});
  for (Index i = 0; i < b; ++i) std::copy_n(clean.data() + i * c * s, s, ref.data() + i * s);
  BackbonePass pass;
  const Var feats = wave_features(constant(noisy), stft);
  pass.out = model.forward(feats);
  pass.estimate = masked_waveform(feats, pass.out.mask, stft, s);
  pass.loss = mrstft_loss(pass.estimate, constant(std::move(ref)), mrstft);
  return pass;
}

Tensor enhance(const MaskEstimator& model, const Tensor& wave, const StftConfig& cfg) {
  NoGradGuard guard;
  const Index channels = wave.rank() == 2 ? wave.dim(0) : 1;
  const Index samples = wave.dim(-1);
  if (2 * channels != model.in_channels()) {
    throw std::invalid_argument("input has " + std::to_string(channels) + " channel(s), model expects " +
                                std::to_string(model.in_channels() / 2));
  }
  const Var w = constant(wave.clone().reshape({1, channels, samples}));
  const Var feats = wave_features(w, cfg);
  const ForwardOutput fo = model.forward(feats);
  return masked_waveform(feats, fo.mask, cfg, samples).value().reshape({samples});
}

}  // namespace kdse::inline KDSE_PRECISION
