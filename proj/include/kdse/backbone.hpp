#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "kdse/dsp.hpp"
#include "kdse/layers.hpp"

namespace kdse::inline KDSE_PRECISION {

enum class SetId { Encoder, Ft, Decoder };

std::string set_name(SetId id);

struct FeatureMap {
  Var data;  // (B, C, T, D)
  std::string tap;
  SetId set = SetId::Encoder;
};

using CorrelatedSet = std::vector<FeatureMap>;

struct TapBundle {
  CorrelatedSet encoder, ft, decoder;

  const CorrelatedSet& set(SetId id) const;
  CorrelatedSet& set(SetId id);
};

struct BackboneConfig {
  Index in_channels = 2;
  Index conv_channels = 128;
  Index n_ft_blocks = 4;
  Index ft_hidden = 128;
  std::vector<Index> dilations{1, 2, 4, 8};
  Index attention_heads = 4;
  Index bins = 257;
  /// Empty means every tap.
  std::vector<std::string> tap_plan;

  static BackboneConfig teacher();
  static BackboneConfig student();
  /// Compression variants "S", "M" (the default student) and "L".
  static BackboneConfig student_variant(const std::string& size);

  void validate() const;
  /// Names of all taps in depth order.
  std::vector<std::string> all_taps() const;
  bool wants_tap(const std::string& name) const;
  bool operator==(const BackboneConfig&) const = default;
};

/// Frequency widths after the encoder's two stride-2 convolutions.
Index downsampled_width(Index bins, int times);

struct TapShape {
  std::string tap;
  SetId set = SetId::Encoder;
  Index channels = 0, width = 0;
};

/// Channel count and feature width of every tap in the config's plan.
std::vector<TapShape> tap_shapes(const BackboneConfig& cfg);

struct ForwardOutput {
  Var mask;  // (B, 2, T, F), [re, im]
  TapBundle taps;
};

/// Anything that maps network input features to a complex ratio mask.
class MaskEstimator {
 public:
  virtual ~MaskEstimator() = default;
  /// features: (B, in_channels, T, F) with channels [re0, im0, re1, im1, ...].
  virtual ForwardOutput forward(const Var& features) const = 0;
  virtual Index in_channels() const = 0;
};

class Model : public MaskEstimator {
 public:
  Model(BackboneConfig cfg, std::uint64_t seed);

  ForwardOutput forward(const Var& features) const override;
  Index in_channels() const override { return cfg_.in_channels; }

  const BackboneConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

 private:
  struct DenseBlock {
    std::vector<Conv2d> convs;
    std::vector<ChannelFreqNorm> norms;
  };
  struct Branch {
    SelfAttention attn;
    LayerNorm norm1, norm2;
    Gru gru;
    Linear dense;
  };
  struct FtBlock {
    Branch freq, time;
  };

  DenseBlock make_dense(const std::string& prefix, Rng& rng);
  Var run_dense(const DenseBlock& block, const Var& x) const;
  Var run_branch(const Branch& br, const Var& seq) const;
  Var run_ft(const FtBlock& blk, const Var& x) const;

  BackboneConfig cfg_;
  ParamSet params_;
  Conv2d enc_conv1_, enc_conv2_;
  ChannelFreqNorm enc_norm1_, enc_norm2_;
  DenseBlock enc_dense_, dec_dense_;
  std::vector<FtBlock> ft_;
  ConvTranspose2d dec_deconv1_, dec_deconv2_;
  ChannelFreqNorm dec_norm1_;
};

/// Mask of ones: enhancement returns its input.
class IdentityMask : public MaskEstimator {
 public:
  explicit IdentityMask(Index in_channels = 2) : in_channels_(in_channels) {}
  ForwardOutput forward(const Var& features) const override;
  Index in_channels() const override { return in_channels_; }

 private:
  Index in_channels_;
};

/// (B, channels, S) waves -> (B, 2*channels, T, F) features.
Var wave_features(const Var& waves, const StftConfig& cfg);
/// Masks channel 0 of the noisy features and returns (B, S) waveforms.
Var masked_waveform(const Var& features, const Var& mask, const StftConfig& cfg, Index length);

struct BackbonePass {
  ForwardOutput out;
  Var estimate;  // (B, S)
  Var loss;
};

/// Forward pass on (B, C, S) noisy waves and MRSTFT loss against channel 0
/// of the clean waves.
BackbonePass backbone_pass(const MaskEstimator& model, const Tensor& noisy, const Tensor& clean,
                           const StftConfig& stft, const MrstftConfig& mrstft);

/// stft -> forward -> mask -> istft. wave is (samples) or (channels, samples);
/// returns (samples).
Tensor enhance(const MaskEstimator& model, const Tensor& wave, const StftConfig& cfg);

}  // namespace kdse::inline KDSE_PRECISION
