#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "kdse/backbone.hpp"
#include "kdse/layers.hpp"

namespace kdse::inline KDSE_PRECISION {

enum class Flow { Time, Freq };

std::string flow_name(Flow f);

/// Time flow: (B, T, T). Frequency flow: (T, B, B).
struct SimilarityMap {
  Var data;
  Flow flow = Flow::Time;
};

/// (B, C, T, D) -> (B, T, T) of (cos + 1) / 2 between frames of each item.
SimilarityMap time_similarity_map(const Var& features);
/// (B, C, T, D) -> (T, B, B) of (cos + 1) / 2 between items at each frame.
SimilarityMap freq_similarity_map(const Var& features);

/// Linear(width -> width * factor), ReLU, Linear(-> width), l2 norm.
struct EmbeddingParams {
  Flow flow = Flow::Time;
  Index width = 0, factor = 4;
  Linear w1, w2;

  EmbeddingParams() = default;
  EmbeddingParams(ParamSet& ps, const std::string& prefix, Flow flow, Index width, Index factor, Rng& rng);
};

Var embed(const SimilarityMap& map, const EmbeddingParams& params);

/// Query and key embeddings for both flows.
struct CalibrationParams {
  EmbeddingParams q_time, k_time, q_freq, k_freq;

  CalibrationParams() = default;
  CalibrationParams(ParamSet& ps, const std::string& prefix, Index frames, Index batch, Index factor, Rng& rng);
  const EmbeddingParams& query(Flow f) const { return f == Flow::Time ? q_time : q_freq; }
  const EmbeddingParams& key(Flow f) const { return f == Flow::Time ? k_time : k_freq; }
};

/// queries[l_s], keys[l_t] are (N, L, L) embedded maps. Returns alpha
/// (N, L_s, L_t) with a softmax over l_t of <Q, K> / L.
Var calibration_weights(const std::vector<Var>& queries, const std::vector<Var>& keys);

inline constexpr Real kDpropEps = Real(1e-7);

/// Mean of (p - q)(log p - log q) with both clamped to [eps, 1].
Var d_prop(const SimilarityMap& p, const SimilarityMap& q);
Var d_prop(const Var& p, const Var& q);
/// Per-instance d_prop over the leading axis: (N, L, L) pairs -> (N).
Var d_prop_instances(const Var& p, const Var& q);

/// alpha_t * d_prop(time maps) + alpha_f * d_prop(freq maps). Only B and T
/// must agree between the two features.
Var tfckd_pair_loss(const Var& fs, const Var& ft, Real alpha_t, Real alpha_f);

/// Gated recursive fusion for one correlated set of one model.
struct FusionParams {
  Index recursive_channels = 0;
  std::vector<Conv2d> conv_in, conv_out;  // one per layer
  Conv2d gate;

  FusionParams() = default;
  FusionParams(ParamSet& ps, const std::string& prefix, const std::vector<TapShape>& layers,
               Index recursive_channels, Rng& rng);
};

struct FuseStep {
  Var t, r;
  Var gates;  // (B, 2, T, D): [A_F, A_R]
};

/// One fusion step for layer `layer` of the set. r_prev undefined starts the
/// chain with r = conv_in(f).
FuseStep residual_fuse_step(const Var& f, const Var& r_prev, const FusionParams& params, std::size_t layer);

enum class Direction { Forward, Reverse };

Direction set_direction(SetId id);

/// Chains fusion steps over the set; returns the final fused output.
Var set_representative(const CorrelatedSet& feats, Direction dir, const FusionParams& params);

enum class StrategyId { None, BaseMse, M1, M2, M3, M4 };

std::string strategy_name(StrategyId s);
/// Accepts "none", "base_mse" (or "base"), "m1" .. "m4" in any case.
StrategyId parse_strategy(const std::string& s);

/// Teacher index for each student layer of a layer-wise strategy.
std::vector<std::size_t> layerwise_pairs(std::size_t m, std::size_t n, const std::string& set);

struct DistillConfig {
  StrategyId strategy = StrategyId::M4;
  Index batch_size = 8;
  Index frames = 157;
  Index factor = 4;
  Index teacher_recursive_channels = 128;
  Index student_recursive_channels = 64;
};

/// Trainable distillation parameters for one teacher/student pair.
class DistillState {
 public:
  DistillState(const BackboneConfig& student, const BackboneConfig& teacher, DistillConfig cfg,
               std::uint64_t seed);

  const DistillConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }

  const CalibrationParams& intra(SetId id) const;
  const CalibrationParams& inter() const { return inter_; }
  const FusionParams& student_fusion(SetId id) const;
  const FusionParams& teacher_fusion(SetId id) const;
  /// 1x1 projection from student tap channels to teacher tap channels.
  const Conv2d& projection(const std::string& student_tap) const;

 private:
  DistillConfig cfg_;
  ParamSet params_;
  std::vector<CalibrationParams> intra_;
  CalibrationParams inter_;
  std::vector<FusionParams> student_fusion_, teacher_fusion_;
  std::vector<std::string> projection_taps_;
  std::vector<Conv2d> projections_;
};

struct DistillLoss {
  Var intra, inter;
  int intra_pairs = 0, inter_pairs = 0;
};

DistillLoss intra_inter_loss(const TapBundle& student, const TapBundle& teacher, const DistillState& state,
                             StrategyId strategy);

struct LossWeights {
  Real backbone = 1, intra = 1, inter = 1;

  bool operator==(const LossWeights&) const = default;
};

struct StudentLoss {
  Var total, backbone, intra, inter;
  int intra_pairs = 0, inter_pairs = 0;
};

/// Backbone MRSTFT loss of the student plus weighted distillation terms.
/// The teacher runs without recording gradients.
StudentLoss total_student_loss(const Tensor& noisy, const Tensor& clean, const Model& student,
                               const Model& teacher, const DistillState* state, StrategyId strategy,
                               const LossWeights& weights, const StftConfig& stft, const MrstftConfig& mrstft);

}  // namespace kdse::inline KDSE_PRECISION
