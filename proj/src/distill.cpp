#include "kdse/distill.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <stdexcept>

namespace kdse::inline KDSE_PRECISION {

namespace {

constexpr std::array<SetId, 3> kSets{SetId::Encoder, SetId::Ft, SetId::Decoder};

std::size_t set_index(SetId id) { return static_cast<std::size_t>(id); }

Var zero_scalar() { return constant(Tensor(Shape{}, Real(0))); }

void require_features(const Var& f, const char* what) {
  if (!f.defined() || f.rank() != 4) throw std::invalid_argument(std::string(what) + ": need (B, C, T, D) features");
  for (Real v : f.value().values()) {
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(what) + ": non-finite feature value");
  }
}

struct LayerMaps {
  Var time, freq;
  const Var& get(Flow f) const { return f == Flow::Time ? time : freq; }
};

LayerMaps maps_of(const Var& f) { return {time_similarity_map(f).data, freq_similarity_map(f).data}; }

std::vector<LayerMaps> maps_of(const std::vector<Var>& fs) {
  std::vector<LayerMaps> out;
  for (const Var& f : fs) out.push_back(maps_of(f));
  return out;
}

Var pair_loss(const LayerMaps& s, const LayerMaps& t) { return add(d_prop(s.time, t.time), d_prop(s.freq, t.freq)); }

/// Calibrated multi-layer loss over both flows, averaged over instances
/// and student layers.
Var calibrated_loss(const std::vector<LayerMaps>& student, const std::vector<LayerMaps>& teacher,
                    const CalibrationParams& cp) {
  Var total;
  for (Flow flow : {Flow::Time, Flow::Freq}) {
    std::vector<Var> qs, ks;
    for (const auto& m : student) qs.push_back(embed({m.get(flow), flow}, cp.query(flow)));
    for (const auto& m : teacher) ks.push_back(embed({m.get(flow), flow}, cp.key(flow)));
    const Var alpha = calibration_weights(qs, ks);
    std::vector<Var> rows;
    for (const auto& p : student) {
      std::vector<Var> cols;
      for (const auto& q : teacher) cols.push_back(d_prop_instances(p.get(flow), q.get(flow)));
      rows.push_back(stack(cols));
    }
    const Var dist = permute(stack(rows), {2, 0, 1});
    const Real norm = Real(1) / static_cast<Real>(alpha.dim(0) * alpha.dim(1));
    const Var term = scale(sum(mul(alpha, dist)), norm);
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

std::vector<Var> detached(const CorrelatedSet& set) {
  std::vector<Var> out;
  for (const auto& f : set) out.push_back(constant(f.data.value()));
  return out;
}

std::vector<Var> values(const CorrelatedSet& set) {
  std::vector<Var> out;
  for (const auto& f : set) out.push_back(f.data);
  return out;
}

std::vector<TapShape> shapes_of(const BackboneConfig& cfg, SetId id) {
  std::vector<TapShape> out;
  for (auto& t : tap_shapes(cfg)) {
    if (t.set == id) out.push_back(std::move(t));
  }
  return out;
}

Conv2dSpec same_3x3() {
  Conv2dSpec s;
  s.pad_top = s.pad_bottom = s.pad_left = s.pad_right = 1;
  return s;
}

}  // namespace

std::string flow_name(Flow f) { return f == Flow::Time ? "time" : "freq"; }

SimilarityMap time_similarity_map(const Var& features) {
  require_features(features, "time_similarity_map");
  const Index b = features.dim(0), c = features.dim(1), t = features.dim(2), d = features.dim(3);
  const Var rows = reshape(permute(features, {0, 2, 1, 3}), {b, t, c * d});
  return {cosine_similarity_map(rows), Flow::Time};
}

SimilarityMap freq_similarity_map(const Var& features) {
  require_features(features, "freq_similarity_map");
  const Index b = features.dim(0), c = features.dim(1), t = features.dim(2), d = features.dim(3);
  const Var rows = reshape(permute(features, {2, 0, 1, 3}), {t, b, c * d});
  return {cosine_similarity_map(rows), Flow::Freq};
}

EmbeddingParams::EmbeddingParams(ParamSet& ps, const std::string& prefix, Flow flow_, Index width_, Index factor_,
                                 Rng& rng)
    : flow(flow_), width(width_), factor(factor_) {
  if (width < 1) throw std::invalid_argument("embedding width must be positive");
  if (factor < 1) throw std::invalid_argument("embedding factor must be at least 1");
  w1 = Linear(ps, prefix + ".fc1", width, width * factor, rng);
  w2 = Linear(ps, prefix + ".fc2", width * factor, width, rng);
}

Var embed(const SimilarityMap& map, const EmbeddingParams& params) {
  if (map.flow != params.flow) {
    throw std::invalid_argument("embed: " + flow_name(map.flow) + "-flow map given to a " + flow_name(params.flow) +
                                "-flow embedding");
  }
  if (map.data.dim(-1) != params.width) {
    throw std::invalid_argument("embed: map width " + std::to_string(map.data.dim(-1)) + " but embedding expects " +
                                std::to_string(params.width));
  }
  return l2_normalize_last(params.w2(relu(params.w1(map.data))));
}

CalibrationParams::CalibrationParams(ParamSet& ps, const std::string& prefix, Index frames, Index batch,
                                     Index factor, Rng& rng)
    : q_time(ps, prefix + ".q_time", Flow::Time, frames, factor, rng),
      k_time(ps, prefix + ".k_time", Flow::Time, frames, factor, rng),
      q_freq(ps, prefix + ".q_freq", Flow::Freq, batch, factor, rng),
      k_freq(ps, prefix + ".k_freq", Flow::Freq, batch, factor, rng) {}

Var calibration_weights(const std::vector<Var>& queries, const std::vector<Var>& keys) {
  if (keys.empty()) throw std::invalid_argument("calibration_weights: empty teacher list");
  if (queries.empty()) throw std::invalid_argument("calibration_weights: empty student list");
  const Shape& shape = queries.front().shape();
  if (shape.size() != 3) throw std::invalid_argument("calibration_weights: maps must be (N, L, L)");
  for (const auto* list : {&queries, &keys}) {
    for (const Var& v : *list) {
      if (v.shape() != shape) throw std::invalid_argument("calibration_weights: maps disagree in shape");
    }
  }
  const Index n = shape[0], l = shape[1], flat = shape[1] * shape[2];
  const auto ls = static_cast<Index>(queries.size()), lt = static_cast<Index>(keys.size());
  const Var q = reshape(permute(stack(queries), {1, 0, 2, 3}), {n, ls, flat});
  const Var k = reshape(permute(stack(keys), {1, 0, 2, 3}), {n, lt, flat});
  return softmax_last(scale(bmm(q, k, false, true), Real(1) / static_cast<Real>(l)));
}

Var d_prop(const Var& p, const Var& q) {
  if (p.shape() != q.shape()) throw std::invalid_argument("d_prop: shape mismatch");
  const Var pc = clamp(p, kDpropEps, Real(1));
  const Var qc = clamp(q, kDpropEps, Real(1));
  return mean(mul(sub(pc, qc), sub(log(pc), log(qc))));
}

Var d_prop(const SimilarityMap& p, const SimilarityMap& q) {
  if (p.flow != q.flow) throw std::invalid_argument("d_prop: flow mismatch");
  return d_prop(p.data, q.data);
}

Var d_prop_instances(const Var& p, const Var& q) {
  if (p.shape() != q.shape()) throw std::invalid_argument("d_prop: shape mismatch");
  if (p.rank() < 2) throw std::invalid_argument("d_prop_instances: need a leading instance axis");
  const Var pc = clamp(p, kDpropEps, Real(1));
  const Var qc = clamp(q, kDpropEps, Real(1));
  return mean_trailing(mul(sub(pc, qc), sub(log(pc), log(qc))), p.rank() - 1);
}

Var tfckd_pair_loss(const Var& fs, const Var& ft, Real alpha_t, Real alpha_f) {
  require_features(fs, "tfckd_pair_loss");
  require_features(ft, "tfckd_pair_loss");
  if (fs.dim(0) != ft.dim(0) || fs.dim(2) != ft.dim(2)) {
    throw std::invalid_argument("tfckd_pair_loss: student and teacher disagree in batch or frame count");
  }
  const Var lt = scale(d_prop(time_similarity_map(fs), time_similarity_map(ft)), alpha_t);
  const Var lf = scale(d_prop(freq_similarity_map(fs), freq_similarity_map(ft)), alpha_f);
  return add(lt, lf);
}

FusionParams::FusionParams(ParamSet& ps, const std::string& prefix, const std::vector<TapShape>& layers,
                           Index recursive_channels_, Rng& rng)
    : recursive_channels(recursive_channels_) {
  if (recursive_channels < 1) throw std::invalid_argument("recursive channel count must be positive");
  for (const auto& l : layers) {
    conv_in.emplace_back(ps, prefix + "." + l.tap + ".conv_in", l.channels, recursive_channels, 3, 3, same_3x3(), rng);
  }
  gate = Conv2d(ps, prefix + ".gate", 2 * recursive_channels, 2, 1, 1, Conv2dSpec{}, rng);
  for (const auto& l : layers) {
    conv_out.emplace_back(ps, prefix + "." + l.tap + ".conv_out", recursive_channels, l.channels, 3, 3, same_3x3(),
                          rng);
  }
}

FuseStep residual_fuse_step(const Var& f, const Var& r_prev, const FusionParams& params, std::size_t layer) {
  if (layer >= params.conv_in.size()) throw std::out_of_range("residual_fuse_step: layer index out of range");
  const Conv2d& cin = params.conv_in[layer];
  if (f.rank() != 4 || f.dim(1) != cin.w.dim(1)) {
    throw std::invalid_argument("residual_fuse_step: feature channels do not match the fusion layer");
  }
  FuseStep step;
  const Var ft = cin(f);
  if (!r_prev.defined()) {
    step.r = ft;
  } else {
    if (r_prev.rank() != 4 || r_prev.dim(1) != params.recursive_channels) {
      throw std::invalid_argument("residual_fuse_step: recursive feature has " + std::to_string(r_prev.dim(1)) +
                                  " channels, expected " + std::to_string(params.recursive_channels));
    }
    const Var rr = r_prev.dim(3) == ft.dim(3) ? r_prev : resize_nearest_last(r_prev, ft.dim(3));
    step.gates = sigmoid(params.gate(concat({ft, rr}, 1)));
    const Var a_f = slice(step.gates, 1, 0, 1);
    const Var a_r = slice(step.gates, 1, 1, 2);
    step.r = add(mul(a_r, rr), mul(a_f, ft));
  }
  step.t = params.conv_out[layer](step.r);
  return step;
}

Direction set_direction(SetId id) { return id == SetId::Decoder ? Direction::Reverse : Direction::Forward; }

Var set_representative(const CorrelatedSet& feats, Direction dir, const FusionParams& params) {
  if (feats.empty()) throw std::invalid_argument("set_representative: empty set");
  if (feats.size() != params.conv_in.size()) {
    throw std::invalid_argument("set_representative: set has " + std::to_string(feats.size()) +
                                " layers, fusion expects " + std::to_string(params.conv_in.size()));
  }
  Var r, t;
  for (std::size_t s = 0; s < feats.size(); ++s) {
    const std::size_t j = dir == Direction::Forward ? s : feats.size() - 1 - s;
    FuseStep step = residual_fuse_step(feats[j].data, r, params, j);
    r = std::move(step.r);
    t = std::move(step.t);
  }
  return t;
}

std::string strategy_name(StrategyId s) {
  switch (s) {
    case StrategyId::None: return "none";
    case StrategyId::BaseMse: return "base_mse";
    case StrategyId::M1: return "m1";
    case StrategyId::M2: return "m2";
    case StrategyId::M3: return "m3";
    case StrategyId::M4: return "m4";
  }
  return "none";
}

StrategyId parse_strategy(const std::string& s) {
  std::string k;
  for (char c : s) k += static_cast<char>(c == '-' ? '_' : std::tolower(static_cast<unsigned char>(c)));
  if (k == "base") return StrategyId::BaseMse;
  for (StrategyId id : {StrategyId::None, StrategyId::BaseMse, StrategyId::M1, StrategyId::M2, StrategyId::M3,
                        StrategyId::M4}) {
    if (strategy_name(id) == k) return id;
  }
  throw std::invalid_argument("unknown strategy '" + s + "' (expected none, base_mse, m1, m2, m3 or m4)");
}

std::vector<std::size_t> layerwise_pairs(std::size_t m, std::size_t n, const std::string& set) {
  if (m > n) {
    throw std::invalid_argument("set '" + set + "': layer-wise pairing needs no more student layers (" +
                                std::to_string(m) + ") than teacher layers (" + std::to_string(n) + ")");
  }
  std::vector<std::size_t> out(m);
  for (std::size_t i = 0; i < m; ++i) out[i] = ((i + 1) * n + m - 1) / m - 1;
  return out;
}

DistillState::DistillState(const BackboneConfig& student, const BackboneConfig& teacher, DistillConfig cfg,
                           std::uint64_t seed)
    : cfg_(cfg) {
  if (cfg_.batch_size < 1 || cfg_.frames < 1) throw std::invalid_argument("distill batch size and frames must be positive");
  Rng rng(seed);
  const StrategyId s = cfg_.strategy;
  for (SetId id : kSets) {
    const auto ss = shapes_of(student, id), ts = shapes_of(teacher, id);
    const std::string name = set_name(id);
    if (s == StrategyId::BaseMse) {
      const auto pairs = layerwise_pairs(ss.size(), ts.size(), name);
      for (std::size_t i = 0; i < ss.size(); ++i) {
        projection_taps_.push_back(ss[i].tap);
        projections_.emplace_back(params_, "proj." + ss[i].tap, ss[i].channels, ts[pairs[i]].channels, 1, 1,
                                  Conv2dSpec{}, rng);
      }
    }
    if (s == StrategyId::M3 || s == StrategyId::M4) {
      intra_.emplace_back(params_, "intra." + name, cfg_.frames, cfg_.batch_size, cfg_.factor, rng);
    }
    if (s == StrategyId::M4) {
      student_fusion_.emplace_back(params_, "fuse.student." + name, ss, cfg_.student_recursive_channels, rng);
      teacher_fusion_.emplace_back(params_, "fuse.teacher." + name, ts, cfg_.teacher_recursive_channels, rng);
    }
  }
  if (s == StrategyId::M4) inter_ = CalibrationParams(params_, "inter", cfg_.frames, cfg_.batch_size, cfg_.factor, rng);
}

const CalibrationParams& DistillState::intra(SetId id) const {
  if (intra_.empty()) throw std::logic_error("strategy " + strategy_name(cfg_.strategy) + " has no calibration");
  return intra_[set_index(id)];
}

const FusionParams& DistillState::student_fusion(SetId id) const {
  if (student_fusion_.empty()) throw std::logic_error("strategy " + strategy_name(cfg_.strategy) + " has no fusion");
  return student_fusion_[set_index(id)];
}

const FusionParams& DistillState::teacher_fusion(SetId id) const {
  if (teacher_fusion_.empty()) throw std::logic_error("strategy " + strategy_name(cfg_.strategy) + " has no fusion");
  return teacher_fusion_[set_index(id)];
}

const Conv2d& DistillState::projection(const std::string& student_tap) const {
  const auto it = std::find(projection_taps_.begin(), projection_taps_.end(), student_tap);
  if (it == projection_taps_.end()) throw std::out_of_range("no projection for tap '" + student_tap + "'");
  return projections_[static_cast<std::size_t>(it - projection_taps_.begin())];
}

DistillLoss intra_inter_loss(const TapBundle& student, const TapBundle& teacher, const DistillState& state,
                             StrategyId strategy) {
  DistillLoss out;
  out.intra = zero_scalar();
  out.inter = zero_scalar();
  if (strategy == StrategyId::None) return out;
  if (strategy != state.config().strategy) {
    throw std::invalid_argument("distill state was built for " + strategy_name(state.config().strategy) +
                                ", not " + strategy_name(strategy));
  }
  std::vector<Var> reps_s, reps_t;
  for (SetId id : kSets) {
    const CorrelatedSet& ss = student.set(id);
    const CorrelatedSet& ts = teacher.set(id);
    const std::string name = set_name(id);
    for (const auto& f : ss) {
      if (f.set != id) throw std::invalid_argument("student tap '" + f.tap + "' filed under set " + name);
    }
    for (const auto& f : ts) {
      if (f.set != id) throw std::invalid_argument("teacher tap '" + f.tap + "' filed under set " + name);
    }
    if (ss.empty() || ts.empty()) {
      if (ss.size() != ts.size()) throw std::invalid_argument("set '" + name + "' is tapped on one side only");
      continue;
    }
    const std::size_t m = ss.size(), n = ts.size();
    const std::vector<Var> sv = values(ss), tv = detached(ts);
    Var term;
    switch (strategy) {
      case StrategyId::BaseMse:
      case StrategyId::M1: {
        const auto pairs = layerwise_pairs(m, n, name);
        for (std::size_t i = 0; i < m; ++i) {
          const Var& t = tv[pairs[i]];
          Var loss;
          if (strategy == StrategyId::BaseMse) {
            Var p = state.projection(ss[i].tap)(sv[i]);
            if (p.dim(3) != t.dim(3)) p = resize_nearest_last(p, t.dim(3));
            if (p.shape() != t.shape()) {
              throw std::invalid_argument("set '" + name + "': projected student tap '" + ss[i].tap +
                                          "' does not match teacher tap '" + ts[pairs[i]].tap + "'");
            }
            loss = mean(square(sub(p, t)));
          } else {
            loss = pair_loss(maps_of(sv[i]), maps_of(t));
          }
          term = term.defined() ? add(term, loss) : loss;
        }
        term = scale(term, Real(1) / static_cast<Real>(m));
        out.intra_pairs += static_cast<int>(m);
        break;
      }
      case StrategyId::M2: {
        const auto ms = maps_of(sv), mt = maps_of(tv);
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t j = 0; j < n; ++j) {
            const Var loss = pair_loss(ms[i], mt[j]);
            term = term.defined() ? add(term, loss) : loss;
          }
        }
        term = scale(term, Real(1) / static_cast<Real>(m * n));
        out.intra_pairs += static_cast<int>(m * n);
        break;
      }
      case StrategyId::M3:
      case StrategyId::M4:
        term = calibrated_loss(maps_of(sv), maps_of(tv), state.intra(id));
        out.intra_pairs += static_cast<int>(m * n);
        break;
      case StrategyId::None: break;
    }
    out.intra = add(out.intra, term);
    if (strategy == StrategyId::M4) {
      CorrelatedSet td = ts;
      for (std::size_t j = 0; j < n; ++j) td[j].data = tv[j];
      reps_s.push_back(set_representative(ss, set_direction(id), state.student_fusion(id)));
      reps_t.push_back(set_representative(td, set_direction(id), state.teacher_fusion(id)));
    }
  }
  if (strategy == StrategyId::M4 && !reps_s.empty()) {
    out.inter = calibrated_loss(maps_of(reps_s), maps_of(reps_t), state.inter());
    out.inter_pairs = static_cast<int>(reps_s.size() * reps_t.size());
  }
  return out;
}

StudentLoss total_student_loss(const Tensor& noisy, const Tensor& clean, const Model& student,
                               const Model& teacher, const DistillState* state, StrategyId strategy,
                               const LossWeights& weights, const StftConfig& stft, const MrstftConfig& mrstft) {
  StudentLoss out;
  BackbonePass pass = backbone_pass(student, noisy, clean, stft, mrstft);
  out.backbone = pass.loss;
  out.intra = zero_scalar();
  out.inter = zero_scalar();
  if (strategy != StrategyId::None) {
    if (!state) throw std::invalid_argument("strategy " + strategy_name(strategy) + " needs a distill state");
    ForwardOutput tout;
    {
      NoGradGuard guard;
      tout = teacher.forward(wave_features(constant(noisy), stft));
    }
    DistillLoss d = intra_inter_loss(pass.out.taps, tout.taps, *state, strategy);
    out.intra = d.intra;
    out.inter = d.inter;
    out.intra_pairs = d.intra_pairs;
    out.inter_pairs = d.inter_pairs;
  }
  out.total = add(add(scale(out.backbone, weights.backbone), scale(out.intra, weights.intra)),
                  scale(out.inter, weights.inter));
  return out;
}

}  // namespace kdse::inline KDSE_PRECISION
