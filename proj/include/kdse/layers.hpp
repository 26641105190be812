#pragma once

#include <string>
#include <utility>
#include <vector>

#include "kdse/ops.hpp"
#include "kdse/rng.hpp"

namespace kdse::inline KDSE_PRECISION {

struct NamedParam {
  std::string name;
  Var var;
};

/// Ordered registry of trainable tensors.
class ParamSet {
 public:
  Var add(const std::string& name, Tensor init);
  const std::vector<NamedParam>& items() const { return items_; }
  std::vector<NamedParam>& items() { return items_; }
  /// Throws std::out_of_range naming the parameter.
  Var find(const std::string& name) const;
  Index count() const;
  void zero_grad();
  void append(const ParamSet& other);

 private:
  std::vector<NamedParam> items_;
};

Index count_params(const ParamSet& params);

/// U(-bound, bound) with bound = 1/sqrt(fan_in).
Tensor uniform_init(Shape shape, Index fan_in, Rng& rng);

struct Linear {
  Var w, b;
  Linear() = default;
  Linear(ParamSet& ps, const std::string& prefix, Index in, Index out, Rng& rng);
  Var operator()(const Var& x) const { return linear(x, w, b); }
};

struct Conv2d {
  Var w, b;
  Conv2dSpec spec;
  Conv2d() = default;
  Conv2d(ParamSet& ps, const std::string& prefix, Index cin, Index cout, Index kh, Index kw,
         Conv2dSpec spec, Rng& rng);
  Var operator()(const Var& x) const { return conv2d(x, w, b, spec); }
};

struct ConvTranspose2d {
  Var w, b;
  Conv2dSpec spec;
  ConvTranspose2d() = default;
  ConvTranspose2d(ParamSet& ps, const std::string& prefix, Index cin, Index cout, Index kh, Index kw,
                  Conv2dSpec spec, Rng& rng);
  Var operator()(const Var& x) const { return conv_transpose2d(x, w, b, spec); }
};

struct LayerNorm {
  Var gamma, beta;
  LayerNorm() = default;
  LayerNorm(ParamSet& ps, const std::string& prefix, Index width);
  Var operator()(const Var& x) const { return layer_norm(x, gamma, beta); }
};

/// Normalization of (B, C, T, D) maps over (C, D) per frame.
struct ChannelFreqNorm {
  Var gamma, beta;
  ChannelFreqNorm() = default;
  ChannelFreqNorm(ParamSet& ps, const std::string& prefix, Index channels);
  Var operator()(const Var& x) const { return channel_freq_norm(x, gamma, beta); }
};

/// Unidirectional GRU over (N, L, in) -> (N, L, hidden).
struct Gru {
  Linear input;
  Var w_hh, b_hh;
  Gru() = default;
  Gru(ParamSet& ps, const std::string& prefix, Index in, Index hidden, Rng& rng);
  Var operator()(const Var& x) const { return gru(input(x), w_hh, b_hh); }
};

struct SelfAttention {
  Linear qkv, out;
  Index heads = 1;
  bool causal = false;
  SelfAttention() = default;
  SelfAttention(ParamSet& ps, const std::string& prefix, Index dim, Index heads, bool causal, Rng& rng);
  Var operator()(const Var& x) const { return out(multi_head_attention(qkv(x), heads, causal)); }
};

}  // namespace kdse::inline KDSE_PRECISION
