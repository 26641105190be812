#pragma once

#include <vector>

#include "kdse/autograd.hpp"
#include "kdse/kernels.hpp"

namespace kdse::inline KDSE_PRECISION {

Shape broadcast_shape(const Shape& a, const Shape& b);
/// Sums g over the axes that were broadcast to reach g's shape.
Tensor reduce_to(const Tensor& g, const Shape& target);

// Elementwise, NumPy-style broadcasting.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

Var scale(const Var& x, Real s);
Var add_scalar(const Var& x, Real s);
Var relu(const Var& x);
Var sigmoid(const Var& x);
Var tanh(const Var& x);
Var exp(const Var& x);
Var log(const Var& x);
Var sqrt(const Var& x);
Var square(const Var& x);
Var abs(const Var& x);
/// Gradient passes where lo <= x <= hi.
Var clamp(const Var& x, Real lo, Real hi);

Var sum(const Var& x);
Var mean(const Var& x);
/// Mean over the last `axes` dimensions.
Var mean_trailing(const Var& x, int axes);

Var reshape(const Var& x, Shape shape);
Var permute(const Var& x, const std::vector<int>& axes);
Var concat(const std::vector<Var>& xs, int axis);
Var slice(const Var& x, int axis, Index begin, Index end);
/// Stacks equally shaped tensors along a new leading axis.
Var stack(const std::vector<Var>& xs);

/// x (..., in) * w (in, out) + bias (out).
Var linear(const Var& x, const Var& w, const Var& bias);
/// Batched product over the leading axis of rank-3 operands.
Var bmm(const Var& a, const Var& b, bool trans_a = false, bool trans_b = false);
Var softmax_last(const Var& x);

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, Real eps = Real(1e-5));
/// x (B, C, T, D) normalized over (C, D) per frame; gamma/beta (C).
Var channel_freq_norm(const Var& x, const Var& gamma, const Var& beta, Real eps = Real(1e-5));

struct Conv2dSpec {
  Index stride_h = 1, stride_w = 1;
  Index dilation_h = 1, dilation_w = 1;
  Index pad_top = 0, pad_bottom = 0, pad_left = 0, pad_right = 0;
};

/// x (B, Cin, H, W), w (Cout, Cin, KH, KW), bias (Cout) or undefined.
Var conv2d(const Var& x, const Var& w, const Var& bias, const Conv2dSpec& spec);
/// x (B, Cin, H, W), w (Cin, Cout, KH, KW); padding trims the output as in
/// the usual transposed-convolution definition.
Var conv_transpose2d(const Var& x, const Var& w, const Var& bias, const Conv2dSpec& spec);

/// qkv (N, L, 3H) packed [q | k | v] -> (N, L, H).
Var multi_head_attention(const Var& qkv, Index heads, bool causal);
/// gx (N, L, 3H) input projections; returns hidden states (N, L, H).
Var gru(const Var& gx, const Var& w_hh, const Var& b_hh);

/// Nearest-neighbour resampling of the last axis to `width`.
Var resize_nearest_last(const Var& x, Index width);
/// Rows of the last axis scaled to unit l2 norm; zero rows stay zero.
Var l2_normalize_last(const Var& x);
/// x (N, L, K) -> (N, L, L) with entries (cos + 1) / 2 and unit diagonal.
Var cosine_similarity_map(const Var& x);

}  // namespace kdse::inline KDSE_PRECISION
