#pragma once

// Compute kernels behind the differentiable ops. The default versions are
// OpenMP-parallel (over batch items, sequences or rows) and call Eigen for
// the matrix products; kernels::reference holds plain serial loops that the
// tests and the benchmark compare against.

#include "kdse/tensor.hpp"

namespace kdse::inline KDSE_PRECISION::kernels {

/// Row-major C = alpha * op(A) * op(B) + beta * C.
void gemm(bool trans_a, bool trans_b, Index m, Index n, Index k, Real alpha, const Real* a,
          Index lda, const Real* b, Index ldb, Real beta, Real* c, Index ldc);

/// Geometry of one 2-D convolution (per batch item, NCHW).
struct ConvGeometry {
  Index in_channels = 0;
  Index in_h = 0, in_w = 0;
  Index kernel_h = 1, kernel_w = 1;
  Index stride_h = 1, stride_w = 1;
  Index dilation_h = 1, dilation_w = 1;
  Index pad_top = 0, pad_bottom = 0, pad_left = 0, pad_right = 0;

  Index out_h() const { return (in_h + pad_top + pad_bottom - dilation_h * (kernel_h - 1) - 1) / stride_h + 1; }
  Index out_w() const { return (in_w + pad_left + pad_right - dilation_w * (kernel_w - 1) - 1) / stride_w + 1; }
  Index col_rows() const { return in_channels * kernel_h * kernel_w; }
  Index col_cols() const { return out_h() * out_w(); }
};

void im2col(const ConvGeometry& g, const Real* image, Real* col);
/// Adjoint of im2col; accumulates into image.
void col2im(const ConvGeometry& g, const Real* col, Real* image);

/// x: (batch, g.in_channels, in_h, in_w); w: (out_channels, g.col_rows());
/// y: (batch, out_channels, out_h, out_w). bias may be null.
void conv2d_forward(const ConvGeometry& g, Index batch, Index out_channels, const Real* x,
                    const Real* w, const Real* bias, Real* y);
/// Accumulates into dx/dw/db; any of them may be null.
void conv2d_backward(const ConvGeometry& g, Index batch, Index out_channels, const Real* x,
                     const Real* w, const Real* dy, Real* dx, Real* dw, Real* db);

/// Transposed convolution expressed through the forward geometry g of the
/// convolution it is the adjoint of: g maps y (batch, g.in_channels,
/// in_h, in_w) to x (batch, x_channels, out_h, out_w). w: (x_channels,
/// g.col_rows()).
void conv_transpose2d_forward(const ConvGeometry& g, Index batch, Index x_channels, const Real* x,
                              const Real* w, const Real* bias, Real* y);
void conv_transpose2d_backward(const ConvGeometry& g, Index batch, Index x_channels,
                               const Real* x, const Real* w, const Real* dy, Real* dx, Real* dw,
                               Real* db);

/// Normalizes each of `rows` contiguous rows of length `width`.
void layer_norm_forward(Index rows, Index width, const Real* x, const Real* gamma,
                        const Real* beta, Real eps, Real* y, Real* mean, Real* rstd);
void layer_norm_backward(Index rows, Index width, const Real* x, const Real* gamma,
                         const Real* mean, const Real* rstd, const Real* dy, Real* dx,
                         Real* dgamma, Real* dbeta);

/// (B, C, T, D) maps normalized over (C, D) for every (b, t); affine per channel.
void channel_freq_norm_forward(Index b, Index c, Index t, Index d, const Real* x,
                               const Real* gamma, const Real* beta, Real eps, Real* y,
                               Real* mean, Real* rstd);
void channel_freq_norm_backward(Index b, Index c, Index t, Index d, const Real* x,
                                const Real* gamma, const Real* mean, const Real* rstd,
                                const Real* dy, Real* dx, Real* dgamma, Real* dbeta);

/// Scaled dot-product attention on packed projections. qkv: (n, len, 3*heads*dh)
/// laid out [q | k | v]; out: (n, len, heads*dh); probs: (n, heads, len, len).
void attention_forward(Index n, Index len, Index heads, Index dh, bool causal, const Real* qkv,
                       Real* out, Real* probs);
void attention_backward(Index n, Index len, Index heads, Index dh, const Real* qkv,
                        const Real* probs, const Real* dout, Real* dqkv);

/// GRU recurrence (gate order r, z, n) given input projections gx: (n, len, 3h).
/// h_out: (n, len, h); the r/z/cand/ghn caches are (n, len, h) each.
void gru_forward(Index n, Index len, Index h, const Real* gx, const Real* w_hh,
                 const Real* b_hh, Real* h_out, Real* r, Real* z, Real* cand, Real* ghn);
/// Accumulates into dw_hh and db_hh; writes dgx.
void gru_backward(Index n, Index len, Index h, const Real* w_hh, const Real* h_out,
                  const Real* r, const Real* z, const Real* cand, const Real* ghn,
                  const Real* dh_out, Real* dgx, Real* dw_hh, Real* db_hh);

/// out[i, j] = 1/2 (cos(x_i, x_j) + 1) per instance; x: (n, len, k);
/// unit: (n, len, k) normalized rows (zero rows stay zero).
void cosine_map_forward(Index n, Index len, Index k, const Real* x, Real* unit, Real* norms,
                        Real* out);
void cosine_map_backward(Index n, Index len, Index k, const Real* unit, const Real* norms,
                         const Real* dout, Real* dx);

namespace reference {

void gemm(bool trans_a, bool trans_b, Index m, Index n, Index k, Real alpha, const Real* a,
          Index lda, const Real* b, Index ldb, Real beta, Real* c, Index ldc);
void conv2d_forward(const ConvGeometry& g, Index batch, Index out_channels, const Real* x,
                    const Real* w, const Real* bias, Real* y);
void conv_transpose2d_forward(const ConvGeometry& g, Index batch, Index x_channels, const Real* x,
                              const Real* w, const Real* bias, Real* y);
void layer_norm_forward(Index rows, Index width, const Real* x, const Real* gamma,
                        const Real* beta, Real eps, Real* y);
void channel_freq_norm_forward(Index b, Index c, Index t, Index d, const Real* x,
                               const Real* gamma, const Real* beta, Real eps, Real* y);
void attention_forward(Index n, Index len, Index heads, Index dh, bool causal, const Real* qkv,
                       Real* out);
void gru_forward(Index n, Index len, Index h, const Real* gx, const Real* w_hh,
                 const Real* b_hh, Real* h_out);
void cosine_map_forward(Index n, Index len, Index k, const Real* x, Real* out);

}  // namespace reference

}  // namespace kdse::inline KDSE_PRECISION::kernels
