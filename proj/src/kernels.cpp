#include "kdse/kernels.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#if defined(_OPENMP)
#include <omp.h>
#endif

namespace kdse::inline KDSE_PRECISION::kernels {

namespace {

using RowMat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using MutMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;

int thread_count() {
#if defined(_OPENMP)
  return omp_get_max_threads();
#else
  return 1;
#endif
}

int thread_id() {
#if defined(_OPENMP)
  return omp_get_thread_num();
#else
  return 0;
#endif
}

Real sigmoid(Real x) { return Real(1) / (Real(1) + std::exp(-x)); }

}  // namespace

void gemm(bool trans_a, bool trans_b, Index m, Index n, Index k, Real alpha, const Real* a,
          Index lda, const Real* b, Index ldb, Real beta, Real* c, Index ldc) {
  if (m == 0 || n == 0) return;
  MutMap cm(c, m, n, Eigen::OuterStride<>(ldc));
  if (k == 0) {
    if (beta == Real(0)) cm.setZero(); else cm *= beta;
    return;
  }
  const Index ar = trans_a ? k : m, ac = trans_a ? m : k;
  const Index br = trans_b ? n : k, bc = trans_b ? k : n;
  ConstMap am(a, ar, ac, Eigen::OuterStride<>(lda));
  ConstMap bm(b, br, bc, Eigen::OuterStride<>(ldb));
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (beta == Real(0)) {
      cm.noalias() = alpha * (lhs * rhs);
    } else {
      if (beta != Real(1)) cm *= beta;
      cm.noalias() += alpha * (lhs * rhs);
    }
  };
  if (!trans_a && !trans_b) run(am, bm);
  else if (trans_a && !trans_b) run(am.transpose(), bm);
  else if (!trans_a && trans_b) run(am, bm.transpose());
  else run(am.transpose(), bm.transpose());
}

namespace {

/// Columns per im2col tile; keeps a tile around 1 MB.
Index tile_cols(const ConvGeometry& g) {
  const Index cols = g.col_cols();
  const Index want = std::max<Index>(64, (Index{1} << 18) / std::max<Index>(g.col_rows(), 1));
  return std::min(cols, (want + 15) / 16 * 16);
}

/// Writes rows x nj of the column matrix (leading dimension nj) for output
/// positions [j0, j0 + nj).
void im2col_tile(const ConvGeometry& g, const Real* image, Index j0, Index nj, Real* col,
                 std::vector<Index>& ys, std::vector<Index>& xs) {
  const Index ow = g.out_w();
  ys.resize(static_cast<std::size_t>(nj));
  xs.resize(static_cast<std::size_t>(nj));
  for (Index j = 0; j < nj; ++j) {
    ys[std::size_t(j)] = (j0 + j) / ow * g.stride_h - g.pad_top;
    xs[std::size_t(j)] = (j0 + j) % ow * g.stride_w - g.pad_left;
  }
  for (Index ci = 0; ci < g.in_channels; ++ci) {
    const Real* img = image + ci * g.in_h * g.in_w;
    for (Index kh = 0; kh < g.kernel_h; ++kh) {
      const Index dy = kh * g.dilation_h;
      for (Index kw = 0; kw < g.kernel_w; ++kw) {
        const Index dx = kw * g.dilation_w;
        Real* row = col + ((ci * g.kernel_h + kh) * g.kernel_w + kw) * nj;
        for (Index j = 0; j < nj; ++j) {
          const Index iy = ys[std::size_t(j)] + dy, ix = xs[std::size_t(j)] + dx;
          row[j] = (iy >= 0 && iy < g.in_h && ix >= 0 && ix < g.in_w) ? img[iy * g.in_w + ix] : Real(0);
        }
      }
    }
  }
}

void col2im_tile(const ConvGeometry& g, const Real* col, Index j0, Index nj, Real* image,
                 std::vector<Index>& ys, std::vector<Index>& xs) {
  const Index ow = g.out_w();
  ys.resize(static_cast<std::size_t>(nj));
  xs.resize(static_cast<std::size_t>(nj));
  for (Index j = 0; j < nj; ++j) {
    ys[std::size_t(j)] = (j0 + j) / ow * g.stride_h - g.pad_top;
    xs[std::size_t(j)] = (j0 + j) % ow * g.stride_w - g.pad_left;
  }
  for (Index ci = 0; ci < g.in_channels; ++ci) {
    Real* img = image + ci * g.in_h * g.in_w;
    for (Index kh = 0; kh < g.kernel_h; ++kh) {
      const Index dy = kh * g.dilation_h;
      for (Index kw = 0; kw < g.kernel_w; ++kw) {
        const Index dx = kw * g.dilation_w;
        const Real* row = col + ((ci * g.kernel_h + kh) * g.kernel_w + kw) * nj;
        for (Index j = 0; j < nj; ++j) {
          const Index iy = ys[std::size_t(j)] + dy, ix = xs[std::size_t(j)] + dx;
          if (iy >= 0 && iy < g.in_h && ix >= 0 && ix < g.in_w) img[iy * g.in_w + ix] += row[j];
        }
      }
    }
  }
}

bool is_pointwise(const ConvGeometry& g) {
  return g.kernel_h == 1 && g.kernel_w == 1 && g.stride_h == 1 && g.stride_w == 1 && g.pad_top == 0 &&
         g.pad_bottom == 0 && g.pad_left == 0 && g.pad_right == 0;
}

void reduce_parts(const std::vector<std::vector<Real>>& parts, Real* out) {
  for (const auto& part : parts) {
    if (part.empty()) continue;
    for (std::size_t j = 0; j < part.size(); ++j) out[j] += part[j];
  }
}

}  // namespace

void im2col(const ConvGeometry& g, const Real* image, Real* col) {
  std::vector<Index> ys, xs;
  const Index cols = g.col_cols(), rows = g.col_rows();
  std::vector<Real> tile;
  const Index step = tile_cols(g);
  for (Index j0 = 0; j0 < cols; j0 += step) {
    const Index nj = std::min(step, cols - j0);
    tile.resize(static_cast<std::size_t>(rows * nj));
    im2col_tile(g, image, j0, nj, tile.data(), ys, xs);
    for (Index r = 0; r < rows; ++r) std::copy_n(tile.data() + r * nj, nj, col + r * cols + j0);
  }
}

void col2im(const ConvGeometry& g, const Real* col, Real* image) {
  std::vector<Index> ys, xs;
  const Index cols = g.col_cols(), rows = g.col_rows();
  std::vector<Real> tile;
  const Index step = tile_cols(g);
  for (Index j0 = 0; j0 < cols; j0 += step) {
    const Index nj = std::min(step, cols - j0);
    tile.resize(static_cast<std::size_t>(rows * nj));
    for (Index r = 0; r < rows; ++r) std::copy_n(col + r * cols + j0, nj, tile.data() + r * nj);
    col2im_tile(g, tile.data(), j0, nj, image, ys, xs);
  }
}

void conv2d_forward(const ConvGeometry& g, Index batch, Index out_channels, const Real* x,
                    const Real* w, const Real* bias, Real* y) {
  const Index rows = g.col_rows(), cols = g.col_cols();
  const Index in_size = g.in_channels * g.in_h * g.in_w;
  const bool pointwise = is_pointwise(g);
  const Index step = tile_cols(g);
#pragma omp parallel
  {
    std::vector<Real> col(pointwise ? 0 : static_cast<std::size_t>(rows * step));
    std::vector<Index> ys, xs;
#pragma omp for schedule(static)
    for (Index i = 0; i < batch; ++i) {
      Real* dst = y + i * out_channels * cols;
      if (pointwise) {
        gemm(false, false, out_channels, cols, rows, Real(1), w, rows, x + i * in_size, cols, Real(0), dst, cols);
      } else {
        for (Index j0 = 0; j0 < cols; j0 += step) {
          const Index nj = std::min(step, cols - j0);
          im2col_tile(g, x + i * in_size, j0, nj, col.data(), ys, xs);
          gemm(false, false, out_channels, nj, rows, Real(1), w, rows, col.data(), nj, Real(0), dst + j0, cols);
        }
      }
      if (bias) {
        for (Index o = 0; o < out_channels; ++o) {
          Real* p = dst + o * cols;
          const Real b = bias[o];
          for (Index j = 0; j < cols; ++j) p[j] += b;
        }
      }
    }
  }
}

void conv2d_backward(const ConvGeometry& g, Index batch, Index out_channels, const Real* x,
                     const Real* w, const Real* dy, Real* dx, Real* dw, Real* db) {
  const Index rows = g.col_rows(), cols = g.col_cols();
  const Index in_size = g.in_channels * g.in_h * g.in_w;
  const bool pointwise = is_pointwise(g);
  const Index step = tile_cols(g);
  const int nt = thread_count();
  std::vector<std::vector<Real>> dw_part(static_cast<std::size_t>(nt));
#pragma omp parallel
  {
    std::vector<Real> col(static_cast<std::size_t>(rows * step));
    std::vector<Index> ys, xs;
    std::vector<Real>& dwl = dw_part[static_cast<std::size_t>(thread_id())];
    if (dw) dwl.assign(static_cast<std::size_t>(out_channels * rows), Real(0));
#pragma omp for schedule(static)
    for (Index i = 0; i < batch; ++i) {
      const Real* g_out = dy + i * out_channels * cols;
      if (pointwise) {
        if (dw) gemm(false, true, out_channels, rows, cols, Real(1), g_out, cols, x + i * in_size, cols, Real(1), dwl.data(), rows);
        if (dx) gemm(true, false, rows, cols, out_channels, Real(1), w, rows, g_out, cols, Real(1), dx + i * in_size, cols);
        continue;
      }
      for (Index j0 = 0; j0 < cols; j0 += step) {
        const Index nj = std::min(step, cols - j0);
        if (dw) {
          im2col_tile(g, x + i * in_size, j0, nj, col.data(), ys, xs);
          gemm(false, true, out_channels, rows, nj, Real(1), g_out + j0, cols, col.data(), nj, Real(1), dwl.data(), rows);
        }
        if (dx) {
          gemm(true, false, rows, nj, out_channels, Real(1), w, rows, g_out + j0, cols, Real(0), col.data(), nj);
          col2im_tile(g, col.data(), j0, nj, dx + i * in_size, ys, xs);
        }
      }
    }
  }
  if (dw) reduce_parts(dw_part, dw);
  if (db) {
    for (Index i = 0; i < batch; ++i) {
      for (Index o = 0; o < out_channels; ++o) {
        const Real* p = dy + (i * out_channels + o) * cols;
        Real s = 0;
        for (Index j = 0; j < cols; ++j) s += p[j];
        db[o] += s;
      }
    }
  }
}

void conv_transpose2d_forward(const ConvGeometry& g, Index batch, Index x_channels, const Real* x,
                              const Real* w, const Real* bias, Real* y) {
  const Index rows = g.col_rows(), cols = g.col_cols();
  const Index y_size = g.in_channels * g.in_h * g.in_w;
  const Index plane = g.in_h * g.in_w;
  const Index step = tile_cols(g);
#pragma omp parallel
  {
    std::vector<Real> col(static_cast<std::size_t>(rows * step));
    std::vector<Index> ys, xs;
#pragma omp for schedule(static)
    for (Index i = 0; i < batch; ++i) {
      Real* dst = y + i * y_size;
      std::fill(dst, dst + y_size, Real(0));
      for (Index j0 = 0; j0 < cols; j0 += step) {
        const Index nj = std::min(step, cols - j0);
        gemm(true, false, rows, nj, x_channels, Real(1), w, rows, x + i * x_channels * cols + j0, cols, Real(0),
             col.data(), nj);
        col2im_tile(g, col.data(), j0, nj, dst, ys, xs);
      }
      if (bias) {
        for (Index c = 0; c < g.in_channels; ++c) {
          Real* p = dst + c * plane;
          for (Index j = 0; j < plane; ++j) p[j] += bias[c];
        }
      }
    }
  }
}

void conv_transpose2d_backward(const ConvGeometry& g, Index batch, Index x_channels,
                               const Real* x, const Real* w, const Real* dy, Real* dx, Real* dw,
                               Real* db) {
  const Index rows = g.col_rows(), cols = g.col_cols();
  const Index y_size = g.in_channels * g.in_h * g.in_w;
  const Index plane = g.in_h * g.in_w;
  const Index step = tile_cols(g);
  const int nt = thread_count();
  std::vector<std::vector<Real>> dw_part(static_cast<std::size_t>(nt));
#pragma omp parallel
  {
    std::vector<Real> col(static_cast<std::size_t>(rows * step));
    std::vector<Index> ys, xs;
    std::vector<Real>& dwl = dw_part[static_cast<std::size_t>(thread_id())];
    if (dw) dwl.assign(static_cast<std::size_t>(x_channels * rows), Real(0));
#pragma omp for schedule(static)
    for (Index i = 0; i < batch; ++i) {
      for (Index j0 = 0; j0 < cols; j0 += step) {
        const Index nj = std::min(step, cols - j0);
        im2col_tile(g, dy + i * y_size, j0, nj, col.data(), ys, xs);
        if (dx) {
          gemm(false, false, x_channels, nj, rows, Real(1), w, rows, col.data(), nj, Real(1),
               dx + i * x_channels * cols + j0, cols);
        }
        if (dw) {
          gemm(false, true, x_channels, rows, nj, Real(1), x + i * x_channels * cols + j0, cols, col.data(), nj,
               Real(1), dwl.data(), rows);
        }
      }
    }
  }
  if (dw) reduce_parts(dw_part, dw);
  if (db) {
    for (Index i = 0; i < batch; ++i) {
      for (Index c = 0; c < g.in_channels; ++c) {
        const Real* p = dy + i * y_size + c * plane;
        Real s = 0;
        for (Index j = 0; j < plane; ++j) s += p[j];
        db[c] += s;
      }
    }
  }
}

void layer_norm_forward(Index rows, Index width, const Real* x, const Real* gamma,
                        const Real* beta, Real eps, Real* y, Real* mean, Real* rstd) {
#pragma omp parallel for schedule(static)
  for (Index r = 0; r < rows; ++r) {
    const Real* xr = x + r * width;
    double s = 0, ss = 0;
    for (Index j = 0; j < width; ++j) s += xr[j];
    const double mu = s / static_cast<double>(width);
    for (Index j = 0; j < width; ++j) {
      const double dlt = xr[j] - mu;
      ss += dlt * dlt;
    }
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(width) + eps);
    mean[r] = static_cast<Real>(mu);
    rstd[r] = static_cast<Real>(inv);
    Real* yr = y + r * width;
    for (Index j = 0; j < width; ++j) {
      yr[j] = static_cast<Real>((xr[j] - mu) * inv) * gamma[j] + beta[j];
    }
  }
}

void layer_norm_backward(Index rows, Index width, const Real* x, const Real* gamma,
                         const Real* mean, const Real* rstd, const Real* dy, Real* dx,
                         Real* dgamma, Real* dbeta) {
  const int nt = thread_count();
  std::vector<std::vector<Real>> dg(static_cast<std::size_t>(nt)), dbt(static_cast<std::size_t>(nt));
#pragma omp parallel
  {
    auto& dgl = dg[static_cast<std::size_t>(thread_id())];
    auto& dbl = dbt[static_cast<std::size_t>(thread_id())];
    dgl.assign(static_cast<std::size_t>(width), Real(0));
    dbl.assign(static_cast<std::size_t>(width), Real(0));
#pragma omp for schedule(static)
    for (Index r = 0; r < rows; ++r) {
      const Real* xr = x + r * width;
      const Real* gr = dy + r * width;
      const Real mu = mean[r], inv = rstd[r];
      double sum_g = 0, sum_gx = 0;
      for (Index j = 0; j < width; ++j) {
        const Real xhat = (xr[j] - mu) * inv;
        const Real gh = gr[j] * gamma[j];
        sum_g += gh;
        sum_gx += gh * xhat;
        dgl[static_cast<std::size_t>(j)] += gr[j] * xhat;
        dbl[static_cast<std::size_t>(j)] += gr[j];
      }
      if (dx) {
        const Real mg = static_cast<Real>(sum_g / static_cast<double>(width));
        const Real mgx = static_cast<Real>(sum_gx / static_cast<double>(width));
        Real* dr = dx + r * width;
        for (Index j = 0; j < width; ++j) {
          const Real xhat = (xr[j] - mu) * inv;
          dr[j] += inv * (gr[j] * gamma[j] - mg - xhat * mgx);
        }
      }
    }
  }
  for (int t = 0; t < nt; ++t) {
    for (Index j = 0; j < width; ++j) {
      if (dgamma) dgamma[j] += dg[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)];
      if (dbeta) dbeta[j] += dbt[static_cast<std::size_t>(t)][static_cast<std::size_t>(j)];
    }
  }
}

void channel_freq_norm_forward(Index b, Index c, Index t, Index d, const Real* x,
                               const Real* gamma, const Real* beta, Real eps, Real* y,
                               Real* mean, Real* rstd) {
  const Index n = c * d;
#pragma omp parallel for collapse(2) schedule(static)
  for (Index bi = 0; bi < b; ++bi) {
    for (Index ti = 0; ti < t; ++ti) {
      double s = 0, ss = 0;
      for (Index ci = 0; ci < c; ++ci) {
        const Real* p = x + ((bi * c + ci) * t + ti) * d;
        for (Index j = 0; j < d; ++j) s += p[j];
      }
      const double mu = s / static_cast<double>(n);
      for (Index ci = 0; ci < c; ++ci) {
        const Real* p = x + ((bi * c + ci) * t + ti) * d;
        for (Index j = 0; j < d; ++j) {
          const double dl = p[j] - mu;
          ss += dl * dl;
        }
      }
      const double inv = 1.0 / std::sqrt(ss / static_cast<double>(n) + eps);
      mean[bi * t + ti] = static_cast<Real>(mu);
      rstd[bi * t + ti] = static_cast<Real>(inv);
      for (Index ci = 0; ci < c; ++ci) {
        const Index off = ((bi * c + ci) * t + ti) * d;
        for (Index j = 0; j < d; ++j) {
          y[off + j] = static_cast<Real>((x[off + j] - mu) * inv) * gamma[ci] + beta[ci];
        }
      }
    }
  }
}

void channel_freq_norm_backward(Index b, Index c, Index t, Index d, const Real* x,
                                const Real* gamma, const Real* mean, const Real* rstd,
                                const Real* dy, Real* dx, Real* dgamma, Real* dbeta) {
  const Index n = c * d;
  const int nt = thread_count();
  std::vector<std::vector<double>> dg(static_cast<std::size_t>(nt)), dbt(static_cast<std::size_t>(nt));
#pragma omp parallel
  {
    auto& dgl = dg[static_cast<std::size_t>(thread_id())];
    auto& dbl = dbt[static_cast<std::size_t>(thread_id())];
    dgl.assign(static_cast<std::size_t>(c), 0.0);
    dbl.assign(static_cast<std::size_t>(c), 0.0);
#pragma omp for collapse(2) schedule(static)
    for (Index bi = 0; bi < b; ++bi) {
      for (Index ti = 0; ti < t; ++ti) {
        const Real mu = mean[bi * t + ti], inv = rstd[bi * t + ti];
        double sum_g = 0, sum_gx = 0;
        for (Index ci = 0; ci < c; ++ci) {
          const Index off = ((bi * c + ci) * t + ti) * d;
          double sg = 0, sgx = 0;
          for (Index j = 0; j < d; ++j) {
            const Real xhat = (x[off + j] - mu) * inv;
            sg += dy[off + j];
            sgx += dy[off + j] * xhat;
          }
          dgl[static_cast<std::size_t>(ci)] += sgx;
          dbl[static_cast<std::size_t>(ci)] += sg;
          sum_g += sg * gamma[ci];
          sum_gx += sgx * gamma[ci];
        }
        if (!dx) continue;
        const Real mg = static_cast<Real>(sum_g / static_cast<double>(n));
        const Real mgx = static_cast<Real>(sum_gx / static_cast<double>(n));
        for (Index ci = 0; ci < c; ++ci) {
          const Index off = ((bi * c + ci) * t + ti) * d;
          for (Index j = 0; j < d; ++j) {
            const Real xhat = (x[off + j] - mu) * inv;
            dx[off + j] += inv * (dy[off + j] * gamma[ci] - mg - xhat * mgx);
          }
        }
      }
    }
  }
  for (int th = 0; th < nt; ++th) {
    for (Index ci = 0; ci < c; ++ci) {
      if (dgamma) dgamma[ci] += static_cast<Real>(dg[static_cast<std::size_t>(th)][static_cast<std::size_t>(ci)]);
      if (dbeta) dbeta[ci] += static_cast<Real>(dbt[static_cast<std::size_t>(th)][static_cast<std::size_t>(ci)]);
    }
  }
}

void attention_forward(Index n, Index len, Index heads, Index dh, bool causal, const Real* qkv,
                       Real* out, Real* probs) {
  const Index hidden = heads * dh;
  const Index row = 3 * hidden;
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
#pragma omp parallel
  {
    RowMat q(len, dh), k(len, dh), v(len, dh), o(len, dh);
#pragma omp for schedule(static)
    for (Index nh = 0; nh < n * heads; ++nh) {
      const Index ni = nh / heads, hi = nh % heads;
      const Real* base = qkv + ni * len * row;
      for (Index i = 0; i < len; ++i) {
        const Real* r = base + i * row + hi * dh;
        for (Index j = 0; j < dh; ++j) {
          q(i, j) = r[j];
          k(i, j) = r[hidden + j];
          v(i, j) = r[2 * hidden + j];
        }
      }
      Eigen::Map<RowMat> p(probs + nh * len * len, len, len);
      p.noalias() = scale * (q * k.transpose());
      for (Index i = 0; i < len; ++i) {
        const Index lim = causal ? i + 1 : len;
        Real mx = -std::numeric_limits<Real>::infinity();
        for (Index j = 0; j < lim; ++j) mx = std::max(mx, p(i, j));
        Real s = 0;
        for (Index j = 0; j < lim; ++j) {
          p(i, j) = std::exp(p(i, j) - mx);
          s += p(i, j);
        }
        for (Index j = 0; j < lim; ++j) p(i, j) /= s;
        for (Index j = lim; j < len; ++j) p(i, j) = 0;
      }
      o.noalias() = p * v;
      for (Index i = 0; i < len; ++i) {
        Real* r = out + (ni * len + i) * hidden + hi * dh;
        for (Index j = 0; j < dh; ++j) r[j] = o(i, j);
      }
    }
  }
}

void attention_backward(Index n, Index len, Index heads, Index dh, const Real* qkv,
                        const Real* probs, const Real* dout, Real* dqkv) {
  const Index hidden = heads * dh;
  const Index row = 3 * hidden;
  const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
#pragma omp parallel
  {
    RowMat q(len, dh), k(len, dh), v(len, dh), go(len, dh), dp(len, len);
    RowMat dq(len, dh), dk(len, dh), dv(len, dh);
#pragma omp for schedule(static)
    for (Index nh = 0; nh < n * heads; ++nh) {
      const Index ni = nh / heads, hi = nh % heads;
      const Real* base = qkv + ni * len * row;
      for (Index i = 0; i < len; ++i) {
        const Real* r = base + i * row + hi * dh;
        const Real* g = dout + (ni * len + i) * hidden + hi * dh;
        for (Index j = 0; j < dh; ++j) {
          q(i, j) = r[j];
          k(i, j) = r[hidden + j];
          v(i, j) = r[2 * hidden + j];
          go(i, j) = g[j];
        }
      }
      Eigen::Map<const RowMat> p(probs + nh * len * len, len, len);
      dv.noalias() = p.transpose() * go;
      dp.noalias() = go * v.transpose();
      for (Index i = 0; i < len; ++i) {
        Real dot = 0;
        for (Index j = 0; j < len; ++j) dot += dp(i, j) * p(i, j);
        for (Index j = 0; j < len; ++j) dp(i, j) = p(i, j) * (dp(i, j) - dot) * scale;
      }
      dq.noalias() = dp * k;
      dk.noalias() = dp.transpose() * q;
      Real* dbase = dqkv + ni * len * row;
      for (Index i = 0; i < len; ++i) {
        Real* r = dbase + i * row + hi * dh;
        for (Index j = 0; j < dh; ++j) {
          r[j] += dq(i, j);
          r[hidden + j] += dk(i, j);
          r[2 * hidden + j] += dv(i, j);
        }
      }
    }
  }
}

void gru_forward(Index n, Index len, Index h, const Real* gx, const Real* w_hh,
                 const Real* b_hh, Real* h_out, Real* r, Real* z, Real* cand, Real* ghn) {
  std::vector<Real> gh(static_cast<std::size_t>(n * 3 * h));
  for (Index t = 0; t < len; ++t) {
    if (t == 0) {
      for (Index i = 0; i < n; ++i) std::copy(b_hh, b_hh + 3 * h, gh.data() + i * 3 * h);
    } else {
      for (Index i = 0; i < n; ++i) std::copy(b_hh, b_hh + 3 * h, gh.data() + i * 3 * h);
      gemm(false, false, n, 3 * h, h, Real(1), h_out + (t - 1) * h, len * h, w_hh, 3 * h, Real(1),
           gh.data(), 3 * h);
    }
#pragma omp parallel for schedule(static)
    for (Index i = 0; i < n; ++i) {
      const Real* gxi = gx + (i * len + t) * 3 * h;
      const Real* ghi = gh.data() + i * 3 * h;
      const Index o = (i * len + t) * h;
      const Real* hp = t > 0 ? h_out + o - h : nullptr;
      for (Index j = 0; j < h; ++j) {
        const Real rr = sigmoid(gxi[j] + ghi[j]);
        const Real zz = sigmoid(gxi[h + j] + ghi[h + j]);
        const Real nn = std::tanh(gxi[2 * h + j] + rr * ghi[2 * h + j]);
        r[o + j] = rr;
        z[o + j] = zz;
        cand[o + j] = nn;
        ghn[o + j] = ghi[2 * h + j];
        h_out[o + j] = (Real(1) - zz) * nn + (hp ? zz * hp[j] : Real(0));
      }
    }
  }
}

void gru_backward(Index n, Index len, Index h, const Real* w_hh, const Real* h_out,
                  const Real* r, const Real* z, const Real* cand, const Real* ghn,
                  const Real* dh_out, Real* dgx, Real* dw_hh, Real* db_hh) {
  std::vector<Real> dh_next(static_cast<std::size_t>(n * h), Real(0));
  std::vector<Real> dgh(static_cast<std::size_t>(n * 3 * h));
  for (Index t = len - 1; t >= 0; --t) {
#pragma omp parallel for schedule(static)
    for (Index i = 0; i < n; ++i) {
      const Index o = (i * len + t) * h;
      const Real* hp = t > 0 ? h_out + o - h : nullptr;
      Real* dghi = dgh.data() + i * 3 * h;
      Real* dgxi = dgx + (i * len + t) * 3 * h;
      Real* dn_i = dh_next.data() + i * h;
      for (Index j = 0; j < h; ++j) {
        const Real dh = dh_out[o + j] + dn_i[j];
        const Real zz = z[o + j], rr = r[o + j], nn = cand[o + j];
        const Real hprev = hp ? hp[j] : Real(0);
        const Real dn_pre = dh * (Real(1) - zz) * (Real(1) - nn * nn);
        const Real dz_pre = dh * (hprev - nn) * zz * (Real(1) - zz);
        const Real dr_pre = dn_pre * ghn[o + j] * rr * (Real(1) - rr);
        dgxi[j] = dr_pre;
        dgxi[h + j] = dz_pre;
        dgxi[2 * h + j] = dn_pre;
        dghi[j] = dr_pre;
        dghi[h + j] = dz_pre;
        dghi[2 * h + j] = dn_pre * rr;
        dn_i[j] = dh * zz;
      }
    }
    for (Index i = 0; i < n; ++i) {
      const Real* dghi = dgh.data() + i * 3 * h;
      for (Index j = 0; j < 3 * h; ++j) db_hh[j] += dghi[j];
    }
    if (t > 0) {
      gemm(true, false, h, 3 * h, n, Real(1), h_out + (t - 1) * h, len * h, dgh.data(), 3 * h,
           Real(1), dw_hh, 3 * h);
      gemm(false, true, n, h, 3 * h, Real(1), dgh.data(), 3 * h, w_hh, 3 * h, Real(1),
           dh_next.data(), h);
    }
  }
}

void cosine_map_forward(Index n, Index len, Index k, const Real* x, Real* unit, Real* norms,
                        Real* out) {
#pragma omp parallel for schedule(static)
  for (Index b = 0; b < n; ++b) {
    for (Index i = 0; i < len; ++i) {
      const Real* xr = x + (b * len + i) * k;
      Real* ur = unit + (b * len + i) * k;
      double ss = 0;
      for (Index j = 0; j < k; ++j) ss += static_cast<double>(xr[j]) * xr[j];
      const double nrm = std::sqrt(ss);
      norms[b * len + i] = static_cast<Real>(nrm);
      if (nrm > 0) {
        const double inv = 1.0 / nrm;
        for (Index j = 0; j < k; ++j) ur[j] = static_cast<Real>(xr[j] * inv);
      } else {
        std::fill(ur, ur + k, Real(0));
      }
    }
    Real* o = out + b * len * len;
    const Real* u = unit + b * len * k;
    gemm(false, true, len, len, k, Real(0.5), u, k, u, k, Real(0), o, len);
    for (Index i = 0; i < len; ++i) {
      for (Index j = 0; j < len; ++j) {
        Real& v = o[i * len + j];
        v = i == j ? Real(1) : std::clamp(v + Real(0.5), Real(0), Real(1));
      }
    }
  }
}

void cosine_map_backward(Index n, Index len, Index k, const Real* unit, const Real* norms,
                         const Real* dout, Real* dx) {
#pragma omp parallel
  {
    std::vector<Real> sym(static_cast<std::size_t>(len * len));
    std::vector<Real> du(static_cast<std::size_t>(len * k));
#pragma omp for schedule(static)
    for (Index b = 0; b < n; ++b) {
      const Real* g = dout + b * len * len;
      for (Index i = 0; i < len; ++i) {
        for (Index j = 0; j < len; ++j) {
          sym[static_cast<std::size_t>(i * len + j)] =
              i == j ? Real(0) : Real(0.5) * (g[i * len + j] + g[j * len + i]);
        }
      }
      const Real* u = unit + b * len * k;
      gemm(false, false, len, k, len, Real(1), sym.data(), len, u, k, Real(0), du.data(), k);
      for (Index i = 0; i < len; ++i) {
        const Real nrm = norms[b * len + i];
        if (!(nrm > 0)) continue;
        const Real* ur = u + i * k;
        const Real* dr = du.data() + i * k;
        double dot = 0;
        for (Index j = 0; j < k; ++j) dot += static_cast<double>(ur[j]) * dr[j];
        Real* xr = dx + (b * len + i) * k;
        const Real inv = Real(1) / nrm;
        for (Index j = 0; j < k; ++j) xr[j] += (dr[j] - static_cast<Real>(dot) * ur[j]) * inv;
      }
    }
  }
}

}  // namespace kdse::inline KDSE_PRECISION::kernels
