// Direct-loop versions of the kernels. Slow and serial; kept as the oracle
// for the parallel kernels and as the benchmark baseline.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "kdse/kernels.hpp"

namespace kdse::inline KDSE_PRECISION::kernels::reference {

void gemm(bool trans_a, bool trans_b, Index m, Index n, Index k, Real alpha, const Real* a,
          Index lda, const Real* b, Index ldb, Real beta, Real* c, Index ldc) {
  for (Index i = 0; i < m; ++i) {
    for (Index j = 0; j < n; ++j) {
      double s = 0;
      for (Index p = 0; p < k; ++p) {
        const Real av = trans_a ? a[p * lda + i] : a[i * lda + p];
        const Real bv = trans_b ? b[j * ldb + p] : b[p * ldb + j];
        s += static_cast<double>(av) * bv;
      }
      Real& cv = c[i * ldc + j];
      cv = static_cast<Real>(alpha * s + (beta == Real(0) ? 0.0 : beta * cv));
    }
  }
}

void conv2d_forward(const ConvGeometry& g, Index batch, Index out_channels, const Real* x,
                    const Real* w, const Real* bias, Real* y) {
  const Index oh = g.out_h(), ow = g.out_w();
  for (Index b = 0; b < batch; ++b) {
    for (Index o = 0; o < out_channels; ++o) {
      for (Index yy = 0; yy < oh; ++yy) {
        for (Index xx = 0; xx < ow; ++xx) {
          double s = bias ? bias[o] : 0.0;
          for (Index c = 0; c < g.in_channels; ++c) {
            for (Index kh = 0; kh < g.kernel_h; ++kh) {
              const Index iy = yy * g.stride_h - g.pad_top + kh * g.dilation_h;
              if (iy < 0 || iy >= g.in_h) continue;
              for (Index kw = 0; kw < g.kernel_w; ++kw) {
                const Index ix = xx * g.stride_w - g.pad_left + kw * g.dilation_w;
                if (ix < 0 || ix >= g.in_w) continue;
                s += static_cast<double>(
                         w[((o * g.in_channels + c) * g.kernel_h + kh) * g.kernel_w + kw]) *
                     x[((b * g.in_channels + c) * g.in_h + iy) * g.in_w + ix];
              }
            }
          }
          y[((b * out_channels + o) * oh + yy) * ow + xx] = static_cast<Real>(s);
        }
      }
    }
  }
}

void conv_transpose2d_forward(const ConvGeometry& g, Index batch, Index x_channels, const Real* x,
                              const Real* w, const Real* bias, Real* y) {
  // Scatter form: every input sample adds a weighted kernel footprint.
  const Index xh = g.out_h(), xw = g.out_w();
  const Index yc = g.in_channels;
  std::vector<double> acc(static_cast<std::size_t>(yc * g.in_h * g.in_w));
  for (Index b = 0; b < batch; ++b) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (Index ci = 0; ci < x_channels; ++ci) {
      for (Index iy = 0; iy < xh; ++iy) {
        for (Index ix = 0; ix < xw; ++ix) {
          const double v = x[((b * x_channels + ci) * xh + iy) * xw + ix];
          for (Index co = 0; co < yc; ++co) {
            for (Index kh = 0; kh < g.kernel_h; ++kh) {
              const Index oy = iy * g.stride_h - g.pad_top + kh * g.dilation_h;
              if (oy < 0 || oy >= g.in_h) continue;
              for (Index kw = 0; kw < g.kernel_w; ++kw) {
                const Index ox = ix * g.stride_w - g.pad_left + kw * g.dilation_w;
                if (ox < 0 || ox >= g.in_w) continue;
                acc[static_cast<std::size_t>((co * g.in_h + oy) * g.in_w + ox)] +=
                    v * w[((ci * yc + co) * g.kernel_h + kh) * g.kernel_w + kw];
              }
            }
          }
        }
      }
    }
    for (Index co = 0; co < yc; ++co) {
      for (Index j = 0; j < g.in_h * g.in_w; ++j) {
        y[(b * yc + co) * g.in_h * g.in_w + j] = static_cast<Real>(
            acc[static_cast<std::size_t>(co * g.in_h * g.in_w + j)] + (bias ? bias[co] : 0.0));
      }
    }
  }
}

void layer_norm_forward(Index rows, Index width, const Real* x, const Real* gamma,
                        const Real* beta, Real eps, Real* y) {
  for (Index r = 0; r < rows; ++r) {
    double mu = 0;
    for (Index j = 0; j < width; ++j) mu += x[r * width + j];
    mu /= static_cast<double>(width);
    double var = 0;
    for (Index j = 0; j < width; ++j) var += (x[r * width + j] - mu) * (x[r * width + j] - mu);
    var /= static_cast<double>(width);
    for (Index j = 0; j < width; ++j) {
      y[r * width + j] =
          static_cast<Real>((x[r * width + j] - mu) / std::sqrt(var + eps) * gamma[j] + beta[j]);
    }
  }
}

void channel_freq_norm_forward(Index b, Index c, Index t, Index d, const Real* x,
                               const Real* gamma, const Real* beta, Real eps, Real* y) {
  for (Index bi = 0; bi < b; ++bi) {
    for (Index ti = 0; ti < t; ++ti) {
      double mu = 0, var = 0;
      for (Index ci = 0; ci < c; ++ci)
        for (Index j = 0; j < d; ++j) mu += x[((bi * c + ci) * t + ti) * d + j];
      mu /= static_cast<double>(c * d);
      for (Index ci = 0; ci < c; ++ci)
        for (Index j = 0; j < d; ++j) {
          const double v = x[((bi * c + ci) * t + ti) * d + j] - mu;
          var += v * v;
        }
      var /= static_cast<double>(c * d);
      for (Index ci = 0; ci < c; ++ci)
        for (Index j = 0; j < d; ++j) {
          const Index o = ((bi * c + ci) * t + ti) * d + j;
          y[o] = static_cast<Real>((x[o] - mu) / std::sqrt(var + eps) * gamma[ci] + beta[ci]);
        }
    }
  }
}

void attention_forward(Index n, Index len, Index heads, Index dh, bool causal, const Real* qkv,
                       Real* out) {
  const Index hidden = heads * dh;
  const Index row = 3 * hidden;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<double> s(static_cast<std::size_t>(len));
  for (Index b = 0; b < n; ++b) {
    for (Index h = 0; h < heads; ++h) {
      for (Index i = 0; i < len; ++i) {
        const Index lim = causal ? i + 1 : len;
        double mx = -std::numeric_limits<double>::infinity();
        for (Index j = 0; j < lim; ++j) {
          double dot = 0;
          for (Index e = 0; e < dh; ++e) {
            dot += static_cast<double>(qkv[(b * len + i) * row + h * dh + e]) *
                   qkv[(b * len + j) * row + hidden + h * dh + e];
          }
          s[static_cast<std::size_t>(j)] = dot * scale;
          mx = std::max(mx, dot * scale);
        }
        double z = 0;
        for (Index j = 0; j < lim; ++j) z += std::exp(s[static_cast<std::size_t>(j)] - mx);
        for (Index e = 0; e < dh; ++e) {
          double acc = 0;
          for (Index j = 0; j < lim; ++j) {
            acc += std::exp(s[static_cast<std::size_t>(j)] - mx) / z *
                   qkv[(b * len + j) * row + 2 * hidden + h * dh + e];
          }
          out[(b * len + i) * hidden + h * dh + e] = static_cast<Real>(acc);
        }
      }
    }
  }
}

void gru_forward(Index n, Index len, Index h, const Real* gx, const Real* w_hh,
                 const Real* b_hh, Real* h_out) {
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  std::vector<double> hp(static_cast<std::size_t>(h));
  std::vector<double> gh(static_cast<std::size_t>(3 * h));
  for (Index b = 0; b < n; ++b) {
    std::fill(hp.begin(), hp.end(), 0.0);
    for (Index t = 0; t < len; ++t) {
      for (Index j = 0; j < 3 * h; ++j) {
        double s = b_hh[j];
        for (Index p = 0; p < h; ++p) s += hp[static_cast<std::size_t>(p)] * w_hh[p * 3 * h + j];
        gh[static_cast<std::size_t>(j)] = s;
      }
      const Real* g = gx + (b * len + t) * 3 * h;
      for (Index j = 0; j < h; ++j) {
        const double r = sig(g[j] + gh[static_cast<std::size_t>(j)]);
        const double z = sig(g[h + j] + gh[static_cast<std::size_t>(h + j)]);
        const double c = std::tanh(g[2 * h + j] + r * gh[static_cast<std::size_t>(2 * h + j)]);
        const double nh = (1.0 - z) * c + z * hp[static_cast<std::size_t>(j)];
        h_out[(b * len + t) * h + j] = static_cast<Real>(nh);
      }
      for (Index j = 0; j < h; ++j) hp[static_cast<std::size_t>(j)] = h_out[(b * len + t) * h + j];
    }
  }
}

void cosine_map_forward(Index n, Index len, Index k, const Real* x, Real* out) {
  for (Index b = 0; b < n; ++b) {
    for (Index i = 0; i < len; ++i) {
      for (Index j = 0; j < len; ++j) {
        double dot = 0, ni = 0, nj = 0;
        for (Index e = 0; e < k; ++e) {
          const double a = x[(b * len + i) * k + e], c = x[(b * len + j) * k + e];
          dot += a * c;
          ni += a * a;
          nj += c * c;
        }
        const double cs = (ni > 0 && nj > 0) ? dot / std::sqrt(ni * nj) : 0.0;
        out[(b * len + i) * len + j] = static_cast<Real>(i == j ? 1.0 : 0.5 * (cs + 1.0));
      }
    }
  }
}

}  // namespace kdse::inline KDSE_PRECISION::kernels::reference
