#include "kdse/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace kdse::inline KDSE_PRECISION {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

NodePtr parent(Node& self, std::size_t i) { return self.parents[i]; }

bool wants(Node& self, std::size_t i) {
  return i < self.parents.size() && self.parents[i]->requires_grad;
}

// Iterates an output shape together with broadcast offsets of two inputs.
// The innermost axis is handled as a strided run.
struct BroadcastPlan {
  Shape out;
  std::vector<Index> sa, sb;  // strides of a/b per output axis (0 when broadcast)

  BroadcastPlan(const Shape& a, const Shape& b) : out(broadcast_shape(a, b)) {
    const std::size_t r = out.size();
    sa.assign(r, 0);
    sb.assign(r, 0);
    Index ka = 1, kb = 1;
    for (std::size_t i = 0; i < r; ++i) {
      const std::size_t ax = r - 1 - i;
      const Index da = i < a.size() ? a[a.size() - 1 - i] : 1;
      const Index db = i < b.size() ? b[b.size() - 1 - i] : 1;
      sa[ax] = da == 1 ? 0 : ka;
      sb[ax] = db == 1 ? 0 : kb;
      ka *= da;
      kb *= db;
    }
  }

  template <typename F>
  void run(F&& f) const {
    const std::size_t r = out.size();
    if (r == 0) {
      f(Index{0}, Index{0}, Index{0}, Index{1}, Index{0}, Index{0});
      return;
    }
    const Index inner = out[r - 1];
    const Index total = shape_numel(out);
    if (total == 0) return;
    std::vector<Index> idx(r, 0);
    Index oa = 0, ob = 0;
    for (Index o = 0; o < total; o += inner) {
      f(o, oa, ob, inner, sa[r - 1], sb[r - 1]);
      for (int ax = static_cast<int>(r) - 2; ax >= 0; --ax) {
        const auto u = static_cast<std::size_t>(ax);
        ++idx[u];
        oa += sa[u];
        ob += sb[u];
        if (idx[u] < out[u]) break;
        oa -= sa[u] * idx[u];
        ob -= sb[u] * idx[u];
        idx[u] = 0;
      }
    }
  }
};

template <typename F>
Tensor broadcast_binary(const Tensor& a, const Tensor& b, F f) {
  if (a.shape() == b.shape()) {
    Tensor out(a.shape());
    const Real* pa = a.data();
    const Real* pb = b.data();
    Real* po = out.data();
    const Index n = a.numel();
#pragma omp parallel for simd schedule(static) if (n > 65536)
    for (Index i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
    return out;
  }
  BroadcastPlan plan(a.shape(), b.shape());
  Tensor out(plan.out);
  const Real* pa = a.data();
  const Real* pb = b.data();
  Real* po = out.data();
  plan.run([&](Index o, Index oa, Index ob, Index n, Index sa, Index sb) {
    for (Index i = 0; i < n; ++i) po[o + i] = f(pa[oa + i * sa], pb[ob + i * sb]);
  });
  return out;
}

template <typename F, typename G>
Var unary(const Var& x, F f, G dfdx) {
  const Tensor& xv = x.value();
  Tensor out(xv.shape());
  const Real* px = xv.data();
  Real* po = out.data();
  const Index n = xv.numel();
#pragma omp parallel for simd schedule(static) if (n > 65536)
  for (Index i = 0; i < n; ++i) po[i] = f(px[i]);
  Tensor yv = out;
  return make_result(std::move(out), {x}, [dfdx, yv](Node& self) {
    const Tensor& xin = self.parents[0]->value;
    Tensor g(xin.shape());
    const Real* pg = self.grad.data();
    const Real* px2 = xin.data();
    const Real* py = yv.data();
    Real* pd = g.data();
    const Index m = xin.numel();
#pragma omp parallel for simd schedule(static) if (m > 65536)
    for (Index i = 0; i < m; ++i) pd[i] = pg[i] * dfdx(px2[i], py[i]);
    self.parents[0]->accumulate(std::move(g));
  });
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const Index da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const Index db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) {
      throw std::invalid_argument("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[r - 1 - i] = da == 1 ? db : da;
  }
  return out;
}

Tensor reduce_to(const Tensor& g, const Shape& target) {
  if (g.shape() == target) return g;
  BroadcastPlan plan(target, g.shape());
  if (plan.out != g.shape()) {
    throw std::invalid_argument("reduce_to: " + shape_str(g.shape()) + " -> " + shape_str(target));
  }
  Tensor out(target);
  Real* po = out.data();
  const Real* pg = g.data();
  plan.run([&](Index o, Index ot, Index, Index n, Index st, Index) {
    for (Index i = 0; i < n; ++i) po[ot + i * st] += pg[o + i];
  });
  return out;
}

Var add(const Var& a, const Var& b) {
  Tensor out = broadcast_binary(a.value(), b.value(), [](Real x, Real y) { return x + y; });
  return make_result(std::move(out), {a, b}, [](Node& self) {
    if (wants(self, 0)) parent(self, 0)->accumulate(reduce_to(self.grad, self.parents[0]->value.shape()).clone());
    if (wants(self, 1)) parent(self, 1)->accumulate(reduce_to(self.grad, self.parents[1]->value.shape()).clone());
  });
}

Var sub(const Var& a, const Var& b) {
  Tensor out = broadcast_binary(a.value(), b.value(), [](Real x, Real y) { return x - y; });
  return make_result(std::move(out), {a, b}, [](Node& self) {
    if (wants(self, 0)) parent(self, 0)->accumulate(reduce_to(self.grad, self.parents[0]->value.shape()).clone());
    if (wants(self, 1)) {
      Tensor g = reduce_to(self.grad, self.parents[1]->value.shape()).clone();
      for (Real& v : g.values()) v = -v;
      parent(self, 1)->accumulate(std::move(g));
    }
  });
}

Var mul(const Var& a, const Var& b) {
  Tensor out = broadcast_binary(a.value(), b.value(), [](Real x, Real y) { return x * y; });
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    auto prod = [](Real x, Real y) { return x * y; };
    if (wants(self, 0)) parent(self, 0)->accumulate(reduce_to(broadcast_binary(self.grad, bv, prod), av.shape()));
    if (wants(self, 1)) parent(self, 1)->accumulate(reduce_to(broadcast_binary(self.grad, av, prod), bv.shape()));
  });
}

Var div(const Var& a, const Var& b) {
  Tensor out = broadcast_binary(a.value(), b.value(), [](Real x, Real y) { return x / y; });
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    if (wants(self, 0)) {
      parent(self, 0)->accumulate(reduce_to(
          broadcast_binary(self.grad, bv, [](Real g, Real y) { return g / y; }), av.shape()));
    }
    if (wants(self, 1)) {
      Tensor ratio = broadcast_binary(av, bv, [](Real x, Real y) { return -x / (y * y); });
      parent(self, 1)->accumulate(reduce_to(
          broadcast_binary(self.grad, ratio, [](Real g, Real r) { return g * r; }), bv.shape()));
    }
  });
}

Var scale(const Var& x, Real s) {
  return unary(x, [s](Real v) { return v * s; }, [s](Real, Real) { return s; });
}

Var add_scalar(const Var& x, Real s) {
  return unary(x, [s](Real v) { return v + s; }, [](Real, Real) { return Real(1); });
}

Var relu(const Var& x) {
  return unary(x, [](Real v) { return v > 0 ? v : Real(0); },
               [](Real v, Real) { return v > 0 ? Real(1) : Real(0); });
}

Var sigmoid(const Var& x) {
  return unary(x, [](Real v) { return Real(1) / (Real(1) + std::exp(-v)); },
               [](Real, Real y) { return y * (Real(1) - y); });
}

Var tanh(const Var& x) {
  return unary(x, [](Real v) { return std::tanh(v); }, [](Real, Real y) { return Real(1) - y * y; });
}

Var exp(const Var& x) {
  return unary(x, [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

Var log(const Var& x) {
  return unary(x, [](Real v) { return std::log(v); }, [](Real v, Real) { return Real(1) / v; });
}

Var sqrt(const Var& x) {
  return unary(x, [](Real v) { return std::sqrt(v); },
               [](Real, Real y) { return Real(0.5) / y; });
}

Var square(const Var& x) {
  return unary(x, [](Real v) { return v * v; }, [](Real v, Real) { return Real(2) * v; });
}

Var abs(const Var& x) {
  return unary(x, [](Real v) { return std::abs(v); },
               [](Real v, Real) { return v > 0 ? Real(1) : (v < 0 ? Real(-1) : Real(0)); });
}

Var clamp(const Var& x, Real lo, Real hi) {
  return unary(x, [lo, hi](Real v) { return std::clamp(v, lo, hi); },
               [lo, hi](Real v, Real) { return (v >= lo && v <= hi) ? Real(1) : Real(0); });
}

Var sum(const Var& x) {
  double s = 0;
  for (Real v : x.value().values()) s += v;
  return make_result(Tensor(Shape{}, static_cast<Real>(s)), {x}, [](Node& self) {
    parent(self, 0)->accumulate(Tensor(self.parents[0]->value.shape(), self.grad[0]));
  });
}

Var mean(const Var& x) {
  const Index n = x.numel();
  require(n > 0, "mean of empty tensor");
  double s = 0;
  for (Real v : x.value().values()) s += v;
  return make_result(Tensor(Shape{}, static_cast<Real>(s / static_cast<double>(n))), {x},
                     [n](Node& self) {
                       parent(self, 0)->accumulate(Tensor(self.parents[0]->value.shape(),
                                                          self.grad[0] / static_cast<Real>(n)));
                     });
}

Var mean_trailing(const Var& x, int axes) {
  require(axes >= 1 && axes <= x.rank(), "mean_trailing: bad axis count");
  Shape out_shape(x.shape().begin(), x.shape().end() - axes);
  Index inner = 1;
  for (int i = x.rank() - axes; i < x.rank(); ++i) inner *= x.dim(i);
  const Index outer = shape_numel(out_shape);
  Tensor out(out_shape);
  const Real* px = x.value().data();
  for (Index o = 0; o < outer; ++o) {
    double s = 0;
    for (Index i = 0; i < inner; ++i) s += px[o * inner + i];
    out[o] = static_cast<Real>(s / static_cast<double>(inner));
  }
  return make_result(std::move(out), {x}, [outer, inner](Node& self) {
    Tensor g(self.parents[0]->value.shape());
    for (Index o = 0; o < outer; ++o) {
      const Real v = self.grad[o] / static_cast<Real>(inner);
      std::fill(g.data() + o * inner, g.data() + (o + 1) * inner, v);
    }
    parent(self, 0)->accumulate(std::move(g));
  });
}

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshape(std::move(shape));
  return make_result(std::move(out), {x}, [](Node& self) {
    parent(self, 0)->accumulate(self.grad.reshape(self.parents[0]->value.shape()));
  });
}

namespace {

Tensor permute_tensor(const Tensor& x, const std::vector<int>& axes) {
  const int r = x.rank();
  Shape out_shape(static_cast<std::size_t>(r));
  std::vector<Index> in_stride(static_cast<std::size_t>(r));
  Index s = 1;
  for (int i = r - 1; i >= 0; --i) {
    in_stride[static_cast<std::size_t>(i)] = s;
    s *= x.dim(i);
  }
  std::vector<Index> src_stride(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    out_shape[static_cast<std::size_t>(i)] = x.dim(axes[static_cast<std::size_t>(i)]);
    src_stride[static_cast<std::size_t>(i)] = in_stride[static_cast<std::size_t>(axes[static_cast<std::size_t>(i)])];
  }
  Tensor out(out_shape);
  const Index total = out.numel();
  if (total == 0) return out;
  const Real* px = x.data();
  Real* po = out.data();
  const Index inner = out_shape.back();
  const Index inner_stride = src_stride.back();
  std::vector<Index> idx(static_cast<std::size_t>(r), 0);
  Index off = 0;
  for (Index o = 0; o < total; o += inner) {
    for (Index i = 0; i < inner; ++i) po[o + i] = px[off + i * inner_stride];
    for (int ax = r - 2; ax >= 0; --ax) {
      const auto u = static_cast<std::size_t>(ax);
      ++idx[u];
      off += src_stride[u];
      if (idx[u] < out_shape[u]) break;
      off -= src_stride[u] * idx[u];
      idx[u] = 0;
    }
  }
  return out;
}

}  // namespace

Var permute(const Var& x, const std::vector<int>& axes) {
  require(static_cast<int>(axes.size()) == x.rank(), "permute: axis count mismatch");
  std::vector<int> inverse(axes.size());
  for (std::size_t i = 0; i < axes.size(); ++i) inverse[static_cast<std::size_t>(axes[i])] = static_cast<int>(i);
  return make_result(permute_tensor(x.value(), axes), {x}, [inverse](Node& self) {
    parent(self, 0)->accumulate(permute_tensor(self.grad, inverse));
  });
}

Var concat(const std::vector<Var>& xs, int axis) {
  require(!xs.empty(), "concat: no inputs");
  const int r = xs[0].rank();
  if (axis < 0) axis += r;
  Shape out_shape = xs[0].shape();
  Index total_axis = 0;
  for (const auto& v : xs) {
    require(v.rank() == r, "concat: rank mismatch");
    for (int i = 0; i < r; ++i) {
      if (i != axis) require(v.dim(i) == out_shape[static_cast<std::size_t>(i)], "concat: shape mismatch " + shape_str(v.shape()) + " vs " + shape_str(out_shape));
    }
    total_axis += v.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = total_axis;
  Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[static_cast<std::size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= out_shape[static_cast<std::size_t>(i)];
  Tensor out(out_shape);
  std::vector<Index> sizes;
  Index base = 0;
  for (const auto& v : xs) {
    const Index block = v.dim(axis) * inner;
    const Real* src = v.value().data();
    for (Index o = 0; o < outer; ++o) {
      std::copy(src + o * block, src + (o + 1) * block, out.data() + o * total_axis * inner + base);
    }
    sizes.push_back(block);
    base += block;
  }
  return make_result(std::move(out), xs, [sizes, outer, total_axis, inner](Node& self) {
    Index b = 0;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      const Index block = sizes[k];
      if (self.parents[k]->requires_grad) {
        Tensor g(self.parents[k]->value.shape());
        for (Index o = 0; o < outer; ++o) {
          const Real* src = self.grad.data() + o * total_axis * inner + b;
          std::copy(src, src + block, g.data() + o * block);
        }
        self.parents[k]->accumulate(std::move(g));
      }
      b += block;
    }
  });
}

Var slice(const Var& x, int axis, Index begin, Index end) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  const Index d = x.dim(axis);
  require(0 <= begin && begin <= end && end <= d, "slice: bad range");
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = end - begin;
  Index outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  for (int i = axis + 1; i < r; ++i) inner *= x.dim(i);
  Tensor out(out_shape);
  const Index block = (end - begin) * inner;
  const Real* src = x.value().data();
  for (Index o = 0; o < outer; ++o) {
    const Real* s = src + (o * d + begin) * inner;
    std::copy(s, s + block, out.data() + o * block);
  }
  return make_result(std::move(out), {x}, [outer, inner, d, begin, block](Node& self) {
    Tensor g(self.parents[0]->value.shape());
    for (Index o = 0; o < outer; ++o) {
      const Real* s = self.grad.data() + o * block;
      std::copy(s, s + block, g.data() + (o * d + begin) * inner);
    }
    parent(self, 0)->accumulate(std::move(g));
  });
}

Var stack(const std::vector<Var>& xs) {
  require(!xs.empty(), "stack: no inputs");
  std::vector<Var> parts;
  parts.reserve(xs.size());
  Shape one = xs[0].shape();
  one.insert(one.begin(), 1);
  for (const auto& v : xs) {
    require(v.shape() == xs[0].shape(), "stack: shape mismatch");
    parts.push_back(reshape(v, one));
  }
  return concat(parts, 0);
}

Var linear(const Var& x, const Var& w, const Var& bias) {
  require(w.rank() == 2, "linear: weight must be (in, out)");
  const Index in = w.dim(0), outd = w.dim(1);
  require(x.dim(-1) == in, "linear: input width " + std::to_string(x.dim(-1)) + " != " + std::to_string(in));
  const Index rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outd;
  Tensor out(out_shape);
  if (bias.defined()) {
    require(bias.numel() == outd, "linear: bias size");
    for (Index r = 0; r < rows; ++r) std::copy(bias.value().data(), bias.value().data() + outd, out.data() + r * outd);
  }
  kernels::gemm(false, false, rows, outd, in, Real(1), x.value().data(), in, w.value().data(), outd,
                bias.defined() ? Real(1) : Real(0), out.data(), outd);
  std::vector<Var> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(std::move(out), inputs, [rows, in, outd](Node& self) {
    const Tensor& xv = self.parents[0]->value;
    const Tensor& wv = self.parents[1]->value;
    const Real* g = self.grad.data();
    if (wants(self, 0)) {
      Tensor dx(xv.shape());
      kernels::gemm(false, true, rows, in, outd, Real(1), g, outd, wv.data(), outd, Real(0), dx.data(), in);
      parent(self, 0)->accumulate(std::move(dx));
    }
    if (wants(self, 1)) {
      Tensor dw(wv.shape());
      kernels::gemm(true, false, in, outd, rows, Real(1), xv.data(), in, g, outd, Real(0), dw.data(), outd);
      parent(self, 1)->accumulate(std::move(dw));
    }
    if (wants(self, 2)) {
      Tensor db(self.parents[2]->value.shape());
      for (Index r = 0; r < rows; ++r)
        for (Index j = 0; j < outd; ++j) db[j] += g[r * outd + j];
      parent(self, 2)->accumulate(std::move(db));
    }
  });
}

Var bmm(const Var& a, const Var& b, bool trans_a, bool trans_b) {
  require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0), "bmm: need (N, ., .) operands");
  const Index n = a.dim(0);
  const Index m = trans_a ? a.dim(2) : a.dim(1);
  const Index k = trans_a ? a.dim(1) : a.dim(2);
  const Index kb = trans_b ? b.dim(2) : b.dim(1);
  const Index p = trans_b ? b.dim(1) : b.dim(2);
  require(k == kb, "bmm: inner dimension mismatch " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const Index lda = a.dim(2), ldb = b.dim(2);
  const Index sa = a.dim(1) * a.dim(2), sb = b.dim(1) * b.dim(2);
  Tensor out(Shape{n, m, p});
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < n; ++i) {
    kernels::gemm(trans_a, trans_b, m, p, k, Real(1), a.value().data() + i * sa, lda,
                  b.value().data() + i * sb, ldb, Real(0), out.data() + i * m * p, p);
  }
  return make_result(std::move(out), {a, b}, [=](Node& self) {
    const Tensor& av = self.parents[0]->value;
    const Tensor& bv = self.parents[1]->value;
    const Real* g = self.grad.data();
    if (wants(self, 0)) {
      Tensor da(av.shape());
      // dA = G op(B)^T, laid out in A's storage orientation.
#pragma omp parallel for schedule(static)
      for (Index i = 0; i < n; ++i) {
        if (!trans_a) {
          kernels::gemm(false, !trans_b, m, k, p, Real(1), g + i * m * p, p, bv.data() + i * sb, ldb, Real(0), da.data() + i * sa, lda);
        } else {
          kernels::gemm(trans_b, true, k, m, p, Real(1), bv.data() + i * sb, ldb, g + i * m * p, p, Real(0), da.data() + i * sa, lda);
        }
      }
      parent(self, 0)->accumulate(std::move(da));
    }
    if (wants(self, 1)) {
      Tensor db(bv.shape());
#pragma omp parallel for schedule(static)
      for (Index i = 0; i < n; ++i) {
        if (!trans_b) {
          kernels::gemm(!trans_a, false, k, p, m, Real(1), av.data() + i * sa, lda, g + i * m * p, p, Real(0), db.data() + i * sb, ldb);
        } else {
          kernels::gemm(true, trans_a, p, k, m, Real(1), g + i * m * p, p, av.data() + i * sa, lda, Real(0), db.data() + i * sb, ldb);
        }
      }
      parent(self, 1)->accumulate(std::move(db));
    }
  });
}

Var softmax_last(const Var& x) {
  const Index w = x.dim(-1);
  const Index rows = x.numel() / w;
  Tensor out(x.shape());
  const Real* px = x.value().data();
  for (Index r = 0; r < rows; ++r) {
    Real mx = px[r * w];
    for (Index j = 1; j < w; ++j) mx = std::max(mx, px[r * w + j]);
    double s = 0;
    for (Index j = 0; j < w; ++j) {
      out[r * w + j] = std::exp(px[r * w + j] - mx);
      s += out[r * w + j];
    }
    for (Index j = 0; j < w; ++j) out[r * w + j] = static_cast<Real>(out[r * w + j] / s);
  }
  Tensor y = out;
  return make_result(std::move(out), {x}, [y, rows, w](Node& self) {
    Tensor g(y.shape());
    for (Index r = 0; r < rows; ++r) {
      double dot = 0;
      for (Index j = 0; j < w; ++j) dot += self.grad[r * w + j] * y[r * w + j];
      for (Index j = 0; j < w; ++j) {
        g[r * w + j] = y[r * w + j] * (self.grad[r * w + j] - static_cast<Real>(dot));
      }
    }
    parent(self, 0)->accumulate(std::move(g));
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, Real eps) {
  const Index w = x.dim(-1);
  require(gamma.numel() == w && beta.numel() == w, "layer_norm: affine size mismatch");
  const Index rows = x.numel() / w;
  Tensor out(x.shape());
  Tensor mu(Shape{rows}), rs(Shape{rows});
  kernels::layer_norm_forward(rows, w, x.value().data(), gamma.value().data(), beta.value().data(),
                              eps, out.data(), mu.data(), rs.data());
  return make_result(std::move(out), {x, gamma, beta}, [mu, rs, rows, w](Node& self) {
    const Tensor& xv = self.parents[0]->value;
    Tensor dx, dg, db;
    if (wants(self, 0)) dx = Tensor(xv.shape());
    dg = Tensor(Shape{w});
    db = Tensor(Shape{w});
    kernels::layer_norm_backward(rows, w, xv.data(), self.parents[1]->value.data(), mu.data(),
                                 rs.data(), self.grad.data(), dx.empty() ? nullptr : dx.data(),
                                 dg.data(), db.data());
    if (wants(self, 0)) parent(self, 0)->accumulate(std::move(dx));
    if (wants(self, 1)) parent(self, 1)->accumulate(dg.reshape(self.parents[1]->value.shape()));
    if (wants(self, 2)) parent(self, 2)->accumulate(db.reshape(self.parents[2]->value.shape()));
  });
}

Var channel_freq_norm(const Var& x, const Var& gamma, const Var& beta, Real eps) {
  require(x.rank() == 4, "channel_freq_norm: need (B, C, T, D)");
  const Index b = x.dim(0), c = x.dim(1), t = x.dim(2), d = x.dim(3);
  require(gamma.numel() == c && beta.numel() == c, "channel_freq_norm: affine size mismatch");
  Tensor out(x.shape());
  Tensor mu(Shape{b * t}), rs(Shape{b * t});
  kernels::channel_freq_norm_forward(b, c, t, d, x.value().data(), gamma.value().data(),
                                     beta.value().data(), eps, out.data(), mu.data(), rs.data());
  return make_result(std::move(out), {x, gamma, beta}, [mu, rs, b, c, t, d](Node& self) {
    const Tensor& xv = self.parents[0]->value;
    Tensor dx;
    if (wants(self, 0)) dx = Tensor(xv.shape());
    Tensor dg(Shape{c}), db(Shape{c});
    kernels::channel_freq_norm_backward(b, c, t, d, xv.data(), self.parents[1]->value.data(),
                                        mu.data(), rs.data(), self.grad.data(),
                                        dx.empty() ? nullptr : dx.data(), dg.data(), db.data());
    if (wants(self, 0)) parent(self, 0)->accumulate(std::move(dx));
    if (wants(self, 1)) parent(self, 1)->accumulate(dg.reshape(self.parents[1]->value.shape()));
    if (wants(self, 2)) parent(self, 2)->accumulate(db.reshape(self.parents[2]->value.shape()));
  });
}

namespace {

kernels::ConvGeometry geometry(Index channels, Index h, Index w, Index kh, Index kw,
                               const Conv2dSpec& s) {
  kernels::ConvGeometry g;
  g.in_channels = channels;
  g.in_h = h;
  g.in_w = w;
  g.kernel_h = kh;
  g.kernel_w = kw;
  g.stride_h = s.stride_h;
  g.stride_w = s.stride_w;
  g.dilation_h = s.dilation_h;
  g.dilation_w = s.dilation_w;
  g.pad_top = s.pad_top;
  g.pad_bottom = s.pad_bottom;
  g.pad_left = s.pad_left;
  g.pad_right = s.pad_right;
  return g;
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& bias, const Conv2dSpec& spec) {
  require(x.rank() == 4 && w.rank() == 4, "conv2d: need rank-4 input and weight");
  require(x.dim(1) == w.dim(1), "conv2d: input has " + std::to_string(x.dim(1)) +
                                    " channels, weight expects " + std::to_string(w.dim(1)));
  const Index batch = x.dim(0), cout = w.dim(0);
  const auto g = geometry(x.dim(1), x.dim(2), x.dim(3), w.dim(2), w.dim(3), spec);
  require(g.out_h() > 0 && g.out_w() > 0, "conv2d: empty output for input " + shape_str(x.shape()));
  Tensor out(Shape{batch, cout, g.out_h(), g.out_w()});
  kernels::conv2d_forward(g, batch, cout, x.value().data(), w.value().data(),
                          bias.defined() ? bias.value().data() : nullptr, out.data());
  std::vector<Var> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(std::move(out), inputs, [g, batch, cout](Node& self) {
    const Tensor& xv = self.parents[0]->value;
    const Tensor& wv = self.parents[1]->value;
    Tensor dx, dw, db;
    if (wants(self, 0)) dx = Tensor(xv.shape());
    if (wants(self, 1)) dw = Tensor(wv.shape());
    if (wants(self, 2)) db = Tensor(self.parents[2]->value.shape());
    kernels::conv2d_backward(g, batch, cout, xv.data(), wv.data(), self.grad.data(),
                             dx.empty() ? nullptr : dx.data(), dw.empty() ? nullptr : dw.data(),
                             db.empty() ? nullptr : db.data());
    if (!dx.empty()) parent(self, 0)->accumulate(std::move(dx));
    if (!dw.empty()) parent(self, 1)->accumulate(std::move(dw));
    if (!db.empty()) parent(self, 2)->accumulate(std::move(db));
  });
}

Var conv_transpose2d(const Var& x, const Var& w, const Var& bias, const Conv2dSpec& spec) {
  require(x.rank() == 4 && w.rank() == 4, "conv_transpose2d: need rank-4 input and weight");
  require(x.dim(1) == w.dim(0), "conv_transpose2d: channel mismatch");
  const Index batch = x.dim(0), cin = x.dim(1), cout = w.dim(1);
  const Index kh = w.dim(2), kw = w.dim(3);
  const Index oh = (x.dim(2) - 1) * spec.stride_h - spec.pad_top - spec.pad_bottom +
                   spec.dilation_h * (kh - 1) + 1;
  const Index ow = (x.dim(3) - 1) * spec.stride_w - spec.pad_left - spec.pad_right +
                   spec.dilation_w * (kw - 1) + 1;
  require(oh > 0 && ow > 0, "conv_transpose2d: empty output");
  const auto g = geometry(cout, oh, ow, kh, kw, spec);
  require(g.out_h() == x.dim(2) && g.out_w() == x.dim(3), "conv_transpose2d: inconsistent geometry");
  Tensor out(Shape{batch, cout, oh, ow});
  kernels::conv_transpose2d_forward(g, batch, cin, x.value().data(), w.value().data(),
                                    bias.defined() ? bias.value().data() : nullptr, out.data());
  std::vector<Var> inputs{x, w};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(std::move(out), inputs, [g, batch, cin](Node& self) {
    const Tensor& xv = self.parents[0]->value;
    const Tensor& wv = self.parents[1]->value;
    Tensor dx, dw, db;
    if (wants(self, 0)) dx = Tensor(xv.shape());
    if (wants(self, 1)) dw = Tensor(wv.shape());
    if (wants(self, 2)) db = Tensor(self.parents[2]->value.shape());
    kernels::conv_transpose2d_backward(g, batch, cin, xv.data(), wv.data(), self.grad.data(),
                                       dx.empty() ? nullptr : dx.data(),
                                       dw.empty() ? nullptr : dw.data(),
                                       db.empty() ? nullptr : db.data());
    if (!dx.empty()) parent(self, 0)->accumulate(std::move(dx));
    if (!dw.empty()) parent(self, 1)->accumulate(std::move(dw));
    if (!db.empty()) parent(self, 2)->accumulate(std::move(db));
  });
}

Var multi_head_attention(const Var& qkv, Index heads, bool causal) {
  require(qkv.rank() == 3 && qkv.dim(2) % (3 * heads) == 0, "attention: qkv must be (N, L, 3H)");
  const Index n = qkv.dim(0), len = qkv.dim(1);
  const Index hidden = qkv.dim(2) / 3;
  const Index dh = hidden / heads;
  Tensor out(Shape{n, len, hidden});
  Tensor probs(Shape{n, heads, len, len});
  kernels::attention_forward(n, len, heads, dh, causal, qkv.value().data(), out.data(), probs.data());
  return make_result(std::move(out), {qkv}, [probs, n, len, heads, dh](Node& self) {
    Tensor d(self.parents[0]->value.shape());
    kernels::attention_backward(n, len, heads, dh, self.parents[0]->value.data(), probs.data(),
                                self.grad.data(), d.data());
    parent(self, 0)->accumulate(std::move(d));
  });
}

Var gru(const Var& gx, const Var& w_hh, const Var& b_hh) {
  require(gx.rank() == 3, "gru: gx must be (N, L, 3H)");
  const Index h = w_hh.dim(0);
  require(w_hh.rank() == 2 && w_hh.dim(1) == 3 * h && gx.dim(2) == 3 * h && b_hh.numel() == 3 * h,
          "gru: parameter shape mismatch");
  const Index n = gx.dim(0), len = gx.dim(1);
  Tensor out(Shape{n, len, h});
  Tensor r(out.shape()), z(out.shape()), c(out.shape()), ghn(out.shape());
  kernels::gru_forward(n, len, h, gx.value().data(), w_hh.value().data(), b_hh.value().data(),
                       out.data(), r.data(), z.data(), c.data(), ghn.data());
  Tensor hs = out;
  return make_result(std::move(out), {gx, w_hh, b_hh}, [=](Node& self) {
    Tensor dgx(self.parents[0]->value.shape());
    Tensor dw(self.parents[1]->value.shape());
    Tensor db(self.parents[2]->value.shape());
    kernels::gru_backward(n, len, h, self.parents[1]->value.data(), hs.data(), r.data(), z.data(),
                          c.data(), ghn.data(), self.grad.data(), dgx.data(), dw.data(), db.data());
    if (wants(self, 0)) parent(self, 0)->accumulate(std::move(dgx));
    if (wants(self, 1)) parent(self, 1)->accumulate(std::move(dw));
    if (wants(self, 2)) parent(self, 2)->accumulate(std::move(db));
  });
}

Var resize_nearest_last(const Var& x, Index width) {
  const Index in = x.dim(-1);
  require(width > 0, "resize: width must be positive");
  if (in == width) return x;
  const Index rows = x.numel() / in;
  std::vector<Index> src(static_cast<std::size_t>(width));
  for (Index j = 0; j < width; ++j) src[static_cast<std::size_t>(j)] = std::min(in - 1, (j * in) / width);
  Shape out_shape = x.shape();
  out_shape.back() = width;
  Tensor out(out_shape);
  const Real* px = x.value().data();
  for (Index r = 0; r < rows; ++r)
    for (Index j = 0; j < width; ++j) out[r * width + j] = px[r * in + src[static_cast<std::size_t>(j)]];
  return make_result(std::move(out), {x}, [src, rows, in, width](Node& self) {
    Tensor g(self.parents[0]->value.shape());
    for (Index r = 0; r < rows; ++r)
      for (Index j = 0; j < width; ++j) g[r * in + src[static_cast<std::size_t>(j)]] += self.grad[r * width + j];
    parent(self, 0)->accumulate(std::move(g));
  });
}

Var l2_normalize_last(const Var& x) {
  const Index w = x.dim(-1);
  const Index rows = x.numel() / w;
  Tensor out(x.shape());
  Tensor norms(Shape{rows});
  const Real* px = x.value().data();
  for (Index r = 0; r < rows; ++r) {
    double ss = 0;
    for (Index j = 0; j < w; ++j) ss += static_cast<double>(px[r * w + j]) * px[r * w + j];
    const double nrm = std::sqrt(ss);
    norms[r] = static_cast<Real>(nrm);
    for (Index j = 0; j < w; ++j) out[r * w + j] = nrm > 0 ? static_cast<Real>(px[r * w + j] / nrm) : Real(0);
  }
  Tensor y = out;
  return make_result(std::move(out), {x}, [y, norms, rows, w](Node& self) {
    Tensor g(y.shape());
    for (Index r = 0; r < rows; ++r) {
      if (!(norms[r] > 0)) continue;
      double dot = 0;
      for (Index j = 0; j < w; ++j) dot += self.grad[r * w + j] * y[r * w + j];
      for (Index j = 0; j < w; ++j) {
        g[r * w + j] = (self.grad[r * w + j] - static_cast<Real>(dot) * y[r * w + j]) / norms[r];
      }
    }
    parent(self, 0)->accumulate(std::move(g));
  });
}

Var cosine_similarity_map(const Var& x) {
  require(x.rank() == 3, "cosine_similarity_map: need (N, L, K)");
  const Index n = x.dim(0), len = x.dim(1), k = x.dim(2);
  Tensor out(Shape{n, len, len});
  Tensor unit(x.shape()), norms(Shape{n, len});
  kernels::cosine_map_forward(n, len, k, x.value().data(), unit.data(), norms.data(), out.data());
  return make_result(std::move(out), {x}, [unit, norms, n, len, k](Node& self) {
    Tensor g(self.parents[0]->value.shape());
    kernels::cosine_map_backward(n, len, k, unit.data(), norms.data(), self.grad.data(), g.data());
    parent(self, 0)->accumulate(std::move(g));
  });
}

}  // namespace kdse::inline KDSE_PRECISION
