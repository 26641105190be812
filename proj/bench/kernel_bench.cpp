// Serial reference kernels against the OpenMP/Eigen versions, at shapes the
// full-size teacher actually runs. Pass --benchmark_filter to pick kernels;
// thread count follows OMP_NUM_THREADS.

#include <benchmark/benchmark.h>
#include <omp.h>

#include <vector>

#include "kdse/kernels.hpp"
#include "kdse/rng.hpp"

namespace k = kdse::kernels;
using kdse::Index;
using kdse::Real;

namespace {

std::vector<Real> random_vec(std::size_t n, std::uint64_t seed) {
  kdse::Rng rng(seed);
  std::vector<Real> v(n);
  for (auto& x : v) x = static_cast<Real>(rng.uniform(-1, 1));
  return v;
}

template <bool Ref>
void BM_gemm(benchmark::State& st) {
  const Index n = st.range(0);
  const auto a = random_vec(n * n, 1), b = random_vec(n * n, 2);
  std::vector<Real> c(n * n);
  for (auto _ : st) {
    if constexpr (Ref) {
      k::reference::gemm(false, false, n, n, n, 1, a.data(), n, b.data(), n, 0, c.data(), n);
    } else {
      k::gemm(false, false, n, n, n, 1, a.data(), n, b.data(), n, 0, c.data(), n);
    }
    benchmark::DoNotOptimize(c.data());
  }
  st.SetItemsProcessed(st.iterations() * 2 * n * n * n);
}

k::ConvGeometry conv_geometry(Index channels, Index frames, Index width) {
  k::ConvGeometry g;
  g.in_channels = channels;
  g.in_h = frames;
  g.in_w = width;
  g.kernel_h = 2;
  g.kernel_w = 3;
  g.pad_top = 1;
  g.pad_left = g.pad_right = 1;
  return g;
}

template <bool Ref>
void BM_conv2d(benchmark::State& st) {
  const Index batch = 4, ch = st.range(0);
  const k::ConvGeometry g = conv_geometry(ch, 64, 64);
  const auto x = random_vec(batch * ch * g.in_h * g.in_w, 3), w = random_vec(ch * g.col_rows(), 4),
             b = random_vec(ch, 5);
  std::vector<Real> y(batch * ch * g.out_h() * g.out_w());
  for (auto _ : st) {
    if constexpr (Ref) {
      k::reference::conv2d_forward(g, batch, ch, x.data(), w.data(), b.data(), y.data());
    } else {
      k::conv2d_forward(g, batch, ch, x.data(), w.data(), b.data(), y.data());
    }
    benchmark::DoNotOptimize(y.data());
  }
}

template <bool Ref>
void BM_attention(benchmark::State& st) {
  const Index n = st.range(0), len = 64, heads = 4, dh = 32;
  const auto qkv = random_vec(n * len * 3 * heads * dh, 6);
  std::vector<Real> out(n * len * heads * dh), probs(n * heads * len * len);
  for (auto _ : st) {
    if constexpr (Ref) {
      k::reference::attention_forward(n, len, heads, dh, true, qkv.data(), out.data());
    } else {
      k::attention_forward(n, len, heads, dh, true, qkv.data(), out.data(), probs.data());
    }
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Ref>
void BM_gru(benchmark::State& st) {
  const Index n = st.range(0), len = 64, h = 64;
  const auto gx = random_vec(n * len * 3 * h, 7), w = random_vec(3 * h * h, 8), b = random_vec(3 * h, 9);
  std::vector<Real> out(n * len * h), r(out.size()), z(out.size()), cand(out.size()), ghn(out.size());
  for (auto _ : st) {
    if constexpr (Ref) {
      k::reference::gru_forward(n, len, h, gx.data(), w.data(), b.data(), out.data());
    } else {
      k::gru_forward(n, len, h, gx.data(), w.data(), b.data(), out.data(), r.data(), z.data(), cand.data(),
                     ghn.data());
    }
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Ref>
void BM_cosine_map(benchmark::State& st) {
  const Index n = st.range(0), len = 157, kk = 128 * 16;
  const auto x = random_vec(n * len * kk, 10);
  std::vector<Real> unit(x.size()), norms(n * len), out(n * len * len);
  for (auto _ : st) {
    if constexpr (Ref) {
      k::reference::cosine_map_forward(n, len, kk, x.data(), out.data());
    } else {
      k::cosine_map_forward(n, len, kk, x.data(), unit.data(), norms.data(), out.data());
    }
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Ref>
void BM_layer_norm(benchmark::State& st) {
  const Index rows = st.range(0), width = 128;
  const auto x = random_vec(rows * width, 11), gamma = random_vec(width, 12), beta = random_vec(width, 13);
  std::vector<Real> y(x.size()), mean(rows), rstd(rows);
  for (auto _ : st) {
    if constexpr (Ref) {
      k::reference::layer_norm_forward(rows, width, x.data(), gamma.data(), beta.data(), Real(1e-5), y.data());
    } else {
      k::layer_norm_forward(rows, width, x.data(), gamma.data(), beta.data(), Real(1e-5), y.data(), mean.data(),
                            rstd.data());
    }
    benchmark::DoNotOptimize(y.data());
  }
}

}  // namespace

BENCHMARK(BM_gemm<true>)->Name("gemm/reference")->Arg(128)->Arg(256);
BENCHMARK(BM_gemm<false>)->Name("gemm/parallel")->Arg(128)->Arg(256);
BENCHMARK(BM_conv2d<true>)->Name("conv2d/reference")->Arg(32)->Arg(64);
BENCHMARK(BM_conv2d<false>)->Name("conv2d/parallel")->Arg(32)->Arg(64);
BENCHMARK(BM_attention<true>)->Name("attention/reference")->Arg(8)->Arg(32);
BENCHMARK(BM_attention<false>)->Name("attention/parallel")->Arg(8)->Arg(32);
BENCHMARK(BM_gru<true>)->Name("gru/reference")->Arg(8)->Arg(32);
BENCHMARK(BM_gru<false>)->Name("gru/parallel")->Arg(8)->Arg(32);
BENCHMARK(BM_cosine_map<true>)->Name("cosine_map/reference")->Arg(2)->Arg(8);
BENCHMARK(BM_cosine_map<false>)->Name("cosine_map/parallel")->Arg(2)->Arg(8);
BENCHMARK(BM_layer_norm<true>)->Name("layer_norm/reference")->Arg(4096)->Arg(65536);
BENCHMARK(BM_layer_norm<false>)->Name("layer_norm/parallel")->Arg(4096)->Arg(65536);

int main(int argc, char** argv) {
  benchmark::Initialize(&argc, argv);
  benchmark::AddCustomContext("omp_max_threads", std::to_string(omp_get_max_threads()));
  benchmark::RunSpecifiedBenchmarks();
  benchmark::Shutdown();
  return 0;
}
