#include "kdse/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "fft.hpp"
#include "kdse/ops.hpp"

namespace kdse::inline KDSE_PRECISION {

std::string window_name(WindowKind kind) {
  switch (kind) {
    case WindowKind::Hann: return "hann";
    case WindowKind::SqrtHann: return "sqrt_hann";
    case WindowKind::Rectangular: return "rect";
  }
  return "hann";
}

WindowKind parse_window(const std::string& name) {
  if (name == "hann") return WindowKind::Hann;
  if (name == "sqrt_hann") return WindowKind::SqrtHann;
  if (name == "rect") return WindowKind::Rectangular;
  throw std::invalid_argument("unknown window '" + name + "'");
}

void StftConfig::validate() const {
  if (sample_rate_hz <= 0) throw std::invalid_argument("sample rate must be positive");
  if (win_len_samples <= 0 || hop_samples <= 0) throw std::invalid_argument("window and hop must be positive");
  if (hop_samples > win_len_samples) throw std::invalid_argument("hop exceeds window length");
  if (fft_size < win_len_samples) throw std::invalid_argument("FFT size smaller than window");
  if (fft_size % 2 != 0) throw std::invalid_argument("FFT size must be even");
}

std::vector<Real> make_window(const StftConfig& cfg) {
  cfg.validate();
  const Index n = cfg.win_len_samples;
  std::vector<Real> w(static_cast<std::size_t>(cfg.fft_size), Real(0));
  const Index offset = (cfg.fft_size - n) / 2;
  for (Index k = 0; k < n; ++k) {
    const double hann = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(k) / static_cast<double>(n));
    double v = 1.0;
    if (cfg.window == WindowKind::Hann) v = hann;
    if (cfg.window == WindowKind::SqrtHann) v = std::sqrt(hann);
    w[static_cast<std::size_t>(offset + k)] = static_cast<Real>(v);
  }
  return w;
}

void StftConfig::check_reconstructible() const {
  validate();
  const auto w = make_window(*this);
  // Steady-state envelope over one hop period.
  double lo = 1e300, hi = 0;
  for (Index s = 0; s < hop_samples; ++s) {
    double env = 0;
    for (Index k = s; k < fft_size; k += hop_samples) env += double(w[std::size_t(k)]) * w[std::size_t(k)];
    lo = std::min(lo, env);
    hi = std::max(hi, env);
  }
  if (!(hi > 0) || lo < 1e-10 * hi) throw std::invalid_argument("reconstruction not guaranteed");
}

namespace {

Index reflect_index(Index i, Index n) {
  if (i < 0) return -i;
  if (i >= n) return 2 * (n - 1) - i;
  return i;
}

void check_length(Index samples, const StftConfig& cfg) {
  if (samples < cfg.win_len_samples || samples <= cfg.fft_size / 2) {
    throw std::invalid_argument("input too short: " + std::to_string(samples) +
                                " samples for a " + std::to_string(cfg.fft_size) + "-point frame");
  }
}

/// x (S) -> planes (2, T, F).
void stft_planes(const Real* x, Index samples, const StftConfig& cfg, const std::vector<Real>& w,
                 const RealFft& fft, Real* out) {
  const Index n = cfg.fft_size, hop = cfg.hop_samples, pad = n / 2, bins = cfg.bins();
  const Index frames = cfg.frames(samples);
  std::vector<Real> frame(static_cast<std::size_t>(n));
  std::vector<std::complex<Real>> spec(static_cast<std::size_t>(bins));
  Real* re = out;
  Real* im = out + frames * bins;
  for (Index t = 0; t < frames; ++t) {
    for (Index k = 0; k < n; ++k) {
      frame[std::size_t(k)] = x[reflect_index(t * hop + k - pad, samples)] * w[std::size_t(k)];
    }
    fft.forward(frame.data(), spec.data());
    for (Index f = 0; f < bins; ++f) {
      re[t * bins + f] = spec[std::size_t(f)].real();
      im[t * bins + f] = spec[std::size_t(f)].imag();
    }
  }
}

/// Adjoint of stft_planes; accumulates into dx.
void stft_planes_adjoint(const Real* g, Index samples, const StftConfig& cfg,
                         const std::vector<Real>& w, const RealFft& fft, Real* dx) {
  const Index n = cfg.fft_size, hop = cfg.hop_samples, pad = n / 2, bins = cfg.bins();
  const Index frames = cfg.frames(samples);
  std::vector<std::complex<Real>> spec(static_cast<std::size_t>(bins)), scratch(spec.size());
  std::vector<Real> frame(static_cast<std::size_t>(n));
  const Real* re = g;
  const Real* im = g + frames * bins;
  for (Index t = 0; t < frames; ++t) {
    for (Index f = 0; f < bins; ++f) {
      const Real half = (f == 0 || f == bins - 1) ? Real(1) : Real(0.5);
      spec[std::size_t(f)] = {re[t * bins + f] * half, im[t * bins + f] * half};
    }
    fft.inverse(spec.data(), frame.data(), scratch.data());
    for (Index k = 0; k < n; ++k) {
      dx[reflect_index(t * hop + k - pad, samples)] += frame[std::size_t(k)] * w[std::size_t(k)];
    }
  }
}

std::vector<Real> overlap_envelope(const StftConfig& cfg, const std::vector<Real>& w, Index frames) {
  const Index n = cfg.fft_size, hop = cfg.hop_samples;
  std::vector<Real> env(static_cast<std::size_t>((frames - 1) * hop + n), Real(0));
  for (Index t = 0; t < frames; ++t)
    for (Index k = 0; k < n; ++k) env[std::size_t(t * hop + k)] += w[std::size_t(k)] * w[std::size_t(k)];
  return env;
}

void check_envelope(const std::vector<Real>& env, Index pad, Index length) {
  Real hi = 0, lo = std::numeric_limits<Real>::max();
  for (Index i = pad; i < pad + length; ++i) {
    hi = std::max(hi, env[std::size_t(i)]);
    lo = std::min(lo, env[std::size_t(i)]);
  }
  if (!(hi > 0) || lo < Real(1e-10) * hi) throw std::invalid_argument("reconstruction not guaranteed");
}

/// planes (2, T, F) -> y (length).
void istft_planes(const Real* planes, Index frames, const StftConfig& cfg, const std::vector<Real>& w,
                  const std::vector<Real>& env, const RealFft& fft, Index length, Real* y) {
  const Index n = cfg.fft_size, hop = cfg.hop_samples, pad = n / 2, bins = cfg.bins();
  std::vector<std::complex<Real>> spec(static_cast<std::size_t>(bins)), scratch(spec.size());
  std::vector<Real> frame(static_cast<std::size_t>(n));
  std::vector<Real> acc(env.size(), Real(0));
  const Real* re = planes;
  const Real* im = planes + frames * bins;
  const Real inv_n = Real(1) / static_cast<Real>(n);
  for (Index t = 0; t < frames; ++t) {
    for (Index f = 0; f < bins; ++f) spec[std::size_t(f)] = {re[t * bins + f], im[t * bins + f]};
    fft.inverse(spec.data(), frame.data(), scratch.data());
    for (Index k = 0; k < n; ++k) acc[std::size_t(t * hop + k)] += frame[std::size_t(k)] * inv_n * w[std::size_t(k)];
  }
  const Index avail = static_cast<Index>(acc.size()) - pad;
  for (Index i = 0; i < length; ++i) {
    y[i] = i < avail ? acc[std::size_t(i + pad)] / env[std::size_t(i + pad)] : Real(0);
  }
}

/// Adjoint of istft_planes; accumulates into dplanes.
void istft_planes_adjoint(const Real* gy, Index frames, const StftConfig& cfg, const std::vector<Real>& w,
                          const std::vector<Real>& env, const RealFft& fft, Index length, Real* dplanes) {
  const Index n = cfg.fft_size, hop = cfg.hop_samples, pad = n / 2, bins = cfg.bins();
  std::vector<Real> gacc(env.size(), Real(0));
  const Index avail = static_cast<Index>(env.size()) - pad;
  for (Index i = 0; i < std::min(length, avail); ++i) gacc[std::size_t(i + pad)] = gy[i] / env[std::size_t(i + pad)];
  std::vector<Real> frame(static_cast<std::size_t>(n));
  std::vector<std::complex<Real>> spec(static_cast<std::size_t>(bins));
  Real* re = dplanes;
  Real* im = dplanes + frames * bins;
  const Real inv_n = Real(1) / static_cast<Real>(n);
  for (Index t = 0; t < frames; ++t) {
    for (Index k = 0; k < n; ++k) frame[std::size_t(k)] = gacc[std::size_t(t * hop + k)] * w[std::size_t(k)];
    fft.forward(frame.data(), spec.data());
    for (Index f = 0; f < bins; ++f) {
      const Real c = (f == 0 || f == bins - 1) ? inv_n : 2 * inv_n;
      re[t * bins + f] += c * spec[std::size_t(f)].real();
      if (f != 0 && f != bins - 1) im[t * bins + f] += c * spec[std::size_t(f)].imag();
    }
  }
}

}  // namespace

ComplexSpectrogram stft(const Tensor& wave, const StftConfig& cfg) {
  cfg.validate();
  if (wave.rank() != 1 && wave.rank() != 2) throw std::invalid_argument("stft expects (channels, samples)");
  const Index channels = wave.rank() == 2 ? wave.dim(0) : 1;
  const Index samples = wave.dim(-1);
  check_length(samples, cfg);
  ComplexSpectrogram out;
  out.channels = channels;
  out.frames = cfg.frames(samples);
  out.bins = cfg.bins();
  out.length = samples;
  out.config = cfg;
  out.data.resize(static_cast<std::size_t>(channels * out.frames * out.bins));
  const auto w = make_window(cfg);
  const RealFft fft(cfg.fft_size);
  std::vector<Real> planes(static_cast<std::size_t>(2 * out.frames * out.bins));
  const Index plane = out.frames * out.bins;
  for (Index c = 0; c < channels; ++c) {
    stft_planes(wave.data() + c * samples, samples, cfg, w, fft, planes.data());
    for (Index i = 0; i < plane; ++i) {
      out.data[std::size_t(c * plane + i)] = {planes[std::size_t(i)], planes[std::size_t(plane + i)]};
    }
  }
  return out;
}

Tensor istft(const ComplexSpectrogram& spec) {
  const StftConfig& cfg = spec.config;
  cfg.check_reconstructible();
  if (spec.bins != cfg.bins()) throw std::invalid_argument("spectrogram bins do not match configuration");
  if (spec.frames < 1) throw std::invalid_argument("spectrogram has no frames");
  const Index length = spec.length > 0 ? spec.length : (spec.frames - 1) * cfg.hop_samples;
  const auto w = make_window(cfg);
  const auto env = overlap_envelope(cfg, w, spec.frames);
  check_envelope(env, cfg.fft_size / 2, std::min(length, static_cast<Index>(env.size()) - cfg.fft_size / 2));
  const RealFft fft(cfg.fft_size);
  Tensor out(Shape{spec.channels, length});
  const Index plane = spec.frames * spec.bins;
  std::vector<Real> planes(static_cast<std::size_t>(2 * plane));
  for (Index c = 0; c < spec.channels; ++c) {
    for (Index i = 0; i < plane; ++i) {
      planes[std::size_t(i)] = spec.data[std::size_t(c * plane + i)].real();
      planes[std::size_t(plane + i)] = spec.data[std::size_t(c * plane + i)].imag();
    }
    istft_planes(planes.data(), spec.frames, cfg, w, env, fft, length, out.data() + c * length);
  }
  return out;
}

ComplexSpectrogram apply_crm(const ComplexSpectrogram& noisy,
                             const std::vector<std::complex<Real>>& mask, Index frames,
                             Index bins) {
  if (frames != noisy.frames || bins != noisy.bins ||
      static_cast<Index>(mask.size()) != frames * bins) {
    throw std::invalid_argument("mask shape (" + std::to_string(frames) + ", " + std::to_string(bins) +
                                ") does not match spectrogram (" + std::to_string(noisy.frames) + ", " +
                                std::to_string(noisy.bins) + ")");
  }
  ComplexSpectrogram out = noisy;
  const Index plane = frames * bins;
  for (Index c = 0; c < noisy.channels; ++c)
    for (Index i = 0; i < plane; ++i) out.data[std::size_t(c * plane + i)] *= mask[std::size_t(i)];
  return out;
}

Tensor spectrogram_planes(const ComplexSpectrogram& spec) {
  Tensor out(Shape{spec.channels, 2, spec.frames, spec.bins});
  const Index plane = spec.frames * spec.bins;
  for (Index c = 0; c < spec.channels; ++c) {
    for (Index i = 0; i < plane; ++i) {
      out[(2 * c) * plane + i] = spec.data[std::size_t(c * plane + i)].real();
      out[(2 * c + 1) * plane + i] = spec.data[std::size_t(c * plane + i)].imag();
    }
  }
  return out;
}

ComplexSpectrogram planes_to_spectrogram(const Tensor& planes, const StftConfig& cfg, Index length) {
  if (planes.rank() != 4 || planes.dim(1) != 2 || planes.dim(3) != cfg.bins()) {
    throw std::invalid_argument("expected (channels, 2, frames, bins) planes, got " + shape_str(planes.shape()));
  }
  ComplexSpectrogram out;
  out.channels = planes.dim(0);
  out.frames = planes.dim(2);
  out.bins = planes.dim(3);
  out.length = length;
  out.config = cfg;
  const Index plane = out.frames * out.bins;
  out.data.resize(static_cast<std::size_t>(out.channels * plane));
  for (Index c = 0; c < out.channels; ++c)
    for (Index i = 0; i < plane; ++i)
      out.data[std::size_t(c * plane + i)] = {planes[(2 * c) * plane + i], planes[(2 * c + 1) * plane + i]};
  return out;
}

Var stft_op(const Var& wave, const StftConfig& cfg) {
  cfg.validate();
  if (wave.rank() != 2) throw std::invalid_argument("stft_op expects (N, samples)");
  const Index n = wave.dim(0), samples = wave.dim(1);
  check_length(samples, cfg);
  const Index frames = cfg.frames(samples), bins = cfg.bins();
  auto w = std::make_shared<const std::vector<Real>>(make_window(cfg));
  const RealFft fft(cfg.fft_size);
  Tensor out(Shape{n, 2, frames, bins});
  const Real* x = wave.value().data();
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < n; ++i) stft_planes(x + i * samples, samples, cfg, *w, fft, out.data() + i * 2 * frames * bins);
  return make_result(std::move(out), {wave}, [cfg, w, fft, n, samples, frames, bins](Node& self) {
    Tensor dx(self.parents[0]->value.shape());
#pragma omp parallel for schedule(static)
    for (Index i = 0; i < n; ++i)
      stft_planes_adjoint(self.grad.data() + i * 2 * frames * bins, samples, cfg, *w, fft, dx.data() + i * samples);
    self.parents[0]->accumulate(std::move(dx));
  });
}

Var istft_op(const Var& spec, const StftConfig& cfg, Index length) {
  cfg.check_reconstructible();
  if (spec.rank() != 4 || spec.dim(1) != 2 || spec.dim(3) != cfg.bins()) {
    throw std::invalid_argument("istft_op expects (N, 2, frames, " + std::to_string(cfg.bins()) + "), got " +
                                shape_str(spec.shape()));
  }
  const Index n = spec.dim(0), frames = spec.dim(2), bins = cfg.bins();
  if (frames < 1) throw std::invalid_argument("spectrogram has no frames");
  auto w = std::make_shared<const std::vector<Real>>(make_window(cfg));
  auto env = std::make_shared<const std::vector<Real>>(overlap_envelope(cfg, *w, frames));
  check_envelope(*env, cfg.fft_size / 2, std::min(length, static_cast<Index>(env->size()) - cfg.fft_size / 2));
  const RealFft fft(cfg.fft_size);
  Tensor out(Shape{n, length});
  const Real* s = spec.value().data();
#pragma omp parallel for schedule(static)
  for (Index i = 0; i < n; ++i)
    istft_planes(s + i * 2 * frames * bins, frames, cfg, *w, *env, fft, length, out.data() + i * length);
  return make_result(std::move(out), {spec}, [cfg, w, env, fft, n, frames, bins, length](Node& self) {
    Tensor d(self.parents[0]->value.shape());
#pragma omp parallel for schedule(static)
    for (Index i = 0; i < n; ++i)
      istft_planes_adjoint(self.grad.data() + i * length, frames, cfg, *w, *env, fft, length,
                           d.data() + i * 2 * frames * bins);
    self.parents[0]->accumulate(std::move(d));
  });
}

Var complex_mul(const Var& spec, const Var& mask) {
  if (spec.shape() != mask.shape() || spec.rank() != 4 || spec.dim(1) != 2) {
    throw std::invalid_argument("complex_mul: shapes " + shape_str(spec.shape()) + " and " +
                                shape_str(mask.shape()) + " must agree as (N, 2, T, F)");
  }
  const Index n = spec.dim(0), plane = spec.dim(2) * spec.dim(3);
  Tensor out(spec.shape());
  const Real* a = spec.value().data();
  const Real* m = mask.value().data();
  for (Index i = 0; i < n; ++i) {
    const Index o = i * 2 * plane;
    for (Index j = 0; j < plane; ++j) {
      const Real ar = a[o + j], ai = a[o + plane + j], mr = m[o + j], mi = m[o + plane + j];
      out[o + j] = ar * mr - ai * mi;
      out[o + plane + j] = ar * mi + ai * mr;
    }
  }
  return make_result(std::move(out), {spec, mask}, [n, plane](Node& self) {
    const Real* a = self.parents[0]->value.data();
    const Real* m = self.parents[1]->value.data();
    const Real* g = self.grad.data();
    const bool want_a = self.parents[0]->requires_grad, want_m = self.parents[1]->requires_grad;
    Tensor da(self.parents[0]->value.shape()), dm(self.parents[1]->value.shape());
    for (Index i = 0; i < n; ++i) {
      const Index o = i * 2 * plane;
      for (Index j = 0; j < plane; ++j) {
        const Real gr = g[o + j], gi = g[o + plane + j];
        const Real ar = a[o + j], ai = a[o + plane + j], mr = m[o + j], mi = m[o + plane + j];
        da[o + j] = gr * mr + gi * mi;
        da[o + plane + j] = -gr * mi + gi * mr;
        dm[o + j] = gr * ar + gi * ai;
        dm[o + plane + j] = -gr * ai + gi * ar;
      }
    }
    if (want_a) self.parents[0]->accumulate(std::move(da));
    if (want_m) self.parents[1]->accumulate(std::move(dm));
  });
}

Var magnitude(const Var& spec, Real eps) {
  if (spec.rank() != 4 || spec.dim(1) != 2) throw std::invalid_argument("magnitude expects (N, 2, T, F)");
  const Index n = spec.dim(0), t = spec.dim(2), f = spec.dim(3), plane = t * f;
  Tensor out(Shape{n, t, f});
  const Real* s = spec.value().data();
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < plane; ++j) {
      const Real re = s[i * 2 * plane + j], im = s[i * 2 * plane + plane + j];
      out[i * plane + j] = std::sqrt(re * re + im * im + eps);
    }
  Tensor mag = out;
  return make_result(std::move(out), {spec}, [mag, n, plane](Node& self) {
    const Real* s = self.parents[0]->value.data();
    Tensor d(self.parents[0]->value.shape());
    for (Index i = 0; i < n; ++i)
      for (Index j = 0; j < plane; ++j) {
        const Real m = mag[i * plane + j];
        if (!(m > 0)) continue;
        const Real g = self.grad[i * plane + j] / m;
        d[i * 2 * plane + j] = g * s[i * 2 * plane + j];
        d[i * 2 * plane + plane + j] = g * s[i * 2 * plane + plane + j];
      }
    self.parents[0]->accumulate(std::move(d));
  });
}

void MrstftConfig::validate() const {
  if (resolutions.empty()) throw std::invalid_argument("MRSTFT needs at least one resolution");
  if (sc_weight < 0 || mag_weight < 0) throw std::invalid_argument("MRSTFT weights must be nonnegative");
  for (const auto& r : resolutions) {
    StftConfig c;
    c.fft_size = r.fft_size;
    c.hop_samples = r.hop;
    c.win_len_samples = r.win_len;
    c.validate();
  }
}

Index MrstftConfig::max_window() const {
  Index m = 0;
  for (const auto& r : resolutions) m = std::max({m, r.win_len, r.fft_size / 2 + 1});
  return m;
}

namespace {

/// l2 norm of each row of (N, K); zero rows get a zero gradient.
Var row_norm(const Var& x) {
  const Index n = x.dim(0), k = x.numel() / x.dim(0);
  Tensor out(Shape{n});
  const Real* p = x.value().data();
  for (Index i = 0; i < n; ++i) {
    double s = 0;
    for (Index j = 0; j < k; ++j) s += double(p[i * k + j]) * p[i * k + j];
    out[i] = static_cast<Real>(std::sqrt(s));
  }
  Tensor norms = out;
  return make_result(std::move(out), {x}, [norms, n, k](Node& self) {
    const Real* p = self.parents[0]->value.data();
    Tensor d(self.parents[0]->value.shape());
    for (Index i = 0; i < n; ++i) {
      if (!(norms[i] > 0)) continue;
      const Real g = self.grad[i] / norms[i];
      for (Index j = 0; j < k; ++j) d[i * k + j] = g * p[i * k + j];
    }
    self.parents[0]->accumulate(std::move(d));
  });
}

}  // namespace

Var mrstft_loss(const Var& est, const Var& ref, const MrstftConfig& cfg) {
  cfg.validate();
  if (est.shape() != ref.shape()) {
    throw std::invalid_argument("length mismatch: " + shape_str(est.shape()) + " vs " + shape_str(ref.shape()));
  }
  const Var e2 = est.rank() == 1 ? reshape(est, {1, est.dim(0)}) : est;
  const Var r2 = ref.rank() == 1 ? reshape(ref, {1, ref.dim(0)}) : ref;
  if (e2.rank() != 2) throw std::invalid_argument("mrstft_loss expects (N, samples)");
  const Index n = e2.dim(0);
  const Real floor = Real(1e-5);
  Var total;
  for (const auto& res : cfg.resolutions) {
    StftConfig sc;
    sc.fft_size = res.fft_size;
    sc.hop_samples = res.hop;
    sc.win_len_samples = res.win_len;
    const Var em = magnitude(stft_op(e2, sc));
    const Var rm = magnitude(stft_op(r2, sc));
    const Var diff = reshape(sub(rm, em), {n, -1});
    const Var ref_norm = clamp(row_norm(reshape(rm, {n, -1})), Real(1e-12), std::numeric_limits<Real>::max());
    const Var sc_term = mean(div(row_norm(diff), ref_norm));
    const Var log_term = mean(abs(sub(log(clamp(rm, floor, std::numeric_limits<Real>::max())),
                                      log(clamp(em, floor, std::numeric_limits<Real>::max())))));
    const Var term = add(scale(sc_term, cfg.sc_weight), scale(log_term, cfg.mag_weight));
    total = total.defined() ? add(total, term) : term;
  }
  return total;
}

Real mrstft_loss(std::span<const Real> est, std::span<const Real> ref, const MrstftConfig& cfg) {
  if (est.size() != ref.size()) {
    throw std::invalid_argument("length mismatch: " + std::to_string(est.size()) + " vs " + std::to_string(ref.size()));
  }
  NoGradGuard guard;
  const Index s = static_cast<Index>(est.size());
  const Var e = constant(Tensor(Shape{1, s}, std::vector<Real>(est.begin(), est.end())));
  const Var r = constant(Tensor(Shape{1, s}, std::vector<Real>(ref.begin(), ref.end())));
  return mrstft_loss(e, r, cfg).item();
}

double si_snr(std::span<const Real> est, std::span<const Real> ref) {
  if (est.size() != ref.size()) throw std::invalid_argument("si_snr: length mismatch");
  if (est.empty()) throw std::invalid_argument("si_snr: empty input");
  const double n = static_cast<double>(est.size());
  double me = 0, mr = 0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    me += est[i];
    mr += ref[i];
  }
  me /= n;
  mr /= n;
  double dot = 0, rr = 0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    const double r = ref[i] - mr;
    dot += (est[i] - me) * r;
    rr += r * r;
  }
  if (!(rr > 0)) throw std::invalid_argument("si_snr: reference has zero energy");
  const double alpha = dot / rr;
  double target = 0, noise = 0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    const double s = alpha * (ref[i] - mr);
    const double e = (est[i] - me) - s;
    target += s * s;
    noise += e * e;
  }
  if (!(noise > 0)) return target > 0 ? kSiSnrCapDb : -kSiSnrCapDb;
  if (!(target > 0)) return -kSiSnrCapDb;
  return std::clamp(10.0 * std::log10(target / noise), -kSiSnrCapDb, kSiSnrCapDb);
}

}  // namespace kdse::inline KDSE_PRECISION
