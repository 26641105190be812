#pragma once

#include <complex>
#include <span>
#include <string>
#include <vector>

#include "kdse/autograd.hpp"

namespace kdse::inline KDSE_PRECISION {

enum class WindowKind { Hann, SqrtHann, Rectangular };

std::string window_name(WindowKind kind);
WindowKind parse_window(const std::string& name);

struct StftConfig {
  int sample_rate_hz = 16000;
  Index win_len_samples = 512;
  Index hop_samples = 256;
  Index fft_size = 512;
  WindowKind window = WindowKind::Hann;

  Index bins() const { return fft_size / 2 + 1; }
  /// Frames produced for `samples` input samples (centered framing).
  Index frames(Index samples) const { return 1 + samples / hop_samples; }
  /// Throws std::invalid_argument on inconsistent fields.
  void validate() const;
  /// Throws "reconstruction not guaranteed" when the squared-window overlap
  /// envelope vanishes somewhere.
  void check_reconstructible() const;

  bool operator==(const StftConfig&) const = default;
};

/// Periodic analysis window of length fft_size: win_len_samples taps
/// centered and zero-padded to the FFT size.
std::vector<Real> make_window(const StftConfig& cfg);

struct ComplexSpectrogram {
  Index channels = 0;
  Index frames = 0;
  Index bins = 0;
  /// Samples of the analysed signal; istft trims to this length.
  Index length = 0;
  std::vector<std::complex<Real>> data;  // (channels, frames, bins)
  StftConfig config;

  std::complex<Real>& at(Index c, Index t, Index f) { return data[static_cast<std::size_t>((c * frames + t) * bins + f)]; }
  std::complex<Real> at(Index c, Index t, Index f) const { return data[static_cast<std::size_t>((c * frames + t) * bins + f)]; }
};

/// wave: (channels, samples) or (samples).
ComplexSpectrogram stft(const Tensor& wave, const StftConfig& cfg);
/// Returns (channels, length).
Tensor istft(const ComplexSpectrogram& spec);
/// mask: (frames, bins) complex, applied to every channel.
ComplexSpectrogram apply_crm(const ComplexSpectrogram& noisy,
                             const std::vector<std::complex<Real>>& mask, Index frames,
                             Index bins);

/// Packs channel c of a spectrogram as (2, T, F) planes [re, im].
Tensor spectrogram_planes(const ComplexSpectrogram& spec);
ComplexSpectrogram planes_to_spectrogram(const Tensor& planes, const StftConfig& cfg,
                                         Index length);

// Differentiable counterparts over batches of single-channel signals.

/// wave (N, S) -> (N, 2, T, F).
Var stft_op(const Var& wave, const StftConfig& cfg);
/// spec (N, 2, T, F) -> (N, length).
Var istft_op(const Var& spec, const StftConfig& cfg, Index length);
/// Complex product of spec (N, 2, T, F) and mask (N, 2, T, F).
Var complex_mul(const Var& spec, const Var& mask);
/// sqrt(re^2 + im^2 + eps) of (N, 2, T, F) -> (N, T, F). The gradient is
/// taken as zero where the magnitude vanishes.
Var magnitude(const Var& spec, Real eps = Real(0));

struct MrstftResolution {
  Index fft_size;
  Index hop;
  Index win_len;

  bool operator==(const MrstftResolution&) const = default;
};

struct MrstftConfig {
  std::vector<MrstftResolution> resolutions{{512, 128, 512}, {1024, 256, 1024}, {2048, 512, 2048}};
  Real sc_weight = 1;
  Real mag_weight = 1;

  void validate() const;
  Index max_window() const;

  bool operator==(const MrstftConfig&) const = default;
};

/// Sum over resolutions of spectral convergence and mean absolute
/// log-magnitude difference; averaged over the N signals of (N, S) inputs.
Var mrstft_loss(const Var& est, const Var& ref, const MrstftConfig& cfg);
Real mrstft_loss(std::span<const Real> est, std::span<const Real> ref, const MrstftConfig& cfg);

inline constexpr double kSiSnrCapDb = 120.0;

/// Scale-invariant SNR in dB, clamped to [-120, 120].
double si_snr(std::span<const Real> est, std::span<const Real> ref);

}  // namespace kdse::inline KDSE_PRECISION
