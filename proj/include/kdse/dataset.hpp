#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "kdse/tensor.hpp"

namespace kdse::inline KDSE_PRECISION {

inline constexpr int kSampleRate = 16000;

enum class NoiseKind { White, Pink, Babble, Tonal };

std::string noise_name(NoiseKind kind);
NoiseKind parse_noise(const std::string& name);

Index samples_for(double duration_s, int sample_rate = kSampleRate);

/// Harmonic speech-like signal: gliding F0 in 80-300 Hz, three moving
/// formants, syllabic envelope at 2-8 Hz and pauses; peak 0.5.
std::vector<Real> synthesize_speech(std::uint64_t seed, double duration_s, int sample_rate = kSampleRate);
/// Peak-normalized to 0.5. Pink noise has a 1/f power spectrum.
std::vector<Real> synthesize_noise(NoiseKind kind, std::uint64_t seed, double duration_s,
                                   int sample_rate = kSampleRate);

struct MixResult {
  std::vector<Real> noisy;
  std::vector<Real> scaled_noise;
  double noise_scale = 0;
};

/// Scales noise so that 10 log10(P_speech / P_noise) equals snr_db over the
/// whole segment.
MixResult mix_at_snr(std::span<const Real> speech, std::span<const Real> noise, double snr_db);

/// A manifest source is a file path or `synth:<recipe>:<seed>` where recipe
/// is speech, white, pink, babble or tonal.
struct ManifestEntry {
  std::string clean;
  std::string noise;
  double snr_db = 0;
  double duration_s = 0;
  std::uint64_t seed = 0;

  bool operator==(const ManifestEntry&) const = default;
};

struct MixManifest {
  std::vector<ManifestEntry> entries;

  void validate() const;
  std::size_t size() const { return entries.size(); }
};

MixManifest parse_manifest(const std::string& text);
std::string format_manifest(const MixManifest& manifest);
MixManifest load_manifest(const std::string& path);
void save_manifest(const std::string& path, const MixManifest& manifest);
/// git blob hash of the canonical text form.
std::string manifest_hash(const MixManifest& manifest);

struct SyntheticManifestConfig {
  std::size_t count = 20;
  double duration_s = 1.0;
  /// Drawn uniformly from this list when non-empty, else from [snr_min, snr_max].
  std::vector<double> snr_choices;
  double snr_min = -5;
  double snr_max = 15;
  std::vector<NoiseKind> noise_kinds{NoiseKind::White, NoiseKind::Pink, NoiseKind::Babble, NoiseKind::Tonal};
  std::uint64_t seed = 1;
};

MixManifest make_synthetic_manifest(const SyntheticManifestConfig& cfg);
/// Pairs dir/clean/<name>.wav with dir/noise/<name>.wav.
MixManifest make_directory_manifest(const std::string& dir, double snr_min, double snr_max, std::uint64_t seed);

struct DatasetConfig {
  int channels = 1;
  /// Relative file sources resolve against this directory.
  std::string base_dir;
};

/// One rendered mixture, each (channels, samples).
struct Mixture {
  Tensor clean;
  Tensor noise;
  Tensor noisy;
};

Mixture render_entry(const ManifestEntry& entry, const DatasetConfig& cfg = {});

/// File sources of the manifest that do not exist, resolved against base_dir.
std::vector<std::string> missing_sources(const MixManifest& manifest, const DatasetConfig& cfg = {});
/// Throws one error listing every missing file.
void require_sources(const MixManifest& manifest, const DatasetConfig& cfg = {});

/// Memoizes render_entry per manifest index. Thread-safe.
class MixtureCache {
 public:
  MixtureCache(MixManifest manifest, DatasetConfig cfg);
  const MixManifest& manifest() const { return manifest_; }
  const DatasetConfig& config() const { return cfg_; }
  std::shared_ptr<const Mixture> get(std::size_t index);

 private:
  MixManifest manifest_;
  DatasetConfig cfg_;
  std::mutex mutex_;
  std::map<std::size_t, std::shared_ptr<const Mixture>> items_;
};

struct BatchItemMeta {
  std::size_t entry_index = 0;
  ManifestEntry entry;
  Index offset = 0;
  bool padded = false;
};

struct Batch {
  Tensor noisy;  // (B, channels, samples)
  Tensor clean;
  std::vector<BatchItemMeta> meta;
};

/// Number of full batches in one pass without replacement.
Index batches_per_epoch(const MixManifest& manifest, Index batch_size);

/// Pure function of (manifest, epoch_seed, index). chunk_s <= 0 takes whole
/// utterances (all must then share a length).
Batch load_batch(const MixManifest& manifest, Index batch_size, double chunk_s, std::uint64_t epoch_seed,
                 Index index, const DatasetConfig& cfg = {});
Batch load_batch(MixtureCache& cache, Index batch_size, double chunk_s, std::uint64_t epoch_seed, Index index);

}  // namespace kdse::inline KDSE_PRECISION
