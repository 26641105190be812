#include "kdse/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "fft.hpp"
#include "kdse/io/hash.hpp"
#include "kdse/io/kv.hpp"
#include "kdse/io/wav.hpp"
#include "kdse/rng.hpp"

namespace kdse::inline KDSE_PRECISION {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

void peak_normalize(std::vector<double>& x, double peak) {
  double m = 0;
  for (double v : x) m = std::max(m, std::abs(v));
  if (m > 0)
    for (double& v : x) v *= peak / m;
}

std::vector<Real> to_real(const std::vector<double>& x) {
  return std::vector<Real>(x.begin(), x.end());
}

/// Formant resonance magnitude at frequency f.
double resonance(double f, double center, double bandwidth) {
  const double u = (f - center) / bandwidth;
  return 1.0 / (1.0 + u * u);
}

std::vector<double> speech_samples(std::uint64_t seed, Index n, int sr) {
  Rng rng(derive_seed(seed, 0x5e7c4));
  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  const double base_f0 = rng.uniform(95.0, 230.0);
  const double glide_rate = rng.uniform(0.3, 1.2);
  const double glide_depth = rng.uniform(0.08, 0.25);
  const double vibrato_rate = rng.uniform(4.0, 6.5);
  const double breath = rng.uniform(0.002, 0.01);

  // Syllable schedule: voiced segments at a 2-8 Hz syllabic rate with pauses.
  struct Syllable {
    Index start, length;
    double f1, f2, f3, gain, f0_scale;
  };
  std::vector<Syllable> syllables;
  Index pos = static_cast<Index>(rng.uniform(0.02, 0.12) * sr);
  while (pos < n) {
    const double rate = rng.uniform(2.0, 8.0);
    const auto len = static_cast<Index>(sr / rate);
    syllables.push_back({pos, len, rng.uniform(300.0, 850.0), rng.uniform(900.0, 2300.0),
                         rng.uniform(2300.0, 3300.0), rng.uniform(0.5, 1.0), rng.uniform(0.9, 1.12)});
    pos += len;
    if (rng.uniform() < 0.3) pos += static_cast<Index>(rng.uniform(0.08, 0.35) * sr);
  }

  double phase = 0;
  std::size_t si = 0;
  for (Index i = 0; i < n; ++i) {
    while (si < syllables.size() && i >= syllables[si].start + syllables[si].length) ++si;
    if (si >= syllables.size() || i < syllables[si].start) {
      continue;
    }
    const Syllable& s = syllables[si];
    const double t = static_cast<double>(i) / sr;
    const double u = static_cast<double>(i - s.start) / static_cast<double>(s.length);
    double f0 = base_f0 * s.f0_scale * (1.0 + glide_depth * std::sin(kTwoPi * glide_rate * t)) *
                (1.0 + 0.01 * std::sin(kTwoPi * vibrato_rate * t)) * (1.0 - 0.1 * u);
    f0 = std::clamp(f0, 80.0, 300.0);
    phase += kTwoPi * f0 / sr;
    if (phase > kTwoPi) phase -= kTwoPi;
    const double env = std::pow(std::sin(std::numbers::pi * u), 1.5) * s.gain;
    // Formants drift slightly within a syllable.
    const double f1 = s.f1 * (1.0 + 0.15 * (u - 0.5)), f2 = s.f2 * (1.0 - 0.1 * (u - 0.5)), f3 = s.f3;
    double v = 0;
    const int harmonics = static_cast<int>(std::min(3800.0, 0.45 * sr) / f0);
    for (int k = 1; k <= harmonics; ++k) {
      const double fk = k * f0;
      const double amp = (resonance(fk, f1, 90.0) + 0.6 * resonance(fk, f2, 120.0) + 0.3 * resonance(fk, f3, 180.0)) / k;
      v += amp * std::sin(k * phase);
    }
    out[static_cast<std::size_t>(i)] = env * (v + breath * rng.normal());
  }

  // Unvoiced onsets: differenced noise bursts reaching into the upper band.
  Rng fric(derive_seed(seed, 0xf71c));
  for (const Syllable& s : syllables) {
    if (fric.uniform() >= 0.4) continue;
    const auto len = static_cast<Index>(fric.uniform(0.03, 0.09) * sr);
    const double gain = fric.uniform(0.03, 0.12);
    double prev = 0;
    for (Index j = 0; j < len && s.start + j < n; ++j) {
      const double w = fric.normal();
      const double u = static_cast<double>(j) / static_cast<double>(len);
      out[static_cast<std::size_t>(s.start + j)] += gain * std::sin(std::numbers::pi * u) * (w - prev);
      prev = w;
    }
  }

  // Recording floor about 60 dB below the peak, so pauses are never digital silence.
  double peak = 0;
  for (double v : out) peak = std::max(peak, std::abs(v));
  for (double& v : out) v += 1e-3 * peak * fric.normal();
  peak_normalize(out, 0.5);
  return out;
}

}  // namespace

std::string noise_name(NoiseKind kind) {
  switch (kind) {
    case NoiseKind::White: return "white";
    case NoiseKind::Pink: return "pink";
    case NoiseKind::Babble: return "babble";
    case NoiseKind::Tonal: return "tonal";
  }
  return "white";
}

NoiseKind parse_noise(const std::string& name) {
  if (name == "white") return NoiseKind::White;
  if (name == "pink") return NoiseKind::Pink;
  if (name == "babble") return NoiseKind::Babble;
  if (name == "tonal") return NoiseKind::Tonal;
  throw std::invalid_argument("unknown noise kind '" + name + "'");
}

Index samples_for(double duration_s, int sample_rate) {
  if (!(duration_s > 0)) throw std::invalid_argument("duration must be positive");
  return static_cast<Index>(std::llround(duration_s * sample_rate));
}

std::vector<Real> synthesize_speech(std::uint64_t seed, double duration_s, int sample_rate) {
  return to_real(speech_samples(seed, samples_for(duration_s, sample_rate), sample_rate));
}

std::vector<Real> synthesize_noise(NoiseKind kind, std::uint64_t seed, double duration_s, int sample_rate) {
  const Index n = samples_for(duration_s, sample_rate);
  Rng rng(derive_seed(seed, 0x7015e, static_cast<std::uint64_t>(kind)));
  std::vector<double> out(static_cast<std::size_t>(n), 0.0);
  switch (kind) {
    case NoiseKind::White:
      for (double& v : out) v = rng.normal();
      break;
    case NoiseKind::Pink: {
      Index m = 2;
      while (m < n) m *= 2;
      std::vector<Real> white(static_cast<std::size_t>(m));
      for (Real& v : white) v = static_cast<Real>(rng.normal());
      const RealFft fft(m);
      std::vector<std::complex<Real>> spec(static_cast<std::size_t>(m / 2 + 1)), scratch(spec.size());
      fft.forward(white.data(), spec.data());
      spec[0] = 0;
      for (std::size_t k = 1; k < spec.size(); ++k) spec[k] /= static_cast<Real>(std::sqrt(static_cast<double>(k)));
      std::vector<Real> shaped(static_cast<std::size_t>(m));
      fft.inverse(spec.data(), shaped.data(), scratch.data());
      for (Index i = 0; i < n; ++i) out[std::size_t(i)] = shaped[std::size_t(i)];
      break;
    }
    case NoiseKind::Babble:
      for (int talker = 0; talker < 6; ++talker) {
        const auto voice = speech_samples(derive_seed(seed, 0xbabb1e, static_cast<std::uint64_t>(talker)), n, sample_rate);
        for (Index i = 0; i < n; ++i) out[std::size_t(i)] += voice[std::size_t(i)];
      }
      break;
    case NoiseKind::Tonal: {
      const double hum = rng.uniform() < 0.5 ? 50.0 : 60.0;
      double freqs[3], amps[3], am[3];
      for (int k = 0; k < 3; ++k) {
        freqs[k] = rng.uniform(150.0, 2500.0);
        amps[k] = rng.uniform(0.3, 1.0);
        am[k] = rng.uniform(0.2, 2.0);
      }
      for (Index i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / sample_rate;
        double v = 0.4 * std::sin(kTwoPi * hum * t) + 0.2 * std::sin(kTwoPi * 3 * hum * t);
        for (int k = 0; k < 3; ++k) v += amps[k] * (0.75 + 0.25 * std::sin(kTwoPi * am[k] * t)) * std::sin(kTwoPi * freqs[k] * t);
        out[std::size_t(i)] = v + 0.02 * rng.normal();
      }
      break;
    }
  }
  peak_normalize(out, 0.5);
  return to_real(out);
}

MixResult mix_at_snr(std::span<const Real> speech, std::span<const Real> noise, double snr_db) {
  if (speech.size() != noise.size()) throw std::invalid_argument("mix_at_snr: length mismatch");
  if (!std::isfinite(snr_db)) throw std::invalid_argument("mix_at_snr: SNR must be finite");
  double ps = 0, pn = 0;
  for (std::size_t i = 0; i < speech.size(); ++i) {
    ps += double(speech[i]) * speech[i];
    pn += double(noise[i]) * noise[i];
  }
  if (!(ps > 0) || !(pn > 0)) throw std::invalid_argument("mix_at_snr: zero-energy input");
  MixResult r;
  r.noise_scale = std::sqrt(ps / (pn * std::pow(10.0, snr_db / 10.0)));
  r.noisy.resize(speech.size());
  r.scaled_noise.resize(speech.size());
  for (std::size_t i = 0; i < speech.size(); ++i) {
    const double sn = r.noise_scale * noise[i];
    r.scaled_noise[i] = static_cast<Real>(sn);
    r.noisy[i] = static_cast<Real>(double(speech[i]) + sn);
  }
  return r;
}

void MixManifest::validate() const {
  if (entries.empty()) throw std::invalid_argument("manifest has no entries");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    if (!std::isfinite(e.snr_db)) throw std::invalid_argument("manifest entry " + std::to_string(i) + ": SNR not finite");
    if (!(e.duration_s > 0)) throw std::invalid_argument("manifest entry " + std::to_string(i) + ": duration must be positive");
    if (e.clean.empty() || e.noise.empty()) throw std::invalid_argument("manifest entry " + std::to_string(i) + ": empty source");
  }
}

MixManifest parse_manifest(const std::string& text) {
  MixManifest m;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line[0] == '#') {
      if (line.rfind("# format_version=", 0) == 0 && line.substr(17) != "1") {
        throw std::runtime_error("unsupported manifest format_version " + line.substr(17));
      }
      continue;
    }
    std::vector<std::string> f;
    std::size_t start = 0;
    for (;;) {
      const auto tab = line.find('\t', start);
      f.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (f.size() != 5) throw std::runtime_error("manifest line " + std::to_string(lineno) + ": expected 5 tab-separated fields");
    ManifestEntry e;
    e.clean = f[0];
    e.noise = f[1];
    try {
      std::size_t used = 0;
      e.snr_db = std::stod(f[2], &used);
      if (used != f[2].size()) throw std::invalid_argument(f[2]);
      e.duration_s = std::stod(f[3], &used);
      if (used != f[3].size()) throw std::invalid_argument(f[3]);
      e.seed = std::stoull(f[4], &used);
      if (used != f[4].size()) throw std::invalid_argument(f[4]);
    } catch (const std::logic_error&) {
      throw std::runtime_error("manifest line " + std::to_string(lineno) + ": malformed number");
    }
    m.entries.push_back(std::move(e));
  }
  m.validate();
  return m;
}

std::string format_manifest(const MixManifest& m) {
  std::string out = "# format_version=1\n# clean\tnoise\tsnr_db\tduration_s\tseed\n";
  for (const auto& e : m.entries) {
    out += e.clean + "\t" + e.noise + "\t" + io::format_number(e.snr_db) + "\t" + io::format_number(e.duration_s) +
           "\t" + std::to_string(e.seed) + "\n";
  }
  return out;
}

MixManifest load_manifest(const std::string& path) { return parse_manifest(io::read_text_file(path)); }

void save_manifest(const std::string& path, const MixManifest& m) {
  m.validate();
  io::write_text_file(path, format_manifest(m));
}

std::string manifest_hash(const MixManifest& m) { return io::git_blob_hash(format_manifest(m)); }

MixManifest make_synthetic_manifest(const SyntheticManifestConfig& cfg) {
  if (cfg.count == 0) throw std::invalid_argument("manifest size must be positive");
  if (cfg.noise_kinds.empty()) throw std::invalid_argument("no noise kinds given");
  if (cfg.snr_choices.empty() && !(cfg.snr_min <= cfg.snr_max)) throw std::invalid_argument("bad SNR range");
  Rng rng(derive_seed(cfg.seed, 0x3a41f));
  MixManifest m;
  for (std::size_t i = 0; i < cfg.count; ++i) {
    ManifestEntry e;
    const std::uint64_t speech_seed = derive_seed(cfg.seed, 1, i) % 1000000007ULL;
    const std::uint64_t noise_seed = derive_seed(cfg.seed, 2, i) % 1000000007ULL;
    const NoiseKind kind = cfg.noise_kinds[i % cfg.noise_kinds.size()];
    e.clean = "synth:speech:" + std::to_string(speech_seed);
    e.noise = "synth:" + noise_name(kind) + ":" + std::to_string(noise_seed);
    e.snr_db = cfg.snr_choices.empty()
                   ? rng.uniform(cfg.snr_min, cfg.snr_max)
                   : cfg.snr_choices[static_cast<std::size_t>(rng.below(cfg.snr_choices.size()))];
    e.duration_s = cfg.duration_s;
    e.seed = derive_seed(cfg.seed, 3, i) % 1000000007ULL;
    m.entries.push_back(std::move(e));
  }
  return m;
}

MixManifest make_directory_manifest(const std::string& dir, double snr_min, double snr_max, std::uint64_t seed) {
  namespace fs = std::filesystem;
  const fs::path clean_dir = fs::path(dir) / "clean", noise_dir = fs::path(dir) / "noise";
  if (!fs::is_directory(clean_dir) || !fs::is_directory(noise_dir)) {
    throw std::runtime_error(dir + " must contain clean/ and noise/ subdirectories");
  }
  std::vector<fs::path> files;
  for (const auto& p : fs::directory_iterator(clean_dir))
    if (p.path().extension() == ".wav") files.push_back(p.path());
  std::sort(files.begin(), files.end());
  Rng rng(derive_seed(seed, 0xd1f));
  MixManifest m;
  std::vector<std::string> missing;
  for (const auto& f : files) {
    const fs::path noise = noise_dir / f.filename();
    if (!fs::exists(noise)) {
      missing.push_back(noise.string());
      continue;
    }
    const io::Audio a = io::read_wav(f.string());
    ManifestEntry e;
    e.clean = fs::relative(f, dir).string();
    e.noise = fs::relative(noise, dir).string();
    e.snr_db = rng.uniform(snr_min, snr_max);
    e.duration_s = static_cast<double>(a.frames) / a.sample_rate;
    e.seed = rng.next() % 1000000007ULL;
    m.entries.push_back(std::move(e));
  }
  if (!missing.empty()) {
    std::string msg = "missing noise files:";
    for (const auto& s : missing) msg += " " + s;
    throw std::runtime_error(msg);
  }
  m.validate();
  return m;
}

namespace {

struct SynthUri {
  std::string recipe;
  std::uint64_t seed;
};

bool parse_synth(const std::string& src, SynthUri& out) {
  if (src.rfind("synth:", 0) != 0) return false;
  const auto colon = src.find(':', 6);
  if (colon == std::string::npos) throw std::invalid_argument("malformed synth source '" + src + "'");
  out.recipe = src.substr(6, colon - 6);
  try {
    out.seed = std::stoull(src.substr(colon + 1));
  } catch (const std::logic_error&) {
    throw std::invalid_argument("malformed synth seed in '" + src + "'");
  }
  return true;
}

/// Mono source of exactly n samples; files are truncated or looped.
std::vector<Real> load_source(const std::string& src, Index n, const DatasetConfig& cfg, bool loop) {
  SynthUri uri;
  const double duration = static_cast<double>(n) / kSampleRate;
  if (parse_synth(src, uri)) {
    if (uri.recipe == "speech") return synthesize_speech(uri.seed, duration);
    return synthesize_noise(parse_noise(uri.recipe), uri.seed, duration);
  }
  std::filesystem::path p(src);
  if (p.is_relative() && !cfg.base_dir.empty()) p = std::filesystem::path(cfg.base_dir) / p;
  if (!std::filesystem::exists(p)) throw std::runtime_error("missing source file: " + p.string());
  const io::Audio a = io::read_wav(p.string());
  if (a.frames == 0) throw std::runtime_error("empty source file: " + p.string());
  std::vector<Real> out(static_cast<std::size_t>(n), Real(0));
  for (Index i = 0; i < n; ++i) {
    if (i >= a.frames && !loop) break;
    out[std::size_t(i)] = static_cast<Real>(a.samples[std::size_t(i % a.frames)]);
  }
  return out;
}

}  // namespace

std::vector<std::string> missing_sources(const MixManifest& manifest, const DatasetConfig& cfg) {
  std::vector<std::string> out;
  for (const auto& e : manifest.entries) {
    for (const std::string* src : {&e.clean, &e.noise}) {
      SynthUri uri;
      if (parse_synth(*src, uri)) continue;
      std::filesystem::path p(*src);
      if (p.is_relative() && !cfg.base_dir.empty()) p = std::filesystem::path(cfg.base_dir) / p;
      if (!std::filesystem::exists(p) && std::find(out.begin(), out.end(), p.string()) == out.end()) {
        out.push_back(p.string());
      }
    }
  }
  return out;
}

void require_sources(const MixManifest& manifest, const DatasetConfig& cfg) {
  const auto missing = missing_sources(manifest, cfg);
  if (missing.empty()) return;
  std::string msg = "missing source files:";
  for (const auto& m : missing) msg += "\n  " + m;
  throw std::runtime_error(msg);
}

Mixture render_entry(const ManifestEntry& e, const DatasetConfig& cfg) {
  if (cfg.channels < 1) throw std::invalid_argument("channel count must be positive");
  const Index n = samples_for(e.duration_s);
  const auto speech = load_source(e.clean, n, cfg, false);
  const auto noise = load_source(e.noise, n, cfg, true);
  const MixResult mix = mix_at_snr(speech, noise, e.snr_db);

  const Index c = cfg.channels;
  std::vector<double> clean(std::size_t(c * n)), noisy(std::size_t(c * n)), scaled(std::size_t(c * n));
  Rng rng(derive_seed(e.seed, 0xc4a7));
  for (Index ch = 0; ch < c; ++ch) {
    const Index delay = ch == 0 ? 0 : static_cast<Index>(rng.below(9));
    const double gain = ch == 0 ? 1.0 : rng.uniform(0.7, 1.0);
    for (Index i = 0; i < n; ++i) {
      const Index src = (i - delay + n) % n;
      const double s = speech[std::size_t(i)];
      const double v = gain * mix.noise_scale * noise[std::size_t(src)];
      clean[std::size_t(ch * n + i)] = s;
      scaled[std::size_t(ch * n + i)] = v;
      noisy[std::size_t(ch * n + i)] = s + v;
    }
  }
  double peak = 0;
  for (double v : noisy) peak = std::max(peak, std::abs(v));
  const double g = peak > 0.99 ? 0.99 / peak : 1.0;
  Mixture m{Tensor(Shape{c, n}), Tensor(Shape{c, n}), Tensor(Shape{c, n})};
  for (std::size_t i = 0; i < clean.size(); ++i) {
    m.clean[Index(i)] = static_cast<Real>(g * clean[i]);
    m.noise[Index(i)] = static_cast<Real>(g * scaled[i]);
    m.noisy[Index(i)] = static_cast<Real>(g * noisy[i]);
  }
  return m;
}

MixtureCache::MixtureCache(MixManifest manifest, DatasetConfig cfg) : manifest_(std::move(manifest)), cfg_(std::move(cfg)) {
  manifest_.validate();
}

std::shared_ptr<const Mixture> MixtureCache::get(std::size_t index) {
  if (index >= manifest_.size()) throw std::out_of_range("manifest index out of range");
  {
    std::lock_guard lock(mutex_);
    auto it = items_.find(index);
    if (it != items_.end()) return it->second;
  }
  auto m = std::make_shared<const Mixture>(render_entry(manifest_.entries[index], cfg_));
  std::lock_guard lock(mutex_);
  return items_.emplace(index, std::move(m)).first->second;
}

Index batches_per_epoch(const MixManifest& manifest, Index batch_size) {
  if (batch_size < 1) throw std::invalid_argument("batch size must be positive");
  return static_cast<Index>(manifest.size()) / batch_size;
}

Batch load_batch(MixtureCache& cache, Index batch_size, double chunk_s, std::uint64_t epoch_seed, Index index) {
  const MixManifest& manifest = cache.manifest();
  if (batch_size < 1) throw std::invalid_argument("batch size must be positive");
  if (static_cast<Index>(manifest.size()) < batch_size) {
    throw std::invalid_argument("manifest has " + std::to_string(manifest.size()) + " entries, fewer than batch size " +
                                std::to_string(batch_size));
  }
  const Index nb = batches_per_epoch(manifest, batch_size);
  if (index < 0 || index >= nb) throw std::out_of_range("batch index " + std::to_string(index) + " outside epoch of " + std::to_string(nb));

  std::vector<std::size_t> order(manifest.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng perm(derive_seed(epoch_seed, 0x9e7));
  perm.shuffle(order);

  std::vector<std::shared_ptr<const Mixture>> items;
  Index chunk = 0;
  for (Index b = 0; b < batch_size; ++b) items.push_back(cache.get(order[std::size_t(index * batch_size + b)]));
  if (chunk_s > 0) {
    chunk = samples_for(chunk_s);
  } else {
    chunk = items[0]->clean.dim(1);
    for (const auto& it : items)
      if (it->clean.dim(1) != chunk) throw std::invalid_argument("utterances differ in length; set a chunk size");
  }
  const Index c = cache.config().channels;
  Batch batch{Tensor(Shape{batch_size, c, chunk}), Tensor(Shape{batch_size, c, chunk}), {}};
  for (Index b = 0; b < batch_size; ++b) {
    const Mixture& m = *items[std::size_t(b)];
    const Index len = m.clean.dim(1);
    BatchItemMeta meta;
    meta.entry_index = order[std::size_t(index * batch_size + b)];
    meta.entry = manifest.entries[meta.entry_index];
    Rng r(derive_seed(epoch_seed, 0x0ff, static_cast<std::uint64_t>(index), static_cast<std::uint64_t>(b)));
    if (len >= chunk) {
      meta.offset = static_cast<Index>(r.below(static_cast<std::uint64_t>(len - chunk + 1)));
    } else {
      meta.padded = true;
    }
    const Index take = std::min(len, chunk);
    for (Index ch = 0; ch < c; ++ch) {
      std::copy_n(m.noisy.data() + ch * len + meta.offset, take, batch.noisy.data() + (b * c + ch) * chunk);
      std::copy_n(m.clean.data() + ch * len + meta.offset, take, batch.clean.data() + (b * c + ch) * chunk);
    }
    batch.meta.push_back(std::move(meta));
  }
  return batch;
}

Batch load_batch(const MixManifest& manifest, Index batch_size, double chunk_s, std::uint64_t epoch_seed, Index index,
                 const DatasetConfig& cfg) {
  MixtureCache cache(manifest, cfg);
  return load_batch(cache, batch_size, chunk_s, epoch_seed, index);
}

}  // namespace kdse::inline KDSE_PRECISION
