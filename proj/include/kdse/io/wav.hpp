#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace kdse::io {

enum class WavEncoding { Pcm16, Float32 };

/// Planar audio: samples[c * frames + i].
struct Audio {
  int sample_rate = 16000;
  int channels = 1;
  std::int64_t frames = 0;
  std::vector<float> samples;
};

/// Reads 16-bit PCM or 32-bit float WAV. Anything other than 16 kHz throws.
Audio read_wav(const std::string& path);
void write_wav(const std::string& path, const Audio& audio, WavEncoding encoding = WavEncoding::Pcm16);

}  // namespace kdse::io
