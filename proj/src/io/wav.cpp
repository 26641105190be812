#include "kdse/io/wav.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace kdse::io {

namespace {

static_assert(std::endian::native == std::endian::little, "WAV I/O assumes a little-endian host");

constexpr int kRequiredRate = 16000;

template <typename T>
T read_le(const std::vector<char>& buf, std::size_t pos) {
  if (pos + sizeof(T) > buf.size()) throw std::runtime_error("truncated WAV file");
  T v;
  std::memcpy(&v, buf.data() + pos, sizeof(T));
  return v;
}

template <typename T>
void put_le(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

}  // namespace

Audio read_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open WAV file: " + path);
  std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 12 || std::memcmp(buf.data(), "RIFF", 4) != 0 || std::memcmp(buf.data() + 8, "WAVE", 4) != 0) {
    throw std::runtime_error(path + ": not a RIFF/WAVE file");
  }
  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  std::size_t data_pos = 0, data_len = 0;
  bool have_fmt = false;
  std::size_t pos = 12;
  while (pos + 8 <= buf.size()) {
    const std::string id(buf.data() + pos, 4);
    const auto len = read_le<std::uint32_t>(buf, pos + 4);
    const std::size_t body = pos + 8;
    if (id == "fmt ") {
      format = read_le<std::uint16_t>(buf, body);
      channels = read_le<std::uint16_t>(buf, body + 2);
      rate = read_le<std::uint32_t>(buf, body + 4);
      bits = read_le<std::uint16_t>(buf, body + 14);
      if (format == 0xFFFE && len >= 40) format = read_le<std::uint16_t>(buf, body + 24);
      have_fmt = true;
    } else if (id == "data") {
      data_pos = body;
      data_len = std::min<std::size_t>(len, buf.size() - body);
      break;
    }
    pos = body + len + (len & 1u);
  }
  if (!have_fmt || data_pos == 0) throw std::runtime_error(path + ": missing fmt or data chunk");
  if (channels == 0) throw std::runtime_error(path + ": zero channels");
  if (rate != kRequiredRate) {
    throw std::runtime_error(path + ": sample rate " + std::to_string(rate) + " Hz is not supported (need 16000)");
  }
  const bool pcm16 = format == 1 && bits == 16;
  const bool f32 = format == 3 && bits == 32;
  if (!pcm16 && !f32) throw std::runtime_error(path + ": only 16-bit PCM and 32-bit float WAV are supported");

  Audio a;
  a.sample_rate = static_cast<int>(rate);
  a.channels = channels;
  const std::size_t width = bits / 8;
  a.frames = static_cast<std::int64_t>(data_len / (width * channels));
  a.samples.resize(static_cast<std::size_t>(a.frames) * channels);
  for (std::int64_t i = 0; i < a.frames; ++i) {
    for (int c = 0; c < channels; ++c) {
      const std::size_t at = data_pos + (static_cast<std::size_t>(i) * channels + c) * width;
      const float v = pcm16 ? static_cast<float>(read_le<std::int16_t>(buf, at)) / 32768.0f
                            : read_le<float>(buf, at);
      a.samples[static_cast<std::size_t>(c * a.frames + i)] = v;
    }
  }
  return a;
}

void write_wav(const std::string& path, const Audio& a, WavEncoding encoding) {
  if (a.sample_rate != kRequiredRate) throw std::invalid_argument("only 16 kHz audio can be written");
  if (a.channels < 1 || a.samples.size() != static_cast<std::size_t>(a.frames) * a.channels) {
    throw std::invalid_argument("audio buffer does not match its channel/frame counts");
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write WAV file: " + path);
  const std::uint16_t bits = encoding == WavEncoding::Pcm16 ? 16 : 32;
  const std::uint16_t format = encoding == WavEncoding::Pcm16 ? 1 : 3;
  const auto block = static_cast<std::uint16_t>(a.channels * bits / 8);
  const auto data_len = static_cast<std::uint32_t>(a.frames * block);
  out.write("RIFF", 4);
  put_le<std::uint32_t>(out, 36 + data_len);
  out.write("WAVEfmt ", 8);
  put_le<std::uint32_t>(out, 16);
  put_le<std::uint16_t>(out, format);
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(a.channels));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.sample_rate));
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(a.sample_rate) * block);
  put_le<std::uint16_t>(out, block);
  put_le<std::uint16_t>(out, bits);
  out.write("data", 4);
  put_le<std::uint32_t>(out, data_len);
  for (std::int64_t i = 0; i < a.frames; ++i) {
    for (int c = 0; c < a.channels; ++c) {
      const float v = a.samples[static_cast<std::size_t>(c * a.frames + i)];
      if (encoding == WavEncoding::Pcm16) {
        const float clipped = std::clamp(v, -1.0f, 32767.0f / 32768.0f);
        put_le<std::int16_t>(out, static_cast<std::int16_t>(std::lrint(clipped * 32768.0f)));
      } else {
        put_le<float>(out, v);
      }
    }
  }
  if (!out) throw std::runtime_error("failed writing WAV file: " + path);
}

}  // namespace kdse::io
