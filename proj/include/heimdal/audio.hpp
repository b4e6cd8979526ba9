#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>
#include <vector>

#include "heimdal/errors.hpp"

namespace heimdal {

inline constexpr int kSampleRate = 16000;

struct AudioBuffer {
  std::vector<float> samples;
  int sample_rate = kSampleRate;

  double seconds() const { return static_cast<double>(samples.size()) / sample_rate; }
};

enum class WavEncoding { Pcm16, Float32 };

namespace detail {

inline std::uint32_t read_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 | std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}
inline std::uint16_t read_u16(const unsigned char* p) { return std::uint16_t(p[0] | p[1] << 8); }

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>(v >> 8));
}

}  // namespace detail

// RIFF/WAVE, PCM 16-bit or IEEE float 32-bit (plain or extensible format
// tag). Multichannel input keeps the first channel only.
inline AudioBuffer parse_wav(const std::string& bytes, const std::string& what = "wav") {
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t n = bytes.size();
  if (n < 12 || std::memcmp(p, "RIFF", 4) != 0 || std::memcmp(p + 8, "WAVE", 4) != 0)
    throw FormatError(what + ": not a RIFF/WAVE file");
  if (detail::read_u32(p + 4) + 8ull > n) throw FormatError(what + ": truncated RIFF chunk");

  int format = -1, channels = 0, bits = 0;
  long rate = 0;
  const unsigned char* data = nullptr;
  std::size_t data_size = 0;
  std::size_t pos = 12;
  while (pos + 8 <= n) {
    const std::uint32_t size = detail::read_u32(p + pos + 4);
    const std::size_t body = pos + 8;
    if (body + size > n) throw FormatError(what + ": truncated chunk");
    if (std::memcmp(p + pos, "fmt ", 4) == 0) {
      if (size < 16) throw FormatError(what + ": short fmt chunk");
      format = detail::read_u16(p + body);
      channels = detail::read_u16(p + body + 2);
      rate = detail::read_u32(p + body + 4);
      bits = detail::read_u16(p + body + 14);
      if (format == 0xFFFE) {
        if (size < 26) throw FormatError(what + ": short extensible fmt chunk");
        format = detail::read_u16(p + body + 24);
      }
    } else if (std::memcmp(p + pos, "data", 4) == 0) {
      data = p + body;
      data_size = size;
    }
    pos = body + size + (size & 1);
  }
  if (format < 0) throw FormatError(what + ": missing fmt chunk");
  if (!data) throw FormatError(what + ": missing data chunk");
  if (channels < 1 || rate <= 0) throw FormatError(what + ": invalid channel count or sample rate");
  const bool pcm16 = format == 1 && bits == 16;
  const bool f32 = format == 3 && bits == 32;
  if (!pcm16 && !f32)
    throw UnsupportedError(what + ": unsupported encoding (format " + std::to_string(format) + ", " +
                           std::to_string(bits) + " bits); expected PCM16 or float32");

  const std::size_t width = bits / 8, frame = width * channels, count = data_size / frame;
  AudioBuffer a;
  a.sample_rate = static_cast<int>(rate);
  a.samples.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const unsigned char* s = data + i * frame;
    if (pcm16) {
      a.samples[i] = static_cast<float>(static_cast<std::int16_t>(detail::read_u16(s)) / 32768.0);
    } else {
      const std::uint32_t bitsv = detail::read_u32(s);
      float v;
      std::memcpy(&v, &bitsv, 4);
      if (!std::isfinite(v)) throw FormatError(what + ": non-finite sample");
      a.samples[i] = v;
    }
  }
  return a;
}

inline AudioBuffer load_wav(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_wav(bytes, path);
}

// PCM16 output clips to [-1, 1).
inline std::string encode_wav(const AudioBuffer& a, WavEncoding enc = WavEncoding::Pcm16) {
  const std::uint16_t bits = enc == WavEncoding::Pcm16 ? 16 : 32;
  const std::uint32_t data_size = static_cast<std::uint32_t>(a.samples.size() * (bits / 8));
  std::string out;
  out.reserve(44 + data_size);
  out += "RIFF";
  detail::put_u32(out, 36 + data_size);
  out += "WAVEfmt ";
  detail::put_u32(out, 16);
  detail::put_u16(out, enc == WavEncoding::Pcm16 ? 1 : 3);
  detail::put_u16(out, 1);
  detail::put_u32(out, static_cast<std::uint32_t>(a.sample_rate));
  detail::put_u32(out, static_cast<std::uint32_t>(a.sample_rate) * (bits / 8));
  detail::put_u16(out, bits / 8);
  detail::put_u16(out, bits);
  out += "data";
  detail::put_u32(out, data_size);
  for (float v : a.samples) {
    if (enc == WavEncoding::Pcm16) {
      const long q = std::lround(std::clamp(static_cast<double>(v), -1.0, 1.0) * 32768.0);
      detail::put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(std::clamp(q, -32768L, 32767L))));
    } else {
      std::uint32_t bitsv;
      std::memcpy(&bitsv, &v, 4);
      detail::put_u32(out, bitsv);
    }
  }
  return out;
}

inline void save_wav(const std::string& path, const AudioBuffer& a, WavEncoding enc = WavEncoding::Pcm16) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  const std::string bytes = encode_wav(a, enc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

inline constexpr double kMinGainDb = -40.0;
inline constexpr double kMaxGainDb = 10.0;

// No clipping; the log compression of the features tolerates overshoot.
inline AudioBuffer apply_gain_db(const AudioBuffer& a, double gain_db) {
  if (!(gain_db >= kMinGainDb && gain_db <= kMaxGainDb))
    throw PreconditionError("gain " + std::to_string(gain_db) + " dB outside [-40, 10]");
  const double k = std::pow(10.0, gain_db / 20.0);
  AudioBuffer out = a;
  for (float& v : out.samples) v = static_cast<float>(v * k);
  return out;
}

inline double mean_power(const std::vector<float>& x) {
  if (x.empty()) return 0;
  double s = 0;
  for (float v : x) s += static_cast<double>(v) * v;
  return s / static_cast<double>(x.size());
}

// Noise is tiled or cropped to the audio length and scaled so that the
// audio-to-noise power ratio is `snr_db`. snr_db = +inf adds nothing.
inline double noise_scale(const AudioBuffer& a, const std::vector<float>& noise, double snr_db) {
  if (std::isinf(snr_db) && snr_db > 0) return 0;
  const double pa = mean_power(a.samples), pn = mean_power(noise);
  if (pa == 0 || pn == 0) return 0;
  return std::sqrt(pa / (pn * std::pow(10.0, snr_db / 10.0)));
}

inline AudioBuffer mix_noise(const AudioBuffer& a, const AudioBuffer& noise, double snr_db) {
  if (a.sample_rate != noise.sample_rate)
    throw PreconditionError("noise sample rate " + std::to_string(noise.sample_rate) + " differs from audio rate " +
                            std::to_string(a.sample_rate));
  AudioBuffer out = a;
  if (a.samples.empty() || noise.samples.empty()) return out;
  std::vector<float> tiled(a.samples.size());
  for (std::size_t i = 0; i < tiled.size(); ++i) tiled[i] = noise.samples[i % noise.samples.size()];
  const double alpha = noise_scale(a, tiled, snr_db);
  if (alpha == 0) return out;
  for (std::size_t i = 0; i < tiled.size(); ++i) out.samples[i] = static_cast<float>(a.samples[i] + alpha * tiled[i]);
  return out;
}

}  // namespace heimdal
