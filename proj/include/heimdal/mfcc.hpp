#pragma once

// 16 MFCCs per 250 ms window at a 100 ms hop: Hann window, 4096-point real
// FFT, 40 HTK mel filters over 20-7600 Hz, floored log energies, orthonormal
// DCT-II keeping coefficients 0-15.

#include <fftw3.h>

#include <cmath>
#include <complex>
#include <cstdint>
#include <fstream>
#include <memory>
#include <mutex>
#include <numbers>
#include <string>
#include <vector>

#include "heimdal/audio.hpp"
#include "heimdal/errors.hpp"
#include "heimdal/tensor.hpp"

namespace heimdal {

// [16, T] coefficients.
using FeatureMatrix = Tensor<float>;

inline constexpr int kFrameLength = 4000;  // 250 ms
inline constexpr int kFrameHop = 1600;     // 100 ms
inline constexpr int kFftSize = 4096;
inline constexpr int kMelFilters = 40;
inline constexpr int kNumCoefficients = 16;
inline constexpr double kMelLowHz = 20.0;
inline constexpr double kMelHighHz = 7600.0;
inline constexpr double kLogFloor = 1e-10;

inline long frame_count(std::size_t samples) {
  if (samples < static_cast<std::size_t>(kFrameLength)) return 0;
  return static_cast<long>((samples - kFrameLength) / kFrameHop) + 1;
}

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

// [filters x (fft/2 + 1)] triangular weights on the linear-frequency bins.
inline std::vector<std::vector<double>> mel_filterbank(int filters, int fft_size, int rate, double lo_hz, double hi_hz) {
  const int bins = fft_size / 2 + 1;
  std::vector<double> edges(filters + 2);
  const double lo = hz_to_mel(lo_hz), hi = hz_to_mel(hi_hz);
  for (int i = 0; i < filters + 2; ++i) edges[i] = mel_to_hz(lo + (hi - lo) * i / (filters + 1));
  std::vector<std::vector<double>> bank(filters, std::vector<double>(bins, 0.0));
  for (int m = 0; m < filters; ++m) {
    const double left = edges[m], centre = edges[m + 1], right = edges[m + 2];
    for (int k = 0; k < bins; ++k) {
      const double f = static_cast<double>(k) * rate / fft_size;
      if (f > left && f < right) bank[m][k] = f <= centre ? (f - left) / (centre - left) : (right - f) / (right - centre);
    }
  }
  return bank;
}

class Mfcc {
 public:
  Mfcc() : window_(kFrameLength), bank_(mel_filterbank(kMelFilters, kFftSize, kSampleRate, kMelLowHz, kMelHighHz)) {
    for (int n = 0; n < kFrameLength; ++n)
      window_[n] = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * n / (kFrameLength - 1));
    dct_.assign(kNumCoefficients, std::vector<double>(kMelFilters));
    for (int k = 0; k < kNumCoefficients; ++k)
      for (int m = 0; m < kMelFilters; ++m)
        dct_[k][m] = std::sqrt((k == 0 ? 1.0 : 2.0) / kMelFilters) *
                     std::cos(std::numbers::pi * k * (m + 0.5) / kMelFilters);
  }

  FeatureMatrix operator()(const AudioBuffer& audio) const {
    if (audio.sample_rate != kSampleRate)
      throw PreconditionError("features need " + std::to_string(kSampleRate) + " Hz audio, got " +
                              std::to_string(audio.sample_rate) + " Hz");
    const long frames = frame_count(audio.samples.size());
    FeatureMatrix out({kNumCoefficients, static_cast<int>(frames)});
    if (frames == 0) return out;

    Buffers buf;
    const fftw_plan plan = shared_plan();
    std::vector<double> logmel(kMelFilters);
    for (long t = 0; t < frames; ++t) {
      const float* x = audio.samples.data() + t * kFrameHop;
      for (int n = 0; n < kFrameLength; ++n) buf.in[n] = x[n] * window_[n];
      for (int n = kFrameLength; n < kFftSize; ++n) buf.in[n] = 0;
      fftw_execute_dft_r2c(plan, buf.in, buf.out);
      for (int m = 0; m < kMelFilters; ++m) {
        double e = 0;
        for (int k = 0; k <= kFftSize / 2; ++k)
          if (bank_[m][k] != 0) e += bank_[m][k] * (buf.out[k][0] * buf.out[k][0] + buf.out[k][1] * buf.out[k][1]);
        logmel[m] = std::log(std::max(e, kLogFloor));
      }
      for (int k = 0; k < kNumCoefficients; ++k) {
        double c = 0;
        for (int m = 0; m < kMelFilters; ++m) c += dct_[k][m] * logmel[m];
        out(k, static_cast<int>(t)) = static_cast<float>(c);
      }
    }
    return out;
  }

 private:
  struct Buffers {
    double* in = static_cast<double*>(fftw_malloc(sizeof(double) * kFftSize));
    fftw_complex* out = static_cast<fftw_complex*>(fftw_malloc(sizeof(fftw_complex) * (kFftSize / 2 + 1)));
    Buffers() {
      if (!in || !out) throw std::bad_alloc();
    }
    ~Buffers() {
      fftw_free(in);
      fftw_free(out);
    }
    Buffers(const Buffers&) = delete;
    Buffers& operator=(const Buffers&) = delete;
  };

  // Planning is not thread-safe in FFTW; execution with fresh arrays is.
  static fftw_plan shared_plan() {
    static std::mutex mu;
    static fftw_plan plan = nullptr;
    std::lock_guard<std::mutex> lock(mu);
    if (!plan) {
      Buffers b;
      plan = fftw_plan_dft_r2c_1d(kFftSize, b.in, b.out, FFTW_ESTIMATE);
      if (!plan) throw Error("fftw planning failed");
    }
    return plan;
  }

  std::vector<double> window_;
  std::vector<std::vector<double>> bank_;
  std::vector<std::vector<double>> dct_;
};

inline FeatureMatrix mfcc(const AudioBuffer& audio) {
  static const Mfcc extractor;
  return extractor(audio);
}

// "HMFT", u32 version, u32 rows, u32 cols, rows*cols float32, little-endian.
inline constexpr std::uint32_t kFeatureFileVersion = 1;

inline void save_features(const std::string& path, const FeatureMatrix& m) {
  require_rank(m, 2, "feature matrix");
  std::string out = "HMFT";
  detail::put_u32(out, kFeatureFileVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(m.dim(0)));
  detail::put_u32(out, static_cast<std::uint32_t>(m.dim(1)));
  for (float v : m.values()) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    detail::put_u32(out, bits);
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw IoError("write failed: " + path);
}

inline FeatureMatrix load_features(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 16 || bytes.compare(0, 4, "HMFT") != 0) throw FormatError(path + ": not a feature file");
  const std::uint32_t version = detail::read_u32(p + 4);
  if (version != kFeatureFileVersion)
    throw FormatError(path + ": unsupported feature file version " + std::to_string(version) + " (expected 1)");
  const std::uint32_t rows = detail::read_u32(p + 8), cols = detail::read_u32(p + 12);
  if (rows != kNumCoefficients) throw FormatError(path + ": expected 16 rows, got " + std::to_string(rows));
  const std::size_t count = static_cast<std::size_t>(rows) * cols;
  if (bytes.size() != 16 + 4 * count) throw FormatError(path + ": size does not match header");
  FeatureMatrix m({static_cast<int>(rows), static_cast<int>(cols)});
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint32_t bits = detail::read_u32(p + 16 + 4 * i);
    std::memcpy(&m[i], &bits, 4);
    if (!std::isfinite(m[i])) throw FormatError(path + ": non-finite value");
  }
  return m;
}

}  // namespace heimdal
