// SPDX-License-Identifier: Apache-2.0
#pragma once

// MFCC front end. Centered STFT (reflect padding, periodic Hann window),
// power spectrum, HTK-scale triangular mel filterbank spanning 0 Hz to
// Nyquist, natural log with a floor, then an orthonormal DCT-II.

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <mutex>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "mosqa/error.hpp"
#include "mosqa/features.hpp"
#include "mosqa/wav.hpp"

namespace mosqa {

struct MfccConfig {
  std::uint32_t sample_rate = 16000;
  std::size_t n_fft = 400;
  std::size_t hop = 200;
  std::size_t n_mels = 128;
  std::size_t n_mfcc = 40;
  double log_floor = 1e-10;

  void validate() const {
    if (sample_rate == 0) throw UsageError("mfcc: sample_rate must be positive");
    if (n_fft < 2) throw UsageError("mfcc: n_fft must be at least 2");
    if (hop == 0 || hop > n_fft) throw UsageError("mfcc: hop must be in [1, n_fft]");
    if (n_mels == 0) throw UsageError("mfcc: n_mels must be positive");
    if (n_mfcc == 0 || n_mfcc > n_mels) throw UsageError("mfcc: n_mfcc must be in [1, n_mels]");
    if (!(log_floor > 0)) throw UsageError("mfcc: log_floor must be positive");
  }

  std::size_t n_freqs() const noexcept { return n_fft / 2 + 1; }
  std::size_t frame_count(std::size_t n_samples) const noexcept { return 1 + n_samples / hop; }
  double frame_stride_s() const noexcept { return static_cast<double>(hop) / sample_rate; }

  friend bool operator==(const MfccConfig &, const MfccConfig &) = default;
};

/// Row-major real matrix used for intermediate spectra.
struct Spectrum {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  double &operator()(std::size_t r, std::size_t c) noexcept { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data[r * cols + c]; }
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

/// n_freqs x n_mels triangular filter weights.
inline Spectrum mel_filterbank(const MfccConfig &cfg) {
  const std::size_t n_freqs = cfg.n_freqs();
  const double nyquist = cfg.sample_rate / 2.0;
  const double m_max = hz_to_mel(nyquist);
  std::vector<double> f_pts(cfg.n_mels + 2);
  for (std::size_t i = 0; i < f_pts.size(); ++i)
    f_pts[i] = mel_to_hz(m_max * static_cast<double>(i) / static_cast<double>(cfg.n_mels + 1));

  Spectrum fb{n_freqs, cfg.n_mels, std::vector<double>(n_freqs * cfg.n_mels, 0.0)};
  for (std::size_t k = 0; k < n_freqs; ++k) {
    const double f = nyquist * static_cast<double>(k) / static_cast<double>(n_freqs - 1);
    for (std::size_t m = 0; m < cfg.n_mels; ++m) {
      const double down = (f - f_pts[m]) / (f_pts[m + 1] - f_pts[m]);
      const double up = (f_pts[m + 2] - f) / (f_pts[m + 2] - f_pts[m + 1]);
      fb(k, m) = std::max(0.0, std::min(down, up));
    }
  }
  return fb;
}

/// n_mfcc x n_mels orthonormal DCT-II basis.
inline Spectrum dct_matrix(std::size_t n_mfcc, std::size_t n_mels) {
  Spectrum d{n_mfcc, n_mels, std::vector<double>(n_mfcc * n_mels)};
  const double scale = std::sqrt(2.0 / static_cast<double>(n_mels));
  for (std::size_t k = 0; k < n_mfcc; ++k)
    for (std::size_t n = 0; n < n_mels; ++n) {
      double v = std::cos(std::numbers::pi / static_cast<double>(n_mels) *
                          (static_cast<double>(n) + 0.5) * static_cast<double>(k)) *
                 scale;
      if (k == 0) v *= std::numbers::sqrt2 / 2.0;
      d(k, n) = v;
    }
  return d;
}

/// Periodic Hann window of length n.
inline std::vector<double> hann_window(std::size_t n) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i)
    w[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(n));
  return w;
}

/// Index into a signal of length n extended by reflection (edge not repeated).
inline std::size_t reflect_index(std::ptrdiff_t i, std::size_t n) noexcept {
  if (n == 1) return 0;
  const auto period = static_cast<std::ptrdiff_t>(2 * (n - 1));
  i %= period;
  if (i < 0) i += period;
  return static_cast<std::size_t>(i < static_cast<std::ptrdiff_t>(n) ? i : period - i);
}

namespace detail {

inline std::mutex &fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

struct FftwFree {
  void operator()(void *p) const noexcept { fftw_free(p); }
};
struct FftwPlanDestroy {
  void operator()(fftw_plan_s *p) const noexcept {
    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(p);
  }
};

} // namespace detail

/// Reusable extractor. Holds an FFT plan and scratch buffers, so one instance
/// must not be shared between threads; create one per worker.
class MfccExtractor {
public:
  explicit MfccExtractor(MfccConfig cfg)
      : cfg_(cfg), window_((cfg.validate(), hann_window(cfg.n_fft))), fbank_(mel_filterbank(cfg)),
        dct_(dct_matrix(cfg.n_mfcc, cfg.n_mels)),
        in_(static_cast<double *>(fftw_malloc(sizeof(double) * cfg.n_fft))),
        out_(static_cast<fftw_complex *>(fftw_malloc(sizeof(fftw_complex) * cfg.n_freqs()))) {
    if (!in_ || !out_) throw std::bad_alloc();
    std::lock_guard lock(detail::fftw_planner_mutex());
    // FFTW_ESTIMATE picks the plan without timing, so results are reproducible.
    plan_.reset(fftw_plan_dft_r2c_1d(static_cast<int>(cfg.n_fft), in_.get(), out_.get(),
                                     FFTW_ESTIMATE));
    if (!plan_) throw std::runtime_error("fftw: plan creation failed");
  }

  const MfccConfig &config() const noexcept { return cfg_; }
  const Spectrum &filterbank() const noexcept { return fbank_; }

  /// frames x n_freqs power spectrum.
  Spectrum power_spectrum(std::span<const double> wav) {
    check_input(wav);
    const std::size_t n_freqs = cfg_.n_freqs();
    const std::size_t frames = cfg_.frame_count(wav.size());
    const auto pad = static_cast<std::ptrdiff_t>(cfg_.n_fft / 2);
    Spectrum spec{frames, n_freqs, std::vector<double>(frames * n_freqs)};
    for (std::size_t t = 0; t < frames; ++t) {
      const auto start = static_cast<std::ptrdiff_t>(t * cfg_.hop) - pad;
      for (std::size_t i = 0; i < cfg_.n_fft; ++i)
        in_.get()[i] = wav[reflect_index(start + static_cast<std::ptrdiff_t>(i), wav.size())] * window_[i];
      fftw_execute(plan_.get());
      for (std::size_t k = 0; k < n_freqs; ++k) {
        const double re = out_.get()[k][0];
        const double im = out_.get()[k][1];
        spec(t, k) = re * re + im * im;
      }
    }
    return spec;
  }

  /// frames x n_mels natural-log mel energies, floored at log_floor.
  Spectrum log_mel(std::span<const double> wav) {
    const Spectrum power = power_spectrum(wav);
    Spectrum mel{power.rows, cfg_.n_mels, std::vector<double>(power.rows * cfg_.n_mels, 0.0)};
    for (std::size_t t = 0; t < power.rows; ++t) {
      for (std::size_t k = 0; k < power.cols; ++k) {
        const double p = power(t, k);
        if (p == 0.0) continue;
        for (std::size_t m = 0; m < cfg_.n_mels; ++m) mel(t, m) += p * fbank_(k, m);
      }
      for (std::size_t m = 0; m < cfg_.n_mels; ++m)
        mel(t, m) = std::log(std::max(mel(t, m), cfg_.log_floor));
    }
    return mel;
  }

  FeatureMatrix compute(std::span<const double> wav) {
    const Spectrum mel = log_mel(wav);
    FeatureMatrix fm(mel.rows, cfg_.n_mfcc, cfg_.frame_stride_s(), SourceKind::MFCC);
    for (std::size_t t = 0; t < mel.rows; ++t)
      for (std::size_t k = 0; k < cfg_.n_mfcc; ++k) {
        double acc = 0.0;
        for (std::size_t m = 0; m < cfg_.n_mels; ++m) acc += dct_(k, m) * mel(t, m);
        fm(t, k) = static_cast<float>(acc);
      }
    return fm;
  }

  FeatureMatrix compute(const Waveform &w) {
    if (w.sample_rate != cfg_.sample_rate)
      throw DataError("expected " + std::to_string(cfg_.sample_rate) + " Hz audio, got " +
                      std::to_string(w.sample_rate) + " Hz (resampling is not supported)");
    return compute(w.samples);
  }

private:
  static void check_input(std::span<const double> wav) {
    if (wav.empty()) throw DataError("mfcc: empty waveform");
    if (!std::ranges::all_of(wav, [](double v) { return std::isfinite(v); }))
      throw DataError("mfcc: waveform contains non-finite samples");
  }

  MfccConfig cfg_;
  std::vector<double> window_;
  Spectrum fbank_;
  Spectrum dct_;
  std::unique_ptr<double, detail::FftwFree> in_;
  std::unique_ptr<fftw_complex, detail::FftwFree> out_;
  std::unique_ptr<fftw_plan_s, detail::FftwPlanDestroy> plan_;
};

inline FeatureMatrix compute_mfcc(std::span<const double> wav, const MfccConfig &cfg = {}) {
  return MfccExtractor(cfg).compute(wav);
}

inline FeatureMatrix compute_mfcc(const Waveform &w, const MfccConfig &cfg = {}) {
  return MfccExtractor(cfg).compute(w);
}

} // namespace mosqa
