// SPDX-License-Identifier: Apache-2.0
#pragma once

// Synthetic stand-in corpus: a harmonic "speech proxy" (voiced tone complex
// with pitch drift and a syllable-rate envelope) mixed with white noise at a
// sampled SNR. The label is an affine map of SNR onto [1, 5], so quality is
// learnable and monotone in the degradation. It says nothing about perceived
// quality of real speech.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <string>
#include <vector>

#include "mosqa/dataset.hpp"
#include "mosqa/error.hpp"
#include "mosqa/rng.hpp"
#include "mosqa/wav.hpp"

namespace mosqa {

struct SynthSpec {
  std::size_t n_clips = 200;
  double duration_s = 2.0;
  double snr_low_db = 0.0;
  double snr_high_db = 40.0;
  std::uint64_t seed = 0;
  std::uint32_t sample_rate = 16000;

  void validate() const {
    if (n_clips == 0) throw UsageError("synth: n_clips must be at least 1");
    if (!(duration_s > 0.0)) throw UsageError("synth: duration_s must be positive");
    if (!(snr_low_db <= snr_high_db)) throw UsageError("synth: need snr_low <= snr_high");
    if (sample_rate == 0) throw UsageError("synth: sample_rate must be positive");
  }
};

/// 1 at the bottom of the SNR range, 5 at the top, linear in between and
/// clamped outside. A zero-width range maps to 3.
inline double snr_to_mos(double snr_db, const SynthSpec &spec) {
  if (spec.snr_high_db == spec.snr_low_db) return 3.0;
  const double u = (snr_db - spec.snr_low_db) / (spec.snr_high_db - spec.snr_low_db);
  return std::clamp(1.0 + 4.0 * u, 1.0, 5.0);
}

struct SynthClip {
  std::string id;
  double snr_db = 0.0;
  double mos = 0.0;
  std::vector<double> samples;
};

/// Generates clip `index` of the corpus; each clip has its own random stream.
inline SynthClip synth_clip(const SynthSpec &spec, std::size_t index) {
  using std::numbers::pi;
  Rng rng(derive_seed(spec.seed, 0x5e000000 + index));
  const auto n = static_cast<std::size_t>(std::llround(spec.duration_s * spec.sample_rate));
  const double fs = spec.sample_rate;

  SynthClip clip;
  char name[32];
  std::snprintf(name, sizeof name, "synth_%05zu", index);
  clip.id = name;
  clip.snr_db = rng.uniform(spec.snr_low_db, spec.snr_high_db);
  clip.mos = snr_to_mos(clip.snr_db, spec);

  const double f0 = rng.uniform(100.0, 220.0);
  const double drift_hz = rng.uniform(0.2, 0.8);
  const double drift_depth = rng.uniform(0.03, 0.1);
  const double syllable_hz = rng.uniform(3.0, 5.5);
  const double env_phase = rng.uniform(0.0, 2.0 * pi);
  const double tilt = rng.uniform(0.8, 1.4);
  const std::size_t n_harm = static_cast<std::size_t>(std::min(4000.0, 0.45 * fs) / (f0 * (1.0 + drift_depth)));
  std::vector<double> harm_phase(n_harm), harm_amp(n_harm);
  for (auto &ph : harm_phase) ph = rng.uniform(0.0, 2.0 * pi);
  for (std::size_t k = 0; k < n_harm; ++k) harm_amp[k] = 1.0 / std::pow(static_cast<double>(k + 1), tilt);

  std::vector<double> speech(n, 0.0);
  double phase = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double t = static_cast<double>(i) / fs;
    const double f = f0 * (1.0 + drift_depth * std::sin(2.0 * pi * drift_hz * t));
    phase += 2.0 * pi * f / fs;
    const double env = std::pow(std::max(0.0, std::sin(pi * syllable_hz * t + env_phase)), 2.0) * 0.85 + 0.15;
    double v = 0.0;
    for (std::size_t k = 1; k <= n_harm; ++k)
      v += harm_amp[k - 1] * std::sin(static_cast<double>(k) * phase + harm_phase[k - 1]);
    speech[i] = env * v;
  }
  auto rms = [](const std::vector<double> &x) {
    double s = 0.0;
    for (double v : x) s += v * v;
    return std::sqrt(s / static_cast<double>(std::max<std::size_t>(1, x.size())));
  };
  const double speech_rms = rms(speech);
  const double level = 0.1 * std::pow(10.0, rng.uniform(-6.0, 6.0) / 20.0);
  for (auto &v : speech) v *= speech_rms > 0 ? level / speech_rms : 0.0;

  const double noise_rms = level / std::pow(10.0, clip.snr_db / 20.0);
  clip.samples.resize(n);
  for (std::size_t i = 0; i < n; ++i) clip.samples[i] = speech[i] + noise_rms * rng.normal();
  const double peak = std::ranges::max(clip.samples, {}, [](double v) { return std::abs(v); });
  if (std::abs(peak) > 0.98)
    for (auto &v : clip.samples) v *= 0.98 / std::abs(peak);
  return clip;
}

/// Writes `clips/<id>.wav` under out_dir plus `manifest.csv`, and returns the manifest.
inline Manifest write_synth_corpus(const SynthSpec &spec, const std::filesystem::path &out_dir) {
  spec.validate();
  std::filesystem::create_directories(out_dir / "clips");
  Manifest m;
  for (std::size_t i = 0; i < spec.n_clips; ++i) {
    const auto clip = synth_clip(spec, i);
    const auto path = out_dir / "clips" / (clip.id + ".wav");
    write_wav_pcm16(path, clip.samples, spec.sample_rate);
    m.add({clip.id, path, Corpus::Synthetic, clip.mos,
           static_cast<double>(clip.samples.size()) / spec.sample_rate, ""});
  }
  save_manifest(m, out_dir / "manifest.csv");
  return m;
}

} // namespace mosqa
