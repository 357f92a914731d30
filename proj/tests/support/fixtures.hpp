// SPDX-License-Identifier: Apache-2.0
#pragma once

// Random fixtures shared by the unit and acceptance suites.

#include <unistd.h>

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mosqa/dataset.hpp"
#include "mosqa/features.hpp"
#include "mosqa/log.hpp"
#include "mosqa/model.hpp"
#include "mosqa/rng.hpp"

namespace mosqa::testing {

inline FeatureMatrix random_matrix(Rng &rng, std::size_t frames, std::size_t channels,
                                   double scale = 1.0, double offset = 0.0) {
  FeatureMatrix fm(frames, channels, 0.0125, SourceKind::MFCC);
  for (auto &v : fm.data()) v = static_cast<float>(offset + scale * rng.normal());
  return fm;
}

/// Stand-in for an exported XLS-R embedding file: 1024 channels at a 20 ms
/// stride, values shaped like transformer activations (small, mostly
/// centered, a few large channels).
inline FeatureMatrix xlsr_like_matrix(Rng &rng, std::size_t frames = 499) {
  FeatureMatrix fm(frames, 1024, 0.02, SourceKind::XLSR);
  for (std::size_t t = 0; t < frames; ++t)
    for (std::size_t c = 0; c < 1024; ++c)
      fm(t, c) = static_cast<float>((c % 97 == 0 ? 8.0 : 0.4) * rng.normal() + 0.01 * static_cast<double>(c % 7));
  return fm;
}

/// Sequences of length `seq_len` with random valid lengths in [1, seq_len]
/// and garbage (not zeros) in the padded tail.
inline std::vector<FixedSequence> random_sequences(Rng &rng, std::size_t count, std::size_t seq_len,
                                                   std::size_t channels) {
  std::vector<FixedSequence> out;
  for (std::size_t i = 0; i < count; ++i) {
    FixedSequence s;
    s.channels = channels;
    s.valid_frames = 1 + static_cast<std::size_t>(rng.below(seq_len));
    s.data.resize(seq_len * channels);
    for (auto &v : s.data) v = static_cast<float>(rng.normal() * 1.5 + 0.3);
    out.push_back(std::move(s));
  }
  return out;
}

/// Randomizes every trainable tensor and the running statistics.
template <typename T>
void randomize(ModelParams<T> &p, Rng &rng, double scale = 0.5) {
  for (auto &t : p.trainable())
    for (auto &v : t.values) v = static_cast<T>(scale * rng.normal());
  for (Eigen::Index c = 0; c < p.bn_running_mean.size(); ++c) {
    p.bn_running_mean[c] = static_cast<T>(0.3 * rng.normal());
    p.bn_running_var[c] = static_cast<T>(rng.uniform(0.5, 2.0));
  }
}

inline std::vector<double> random_targets(Rng &rng, std::size_t n) {
  std::vector<double> t(n);
  for (auto &v : t) v = rng.uniform(0.05, 0.95);
  return t;
}

/// Manifest of n clips with random corpora and in-range labels. Ids are
/// unique but not sorted.
inline Manifest random_manifest(Rng &rng, std::size_t n) {
  Manifest m;
  for (std::size_t i = 0; i < n; ++i) {
    ClipRecord r;
    r.id = "c" + std::to_string(rng.below(1000)) + "_" + std::to_string(i);
    r.corpus = kAllCorpora[rng.below(std::size(kAllCorpora))];
    const auto range = mos_range(r.corpus);
    r.mos_raw = rng.uniform(range.lo, range.hi);
    r.source = r.id + ".wav";
    m.add(std::move(r));
  }
  return m;
}

/// Collects warnings while alive.
class LogCapture {
public:
  LogCapture()
      : previous_(set_log_sink([this](std::string_view level, std::string_view msg) {
          if (level == "warning") warnings.emplace_back(msg);
        })) {}
  ~LogCapture() { set_log_sink(previous_); }
  LogCapture(const LogCapture &) = delete;
  LogCapture &operator=(const LogCapture &) = delete;

  std::vector<std::string> warnings;

private:
  LogSink previous_;
};

/// Fresh directory under the system temp path, removed on destruction.
class TempDir {
public:
  TempDir() {
    static std::atomic<unsigned> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("mosqa_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir &) = delete;
  TempDir &operator=(const TempDir &) = delete;

  const std::filesystem::path &path() const noexcept { return path_; }
  std::filesystem::path operator/(const std::string &name) const { return path_ / name; }

private:
  std::filesystem::path path_;
};

} // namespace mosqa::testing
