// SPDX-License-Identifier: Apache-2.0
#pragma once

// Frame-level feature matrices, the MOSF feature-file format, per-channel
// normalization and fixed-length sequence fitting.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <ranges>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mosqa/error.hpp"
#include "mosqa/text.hpp"

namespace mosqa {

enum class SourceKind : std::uint8_t { MFCC = 0, XLSR = 1, Other = 2 };

inline std::string_view to_string(SourceKind k) {
  switch (k) {
  case SourceKind::MFCC: return "MFCC";
  case SourceKind::XLSR: return "XLSR";
  case SourceKind::Other: return "Other";
  }
  return "?";
}

inline std::optional<SourceKind> parse_source_kind(std::string_view s) {
  const auto l = text::lower(text::trim(s));
  if (l == "mfcc") return SourceKind::MFCC;
  if (l == "xlsr") return SourceKind::XLSR;
  if (l == "other") return SourceKind::Other;
  return std::nullopt;
}

/// Time-major frames x channels matrix of 32-bit floats.
class FeatureMatrix {
public:
  FeatureMatrix() = default;
  FeatureMatrix(std::size_t frames, std::size_t channels, double frame_stride_s = 0.0,
                SourceKind kind = SourceKind::Other)
      : frames_(frames), channels_(channels), data_(frames * channels, 0.0f),
        frame_stride_s_(frame_stride_s), kind_(kind) {}

  std::size_t frames() const noexcept { return frames_; }
  std::size_t channels() const noexcept { return channels_; }
  double frame_stride_s() const noexcept { return frame_stride_s_; }
  SourceKind source_kind() const noexcept { return kind_; }
  void set_frame_stride_s(double s) noexcept { frame_stride_s_ = s; }
  void set_source_kind(SourceKind k) noexcept { kind_ = k; }

  float &operator()(std::size_t t, std::size_t c) noexcept { return data_[t * channels_ + c]; }
  float operator()(std::size_t t, std::size_t c) const noexcept { return data_[t * channels_ + c]; }

  std::span<float> row(std::size_t t) noexcept { return {data_.data() + t * channels_, channels_}; }
  std::span<const float> row(std::size_t t) const noexcept {
    return {data_.data() + t * channels_, channels_};
  }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }

  bool all_finite() const noexcept {
    return std::ranges::all_of(data_, [](float v) { return std::isfinite(v); });
  }

  friend bool operator==(const FeatureMatrix &, const FeatureMatrix &) = default;

private:
  std::size_t frames_ = 0;
  std::size_t channels_ = 0;
  std::vector<float> data_;
  double frame_stride_s_ = 0.0;
  SourceKind kind_ = SourceKind::Other;
};

// ---------------------------------------------------------------------------
// Feature file: "MOSF" | version u16 | source_kind u8 | frames u32 |
// channels u32 | frame stride (microseconds) u32 | float32 payload, row-major.
// All fields little-endian, no padding.

inline constexpr char kFeatureMagic[4] = {'M', 'O', 'S', 'F'};
inline constexpr std::uint16_t kFeatureVersion = 1;
inline constexpr std::size_t kFeatureHeaderBytes = 4 + 2 + 1 + 4 + 4 + 4;
/// Upper bound on frames x channels accepted when reading (1 GiB of payload).
inline constexpr std::uint64_t kMaxFeatureElements = std::uint64_t{1} << 28;

namespace detail {
static_assert(std::endian::native == std::endian::little, "little-endian host required");

template <typename T>
void append_le(std::string &buf, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  buf.append(bytes, sizeof(T));
}

template <typename T>
T load_le(const char *p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  return v;
}
} // namespace detail

inline std::string encode_features(const FeatureMatrix &fm) {
  if (fm.frames() == 0 || fm.channels() == 0) throw DataError("feature matrix is empty");
  if (fm.frames() > std::numeric_limits<std::uint32_t>::max() ||
      fm.channels() > std::numeric_limits<std::uint32_t>::max())
    throw DataError("feature matrix dimensions overflow the file header");
  if (!fm.all_finite()) throw DataError("feature matrix contains non-finite values");
  const double stride_us = std::round(fm.frame_stride_s() * 1e6);
  if (!(stride_us >= 0.0 && stride_us <= std::numeric_limits<std::uint32_t>::max()))
    throw DataError("frame stride out of range");

  std::string buf;
  buf.reserve(kFeatureHeaderBytes + fm.data().size() * 4);
  buf.append(kFeatureMagic, 4);
  detail::append_le<std::uint16_t>(buf, kFeatureVersion);
  detail::append_le<std::uint8_t>(buf, static_cast<std::uint8_t>(fm.source_kind()));
  detail::append_le<std::uint32_t>(buf, static_cast<std::uint32_t>(fm.frames()));
  detail::append_le<std::uint32_t>(buf, static_cast<std::uint32_t>(fm.channels()));
  detail::append_le<std::uint32_t>(buf, static_cast<std::uint32_t>(stride_us));
  buf.append(reinterpret_cast<const char *>(fm.data().data()), fm.data().size() * 4);
  return buf;
}

inline FeatureMatrix decode_features(std::string_view bytes, const std::string &name = "features") {
  if (bytes.size() < kFeatureHeaderBytes) throw DataError(name + ": truncated header");
  if (std::memcmp(bytes.data(), kFeatureMagic, 4) != 0)
    throw DataError(name + ": bad magic (not a MOSF feature file)");
  const char *p = bytes.data() + 4;
  const auto version = detail::load_le<std::uint16_t>(p);
  if (version != kFeatureVersion)
    throw DataError(name + ": unsupported feature file version " + std::to_string(version));
  const auto kind_raw = detail::load_le<std::uint8_t>(p + 2);
  if (kind_raw > static_cast<std::uint8_t>(SourceKind::Other))
    throw DataError(name + ": unknown source kind " + std::to_string(kind_raw));
  const auto frames = detail::load_le<std::uint32_t>(p + 3);
  const auto channels = detail::load_le<std::uint32_t>(p + 7);
  const auto stride_us = detail::load_le<std::uint32_t>(p + 11);
  if (frames == 0 || channels == 0) throw DataError(name + ": zero frames or channels");
  const std::uint64_t elements = std::uint64_t{frames} * channels;
  if (elements > kMaxFeatureElements)
    throw DataError(name + ": dimensions " + std::to_string(frames) + "x" +
                    std::to_string(channels) + " overflow the accepted size");
  const std::uint64_t payload = elements * 4;
  const std::uint64_t have = bytes.size() - kFeatureHeaderBytes;
  if (have < payload)
    throw DataError(name + ": truncated payload (" + std::to_string(have) + " of " +
                    std::to_string(payload) + " bytes)");
  if (have > payload) throw DataError(name + ": trailing bytes after payload");

  FeatureMatrix fm(frames, channels, stride_us / 1e6, static_cast<SourceKind>(kind_raw));
  std::memcpy(fm.data().data(), bytes.data() + kFeatureHeaderBytes, payload);
  if (!fm.all_finite()) throw DataError(name + ": non-finite values in payload");
  return fm;
}

inline void save_features(const FeatureMatrix &fm, const std::filesystem::path &path) {
  const auto buf = encode_features(fm);
  // Write-then-rename so readers never observe a partial file.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw DataError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline FeatureMatrix load_features(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open feature file " + path.string());
  std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_features(bytes, path.string());
}

// ---------------------------------------------------------------------------
// Per-channel normalization

inline constexpr double kStdFloor = 1e-8;

struct NormStats {
  std::vector<double> mean;
  std::vector<double> std;
  std::vector<bool> clamped; // std was raised to the floor
  std::size_t channels() const noexcept { return mean.size(); }
};

/// Mergeable per-channel (count, mean, M2) accumulator. Each matrix is reduced
/// with two passes and folded in with the pairwise update of Chan et al., so
/// the result does not depend on how frames are grouped into matrices beyond
/// rounding.
class NormAccumulator {
public:
  void add(const FeatureMatrix &fm) {
    if (fm.frames() == 0) return;
    if (count_ == 0 && mean_.empty()) {
      mean_.assign(fm.channels(), 0.0);
      m2_.assign(fm.channels(), 0.0);
    } else if (fm.channels() != mean_.size()) {
      throw DataError("channel count mismatch: " + std::to_string(fm.channels()) + " vs " +
                      std::to_string(mean_.size()));
    }
    const auto n = static_cast<double>(fm.frames());
    std::vector<double> mean(fm.channels(), 0.0), m2(fm.channels(), 0.0);
    for (std::size_t t = 0; t < fm.frames(); ++t)
      for (std::size_t c = 0; c < fm.channels(); ++c) mean[c] += fm(t, c);
    for (auto &m : mean) m /= n;
    for (std::size_t t = 0; t < fm.frames(); ++t)
      for (std::size_t c = 0; c < fm.channels(); ++c) {
        const double d = fm(t, c) - mean[c];
        m2[c] += d * d;
      }
    merge(fm.frames(), mean, m2);
  }

  void merge(const NormAccumulator &other) {
    if (other.count_ == 0) return;
    if (count_ == 0) {
      *this = other;
      return;
    }
    if (other.mean_.size() != mean_.size()) throw DataError("channel count mismatch in merge");
    merge(other.count_, other.mean_, other.m2_);
  }

  std::size_t count() const noexcept { return count_; }

  NormStats finish(double std_floor = kStdFloor) const {
    if (count_ == 0) throw DataError("no frames to compute normalization statistics from");
    NormStats s;
    s.mean = mean_;
    s.std.resize(mean_.size());
    s.clamped.resize(mean_.size());
    for (std::size_t c = 0; c < mean_.size(); ++c) {
      const double sd = std::sqrt(m2_[c] / static_cast<double>(count_));
      s.clamped[c] = !(sd >= std_floor);
      s.std[c] = s.clamped[c] ? std_floor : sd;
    }
    return s;
  }

private:
  void merge(std::size_t nb, const std::vector<double> &mean_b, const std::vector<double> &m2_b) {
    const double na = static_cast<double>(count_);
    const double n_b = static_cast<double>(nb);
    const double n = na + n_b;
    for (std::size_t c = 0; c < mean_.size(); ++c) {
      const double delta = mean_b[c] - mean_[c];
      mean_[c] += delta * n_b / n;
      m2_[c] += m2_b[c] + delta * delta * na * n_b / n;
    }
    count_ += nb;
  }

  std::size_t count_ = 0;
  std::vector<double> mean_;
  std::vector<double> m2_;
};

/// Population mean/std per channel, pooled over every frame of every matrix.
template <std::ranges::input_range R>
  requires std::same_as<std::remove_cvref_t<std::ranges::range_reference_t<R>>, FeatureMatrix>
NormStats compute_norm_stats(R &&train_features, double std_floor = kStdFloor) {
  NormAccumulator acc;
  for (const FeatureMatrix &fm : train_features) acc.add(fm);
  return acc.finish(std_floor);
}

inline FeatureMatrix apply_norm(const FeatureMatrix &fm, const NormStats &stats) {
  if (fm.channels() != stats.channels())
    throw DataError("channel mismatch: features have " + std::to_string(fm.channels()) +
                    ", statistics have " + std::to_string(stats.channels()));
  FeatureMatrix out(fm.frames(), fm.channels(), fm.frame_stride_s(), fm.source_kind());
  for (std::size_t t = 0; t < fm.frames(); ++t)
    for (std::size_t c = 0; c < fm.channels(); ++c)
      out(t, c) = static_cast<float>((fm(t, c) - stats.mean[c]) / stats.std[c]);
  return out;
}

/// Text form: header line "channels N", then one "mean std" line per channel.
inline void save_norm_stats(const NormStats &s, const std::filesystem::path &path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "channels " << s.channels() << '\n';
  for (std::size_t c = 0; c < s.channels(); ++c)
    out << text::format_double(s.mean[c]) << ' ' << text::format_double(s.std[c]) << ' '
        << (s.clamped[c] ? 1 : 0) << '\n';
}

inline NormStats load_norm_stats(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string word;
  std::size_t channels = 0;
  if (!(in >> word >> channels) || word != "channels" || channels == 0)
    throw DataError(path.string() + ": bad normalization statistics header");
  NormStats s;
  s.mean.resize(channels);
  s.std.resize(channels);
  s.clamped.resize(channels);
  for (std::size_t c = 0; c < channels; ++c) {
    std::string m, sd;
    int cl = 0;
    if (!(in >> m >> sd >> cl)) throw DataError(path.string() + ": truncated statistics");
    auto mv = text::parse_double(m);
    auto sv = text::parse_double(sd);
    if (!mv || !sv || !(*sv > 0)) throw DataError(path.string() + ": bad statistics entry");
    s.mean[c] = *mv;
    s.std[c] = *sv;
    s.clamped[c] = cl != 0;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Fixed-length sequences

inline constexpr std::size_t kSequenceLength = 384;

/// seq_len x channels, zero beyond valid_frames.
struct FixedSequence {
  std::size_t channels = 0;
  std::size_t valid_frames = 0;
  std::vector<float> data; // seq_len * channels

  std::size_t length() const noexcept { return channels ? data.size() / channels : 0; }
  float operator()(std::size_t t, std::size_t c) const noexcept { return data[t * channels + c]; }
};

/// Keeps the clip prefix when too long; zero-pads the tail when too short.
inline FixedSequence fit_length(const FeatureMatrix &fm, std::size_t seq_len = kSequenceLength) {
  if (fm.frames() == 0) throw DataError("cannot fit an empty feature matrix");
  if (seq_len == 0) throw UsageError("sequence length must be positive");
  FixedSequence out;
  out.channels = fm.channels();
  out.valid_frames = std::min(fm.frames(), seq_len);
  out.data.assign(seq_len * fm.channels(), 0.0f);
  std::copy_n(fm.data().begin(), out.valid_frames * fm.channels(), out.data.begin());
  return out;
}

} // namespace mosqa
