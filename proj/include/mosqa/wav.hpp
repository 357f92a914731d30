// SPDX-License-Identifier: Apache-2.0
#pragma once

// Minimal RIFF/WAVE reader and writer: mono PCM16 or IEEE float32.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "mosqa/error.hpp"

namespace mosqa {

struct Waveform {
  std::uint32_t sample_rate = 16000;
  std::vector<double> samples; // mono, nominal range [-1, 1]
};

namespace detail {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

inline std::uint16_t read_u16(const unsigned char *p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline std::uint32_t read_u32(const unsigned char *p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

template <typename T>
void put_le(std::string &buf, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  buf.append(bytes, sizeof(T));
}

inline std::vector<unsigned char> read_file_bytes(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace detail

inline Waveform decode_wav(std::span<const unsigned char> bytes, const std::string &name = "wav") {
  using detail::read_u16;
  using detail::read_u32;
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
    throw DataError(name + ": not a RIFF/WAVE file");

  std::uint16_t format = 0, channels = 0, bits = 0;
  std::uint32_t rate = 0;
  bool have_fmt = false;
  std::span<const unsigned char> payload;
  bool have_data = false;

  std::size_t pos = 12;
  while (pos + 8 <= bytes.size()) {
    const unsigned char *hdr = bytes.data() + pos;
    const std::uint32_t size = read_u32(hdr + 4);
    const std::size_t body = pos + 8;
    const std::size_t avail = std::min<std::size_t>(size, bytes.size() - body);
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (size < 16 || avail < 16) throw DataError(name + ": truncated fmt chunk");
      const unsigned char *f = bytes.data() + body;
      format = read_u16(f);
      channels = read_u16(f + 2);
      rate = read_u32(f + 4);
      bits = read_u16(f + 14);
      if (format == 0xFFFE && size >= 26) format = read_u16(f + 24); // extensible sub-format
      have_fmt = true;
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      payload = bytes.subspan(body, avail);
      have_data = true;
    }
    pos = body + size + (size & 1u);
  }
  if (!have_fmt) throw DataError(name + ": missing fmt chunk");
  if (!have_data) throw DataError(name + ": missing data chunk");
  if (channels != 1)
    throw DataError(name + ": expected mono audio, got " + std::to_string(channels) + " channels");

  Waveform w;
  w.sample_rate = rate;
  if (format == 1 && bits == 16) {
    w.samples.resize(payload.size() / 2);
    for (std::size_t i = 0; i < w.samples.size(); ++i) {
      const auto raw = static_cast<std::int16_t>(read_u16(payload.data() + 2 * i));
      w.samples[i] = raw / 32768.0;
    }
  } else if (format == 3 && bits == 32) {
    w.samples.resize(payload.size() / 4);
    for (std::size_t i = 0; i < w.samples.size(); ++i) {
      float v;
      std::memcpy(&v, payload.data() + 4 * i, 4);
      w.samples[i] = v;
    }
  } else {
    throw DataError(name + ": unsupported sample format (format tag " + std::to_string(format) +
                    ", " + std::to_string(bits) + " bits); expected PCM16 or float32");
  }
  return w;
}

inline Waveform read_wav(const std::filesystem::path &path) {
  const auto bytes = detail::read_file_bytes(path);
  return decode_wav(bytes, path.string());
}

/// Encodes as mono PCM16; samples are clipped to [-1, 1).
inline std::string encode_wav_pcm16(std::span<const double> samples, std::uint32_t sample_rate) {
  using detail::put_le;
  const auto data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  std::string buf;
  buf.reserve(44 + data_bytes);
  buf.append("RIFF");
  put_le<std::uint32_t>(buf, 36 + data_bytes);
  buf.append("WAVEfmt ");
  put_le<std::uint32_t>(buf, 16);
  put_le<std::uint16_t>(buf, 1);
  put_le<std::uint16_t>(buf, 1);
  put_le<std::uint32_t>(buf, sample_rate);
  put_le<std::uint32_t>(buf, sample_rate * 2);
  put_le<std::uint16_t>(buf, 2);
  put_le<std::uint16_t>(buf, 16);
  buf.append("data");
  put_le<std::uint32_t>(buf, data_bytes);
  for (double s : samples) {
    const double scaled = std::round(std::clamp(s, -1.0, 1.0) * 32768.0);
    put_le<std::int16_t>(buf, static_cast<std::int16_t>(std::clamp(scaled, -32768.0, 32767.0)));
  }
  return buf;
}

inline void write_wav_pcm16(const std::filesystem::path &path, std::span<const double> samples,
                            std::uint32_t sample_rate) {
  const auto buf = encode_wav_pcm16(samples, sample_rate);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

} // namespace mosqa
