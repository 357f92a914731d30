// SPDX-License-Identifier: Apache-2.0
#pragma once

// Self-contained model checkpoint ("MOSC"): model configuration, optional
// MFCC front-end configuration, normalization statistics, run metadata and
// all parameters including batch-norm running statistics. Little-endian,
// float64 tensors.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <string_view>

#include "mosqa/error.hpp"
#include "mosqa/features.hpp"
#include "mosqa/mfcc.hpp"
#include "mosqa/model.hpp"

namespace mosqa {

inline constexpr char kCheckpointMagic[4] = {'M', 'O', 'S', 'C'};
inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointMeta {
  std::uint64_t seed = 0;
  std::uint32_t epoch = 0;
  double val_loss = 0.0;

  friend bool operator==(const CheckpointMeta &, const CheckpointMeta &) = default;
};

struct Checkpoint {
  ModelParams<double> params;
  NormStats stats;
  std::optional<MfccConfig> mfcc; // set when the model was trained on native MFCC features
  CheckpointMeta meta;
};

namespace detail {

class ByteWriter {
public:
  template <typename T>
  void put(T v) {
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    buf_.append(b, sizeof(T));
  }
  void put_f64s(std::span<const double> v) {
    put<std::uint32_t>(static_cast<std::uint32_t>(v.size()));
    buf_.append(reinterpret_cast<const char *>(v.data()), v.size() * sizeof(double));
  }
  void raw(std::string_view s) { buf_.append(s); }
  const std::string &bytes() const noexcept { return buf_; }

private:
  std::string buf_;
};

class ByteReader {
public:
  ByteReader(std::string_view bytes, std::string name) : bytes_(bytes), name_(std::move(name)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void get_f64s(std::span<double> out, std::string_view what) {
    const auto n = get<std::uint32_t>();
    if (n != out.size())
      throw DataError(name_ + ": tensor " + std::string(what) + " has " + std::to_string(n) +
                      " values, expected " + std::to_string(out.size()));
    need(n * sizeof(double));
    std::memcpy(out.data(), bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const noexcept { return pos_ == bytes_.size(); }
  const std::string &name() const noexcept { return name_; }

private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw DataError(name_ + ": truncated checkpoint");
  }
  std::string_view bytes_;
  std::string name_;
  std::size_t pos_ = 0;
};

} // namespace detail

inline std::string encode_checkpoint(const Checkpoint &ck) {
  detail::ByteWriter w;
  const ModelConfig &c = ck.params.cfg;
  w.raw(std::string_view(kCheckpointMagic, 4));
  w.put<std::uint16_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.input_channels));
  w.put<std::uint8_t>(c.use_bilstm ? 1 : 0);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.lstm_layers));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.lstm_hidden));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.attpool_hidden));
  w.put<double>(c.dropout_p);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(c.seq_len));
  w.put<double>(c.bn_momentum);
  w.put<double>(c.bn_eps);

  w.put<std::uint8_t>(ck.mfcc ? 1 : 0);
  if (ck.mfcc) {
    w.put<std::uint32_t>(ck.mfcc->sample_rate);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.mfcc->n_fft));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.mfcc->hop));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.mfcc->n_mels));
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ck.mfcc->n_mfcc));
    w.put<double>(ck.mfcc->log_floor);
  }

  if (ck.stats.channels() != c.input_channels)
    throw DataError("checkpoint: normalization statistics do not match the model width");
  w.put_f64s(ck.stats.mean);
  w.put_f64s(ck.stats.std);
  for (bool b : ck.stats.clamped) w.put<std::uint8_t>(b ? 1 : 0);

  w.put<std::uint64_t>(ck.meta.seed);
  w.put<std::uint32_t>(ck.meta.epoch);
  w.put<double>(ck.meta.val_loss);

  const auto &p = ck.params;
  w.put_f64s({p.bn_running_mean.data(), static_cast<std::size_t>(p.bn_running_mean.size())});
  w.put_f64s({p.bn_running_var.data(), static_cast<std::size_t>(p.bn_running_var.size())});
  for (const auto &t : p.trainable()) w.put_f64s(t.values);
  return w.bytes();
}

inline Checkpoint decode_checkpoint(std::string_view bytes, const std::string &name = "checkpoint") {
  detail::ByteReader r(bytes, name);
  if (bytes.size() < 4 || r.take(4) != std::string_view(kCheckpointMagic, 4))
    throw DataError(name + ": bad magic (not a MOSC checkpoint)");
  if (const auto v = r.get<std::uint16_t>(); v != kCheckpointVersion)
    throw DataError(name + ": unsupported checkpoint version " + std::to_string(v));
  ModelConfig c;
  c.input_channels = r.get<std::uint32_t>();
  c.use_bilstm = r.get<std::uint8_t>() != 0;
  c.lstm_layers = r.get<std::uint32_t>();
  c.lstm_hidden = r.get<std::uint32_t>();
  c.attpool_hidden = r.get<std::uint32_t>();
  c.dropout_p = r.get<double>();
  c.seq_len = r.get<std::uint32_t>();
  c.bn_momentum = r.get<double>();
  c.bn_eps = r.get<double>();
  try {
    c.validate();
  } catch (const UsageError &e) {
    throw DataError(name + ": invalid model configuration (" + e.what() + ")");
  }
  if (c.input_channels > (1u << 20) || c.lstm_hidden > (1u << 16) || c.attpool_hidden > (1u << 16) ||
      c.lstm_layers > 64)
    throw DataError(name + ": implausible model dimensions");

  Checkpoint ck;
  if (r.get<std::uint8_t>() != 0) {
    MfccConfig m;
    m.sample_rate = r.get<std::uint32_t>();
    m.n_fft = r.get<std::uint32_t>();
    m.hop = r.get<std::uint32_t>();
    m.n_mels = r.get<std::uint32_t>();
    m.n_mfcc = r.get<std::uint32_t>();
    m.log_floor = r.get<double>();
    ck.mfcc = m;
  }

  ck.stats.mean.resize(c.input_channels);
  ck.stats.std.resize(c.input_channels);
  ck.stats.clamped.resize(c.input_channels);
  r.get_f64s(ck.stats.mean, "norm.mean");
  r.get_f64s(ck.stats.std, "norm.std");
  for (std::size_t i = 0; i < c.input_channels; ++i) ck.stats.clamped[i] = r.get<std::uint8_t>() != 0;

  ck.meta.seed = r.get<std::uint64_t>();
  ck.meta.epoch = r.get<std::uint32_t>();
  ck.meta.val_loss = r.get<double>();

  ck.params = ModelParams<double>::zeros(c);
  auto &p = ck.params;
  r.get_f64s({p.bn_running_mean.data(), static_cast<std::size_t>(p.bn_running_mean.size())}, "bn.running_mean");
  r.get_f64s({p.bn_running_var.data(), static_cast<std::size_t>(p.bn_running_var.size())}, "bn.running_var");
  for (auto &t : p.trainable()) r.get_f64s(t.values, t.name);
  if (!r.done()) throw DataError(name + ": trailing bytes after parameters");
  return ck;
}

inline void save_checkpoint(const Checkpoint &ck, const std::filesystem::path &path) {
  const auto bytes = encode_checkpoint(ck);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed: " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path &path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  std::string bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes, path.string());
}

} // namespace mosqa
