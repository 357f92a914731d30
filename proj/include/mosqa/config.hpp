// SPDX-License-Identifier: Apache-2.0
#pragma once

// Key-value configuration files:
//
//   # comment
//   epochs = 50
//   use_bilstm = true
//
// Keys mirror the fields of TrainConfig, ModelConfig and MfccConfig. Later
// assignments (including command-line overrides) replace earlier ones.

#include <filesystem>
#include <concepts>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <string_view>

#include "mosqa/error.hpp"
#include "mosqa/mfcc.hpp"
#include "mosqa/model.hpp"
#include "mosqa/synth.hpp"
#include "mosqa/text.hpp"
#include "mosqa/training.hpp"

namespace mosqa {

class KeyValueConfig {
public:
  static KeyValueConfig parse(std::istream &in, const std::string &name = "config") {
    KeyValueConfig cfg;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const auto t = text::trim(line);
      if (t.empty()) continue;
      const auto eq = t.find('=');
      if (eq == std::string_view::npos)
        throw UsageError(name + ":" + std::to_string(line_no) + ": expected 'key = value'");
      const auto key = text::trim(t.substr(0, eq));
      if (key.empty()) throw UsageError(name + ":" + std::to_string(line_no) + ": empty key");
      cfg.set(std::string(key), std::string(text::trim(t.substr(eq + 1))));
    }
    return cfg;
  }

  static KeyValueConfig load(const std::filesystem::path &path) {
    std::ifstream in(path);
    if (!in) throw UsageError("cannot open config file " + path.string());
    return parse(in, path.string());
  }

  /// Accepts "key=value".
  void set_assignment(std::string_view assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string_view::npos) throw UsageError("override '" + std::string(assignment) + "' is not key=value");
    set(std::string(text::trim(assignment.substr(0, eq))), std::string(text::trim(assignment.substr(eq + 1))));
  }

  void set(std::string key, std::string value) { values_[text::lower(key)] = std::move(value); }

  bool contains(std::string_view key) const { return values_.contains(std::string(key)); }

  /// Keys not in `known`; callers report them as errors.
  std::set<std::string> unknown_keys(const std::set<std::string> &known) const {
    std::set<std::string> out;
    for (const auto &[k, v] : values_)
      if (!known.contains(k)) out.insert(k);
    return out;
  }

  template <std::unsigned_integral U>
  void read(std::string_view key, U &out) const {
    if (auto v = find(key)) {
      auto parsed = text::parse_uint(*v);
      if (!parsed) throw UsageError("config key '" + std::string(key) + "': expected a non-negative integer, got '" + *v + "'");
      if (*parsed > std::numeric_limits<U>::max()) throw UsageError("config key '" + std::string(key) + "': value too large");
      out = static_cast<U>(*parsed);
    }
  }
  void read(std::string_view key, double &out) const {
    if (auto v = find(key)) {
      auto parsed = text::parse_double(*v);
      if (!parsed) throw UsageError("config key '" + std::string(key) + "': expected a number, got '" + *v + "'");
      out = *parsed;
    }
  }
  void read(std::string_view key, bool &out) const {
    if (auto v = find(key)) {
      const auto l = text::lower(*v);
      if (l == "true" || l == "1" || l == "yes" || l == "on")
        out = true;
      else if (l == "false" || l == "0" || l == "no" || l == "off")
        out = false;
      else
        throw UsageError("config key '" + std::string(key) + "': expected true/false, got '" + *v + "'");
    }
  }
  void read(std::string_view key, std::string &out) const {
    if (auto v = find(key)) out = *v;
  }

private:
  const std::string *find(std::string_view key) const {
    auto it = values_.find(std::string(key));
    return it == values_.end() ? nullptr : &it->second;
  }

  std::map<std::string, std::string> values_;
};

inline const std::set<std::string> &train_config_keys() {
  static const std::set<std::string> keys = {"batch_size", "epochs",     "base_lr",    "max_lr",   "cycle_len_steps",
                                             "adam_beta1", "adam_beta2", "adam_eps",   "seed",     "threads"};
  return keys;
}

inline const std::set<std::string> &model_config_keys() {
  static const std::set<std::string> keys = {"input_channels", "use_bilstm", "lstm_layers", "lstm_hidden",
                                             "attpool_hidden", "dropout_p",  "seq_len",     "bn_momentum",
                                             "bn_eps"};
  return keys;
}

inline const std::set<std::string> &mfcc_config_keys() {
  static const std::set<std::string> keys = {"sample_rate", "n_fft", "hop", "n_mels", "n_mfcc", "log_floor"};
  return keys;
}

inline const std::set<std::string> &synth_config_keys() {
  static const std::set<std::string> keys = {"n_clips", "duration_s", "snr_low_db", "snr_high_db"};
  return keys;
}

inline void apply(const KeyValueConfig &kv, TrainConfig &c) {
  kv.read("batch_size", c.batch_size);
  kv.read("epochs", c.epochs);
  kv.read("base_lr", c.base_lr);
  kv.read("max_lr", c.max_lr);
  kv.read("cycle_len_steps", c.cycle_len_steps);
  kv.read("adam_beta1", c.adam_beta1);
  kv.read("adam_beta2", c.adam_beta2);
  kv.read("adam_eps", c.adam_eps);
  kv.read("seed", c.seed);
  kv.read("threads", c.threads);
}

inline void apply(const KeyValueConfig &kv, ModelConfig &c) {
  kv.read("input_channels", c.input_channels);
  kv.read("use_bilstm", c.use_bilstm);
  kv.read("lstm_layers", c.lstm_layers);
  kv.read("lstm_hidden", c.lstm_hidden);
  kv.read("attpool_hidden", c.attpool_hidden);
  kv.read("dropout_p", c.dropout_p);
  kv.read("seq_len", c.seq_len);
  kv.read("bn_momentum", c.bn_momentum);
  kv.read("bn_eps", c.bn_eps);
}

inline void apply(const KeyValueConfig &kv, MfccConfig &c) {
  kv.read("sample_rate", c.sample_rate);
  kv.read("n_fft", c.n_fft);
  kv.read("hop", c.hop);
  kv.read("n_mels", c.n_mels);
  kv.read("n_mfcc", c.n_mfcc);
  kv.read("log_floor", c.log_floor);
}

inline void apply(const KeyValueConfig &kv, SynthSpec &c) {
  kv.read("n_clips", c.n_clips);
  kv.read("duration_s", c.duration_s);
  kv.read("snr_low_db", c.snr_low_db);
  kv.read("snr_high_db", c.snr_high_db);
  kv.read("seed", c.seed);
  kv.read("sample_rate", c.sample_rate);
}

} // namespace mosqa
