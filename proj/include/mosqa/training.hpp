// SPDX-License-Identifier: Apache-2.0
#pragma once

// MSE training with Adam and a triangular cyclical learning rate, keeping the
// parameters with the lowest validation loss; plus checkpoint evaluation.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iomanip>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "mosqa/checkpoint.hpp"
#include "mosqa/dataset.hpp"
#include "mosqa/error.hpp"
#include "mosqa/features.hpp"
#include "mosqa/log.hpp"
#include "mosqa/metrics.hpp"
#include "mosqa/mfcc.hpp"
#include "mosqa/model.hpp"
#include "mosqa/rng.hpp"
#include "mosqa/wav.hpp"

namespace mosqa {

struct TrainConfig {
  std::size_t batch_size = 64;
  std::size_t epochs = 50;
  double base_lr = 1e-3;
  double max_lr = 1e-2;
  std::size_t cycle_len_steps = 0; // 0: four epochs' worth of batches
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  unsigned threads = 1;

  void validate() const {
    if (batch_size == 0) throw UsageError("train: batch_size must be positive");
    if (epochs == 0) throw UsageError("train: epochs must be positive");
    if (!(base_lr > 0.0 && base_lr <= max_lr)) throw UsageError("train: need 0 < base_lr <= max_lr");
    if (cycle_len_steps != 0 && (cycle_len_steps < 2 || cycle_len_steps % 2 != 0))
      throw UsageError("train: cycle_len_steps must be even and at least 2");
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0))
      throw UsageError("train: Adam betas must be in [0, 1)");
    if (!(adam_eps > 0.0)) throw UsageError("train: adam_eps must be positive");
  }
};

/// Triangular schedule: linear base -> max over the first half cycle, back to
/// base over the second, repeating every cycle_len steps.
inline double cyclical_lr(std::uint64_t step, double base_lr, double max_lr, std::uint64_t cycle_len) {
  if (cycle_len < 2 || cycle_len % 2 != 0) throw UsageError("cyclical_lr: cycle length must be even and >= 2");
  const std::uint64_t half = cycle_len / 2;
  const std::uint64_t pos = step % cycle_len;
  const double frac = pos < half ? static_cast<double>(pos) / static_cast<double>(half)
                                 : static_cast<double>(cycle_len - pos) / static_cast<double>(half);
  return std::clamp(frac * max_lr + (1.0 - frac) * base_lr, base_lr, max_lr);
}

inline double cyclical_lr(std::uint64_t step, const TrainConfig &cfg) {
  return cyclical_lr(step, cfg.base_lr, cfg.max_lr, cfg.cycle_len_steps);
}

/// First and second moment estimates shaped like the model, plus the step count.
template <typename T>
struct AdamState {
  ModelParams<T> m;
  ModelParams<T> v;
  std::uint64_t t = 0;

  static AdamState fresh(const ModelConfig &cfg) { return {ModelParams<T>::zeros(cfg), ModelParams<T>::zeros(cfg), 0}; }
};

/// One bias-corrected Adam update of every trainable tensor, in place.
template <typename T>
void adam_step(ModelParams<T> &params, const ModelParams<T> &grads, AdamState<T> &state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  if (!(lr > 0.0)) throw UsageError("adam_step: learning rate must be positive");
  auto p = params.trainable();
  auto g = grads.trainable();
  auto m = state.m.trainable();
  auto v = state.v.trainable();
  if (p.size() != g.size()) throw DataError("adam_step: gradient layout does not match parameters");
  for (std::size_t k = 0; k < p.size(); ++k) {
    if (p[k].values.size() != g[k].values.size()) throw DataError("adam_step: shape mismatch in " + p[k].name);
    for (T x : g[k].values)
      if (!std::isfinite(static_cast<double>(x))) throw NumericError("adam_step: non-finite gradient in " + p[k].name);
  }
  state.t += 1;
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(state.t));
  for (std::size_t k = 0; k < p.size(); ++k) {
    for (std::size_t i = 0; i < p[k].values.size(); ++i) {
      const double gi = static_cast<double>(g[k].values[i]);
      const double mi = beta1 * static_cast<double>(m[k].values[i]) + (1.0 - beta1) * gi;
      const double vi = beta2 * static_cast<double>(v[k].values[i]) + (1.0 - beta2) * gi * gi;
      m[k].values[i] = static_cast<T>(mi);
      v[k].values[i] = static_cast<T>(vi);
      const double m_hat = mi / c1;
      const double v_hat = vi / c2;
      p[k].values[i] -= static_cast<T>(lr * m_hat / (std::sqrt(v_hat) + eps));
    }
  }
}

template <typename T>
void adam_step(ModelParams<T> &params, const ModelParams<T> &grads, AdamState<T> &state, double lr,
               const TrainConfig &cfg) {
  adam_step(params, grads, state, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
}

// ---------------------------------------------------------------------------
// Feature sources

/// Produces the frame-level features of one clip.
using FeatureSource = std::function<FeatureMatrix(const ClipRecord &)>;

/// Reads MOSF files named by each record's source.
inline FeatureSource feature_file_source() {
  return [](const ClipRecord &r) { return load_features(r.source); };
}

/// Computes MFCCs from each record's WAV source.
inline FeatureSource mfcc_audio_source(MfccConfig cfg) {
  return [cfg](const ClipRecord &r) { return compute_mfcc(read_wav(r.source), cfg); };
}

inline FeatureMatrix load_clip_features(const FeatureSource &source, const ClipRecord &rec) {
  try {
    return source(rec);
  } catch (const DataError &e) {
    throw DataError("clip '" + rec.id + "': " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainReport {
  std::vector<double> train_loss; // per epoch, mean over training clips
  std::vector<double> val_loss;   // per epoch
  std::size_t best_epoch = 0;     // 1-based
  double best_val_loss = std::numeric_limits<double>::infinity();
  std::filesystem::path checkpoint_path; // empty if no output path was given
  Checkpoint best;                       // parameters at best_epoch
};

struct PreparedSet {
  std::vector<std::string> ids;
  std::vector<FixedSequence> sequences;
  std::vector<double> targets; // normalized labels in [0, 1]
};

inline PreparedSet prepare_set(const Manifest &m, std::span<const std::string> ids,
                               const std::vector<FeatureMatrix> &features, const NormStats &stats,
                               std::size_t seq_len) {
  PreparedSet out;
  out.ids.assign(ids.begin(), ids.end());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto &rec = m.at(ids[i]);
    out.sequences.push_back(fit_length(apply_norm(features[i], stats), seq_len));
    out.targets.push_back(normalize_label(rec.mos_raw, rec.corpus));
  }
  return out;
}

/// Eval-mode MSE on the normalized scale.
inline double validation_loss(const ModelParams<double> &p, const PreparedSet &set, std::size_t batch_size,
                              unsigned threads = 1) {
  double sum = 0.0;
  for (std::size_t start = 0; start < set.sequences.size(); start += batch_size) {
    const std::size_t end = std::min(set.sequences.size(), start + batch_size);
    Batch batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&set.sequences[i]);
    const auto pred = predict(p, batch, threads);
    for (std::size_t i = start; i < end; ++i) {
      const double r = pred[i - start] - set.targets[i];
      sum += r * r;
    }
  }
  return sum / static_cast<double>(set.sequences.size());
}

struct TrainOptions {
  std::optional<NormStats> stats;          // computed from the training split when absent
  std::optional<MfccConfig> mfcc;          // stored in the checkpoint for audio prediction
  std::filesystem::path checkpoint_path;   // written whenever validation loss improves
  std::ostream *log = nullptr;             // line-oriented training log
};

inline TrainReport train(const Manifest &manifest, const SplitPair &split, const FeatureSource &source,
                         ModelConfig model_cfg, TrainConfig cfg, const TrainOptions &opts = {}) {
  cfg.validate();
  if (split.train.empty() || split.val.empty())
    throw DataError("training needs non-empty train and validation sets");
  validate_split(split, manifest);

  auto load_all = [&](const std::vector<std::string> &ids) {
    std::vector<FeatureMatrix> out;
    out.reserve(ids.size());
    for (const auto &id : ids) {
      out.push_back(load_clip_features(source, manifest.at(id)));
      if (out.back().channels() != model_cfg.input_channels)
        throw DataError("clip '" + id + "' has " + std::to_string(out.back().channels()) +
                        " channels, model expects " + std::to_string(model_cfg.input_channels));
    }
    return out;
  };
  const auto train_features = load_all(split.train);
  const auto val_features = load_all(split.val);
  const NormStats stats = opts.stats ? *opts.stats : compute_norm_stats(train_features);
  if (stats.channels() != model_cfg.input_channels)
    throw DataError("normalization statistics do not match the model width");

  const auto train_set = prepare_set(manifest, split.train, train_features, stats, model_cfg.seq_len);
  const auto val_set = prepare_set(manifest, split.val, val_features, stats, model_cfg.seq_len);

  const std::size_t n_train = train_set.sequences.size();
  const std::size_t batches_per_epoch = (n_train + cfg.batch_size - 1) / cfg.batch_size;
  if (cfg.cycle_len_steps == 0) cfg.cycle_len_steps = 4 * batches_per_epoch;

  auto params = init_params<double>(model_cfg, cfg.seed);
  auto adam = AdamState<double>::fresh(model_cfg);

  TrainReport report;
  report.checkpoint_path = opts.checkpoint_path;
  if (opts.log)
    *opts.log << "# train clips " << n_train << ", val clips " << val_set.sequences.size() << ", batches/epoch "
              << batches_per_epoch << ", cycle " << cfg.cycle_len_steps << " steps, parameters "
              << params.trainable_count() << '\n';

  std::vector<std::size_t> order(n_train);
  std::uint64_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(cfg.seed, 0x100000 + epoch));
    shuffle_rng.shuffle(std::span(order));

    double loss_sum = 0.0;
    double last_lr = cfg.base_lr;
    for (std::size_t start = 0; start < n_train; start += cfg.batch_size, ++step) {
      const std::size_t end = std::min(n_train, start + cfg.batch_size);
      Batch batch;
      std::vector<double> targets;
      for (std::size_t i = start; i < end; ++i) {
        batch.push_back(&train_set.sequences[order[i]]);
        targets.push_back(train_set.targets[order[i]]);
      }
      ForwardResult<double> fwd;
      BackwardResult<double> bwd;
      try {
        fwd = forward(params, batch, Mode::Train, derive_seed(cfg.seed, 0x200000 + step), cfg.threads);
        bwd = backward(params, fwd, std::span<const double>(targets), cfg.threads);
      } catch (const NumericError &e) {
        throw NumericError("training diverged at step " + std::to_string(step) + ": " + e.what());
      }
      if (!std::isfinite(bwd.loss))
        throw NumericError("training diverged at step " + std::to_string(step) + ": non-finite loss");
      update_running_stats(params, fwd);
      last_lr = cyclical_lr(step, cfg);
      adam_step(params, bwd.grads, adam, last_lr, cfg);
      loss_sum += bwd.loss * static_cast<double>(end - start);
    }
    const double train_loss = loss_sum / static_cast<double>(n_train);
    const double val_loss = validation_loss(params, val_set, cfg.batch_size, cfg.threads);
    if (!std::isfinite(val_loss))
      throw NumericError("non-finite validation loss after epoch " + std::to_string(epoch));
    report.train_loss.push_back(train_loss);
    report.val_loss.push_back(val_loss);

    const bool improved = val_loss < report.best_val_loss;
    if (improved) {
      report.best_val_loss = val_loss;
      report.best_epoch = epoch;
      report.best = Checkpoint{params, stats, opts.mfcc,
                               CheckpointMeta{cfg.seed, static_cast<std::uint32_t>(epoch), val_loss}};
      if (!opts.checkpoint_path.empty()) save_checkpoint(report.best, opts.checkpoint_path);
    }
    if (opts.log) {
      *opts.log << "epoch " << epoch << " step " << step << " lr " << text::format_double(last_lr)
                << " train_loss " << text::format_double(train_loss) << " val_loss "
                << text::format_double(val_loss) << (improved ? " best" : "") << '\n';
      opts.log->flush();
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalResult {
  std::vector<std::string> ids;
  std::vector<double> predicted_mos; // 1-5
  std::vector<double> label_mos;     // corpus labels mapped onto 1-5
  std::vector<MetricsReport> reports; // per corpus, then pooled
  double loss = 0.0;                  // MSE on the normalized scale
};

/// Scores every id with the checkpoint and reports metrics per corpus and pooled.
inline EvalResult evaluate(const Checkpoint &ck, const Manifest &manifest, std::span<const std::string> ids,
                           const FeatureSource &source, std::size_t batch_size = 64, unsigned threads = 1) {
  if (ids.empty()) throw DataError("evaluate: empty id set");
  std::vector<FeatureMatrix> features;
  for (const auto &id : ids) features.push_back(load_clip_features(source, manifest.at(id)));
  const auto set = prepare_set(manifest, ids, features, ck.stats, ck.params.cfg.seq_len);

  EvalResult out;
  out.ids.assign(ids.begin(), ids.end());
  std::vector<std::string> groups;
  double sq = 0.0;
  for (std::size_t start = 0; start < set.sequences.size(); start += batch_size) {
    const std::size_t end = std::min(set.sequences.size(), start + batch_size);
    Batch batch;
    for (std::size_t i = start; i < end; ++i) batch.push_back(&set.sequences[i]);
    const auto pred = predict(ck.params, batch, threads);
    for (std::size_t i = start; i < end; ++i) {
      const double p = pred[i - start];
      sq += (p - set.targets[i]) * (p - set.targets[i]);
      out.predicted_mos.push_back(to_mos(p));
      out.label_mos.push_back(to_mos(set.targets[i]));
      groups.emplace_back(to_string(manifest.at(ids[i]).corpus));
    }
  }
  out.loss = sq / static_cast<double>(set.sequences.size());
  out.reports = grouped_reports(out.predicted_mos, out.label_mos, groups);
  return out;
}

} // namespace mosqa
