// SPDX-License-Identifier: Apache-2.0
// Acceptance gate. One PASS/FAIL line per criterion; exit status is the number
// of failures, so ctest fails if any criterion does.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>

#include "mosqa/checkpoint.hpp"
#include "mosqa/synth.hpp"
#include "mosqa/training.hpp"
#include "support/fixtures.hpp"
#include "support/gradient_oracle.hpp"
#include "support/mel_oracle.hpp"
#include "support/metric_oracle.hpp"

namespace {

using namespace mosqa;
namespace oracle = mosqa::testing::oracle;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void run(const std::string &name, double budget_s, const std::function<Outcome()> &body) {
  const auto t0 = Clock::now();
  Outcome o;
  try {
    o = body();
  } catch (const std::exception &e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
  if (budget_s > 0 && secs > budget_s) {
    o.pass = false;
    o.detail += "; over the " + std::to_string(static_cast<int>(budget_s)) + " s budget";
  }
  if (!o.pass) ++failures;
  char elapsed[32];
  std::snprintf(elapsed, sizeof elapsed, "%.1fs", secs);
  std::cout << (o.pass ? "PASS " : "FAIL ") << name << " (" << o.detail << ", " << elapsed << ")" << std::endl;
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

// ---------------------------------------------------------------------------

Outcome gradient_oracle() {
  constexpr int kConfigs = 24;
  double worst = 0.0;
  std::string where;
  std::size_t checked = 0;
  for (int k = 0; k < kConfigs; ++k) {
    Rng rng(derive_seed(0xacc, static_cast<std::uint64_t>(k)));
    ModelConfig cfg;
    cfg.use_bilstm = k % 2 == 0;
    cfg.input_channels = 1 + rng.below(5);
    cfg.seq_len = 1 + rng.below(8);
    cfg.lstm_layers = 1 + rng.below(2);
    cfg.lstm_hidden = 1 + rng.below(4);
    cfg.attpool_hidden = 1 + rng.below(5);
    cfg.dropout_p = 0.0;
    auto p = init_params<double>(cfg, static_cast<std::uint64_t>(k));
    testing::randomize(p, rng, 0.7);
    const auto seqs = testing::random_sequences(rng, 1 + rng.below(3), cfg.seq_len, cfg.input_channels);
    const auto targets = testing::random_targets(rng, seqs.size());
    Batch batch;
    for (const auto &s : seqs) batch.push_back(&s);
    for (Mode mode : {Mode::Train, Mode::Eval}) {
      const auto g = backward(p, forward(p, batch, mode), std::span<const double>(targets));
      const auto r = testing::finite_difference_check(p, batch, mode, targets, g.grads);
      checked += r.checked;
      if (r.max_rel_error > worst) {
        worst = r.max_rel_error;
        where = "config " + std::to_string(k) + " " + r.worst_tensor;
      }
    }
  }
  return {worst < 1e-5, std::to_string(kConfigs) + " configs, " + std::to_string(checked) +
                            " partials, max rel error " + sci(worst) + " at " + where};
}

std::vector<double> scores_with_ties(Rng &rng, std::size_t n) {
  std::vector<double> v(n);
  for (auto &x : v) {
    x = rng.uniform(1.0, 5.0);
    if (rng.uniform() < 0.3) x = std::round(x * 2.0) / 2.0;
  }
  return v;
}

Outcome metric_oracles() {
  Rng rng(0xe7);
  double worst = 0.0;
  std::size_t definedness_mismatch = 0;
  auto track = [&](std::optional<double> a, std::optional<double> b) {
    if (a.has_value() != b.has_value()) {
      ++definedness_mismatch;
      return;
    }
    if (a) worst = std::max(worst, std::abs(*a - *b));
  };
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 4 + rng.below(197);
    const auto p = scores_with_ties(rng, n), l = scores_with_ties(rng, n);
    worst = std::max(worst, std::abs(rmse(p, l) - oracle::rmse(p, l)));
    track(pcc(p, l), oracle::pcc(p, l));
    track(srcc(p, l), oracle::srcc(p, l));
    worst = std::max(worst, std::abs(rmse_s(p, l).rmse - oracle::rmse_s(p, l)));
  }
  std::vector<double> p(150), l;
  for (auto &v : p) v = rng.uniform(1.0, 5.0);
  for (double v : p) l.push_back(0.1 * v * v * v - 0.4 * v * v + v + 0.5);
  const double cubic = rmse_s(p, l).rmse;
  return {worst <= 1e-9 && definedness_mismatch == 0 && cubic < 1e-8,
          "1000 vectors, max diff " + sci(worst) + ", cubic recovery rmse_s " + sci(cubic)};
}

Outcome normalization() {
  testing::TempDir dir;
  Rng rng(0x40);
  // Exporter-format fixture files on disk, then a second stream with a
  // constant channel to exercise the floor.
  std::vector<FeatureMatrix> xlsr;
  for (int i = 0; i < 6; ++i) {
    const auto path = dir / ("x" + std::to_string(i) + ".mosf");
    const auto fm = testing::xlsr_like_matrix(rng, 20 + rng.below(80));
    save_features(fm, path);
    xlsr.push_back(load_features(path));
    if (encode_features(xlsr.back()) != encode_features(fm)) return {false, "fixture file round trip changed bytes"};
  }
  std::vector<FeatureMatrix> mixed;
  for (int i = 0; i < 12; ++i) {
    auto fm = testing::random_matrix(rng, 1 + rng.below(300), 6, rng.uniform(0.01, 50.0), rng.uniform(-100, 100));
    for (std::size_t t = 0; t < fm.frames(); ++t) fm(t, 3) = 7.25f;
    mixed.push_back(std::move(fm));
  }

  double worst_mean = 0.0, worst_std = 0.0;
  std::size_t unclamped = 0, clamped = 0;
  for (const auto *stream : {&xlsr, &mixed}) {
    const auto stats = compute_norm_stats(*stream);
    const std::size_t C = stats.channels();
    std::vector<long double> sum(C, 0.0L), sq(C, 0.0L);
    std::size_t frames = 0;
    for (const auto &fm : *stream) {
      const auto z = apply_norm(fm, stats);
      frames += z.frames();
      for (std::size_t t = 0; t < z.frames(); ++t)
        for (std::size_t c = 0; c < C; ++c) sum[c] += z(t, c);
    }
    for (const auto &fm : *stream) {
      const auto z = apply_norm(fm, stats);
      for (std::size_t t = 0; t < z.frames(); ++t)
        for (std::size_t c = 0; c < C; ++c) {
          const long double d = z(t, c) - sum[c] / frames;
          sq[c] += d * d;
        }
    }
    for (std::size_t c = 0; c < C; ++c) {
      if (stats.clamped[c]) {
        ++clamped;
        continue;
      }
      ++unclamped;
      worst_mean = std::max(worst_mean, static_cast<double>(std::abs(sum[c] / frames)));
      worst_std = std::max(worst_std, static_cast<double>(std::abs(std::sqrt(sq[c] / frames) - 1.0L)));
    }
  }
  return {worst_mean <= 1e-6 && worst_std <= 1e-6 && clamped == 1,
          std::to_string(unclamped) + " unclamped channels, max |mean| " + sci(worst_mean) + ", max |std-1| " +
              sci(worst_std) + ", clamped " + std::to_string(clamped)};
}

struct OverfitRun {
  Manifest manifest;
  SplitPair split;
  FeatureSource source;
  ModelConfig model;
  TrainConfig train;
  TrainReport report;
};

// Shared by the overfit and determinism criteria; features are extracted once.
OverfitRun &overfit_run(const std::filesystem::path &dir) {
  static std::optional<OverfitRun> run;
  if (run) return *run;
  OverfitRun r;
  SynthSpec spec;
  spec.n_clips = 200;
  spec.duration_s = 2.0;
  spec.seed = 1;
  r.manifest = write_synth_corpus(spec, dir);
  auto cache = std::make_shared<std::map<std::string, FeatureMatrix>>();
  const auto mfcc = mfcc_audio_source(MfccConfig{});
  for (const auto &rec : r.manifest.records()) cache->emplace(rec.id, mfcc(rec));
  r.source = [cache](const ClipRecord &rec) { return cache->at(rec.id); };
  r.split = split_all_corpora(r.manifest, 7);
  r.model.input_channels = MfccConfig{}.n_mfcc;
  r.model.use_bilstm = true;
  r.train.epochs = 50;
  r.train.seed = 3;
  TrainOptions opts;
  opts.mfcc = MfccConfig{};
  r.report = train(r.manifest, r.split, r.source, r.model, r.train, opts);
  run = std::move(r);
  return *run;
}

std::optional<double> pooled(const EvalResult &e, std::optional<double> MetricsReport::*field) {
  return e.reports.back().*field;
}

Outcome overfit(const std::filesystem::path &dir) {
  auto &r = overfit_run(dir);
  const auto on_train = evaluate(r.report.best, r.manifest, r.split.train, r.source);
  const auto on_val = evaluate(r.report.best, r.manifest, r.split.val, r.source);
  const double train_rmse = on_train.reports.back().rmse;
  const auto val_pcc = pooled(on_val, &MetricsReport::pcc);
  return {train_rmse < 0.2 && val_pcc && *val_pcc > 0.8,
          std::to_string(r.split.train.size()) + "/" + std::to_string(r.split.val.size()) + " clips, best epoch " +
              std::to_string(r.report.best_epoch) + ", train RMSE " + sci(train_rmse) + ", val PCC " +
              (val_pcc ? sci(*val_pcc) : "undefined")};
}

Outcome determinism(const std::filesystem::path &dir) {
  auto &r = overfit_run(dir);
  auto short_cfg = r.train;
  short_cfg.epochs = 4;
  const auto a = encode_checkpoint(train(r.manifest, r.split, r.source, r.model, short_cfg).best);
  const auto b = encode_checkpoint(train(r.manifest, r.split, r.source, r.model, short_cfg).best);
  short_cfg.threads = 3;
  const auto c = encode_checkpoint(train(r.manifest, r.split, r.source, r.model, short_cfg).best);

  // Eval-mode predictions under different batch sizes and a reversed order.
  std::vector<std::string> ids;
  for (const auto &rec : r.manifest.records()) ids.push_back(rec.id);
  const auto base = evaluate(r.report.best, r.manifest, ids, r.source, 200).predicted_mos;
  double worst = 0.0;
  for (std::size_t bs : {1u, 7u, 64u}) {
    const auto other = evaluate(r.report.best, r.manifest, ids, r.source, bs).predicted_mos;
    for (std::size_t i = 0; i < ids.size(); ++i) worst = std::max(worst, std::abs(other[i] - base[i]));
  }
  std::vector<std::string> reversed(ids.rbegin(), ids.rend());
  const auto rev = evaluate(r.report.best, r.manifest, reversed, r.source, 32).predicted_mos;
  for (std::size_t i = 0; i < ids.size(); ++i) worst = std::max(worst, std::abs(rev[ids.size() - 1 - i] - base[i]));

  const bool same = a == b && a == c;
  return {same && worst <= 1e-6, std::string("checkpoints ") + (same ? "byte-identical" : "differ") + " (" +
                                     std::to_string(a.size()) + " bytes, threads 1 and 3), max batch drift " +
                                     sci(worst)};
}

Outcome split_contract() {
  Rng rng(0x5a);
  const auto previous = set_log_sink([](std::string_view, std::string_view) {});
  std::size_t checks = 0;
  std::string problem;
  for (int trial = 0; trial < 100 && problem.empty(); ++trial) {
    const std::size_t n = 1 + rng.below(400);
    const auto m = testing::random_manifest(rng, n);
    const auto s = split_all_corpora(m, rng.below(1u << 30));
    const std::set<std::string> train(s.train.begin(), s.train.end()), val(s.val.begin(), s.val.end());
    const std::size_t want_train = static_cast<std::size_t>(std::ceil(0.85 * static_cast<double>(n) - 1e-9));
    if (s.train.size() != want_train || s.train.size() + s.val.size() != n || train.size() != s.train.size() ||
        val.size() != s.val.size())
      problem = "sizing, n=" + std::to_string(n);
    for (const auto &id : s.train)
      if (val.contains(id)) problem = "overlap";

    std::set<Corpus> keep;
    for (Corpus c : kAllCorpora)
      if (rng.uniform() < 0.5) keep.insert(c);
    if (keep.empty()) keep = {Corpus::Tencent, Corpus::PSTN};
    SplitPair sub;
    try {
      sub = restrict_split(s, m, keep);
    } catch (const DataError &) {
      bool any = false;
      for (const auto &id : s.train) any |= keep.contains(m.at(id).corpus);
      if (any) problem = "restrict threw with eligible training clips";
      continue;
    }
    auto expected = [&](const std::vector<std::string> &side) {
      std::vector<std::string> out;
      for (const auto &id : side)
        if (keep.contains(m.at(id).corpus)) out.push_back(id);
      return out;
    };
    if (sub.train != expected(s.train) || sub.val != expected(s.val)) problem = "restricted sides";
    for (const auto &id : sub.train)
      if (!train.contains(id)) problem = "train id left its side";
    for (const auto &id : sub.val)
      if (!val.contains(id)) problem = "val id left its side";
    ++checks;
  }
  set_log_sink(previous);
  return {problem.empty(), problem.empty() ? "100 manifests, " + std::to_string(checks) + " restrictions" : problem};
}

Outcome mfcc_oracle() {
  Rng rng(0x3f);
  double worst = 0.0;
  for (int i = 0; i < 10; ++i) {
    const std::size_t n = 1 + rng.below(6000);
    std::vector<double> x(n);
    const double scale = std::pow(10.0, rng.uniform(-3, 0));
    for (auto &v : x) v = scale * rng.normal();
    MfccConfig cfg;
    MfccExtractor ex(cfg);
    const auto lm = ex.log_mel(x);
    oracle::MelParams mp;
    mp.sample_rate = cfg.sample_rate;
    mp.n_fft = static_cast<int>(cfg.n_fft);
    mp.hop = static_cast<int>(cfg.hop);
    mp.n_mels = static_cast<int>(cfg.n_mels);
    mp.log_floor = cfg.log_floor;
    const auto ref = oracle::log_mel(x, mp);
    if (ref.size() != lm.rows) return {false, "frame count mismatch"};
    for (std::size_t t = 0; t < lm.rows; ++t)
      for (std::size_t m = 0; m < lm.cols; ++m) worst = std::max(worst, std::abs(lm(t, m) - ref[t][m]));
  }
  return {worst < 1e-4, "10 waveforms, max abs log-mel diff " + sci(worst)};
}

} // namespace

int main() {
  testing::TempDir work;
  run("gradient-oracle", 120, gradient_oracle);
  run("metric-oracles", 60, metric_oracles);
  run("normalization-self-consistency", 0, normalization);
  run("overfit-sanity", 600, [&] { return overfit(work / "synth"); });
  run("determinism", 0, [&] { return determinism(work / "synth"); });
  run("split-contract", 0, split_contract);
  run("mfcc-oracle", 0, mfcc_oracle);
  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
