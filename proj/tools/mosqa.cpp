// SPDX-License-Identifier: Apache-2.0
//
// mosqa: command-line front end for the MOS prediction toolkit.
//
//   mosqa synth   --out DIR [--n-clips N] [--seed S]
//   mosqa extract --manifest M --kind mfcc|import --out DIR [--jobs J]
//   mosqa stats   --manifest M [--split DIR] --out FILE
//   mosqa split   --manifest M --strategy all|tencent-pstn|challenge --seed S --out DIR
//   mosqa train   --manifest M --split DIR --out DIR [--config FILE] [--set key=value ...]
//   mosqa eval    --checkpoint C --manifest M [--split DIR --subset val] [--out FILE]
//   mosqa predict --checkpoint C INPUT...
//
// Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure.

#include <CLI11.hpp>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "mosqa/checkpoint.hpp"
#include "mosqa/config.hpp"
#include "mosqa/dataset.hpp"
#include "mosqa/features.hpp"
#include "mosqa/metrics.hpp"
#include "mosqa/mfcc.hpp"
#include "mosqa/synth.hpp"
#include "mosqa/training.hpp"
#include "mosqa/wav.hpp"

namespace fs = std::filesystem;
using namespace mosqa;

namespace {

enum ExitCode : int { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

constexpr const char *kExtractConfigName = "extract.cfg";

struct CommonOptions {
  std::string manifest;
  std::string config;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::string out;
  unsigned jobs = 1;
};

void add_config_flags(CLI::App *cmd, CommonOptions &o) {
  cmd->add_option("--config", o.config, "Key-value config file");
  cmd->add_option("--set", o.overrides, "Override a config key (key=value); repeatable");
}

KeyValueConfig load_config(const CommonOptions &o, const std::set<std::string> &known) {
  KeyValueConfig kv = o.config.empty() ? KeyValueConfig{} : KeyValueConfig::load(o.config);
  for (const auto &a : o.overrides) kv.set_assignment(a);
  if (o.seed) kv.set("seed", std::to_string(*o.seed));
  for (const auto &k : kv.unknown_keys(known)) throw UsageError("unknown config key '" + k + "'");
  return kv;
}

std::set<std::string> key_union(std::initializer_list<const std::set<std::string> *> sets) {
  std::set<std::string> out;
  for (const auto *s : sets) out.insert(s->begin(), s->end());
  return out;
}

void write_mfcc_config(const MfccConfig &c, const fs::path &path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << "sample_rate = " << c.sample_rate << "\nn_fft = " << c.n_fft << "\nhop = " << c.hop
      << "\nn_mels = " << c.n_mels << "\nn_mfcc = " << c.n_mfcc
      << "\nlog_floor = " << text::format_double(c.log_floor) << '\n';
}

/// Audio rows (.wav) are converted with the checkpoint's MFCC settings;
/// anything else is read as a feature file.
FeatureSource source_for(const std::optional<MfccConfig> &mfcc) {
  return [mfcc](const ClipRecord &r) {
    if (text::lower(r.source.extension().string()) == ".wav") {
      if (!mfcc) throw DataError("checkpoint has no MFCC settings, cannot score audio " + r.source.string());
      return compute_mfcc(read_wav(r.source), *mfcc);
    }
    return load_features(r.source);
  };
}

std::vector<std::string> ids_of(const Manifest &m) {
  std::vector<std::string> ids;
  for (const auto &r : m.records()) ids.push_back(r.id);
  return ids;
}

// ---------------------------------------------------------------------------

int run_synth(const CommonOptions &o, SynthSpec spec, const std::vector<double> &snr_range) {
  const auto kv = load_config(o, key_union({&synth_config_keys(), &train_config_keys()}));
  apply(kv, spec);
  if (!snr_range.empty()) {
    spec.snr_low_db = snr_range.at(0);
    spec.snr_high_db = snr_range.at(1);
  }
  const auto m = write_synth_corpus(spec, o.out);
  std::cout << "wrote " << m.size() << " clips and " << (fs::path(o.out) / "manifest.csv").string() << '\n';
  return kOk;
}

int run_extract(const CommonOptions &o, const std::string &kind) {
  const auto kv = load_config(o, mfcc_config_keys());
  MfccConfig mfcc;
  apply(kv, mfcc);
  mfcc.validate();
  const auto manifest = load_manifest(o.manifest);
  const fs::path out_dir = o.out;
  fs::create_directories(out_dir / "features");

  const auto &records = manifest.records();
  std::vector<ClipRecord> out_records(records.size());
  std::vector<std::string> errors(records.size());
  std::atomic<std::size_t> next{0};

  auto worker = [&] {
    std::optional<MfccExtractor> extractor;
    if (kind == "mfcc") extractor.emplace(mfcc);
    for (std::size_t i = next++; i < records.size(); i = next++) {
      const auto &rec = records[i];
      const fs::path target = out_dir / "features" / (rec.id + ".mosf");
      try {
        FeatureMatrix fm;
        if (kind == "mfcc") {
          fm = extractor->compute(read_wav(rec.source));
        } else {
          fm = load_features(rec.source);
        }
        save_features(fm, target);
        ClipRecord r = rec;
        r.source = target;
        r.source_kind = std::string(to_string(fm.source_kind()));
        out_records[i] = std::move(r);
      } catch (const std::exception &e) {
        errors[i] = "clip '" + rec.id + "': " + e.what();
      }
    }
  };
  {
    std::vector<std::jthread> pool;
    for (unsigned j = 1; j < std::max(1u, o.jobs); ++j) pool.emplace_back(worker);
    worker();
  }
  for (const auto &e : errors)
    if (!e.empty()) throw DataError(e);

  Manifest out;
  for (auto &r : out_records) out.add(std::move(r));
  save_manifest(out, out_dir / "manifest.csv");
  if (kind == "mfcc") write_mfcc_config(mfcc, out_dir / kExtractConfigName);
  std::cout << "extracted " << out.size() << " feature files into " << (out_dir / "features").string() << '\n';
  return kOk;
}

int run_stats(const CommonOptions &o, const std::string &split_dir) {
  const auto manifest = load_manifest(o.manifest);
  std::vector<std::string> ids = split_dir.empty() ? ids_of(manifest) : load_split(split_dir).train;
  NormAccumulator acc;
  for (const auto &id : ids) acc.add(load_clip_features(feature_file_source(), manifest.at(id)));
  const auto stats = acc.finish();
  save_norm_stats(stats, o.out);
  const auto clamped = std::ranges::count(stats.clamped, true);
  std::cout << "statistics over " << acc.count() << " frames, " << stats.channels() << " channels ("
            << clamped << " clamped) written to " << o.out << '\n';
  return kOk;
}

int run_split(const CommonOptions &o, const std::string &strategy_name) {
  const auto kv = load_config(o, {"seed"});
  std::uint64_t seed = 0;
  kv.read("seed", seed);
  const auto manifest = load_manifest(o.manifest);
  const auto strategy = parse_split_strategy(strategy_name);
  if (!strategy || *strategy == SplitStrategy::Custom)
    throw UsageError("unknown split strategy '" + strategy_name + "' (all, tencent-pstn, challenge)");
  SplitPair split;
  switch (*strategy) {
  case SplitStrategy::AllCorpora: split = split_all_corpora(manifest, seed); break;
  case SplitStrategy::TencentPstnSubset:
    split = restrict_split(split_all_corpora(manifest, seed), manifest, {Corpus::Tencent, Corpus::PSTN});
    break;
  case SplitStrategy::Challenge: split = split_challenge(manifest, seed); break;
  case SplitStrategy::Custom: break;
  }
  save_split(split, o.out);
  std::cout << "train " << split.train.size() << ", val " << split.val.size() << " (" << to_string(split.strategy)
            << ", seed " << seed << ") written to " << o.out << '\n';
  return kOk;
}

int run_train(const CommonOptions &o, const std::string &split_dir, const std::string &stats_path,
              std::optional<std::size_t> epochs) {
  const auto kv = load_config(o, key_union({&train_config_keys(), &model_config_keys(), &mfcc_config_keys()}));
  TrainConfig tc;
  tc.threads = o.jobs;
  apply(kv, tc);
  if (epochs) tc.epochs = *epochs;
  ModelConfig mc;
  apply(kv, mc);

  const auto manifest = load_manifest(o.manifest);
  if (manifest.empty()) throw DataError("manifest is empty");
  const auto split = load_split(split_dir);
  const auto source = source_for(std::nullopt);
  if (!kv.contains("input_channels"))
    mc.input_channels = load_clip_features(source, manifest.at(split.train.at(0))).channels();

  TrainOptions opts;
  if (!stats_path.empty()) opts.stats = load_norm_stats(stats_path);
  const bool mfcc_features = std::ranges::all_of(manifest.records(), [](const auto &r) { return r.source_kind == "MFCC"; });
  if (mfcc_features) {
    MfccConfig mfcc;
    const auto extract_cfg = fs::path(o.manifest).parent_path() / kExtractConfigName;
    if (fs::exists(extract_cfg)) apply(KeyValueConfig::load(extract_cfg), mfcc);
    apply(kv, mfcc);
    opts.mfcc = mfcc;
  }
  const fs::path out_dir = o.out;
  fs::create_directories(out_dir);
  opts.checkpoint_path = out_dir / "best.mosc";
  std::ofstream log(out_dir / "train.log");
  opts.log = &log;

  const auto report = train(manifest, split, source, mc, tc, opts);

  std::ofstream losses(out_dir / "losses.csv");
  losses << "epoch,train_loss,val_loss\n";
  for (std::size_t e = 0; e < report.val_loss.size(); ++e)
    losses << e + 1 << ',' << text::format_double(report.train_loss[e]) << ','
           << text::format_double(report.val_loss[e]) << '\n';
  std::cout << "best epoch " << report.best_epoch << " of " << report.val_loss.size() << ", validation loss "
            << report.best_val_loss << "; checkpoint " << opts.checkpoint_path.string() << '\n';
  return kOk;
}

int run_eval(const CommonOptions &o, const std::string &checkpoint, const std::string &split_dir,
             const std::string &subset) {
  const auto ck = load_checkpoint(checkpoint);
  const auto manifest = load_manifest(o.manifest);
  std::vector<std::string> ids;
  if (split_dir.empty() || subset == "all") {
    ids = ids_of(manifest);
  } else {
    const auto split = load_split(split_dir);
    if (subset == "train")
      ids = split.train;
    else if (subset == "val")
      ids = split.val;
    else
      throw UsageError("--subset must be train, val or all");
  }
  const auto result = evaluate(ck, manifest, ids, source_for(ck.mfcc), 64, std::max(1u, o.jobs));
  write_report_table(std::cout, result.reports);
  if (!o.out.empty()) {
    std::ofstream out(o.out);
    if (!out) throw DataError("cannot write " + o.out);
    write_report_csv(out, result.reports);
  }
  return kOk;
}

int run_predict(const std::string &checkpoint, const std::vector<std::string> &inputs) {
  const auto ck = load_checkpoint(checkpoint);
  const auto source = source_for(ck.mfcc);
  for (const auto &in : inputs) {
    ClipRecord rec;
    rec.id = in;
    rec.source = in;
    const auto fm = load_clip_features(source, rec);
    const double mos = predict_mos(ck.params, fm, ck.stats);
    if (inputs.size() == 1)
      std::cout << text::format_double(mos) << '\n';
    else
      std::cout << in << '\t' << text::format_double(mos) << '\n';
  }
  return kOk;
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"mosqa: non-intrusive MOS prediction toolkit"};
  app.require_subcommand(1);
  CommonOptions o;

  auto *synth = app.add_subcommand("synth", "Generate a synthetic noisy-tone corpus with SNR-derived labels");
  SynthSpec spec;
  std::vector<double> snr_range;
  synth->add_option("--out", o.out, "Output directory")->required();
  synth->add_option("--n-clips", spec.n_clips, "Number of clips")->capture_default_str();
  synth->add_option("--duration", spec.duration_s, "Clip duration in seconds")->capture_default_str();
  synth->add_option("--snr-range", snr_range, "SNR range in dB (low high)")->expected(2);
  synth->add_option("--seed", o.seed, "Random seed");
  add_config_flags(synth, o);

  auto *extract = app.add_subcommand("extract", "Compute MFCC features or import external feature files");
  std::string kind = "mfcc";
  extract->add_option("--manifest", o.manifest, "Input manifest")->required();
  extract->add_option("--kind", kind, "mfcc or import")->check(CLI::IsMember({"mfcc", "import"}));
  extract->add_option("--out", o.out, "Output directory")->required();
  extract->add_option("--jobs", o.jobs, "Parallel workers")->capture_default_str();
  add_config_flags(extract, o);

  auto *stats = app.add_subcommand("stats", "Per-channel normalization statistics of the training split");
  std::string split_dir;
  stats->add_option("--manifest", o.manifest, "Feature manifest")->required();
  stats->add_option("--split", split_dir, "Split directory (train ids are used); default all clips");
  stats->add_option("--out", o.out, "Output statistics file")->required();
  add_config_flags(stats, o);

  auto *split = app.add_subcommand("split", "Divide a manifest into training and validation ids");
  std::string strategy = "all";
  split->add_option("--manifest", o.manifest, "Manifest")->required();
  split->add_option("--strategy", strategy, "all, tencent-pstn or challenge")->capture_default_str();
  split->add_option("--seed", o.seed, "Shuffle seed");
  split->add_option("--out", o.out, "Output directory")->required();
  add_config_flags(split, o);

  auto *trn = app.add_subcommand("train", "Train the regressor and keep the best-validation checkpoint");
  std::string stats_path;
  std::optional<std::size_t> epochs;
  trn->add_option("--manifest", o.manifest, "Feature manifest")->required();
  trn->add_option("--split", split_dir, "Split directory")->required();
  trn->add_option("--stats", stats_path, "Precomputed normalization statistics");
  trn->add_option("--out", o.out, "Output directory")->required();
  trn->add_option("--seed", o.seed, "Seed for initialization, shuffling and dropout");
  trn->add_option("--epochs", epochs, "Number of epochs");
  trn->add_option("--jobs", o.jobs, "Worker threads")->capture_default_str();
  add_config_flags(trn, o);

  auto *ev = app.add_subcommand("eval", "Score a labeled set and report RMSE, PCC, SRCC and RMSE-S");
  std::string checkpoint, subset = "val";
  ev->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  ev->add_option("--manifest", o.manifest, "Manifest (features or audio)")->required();
  ev->add_option("--split", split_dir, "Split directory");
  ev->add_option("--subset", subset, "train, val or all")->capture_default_str();
  ev->add_option("--out", o.out, "Machine-readable report (CSV)");
  ev->add_option("--jobs", o.jobs, "Worker threads")->capture_default_str();
  add_config_flags(ev, o);

  auto *pred = app.add_subcommand("predict", "Predict MOS (1-5) for WAV or feature files");
  std::vector<std::string> inputs;
  pred->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  pred->add_option("inputs", inputs, "WAV (16 kHz mono) or MOSF files")->required();
  add_config_flags(pred, o);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*synth) return run_synth(o, spec, snr_range);
    if (*extract) return run_extract(o, kind);
    if (*stats) return run_stats(o, split_dir);
    if (*split) return run_split(o, strategy);
    if (*trn) return run_train(o, split_dir, stats_path, epochs);
    if (*ev) return run_eval(o, checkpoint, split_dir, subset);
    if (*pred) return run_predict(checkpoint, inputs);
  } catch (const UsageError &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const NumericError &e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const DataError &e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::filesystem::filesystem_error &e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
  return kUsage;
}
