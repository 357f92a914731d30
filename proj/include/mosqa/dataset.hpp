// SPDX-License-Identifier: Apache-2.0
#pragma once

// Clip manifests, MOS label scaling and train/validation division.
//
// A manifest is a comma-delimited text file with a header row. Required
// columns: id, source, corpus, mos_raw. Optional: duration_s, source_kind.
// Column order is free; unknown columns are rejected.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "mosqa/error.hpp"
#include "mosqa/log.hpp"
#include "mosqa/rng.hpp"
#include "mosqa/text.hpp"

namespace mosqa {

enum class Corpus : std::uint8_t { Tencent, NISQA, IUBloomington, PSTN, Synthetic };

inline constexpr Corpus kAllCorpora[] = {Corpus::Tencent, Corpus::NISQA, Corpus::IUBloomington,
                                         Corpus::PSTN, Corpus::Synthetic};

inline std::string_view to_string(Corpus c) {
  switch (c) {
  case Corpus::Tencent: return "Tencent";
  case Corpus::NISQA: return "NISQA";
  case Corpus::IUBloomington: return "IUBloomington";
  case Corpus::PSTN: return "PSTN";
  case Corpus::Synthetic: return "Synthetic";
  }
  return "?";
}

inline std::optional<Corpus> parse_corpus(std::string_view s) {
  const auto l = text::lower(text::trim(s));
  for (Corpus c : kAllCorpora)
    if (text::lower(to_string(c)) == l) return c;
  if (l == "iu" || l == "iu_bloomington" || l == "tub") return Corpus::IUBloomington;
  return std::nullopt;
}

struct MosRange {
  double lo;
  double hi;
};

/// Native rating scale of a corpus. IU Bloomington is rated 0-100.
constexpr MosRange mos_range(Corpus c) noexcept {
  return c == Corpus::IUBloomington ? MosRange{0.0, 100.0} : MosRange{1.0, 5.0};
}

inline bool in_range(double mos_raw, Corpus c) noexcept {
  const auto r = mos_range(c);
  return std::isfinite(mos_raw) && mos_raw >= r.lo && mos_raw <= r.hi;
}

/// Maps a corpus-native MOS onto [0, 1], the model's output range.
inline double normalize_label(double mos_raw, Corpus c) {
  if (!in_range(mos_raw, c))
    throw DataError("MOS " + text::format_double(mos_raw) + " outside the " +
                    std::string(to_string(c)) + " range");
  const auto r = mos_range(c);
  return (mos_raw - r.lo) / (r.hi - r.lo);
}

inline double denormalize_label(double unit, Corpus c) {
  const auto r = mos_range(c);
  return r.lo + unit * (r.hi - r.lo);
}

struct ClipRecord {
  std::string id;
  std::filesystem::path source;
  Corpus corpus = Corpus::Synthetic;
  double mos_raw = 0.0;
  std::optional<double> duration_s;
  std::string source_kind; // empty for audio rows; "MFCC"/"XLSR"/"Other" for feature rows
};

class Manifest {
public:
  Manifest() = default;

  /// Throws DataError on a duplicate id or an out-of-range label.
  void add(ClipRecord rec) {
    if (!in_range(rec.mos_raw, rec.corpus))
      throw DataError("clip '" + rec.id + "': mos_raw " + text::format_double(rec.mos_raw) +
                      " outside the " + std::string(to_string(rec.corpus)) + " range");
    if (!index_.emplace(rec.id, records_.size()).second)
      throw DataError("duplicate clip id '" + rec.id + "'");
    records_.push_back(std::move(rec));
  }

  const std::vector<ClipRecord> &records() const noexcept { return records_; }
  std::size_t size() const noexcept { return records_.size(); }
  bool empty() const noexcept { return records_.empty(); }

  const ClipRecord *find(std::string_view id) const {
    auto it = index_.find(std::string(id));
    return it == index_.end() ? nullptr : &records_[it->second];
  }

  const ClipRecord &at(std::string_view id) const {
    if (const auto *rec = find(id)) return *rec;
    throw DataError("unknown clip id '" + std::string(id) + "'");
  }

private:
  std::vector<ClipRecord> records_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Parses manifest text. Relative sources are resolved against `base_dir`.
inline Manifest parse_manifest(std::istream &in, const std::filesystem::path &base_dir = {}) {
  static const std::set<std::string> known = {"id", "source", "corpus", "mos_raw", "duration_s",
                                              "source_kind"};
  Manifest m;
  std::string line;
  std::size_t line_no = 0;
  std::map<std::string, std::size_t> col;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (text::trim(line).empty() || text::trim(line).starts_with('#')) continue;
    auto fields = text::split_delimited(line);
    if (!have_header) {
      for (std::size_t i = 0; i < fields.size(); ++i) {
        const auto name = text::lower(fields[i]);
        if (!known.contains(name))
          throw DataError("manifest line " + std::to_string(line_no) + ": unknown column '" +
                          fields[i] + "'");
        col[name] = i;
      }
      for (const char *req : {"id", "source", "corpus", "mos_raw"})
        if (!col.contains(req))
          throw DataError("manifest line " + std::to_string(line_no) + ": missing column '" +
                          req + "'");
      have_header = true;
      continue;
    }
    const auto where = "manifest line " + std::to_string(line_no) + ": ";
    if (fields.size() != col.size())
      throw DataError(where + "expected " + std::to_string(col.size()) + " fields, got " +
                      std::to_string(fields.size()));
    ClipRecord rec;
    rec.id = fields[col["id"]];
    if (rec.id.empty()) throw DataError(where + "empty id");
    rec.source = fields[col["source"]];
    if (!base_dir.empty() && rec.source.is_relative()) rec.source = base_dir / rec.source;
    auto corpus = parse_corpus(fields[col["corpus"]]);
    if (!corpus) throw DataError(where + "unknown corpus '" + fields[col["corpus"]] + "'");
    rec.corpus = *corpus;
    auto mos = text::parse_double(fields[col["mos_raw"]]);
    if (!mos) throw DataError(where + "bad mos_raw '" + fields[col["mos_raw"]] + "'");
    rec.mos_raw = *mos;
    if (col.contains("duration_s") && !fields[col["duration_s"]].empty()) {
      auto d = text::parse_double(fields[col["duration_s"]]);
      if (!d || *d < 0) throw DataError(where + "bad duration_s '" + fields[col["duration_s"]] + "'");
      rec.duration_s = *d;
    }
    if (col.contains("source_kind")) rec.source_kind = fields[col["source_kind"]];
    try {
      m.add(std::move(rec));
    } catch (const DataError &e) {
      throw DataError(where + e.what());
    }
  }
  if (!have_header) throw DataError("manifest has no header row");
  return m;
}

inline Manifest load_manifest(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  try {
    return parse_manifest(in, path.parent_path());
  } catch (const DataError &e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

/// Writes a manifest. Sources inside `base_dir` are written relative to it.
inline void write_manifest(std::ostream &out, const Manifest &m,
                           const std::filesystem::path &base_dir = {}) {
  const bool any_kind = std::ranges::any_of(m.records(), [](const auto &r) { return !r.source_kind.empty(); });
  out << "id,source,corpus,mos_raw,duration_s" << (any_kind ? ",source_kind" : "") << '\n';
  for (const auto &r : m.records()) {
    auto src = r.source;
    if (!base_dir.empty()) {
      auto rel = src.lexically_relative(base_dir);
      if (!rel.empty() && !rel.string().starts_with("..")) src = rel;
    }
    out << text::quote_if_needed(r.id) << ',' << text::quote_if_needed(src.generic_string()) << ','
        << to_string(r.corpus) << ',' << text::format_double(r.mos_raw) << ','
        << (r.duration_s ? text::format_double(*r.duration_s) : "");
    if (any_kind) out << ',' << r.source_kind;
    out << '\n';
  }
}

inline void save_manifest(const Manifest &m, const std::filesystem::path &path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write manifest " + path.string());
  write_manifest(out, m, path.parent_path());
}

// ---------------------------------------------------------------------------
// Dataset division

enum class SplitStrategy : std::uint8_t { AllCorpora, TencentPstnSubset, Challenge, Custom };

inline std::string_view to_string(SplitStrategy s) {
  switch (s) {
  case SplitStrategy::AllCorpora: return "AllCorpora";
  case SplitStrategy::TencentPstnSubset: return "TencentPstnSubset";
  case SplitStrategy::Challenge: return "Challenge";
  case SplitStrategy::Custom: return "Custom";
  }
  return "?";
}

inline std::optional<SplitStrategy> parse_split_strategy(std::string_view s) {
  const auto l = text::lower(text::trim(s));
  if (l == "all" || l == "allcorpora") return SplitStrategy::AllCorpora;
  if (l == "tencent-pstn" || l == "tencentpstnsubset") return SplitStrategy::TencentPstnSubset;
  if (l == "challenge") return SplitStrategy::Challenge;
  if (l == "custom") return SplitStrategy::Custom;
  return std::nullopt;
}

/// Train/validation id lists. Order is the shuffled order and is part of the
/// serialized form.
struct SplitPair {
  std::vector<std::string> train;
  std::vector<std::string> val;
  std::uint64_t seed = 0;
  SplitStrategy strategy = SplitStrategy::AllCorpora;

  friend bool operator==(const SplitPair &, const SplitPair &) = default;
};

inline constexpr double kTrainFraction = 0.85;

/// ceil(num/den * n) in integer arithmetic.
constexpr std::size_t ceil_fraction(std::size_t n, std::size_t num, std::size_t den) noexcept {
  return (n * num + den - 1) / den;
}

/// Pools every corpus, shuffles once and puts ceil(0.85 N) ids in train.
inline SplitPair split_all_corpora(const Manifest &m, std::uint64_t seed) {
  if (m.empty()) throw DataError("cannot split an empty manifest");
  std::vector<std::string> ids;
  ids.reserve(m.size());
  for (const auto &r : m.records()) ids.push_back(r.id);
  Rng rng(derive_seed(seed, 0x5b11));
  rng.shuffle(std::span(ids));
  const auto n_train = ceil_fraction(ids.size(), 85, 100);
  SplitPair out;
  out.seed = seed;
  out.strategy = SplitStrategy::AllCorpora;
  out.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
  out.val.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
  if (out.val.empty())
    log_warning("split of " + std::to_string(ids.size()) + " clip(s) leaves the validation set empty");
  return out;
}

/// Keeps only ids whose corpus is in `corpora`, preserving order. Train and
/// validation remain subsets of the input sides, so nothing crosses over.
inline SplitPair restrict_split(const SplitPair &split, const Manifest &m,
                                const std::set<Corpus> &corpora) {
  auto keep = [&](const std::vector<std::string> &ids) {
    std::vector<std::string> out;
    for (const auto &id : ids)
      if (corpora.contains(m.at(id).corpus)) out.push_back(id);
    return out;
  };
  SplitPair out;
  out.seed = split.seed;
  out.train = keep(split.train);
  out.val = keep(split.val);
  if (out.train.empty()) throw DataError("restricted split has no training clips");
  if (out.val.empty()) log_warning("restricted split has no validation clips");

  const std::set<Corpus> tencent_pstn = {Corpus::Tencent, Corpus::PSTN};
  if (corpora == tencent_pstn)
    out.strategy = SplitStrategy::TencentPstnSubset;
  else if (out.train.size() == split.train.size() && out.val.size() == split.val.size())
    out.strategy = split.strategy;
  else
    out.strategy = SplitStrategy::Custom;
  return out;
}

/// Per-corpus train fractions (percent) of the original challenge division.
/// Corpora not listed are excluded.
inline SplitPair split_challenge(const Manifest &m, std::uint64_t seed,
                                 const std::map<Corpus, unsigned> &train_percent = {
                                     {Corpus::Tencent, 80}, {Corpus::PSTN, 95}}) {
  SplitPair out;
  out.seed = seed;
  out.strategy = SplitStrategy::Challenge;
  for (const auto &[corpus, pct] : train_percent) {
    if (pct > 100) throw UsageError("train percentage above 100");
    std::vector<std::string> ids;
    for (const auto &r : m.records())
      if (r.corpus == corpus) ids.push_back(r.id);
    Rng rng(derive_seed(seed, 0xc0 + static_cast<std::uint64_t>(corpus)));
    rng.shuffle(std::span(ids));
    const auto n_train = ceil_fraction(ids.size(), pct, 100);
    out.train.insert(out.train.end(), ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
    out.val.insert(out.val.end(), ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
  }
  if (out.train.empty()) throw DataError("challenge split has no training clips");
  return out;
}

namespace detail {
inline void write_id_list(const std::filesystem::path &path, const SplitPair &s,
                          const std::vector<std::string> &ids, std::string_view side) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "# side=" << side << '\n'
      << "# seed=" << s.seed << '\n'
      << "# strategy=" << to_string(s.strategy) << '\n';
  for (const auto &id : ids) out << id << '\n';
}

struct IdList {
  std::vector<std::string> ids;
  std::map<std::string, std::string> meta;
};

inline IdList read_id_list(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  IdList out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    auto t = text::trim(line);
    if (t.empty()) continue;
    if (t.starts_with('#')) {
      t.remove_prefix(1);
      if (auto eq = t.find('='); eq != std::string_view::npos)
        out.meta[std::string(text::trim(t.substr(0, eq)))] = std::string(text::trim(t.substr(eq + 1)));
      continue;
    }
    out.ids.emplace_back(t);
  }
  return out;
}
} // namespace detail

/// Writes `train.txt` and `val.txt` into `dir`.
inline void save_split(const SplitPair &s, const std::filesystem::path &dir) {
  std::filesystem::create_directories(dir);
  detail::write_id_list(dir / "train.txt", s, s.train, "train");
  detail::write_id_list(dir / "val.txt", s, s.val, "val");
}

inline SplitPair load_split(const std::filesystem::path &dir) {
  auto train = detail::read_id_list(dir / "train.txt");
  auto val = detail::read_id_list(dir / "val.txt");
  SplitPair s;
  s.train = std::move(train.ids);
  s.val = std::move(val.ids);
  if (auto it = train.meta.find("seed"); it != train.meta.end()) {
    auto v = text::parse_uint(it->second);
    if (!v) throw DataError("bad seed in " + (dir / "train.txt").string());
    s.seed = *v;
  }
  if (auto it = train.meta.find("strategy"); it != train.meta.end()) {
    auto st = parse_split_strategy(it->second);
    if (!st) throw DataError("bad strategy in " + (dir / "train.txt").string());
    s.strategy = *st;
  }
  std::unordered_set<std::string> seen(s.train.begin(), s.train.end());
  for (const auto &id : s.val)
    if (seen.contains(id)) throw DataError("clip '" + id + "' is in both train and val");
  return s;
}

/// Checks that every id of the split exists in the manifest.
inline void validate_split(const SplitPair &s, const Manifest &m) {
  for (const auto *side : {&s.train, &s.val})
    for (const auto &id : *side)
      if (!m.find(id)) throw DataError("split references unknown clip id '" + id + "'");
}

} // namespace mosqa
