// SPDX-License-Identifier: Apache-2.0
#pragma once

// Quality-prediction metrics on the 1-5 MOS scale: RMSE, Pearson and
// Spearman correlation, and RMSE after a least-squares cubic mapping of
// predictions onto labels (RMSE-S).

#include <algorithm>
#include <array>
#include <cmath>
#include <iomanip>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <sstream>
#include <span>
#include <string>
#include <vector>

#include "mosqa/error.hpp"
#include "mosqa/text.hpp"

namespace mosqa {

namespace detail {
inline void check_lengths(std::span<const double> a, std::span<const double> b, const char *what) {
  if (a.size() != b.size())
    throw DataError(std::string(what) + ": length mismatch (" + std::to_string(a.size()) + " vs " +
                    std::to_string(b.size()) + ")");
}
} // namespace detail

inline double mse(std::span<const double> pred, std::span<const double> label) {
  detail::check_lengths(pred, label, "mse");
  if (pred.empty()) throw DataError("mse: empty input");
  double s = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - label[i];
    s += d * d;
  }
  return s / static_cast<double>(pred.size());
}

inline double rmse(std::span<const double> pred, std::span<const double> label) {
  return std::sqrt(mse(pred, label));
}

/// Sample Pearson correlation; nullopt when n < 2 or either side is constant.
inline std::optional<double> pcc(std::span<const double> x, std::span<const double> y) {
  detail::check_lengths(x, y, "pcc");
  const std::size_t n = x.size();
  if (n < 2) return std::nullopt;
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = x[i] - mx, dy = y[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0) return std::nullopt;
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

/// 1-based ranks; tied values share the mean of the ranks they span.
inline std::vector<double> fractional_ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::ranges::stable_sort(order, [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i + 1;
    while (j < order.size() && v[order[j]] == v[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + 1 + j); // mean of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) ranks[order[k]] = r;
    i = j;
  }
  return ranks;
}

/// Spearman correlation: Pearson correlation of fractional ranks.
inline std::optional<double> srcc(std::span<const double> x, std::span<const double> y) {
  detail::check_lengths(x, y, "srcc");
  if (x.size() < 2) return std::nullopt;
  const auto rx = fractional_ranks(x);
  const auto ry = fractional_ranks(y);
  return pcc(rx, ry);
}

struct PolyFit {
  double rmse = 0.0;
  int order = -1;        // polynomial degree used; -1 when no fit was made
  bool reduced = false;  // fewer than 4 points or rank-deficient design
  std::array<double, 4> coeffs{}; // in the scaled variable s = (pred - center) / scale
  double center = 0.0;
  double scale = 1.0;

  double map(double pred) const {
    if (order < 0) return pred;
    const double s = (pred - center) / scale;
    double acc = 0.0;
    for (int k = order; k >= 0; --k) acc = acc * s + coeffs[static_cast<std::size_t>(k)];
    return acc;
  }
};

/// Least-squares fit label ~ a0 + a1 p + a2 p^2 + a3 p^3, then RMSE of the
/// mapped predictions. Predictions are centered and scaled to [-1, 1] and the
/// normal equations are column-equilibrated before a pivot-checked Cholesky
/// solve; on a vanishing pivot the degree is lowered.
inline PolyFit rmse_s(std::span<const double> pred, std::span<const double> label, int max_order = 3) {
  detail::check_lengths(pred, label, "rmse_s");
  if (pred.empty()) throw DataError("rmse_s: empty input");
  PolyFit fit;
  const std::size_t n = pred.size();
  if (n < 4 || max_order < 0) {
    fit.rmse = rmse(pred, label);
    fit.reduced = true;
    return fit;
  }
  const auto [lo, hi] = std::ranges::minmax(pred);
  fit.center = 0.5 * (lo + hi);
  fit.scale = hi > lo ? 0.5 * (hi - lo) : 1.0;

  for (int order = std::min(max_order, 3); order >= 0; --order) {
    const auto m = static_cast<std::size_t>(order + 1);
    std::array<std::array<double, 4>, 4> g{};
    std::array<double, 4> rhs{};
    for (std::size_t i = 0; i < n; ++i) {
      const double s = (pred[i] - fit.center) / fit.scale;
      std::array<double, 4> row{1.0, s, s * s, s * s * s};
      for (std::size_t a = 0; a < m; ++a) {
        rhs[a] += row[a] * label[i];
        for (std::size_t b = 0; b < m; ++b) g[a][b] += row[a] * row[b];
      }
    }
    std::array<double, 4> d{};
    for (std::size_t a = 0; a < m; ++a) d[a] = g[a][a] > 0 ? 1.0 / std::sqrt(g[a][a]) : 0.0;
    for (std::size_t a = 0; a < m; ++a) {
      rhs[a] *= d[a];
      for (std::size_t b = 0; b < m; ++b) g[a][b] *= d[a] * d[b];
    }
    // Cholesky, in place in the lower triangle.
    bool ok = true;
    for (std::size_t j = 0; j < m && ok; ++j) {
      double diag = g[j][j];
      for (std::size_t k = 0; k < j; ++k) diag -= g[j][k] * g[j][k];
      if (!(diag > 1e-12)) {
        ok = false;
        break;
      }
      g[j][j] = std::sqrt(diag);
      for (std::size_t i = j + 1; i < m; ++i) {
        double v = g[i][j];
        for (std::size_t k = 0; k < j; ++k) v -= g[i][k] * g[j][k];
        g[i][j] = v / g[j][j];
      }
    }
    if (!ok) continue;
    std::array<double, 4> z{};
    for (std::size_t i = 0; i < m; ++i) {
      double v = rhs[i];
      for (std::size_t k = 0; k < i; ++k) v -= g[i][k] * z[k];
      z[i] = v / g[i][i];
    }
    for (std::size_t i = m; i-- > 0;) {
      double v = z[i];
      for (std::size_t k = i + 1; k < m; ++k) v -= g[k][i] * fit.coeffs[k];
      fit.coeffs[i] = v / g[i][i];
    }
    for (std::size_t a = 0; a < m; ++a) fit.coeffs[a] *= d[a];
    for (std::size_t a = m; a < 4; ++a) fit.coeffs[a] = 0.0;
    fit.order = order;
    fit.reduced = order < std::min(max_order, 3);
    double s2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double r = fit.map(pred[i]) - label[i];
      s2 += r * r;
    }
    fit.rmse = std::sqrt(s2 / static_cast<double>(n));
    return fit;
  }
  // Unreachable for finite input: the constant fit always has a positive pivot.
  fit.rmse = rmse(pred, label);
  fit.reduced = true;
  return fit;
}

// ---------------------------------------------------------------------------
// Reports

struct MetricsReport {
  std::string grouping = "all";
  std::size_t n = 0;
  double rmse = 0.0;
  std::optional<double> pcc;
  std::optional<double> srcc;
  double rmse_s = 0.0;
  int rmse_s_order = -1;
  bool rmse_s_reduced = false;

  double mse() const noexcept { return rmse * rmse; }
};

inline MetricsReport compute_report(std::span<const double> pred, std::span<const double> label,
                                    std::string grouping = "all") {
  MetricsReport r;
  r.grouping = std::move(grouping);
  r.n = pred.size();
  r.rmse = rmse(pred, label);
  r.pcc = pcc(pred, label);
  r.srcc = srcc(pred, label);
  const auto fit = rmse_s(pred, label);
  r.rmse_s = fit.rmse;
  r.rmse_s_order = fit.order;
  r.rmse_s_reduced = fit.reduced;
  return r;
}

/// One report per group (sorted by name) followed by the pooled "all" report.
/// Each group gets its own cubic for RMSE-S.
inline std::vector<MetricsReport> grouped_reports(std::span<const double> pred, std::span<const double> label,
                                                  std::span<const std::string> groups) {
  detail::check_lengths(pred, label, "grouped_reports");
  if (groups.size() != pred.size()) throw DataError("grouped_reports: group labels length mismatch");
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> by_group;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    auto &[p, l] = by_group[groups[i]];
    p.push_back(pred[i]);
    l.push_back(label[i]);
  }
  std::vector<MetricsReport> out;
  for (const auto &[name, pl] : by_group) out.push_back(compute_report(pl.first, pl.second, name));
  out.push_back(compute_report(pred, label, "all"));
  return out;
}

namespace detail {
inline std::string fmt_metric(std::optional<double> v, int precision = 4) {
  if (!v) return "undefined";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << *v;
  return os.str();
}
} // namespace detail

inline void write_report_table(std::ostream &out, std::span<const MetricsReport> reports) {
  out << std::left << std::setw(16) << "grouping" << std::right << std::setw(7) << "n" << std::setw(10)
      << "RMSE" << std::setw(11) << "PCC" << std::setw(11) << "SRCC" << std::setw(10) << "RMSE-S" << '\n';
  for (const auto &r : reports) {
    out << std::left << std::setw(16) << r.grouping << std::right << std::setw(7) << r.n << std::setw(10)
        << detail::fmt_metric(r.rmse) << std::setw(11) << detail::fmt_metric(r.pcc) << std::setw(11)
        << detail::fmt_metric(r.srcc) << std::setw(10) << detail::fmt_metric(r.rmse_s)
        << (r.rmse_s_reduced ? " *" : "") << '\n';
  }
  if (std::ranges::any_of(reports, [](const auto &r) { return r.rmse_s_reduced; }))
    out << "* RMSE-S used a polynomial of degree below 3 (too few points or rank-deficient)\n";
}

/// Columns: grouping,n,rmse,pcc,srcc,rmse_s,rmse_s_order. Undefined
/// correlations are written as "undefined".
inline void write_report_csv(std::ostream &out, std::span<const MetricsReport> reports) {
  out << "grouping,n,rmse,pcc,srcc,rmse_s,rmse_s_order\n";
  auto num = [](std::optional<double> v) { return v ? text::format_double(*v) : std::string("undefined"); };
  for (const auto &r : reports)
    out << text::quote_if_needed(r.grouping) << ',' << r.n << ',' << num(r.rmse) << ',' << num(r.pcc) << ','
        << num(r.srcc) << ',' << num(r.rmse_s) << ',' << r.rmse_s_order << '\n';
}

} // namespace mosqa
