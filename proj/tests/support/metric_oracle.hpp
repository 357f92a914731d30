// SPDX-License-Identifier: Apache-2.0
#pragma once

// Definitional metric implementations for cross-checking. Quadratic-time
// ranks, long-double sums and a QR least-squares solve; none of this shares
// code with the library.

#include <Eigen/Dense>

#include <cmath>
#include <optional>
#include <vector>

namespace mosqa::testing::oracle {

inline double rmse(const std::vector<double> &p, const std::vector<double> &l) {
  long double s = 0;
  for (std::size_t i = 0; i < p.size(); ++i) s += (long double)(p[i] - l[i]) * (p[i] - l[i]);
  return static_cast<double>(std::sqrt(s / p.size()));
}

inline std::optional<double> pcc(const std::vector<double> &x, const std::vector<double> &y) {
  const std::size_t n = x.size();
  if (n < 2) return std::nullopt;
  long double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= n;
  my /= n;
  long double cov = 0, vx = 0, vy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    cov += (x[i] - mx) * (y[i] - my);
    vx += (x[i] - mx) * (x[i] - mx);
    vy += (y[i] - my) * (y[i] - my);
  }
  if (vx == 0 || vy == 0) return std::nullopt;
  return static_cast<double>(cov / std::sqrt(vx * vy));
}

/// rank_i = 1 + #{x_j < x_i} + (#{x_j == x_i, j != i}) / 2
inline std::vector<double> ranks(const std::vector<double> &x) {
  std::vector<double> r(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    std::size_t less = 0, equal = 0;
    for (std::size_t j = 0; j < x.size(); ++j) {
      if (x[j] < x[i]) ++less;
      else if (x[j] == x[i] && j != i) ++equal;
    }
    r[i] = 1.0 + static_cast<double>(less) + 0.5 * static_cast<double>(equal);
  }
  return r;
}

inline std::optional<double> srcc(const std::vector<double> &x, const std::vector<double> &y) {
  return pcc(ranks(x), ranks(y));
}

/// Residual RMS of the least-squares cubic label ~ poly(pred), via
/// column-pivoted Householder QR on the raw Vandermonde matrix.
inline double rmse_s(const std::vector<double> &p, const std::vector<double> &l) {
  const auto n = static_cast<Eigen::Index>(p.size());
  Eigen::MatrixXd v(n, 4);
  Eigen::VectorXd y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double x = p[static_cast<std::size_t>(i)];
    v(i, 0) = 1.0;
    v(i, 1) = x;
    v(i, 2) = x * x;
    v(i, 3) = x * x * x;
    y(i) = l[static_cast<std::size_t>(i)];
  }
  Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(v);
  qr.setThreshold(1e-10);
  const Eigen::VectorXd coef = qr.solve(y);
  return std::sqrt((v * coef - y).squaredNorm() / static_cast<double>(n));
}

} // namespace mosqa::testing::oracle
