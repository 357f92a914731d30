// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <numbers>
#include <thread>

#include "mosqa/mfcc.hpp"
#include "mosqa/rng.hpp"
#include "support/mel_oracle.hpp"

namespace mosqa {
namespace {

std::vector<double> sine(double hz, std::size_t n, double amplitude = 1.0, double sr = 16000) {
  std::vector<double> x(n);
  for (std::size_t i = 0; i < n; ++i) x[i] = amplitude * std::sin(2.0 * std::numbers::pi * hz * static_cast<double>(i) / sr);
  return x;
}

std::vector<double> noise(Rng &rng, std::size_t n, double scale = 0.3) {
  std::vector<double> x(n);
  for (auto &v : x) v = scale * rng.normal();
  return x;
}

double max_oracle_diff(const std::vector<double> &x, const MfccConfig &cfg) {
  MfccExtractor ex(cfg);
  const auto lm = ex.log_mel(x);
  testing::oracle::MelParams mp;
  mp.sample_rate = cfg.sample_rate;
  mp.n_fft = static_cast<int>(cfg.n_fft);
  mp.hop = static_cast<int>(cfg.hop);
  mp.n_mels = static_cast<int>(cfg.n_mels);
  mp.log_floor = cfg.log_floor;
  const auto ref = testing::oracle::log_mel(x, mp);
  EXPECT_EQ(ref.size(), lm.rows);
  double worst = 0.0;
  for (std::size_t t = 0; t < lm.rows; ++t)
    for (std::size_t m = 0; m < lm.cols; ++m) worst = std::max(worst, std::abs(lm(t, m) - ref[t][m]));
  return worst;
}

TEST(Mfcc, SilenceGivesIdenticalFloorFrames) {
  const std::vector<double> zeros(16000, 0.0);
  MfccExtractor ex(MfccConfig{});
  const auto lm = ex.log_mel(zeros);
  ASSERT_EQ(lm.rows, 81u);
  for (double v : lm.data) ASSERT_EQ(v, std::log(1e-10));
  const auto fm = ex.compute(zeros);
  ASSERT_EQ(fm.frames(), 81u);
  for (std::size_t t = 1; t < fm.frames(); ++t)
    ASSERT_EQ(std::memcmp(fm.row(t).data(), fm.row(0).data(), fm.channels() * sizeof(float)), 0);
}

TEST(Mfcc, ShapeAndMetadata) {
  Rng rng(1);
  MfccConfig cfg;
  cfg.n_mfcc = 13;
  const auto fm = compute_mfcc(noise(rng, 3210), cfg);
  EXPECT_EQ(fm.channels(), 13u);
  EXPECT_EQ(fm.frames(), 1u + 3210 / 200);
  EXPECT_EQ(fm.source_kind(), SourceKind::MFCC);
  EXPECT_DOUBLE_EQ(fm.frame_stride_s(), 0.0125);
  EXPECT_EQ(compute_mfcc(noise(rng, 1)).frames(), 1u);
}

TEST(Mfcc, SinePeaksInFilterContaining1kHz) {
  MfccConfig cfg;
  MfccExtractor ex(cfg);
  const auto x = sine(1000.0, 16000);
  const auto lm = ex.log_mel(x);
  const std::size_t bin = 1000 * cfg.n_fft / cfg.sample_rate; // 25, exactly 1 kHz
  for (std::size_t t = 2; t + 2 < lm.rows; ++t) {
    std::size_t best = 0;
    for (std::size_t m = 1; m < lm.cols; ++m)
      if (lm(t, m) > lm(t, best)) best = m;
    ASSERT_GT(ex.filterbank()(bin, best), 0.0) << "frame " << t << " peaks in filter " << best;
  }
  EXPECT_LT(max_oracle_diff(std::vector<double>(x.begin(), x.begin() + 1600), cfg), 1e-4);
}

TEST(Mfcc, MatchesNaiveDftOracle) {
  Rng rng(2);
  MfccConfig cfg;
  for (std::size_t n : {1u, 3u, 150u, 401u, 2000u}) EXPECT_LT(max_oracle_diff(noise(rng, n), cfg), 1e-4) << n;

  MfccConfig small;
  small.n_fft = 64;
  small.hop = 16;
  small.n_mels = 20;
  small.n_mfcc = 10;
  small.sample_rate = 8000;
  for (int i = 0; i < 5; ++i) EXPECT_LT(max_oracle_diff(noise(rng, 10 + rng.below(500)), small), 1e-4);
}

TEST(Mfcc, DeterministicAcrossInstancesAndThreads) {
  Rng rng(3);
  const auto x = noise(rng, 8000);
  const auto a = compute_mfcc(x);
  std::vector<FeatureMatrix> results(4);
  {
    std::vector<std::jthread> pool;
    for (auto &r : results) pool.emplace_back([&] { r = compute_mfcc(x); });
  }
  for (const auto &r : results)
    ASSERT_EQ(std::memcmp(r.data().data(), a.data().data(), a.data().size() * sizeof(float)), 0);
}

TEST(Mfcc, AmplitudeScalingShiftsLogMel) {
  Rng rng(4);
  const auto x = noise(rng, 4000);
  MfccExtractor ex(MfccConfig{});
  const auto base = ex.log_mel(x);
  for (double k : {0.25, 3.0, 17.5}) {
    std::vector<double> y(x);
    for (auto &v : y) v *= k;
    const auto scaled = ex.log_mel(y);
    const double floor = std::log(1e-10);
    for (std::size_t i = 0; i < base.data.size(); ++i) {
      if (base.data[i] == floor || scaled.data[i] == floor) continue;
      ASSERT_NEAR(scaled.data[i] - base.data[i], std::log(k * k), 1e-9);
    }
  }
}

TEST(Mfcc, RejectsBadInput) {
  MfccExtractor ex(MfccConfig{});
  EXPECT_THROW(ex.compute(std::vector<double>{}), DataError);
  EXPECT_THROW(ex.compute(std::vector<double>{0.1, std::nan(""), 0.2}), DataError);
  EXPECT_THROW(ex.compute(std::vector<double>{0.1, INFINITY}), DataError);
  EXPECT_THROW(ex.compute(Waveform{8000, std::vector<double>(100, 0.0)}), DataError);
  EXPECT_NO_THROW(ex.compute(Waveform{16000, std::vector<double>(100, 0.0)}));
}

TEST(MfccConfig, Validation) {
  auto bad = [](auto mutate) {
    MfccConfig c;
    mutate(c);
    return c;
  };
  EXPECT_THROW(bad([](MfccConfig &c) { c.hop = 401; }).validate(), UsageError);
  EXPECT_THROW(bad([](MfccConfig &c) { c.n_mfcc = 129; }).validate(), UsageError);
  EXPECT_THROW(bad([](MfccConfig &c) { c.log_floor = 0; }).validate(), UsageError);
  EXPECT_THROW(bad([](MfccConfig &c) { c.hop = 0; }).validate(), UsageError);
  EXPECT_THROW(MfccExtractor(bad([](MfccConfig &c) { c.n_mels = 0; })), UsageError);
}

TEST(MfccParts, DctIsOrthonormal) {
  const auto d = dct_matrix(24, 24);
  for (std::size_t a = 0; a < 24; ++a)
    for (std::size_t b = 0; b < 24; ++b) {
      double dot = 0.0;
      for (std::size_t n = 0; n < 24; ++n) dot += d(a, n) * d(b, n);
      ASSERT_NEAR(dot, a == b ? 1.0 : 0.0, 1e-12);
    }
}

TEST(MfccParts, ReflectPadding) {
  // numpy.pad(..., mode="reflect") of [0,1,2,3] by 5 on each side.
  const std::size_t expected[] = {1, 2, 3, 2, 1, 0, 1, 2, 3, 2, 1, 0, 1, 2};
  for (std::ptrdiff_t i = -5; i < 9; ++i) EXPECT_EQ(reflect_index(i, 4), expected[i + 5]) << i;
  EXPECT_EQ(reflect_index(-3, 1), 0u);
}

TEST(MfccParts, FilterbankShape) {
  const auto fb = mel_filterbank(MfccConfig{});
  EXPECT_EQ(fb.rows, 201u);
  EXPECT_EQ(fb.cols, 128u);
  for (double w : fb.data) ASSERT_TRUE(w >= 0.0 && w <= 1.0);
  for (std::size_t m = 0; m < 128; ++m) EXPECT_EQ(fb(0, m), 0.0);
}

} // namespace
} // namespace mosqa
