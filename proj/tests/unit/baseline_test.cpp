#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "mscrnn/baseline.hpp"

using namespace mscrnn;
using namespace mscrnn::baseline;

namespace {

radar::IQSeries from_displacement(const std::vector<double>& d) {
  Rng rng(0);
  return radar::synthesize(d, std::vector<double>(d.size(), 1.0), 0.0, radar::kSampleRateHz, rng);
}

}  // namespace

TEST(Unwrap, ConstantVelocitySlopeWithinOnePercent) {
  for (double v : {0.4, 1.5, -2.5}) {
    radar::GeneratorConfig g;
    g.snr_db = 400.0;
    g.fixed_velocity = v;
    const auto s = radar::gen_source(radar::SourceKind::nonhuman, 4.0, 3, g);
    const auto d = unwrap_phase(s);
    const double slope = d.back() / (static_cast<double>(d.size() - 1) / s.sample_rate_hz);
    EXPECT_NEAR(slope, v, 0.01 * std::abs(v));
  }
}

TEST(Unwrap, StaticTargetHasNoDisplacement) {
  const auto d = unwrap_phase(from_displacement(std::vector<double>(300, 0.013)));
  for (double x : d) EXPECT_NEAR(x, 0.0, 1e-12);
}

TEST(Unwrap, OutAndBackReturnsToZero) {
  // 1 m/s out for one second, then back at the same speed.
  std::vector<double> d;
  for (int t = 0; t <= 256; ++t) d.push_back(t / 256.0);
  for (int t = 255; t >= 0; --t) d.push_back(t / 256.0);
  const auto u = unwrap_phase(from_displacement(d));
  EXPECT_NEAR(u[256], 1.0, 1e-9);
  EXPECT_NEAR(u.back(), 0.0, 1e-9);
  for (std::size_t t = 0; t < d.size(); ++t) EXPECT_NEAR(u[t], d[t] - d[0], 1e-9);
}

TEST(Unwrap, RejectsBadInput) {
  const std::vector<double> a{1.0, 2.0}, b{1.0};
  EXPECT_THROW(unwrap_phase(a, b), ConfigError);
  EXPECT_THROW(unwrap_phase(std::vector<double>{}, std::vector<double>{}), ConfigError);
}

TEST(WindowDisplacements, NetChangePerWindow) {
  const std::vector<double> d{0.0, 1.0, 3.0, 6.0, 10.0, 15.0, 21.0};
  EXPECT_EQ(window_displacements(d, 3), (std::vector<double>{3.0, 12.0}));
  EXPECT_EQ(window_displacements(d, 1), (std::vector<double>{0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0}));
  EXPECT_TRUE(window_displacements(d, 8).empty());
}

TEST(Detector, PerWindowThresholdExample) {
  DetectorConfig c;
  c.threshold_m = 0.3;
  c.M = 3;
  c.N = 4;
  EXPECT_NEAR(c.per_window_threshold(), 0.225, 1e-15);
}

TEST(Detector, OneOfOneIsPlainThresholding) {
  DetectorConfig c{0.5, 0.2, 1, 1};
  const std::vector<double> d{0.1, -0.25, 0.2, 0.0, 0.3};
  EXPECT_EQ(m_of_n_detect(d, c), (std::vector<bool>{false, true, true, false, true}));
}

TEST(Detector, ThreeOfFourSlidingWindows) {
  DetectorConfig c{0.5, 0.5, 3, 4};  // per-window 0.375
  const std::vector<double> d{0.375, -0.4, 0.0, 0.375, 0.0, 0.0, 0.375};
  EXPECT_EQ(m_of_n_detect(d, c), (std::vector<bool>{true, false, false, false}));
}

TEST(Detector, ZeroDisplacementsNeverDetect) {
  const DetectorConfig c;
  EXPECT_EQ(detection_count(std::vector<double>(100, 0.0), c), 0u);
}

TEST(Detector, FewerThanNWindowsGivesNoDecisions) {
  const DetectorConfig c;
  EXPECT_TRUE(m_of_n_detect(std::vector<double>{1.0, 1.0, 1.0}, c).empty());
}

TEST(Detector, RejectsInvalidConfig) {
  EXPECT_THROW(m_of_n_detect(std::vector<double>{}, DetectorConfig{0.5, 0.3, 5, 4}), ConfigError);
  EXPECT_THROW(m_of_n_detect(std::vector<double>{}, DetectorConfig{0.5, 0.3, 0, 4}), ConfigError);
  EXPECT_THROW(m_of_n_detect(std::vector<double>{}, DetectorConfig{0.5, 0.0, 3, 4}), ConfigError);
}

TEST(Detector, RaisingThresholdNeverAddsDetections) {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> d(5 + rng() % 60);
    for (auto& x : d) x = gaussian(rng, 0.2);
    DetectorConfig c{0.5, uniform(rng, 0.01, 0.5), 1 + rng() % 4, 4};
    c.M = std::min(c.M, c.N);
    std::size_t prev = detection_count(d, c);
    for (int step = 0; step < 10; ++step) {
      c.threshold_m *= 1.2;
      const std::size_t now = detection_count(d, c);
      EXPECT_LE(now, prev);
      prev = now;
    }
  }
}

TEST(Calibrate, ExponentialTailMatchesAnalyticQuantile) {
  // |d| ~ Exp(mean b): CCDF(x) = exp(-x / b), quantile at p is -b ln p.
  const double b = 0.01;
  Rng rng(33);
  std::vector<double> mags(200000);
  for (auto& m : mags) m = -b * std::log(uniform(rng, 0.0, 1.0) + 1e-300);
  const double p = per_window_fa_probability(1.0 / kSecondsPerWeek, 0.5);
  const double analytic = -b * std::log(p);
  const double thr = calibrate_threshold(mags, 1.0 / kSecondsPerWeek, 0.5);
  EXPECT_NEAR(thr, analytic, 0.15 * analytic);
}

TEST(Calibrate, LowerRateGivesHigherThreshold) {
  Rng rng(34);
  std::vector<double> mags(5000);
  for (auto& m : mags) m = std::abs(gaussian(rng, 0.02));
  const double week = calibrate_threshold(mags, 1.0 / kSecondsPerWeek, 0.5);
  const double month = calibrate_threshold(mags, 1.0 / kSecondsPerMonth, 0.5);
  EXPECT_GT(month, week);
}

TEST(Calibrate, FrequentAlarmsInterpolateWithinData) {
  Rng rng(35);
  std::vector<double> mags(1000);
  for (auto& m : mags) m = -0.01 * std::log(uniform(rng, 0.0, 1.0) + 1e-300);
  // p = 0.05 per window is inside the fitted tail.
  const double thr = calibrate_threshold(mags, 0.1, 0.5);
  EXPECT_LE(thr, *std::max_element(mags.begin(), mags.end()));
}

TEST(Calibrate, Errors) {
  EXPECT_THROW(calibrate_threshold(std::vector<double>(99, 0.1), 1e-6, 0.5), ConfigError);
  EXPECT_THROW(calibrate_threshold(std::vector<double>(100, 0.1), 0.0, 0.5), ConfigError);
  EXPECT_THROW(calibrate_threshold(std::vector<double>(100, 0.1), 2.0, 0.5), ConfigError);
  EXPECT_THROW(calibrate_threshold(std::vector<double>(100, 0.1), 1e-6, 0.5), NumericError);
}

TEST(Calibrate, ClutterWindowsSitWellBelowTheWeeklyThreshold) {
  // The generator's clutter and the detector's calibration agree: the mean
  // per-window magnitude is far under the threshold it produces.
  const radar::GeneratorConfig g;
  std::vector<double> mags;
  for (std::uint64_t s = 0; s < 20; ++s)
    for (double d : series_window_displacements(radar::gen_clutter(30.0, s, g), 0.5)) mags.push_back(std::abs(d));
  const double thr = calibrate_threshold(mags, 1.0 / kSecondsPerWeek, 0.5);
  double mean = 0.0;
  for (double m : mags) mean += m;
  mean /= static_cast<double>(mags.size());
  EXPECT_LT(mean, thr);
}
