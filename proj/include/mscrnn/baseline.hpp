#pragma once

// Shallow comparator: unwrapped-phase displacement with an M-out-of-N
// sliding-window detector. Thresholds are set from the clutter displacement
// tail: fit ln(CCDF) against displacement on the top decile and extrapolate
// to the per-window false-alarm probability.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <span>
#include <vector>

#include "mscrnn/radar_data.hpp"

namespace mscrnn::baseline {

struct DetectorConfig {
  double window_len_s = 0.5;
  double threshold_m = 0.3;
  std::size_t M = 3;
  std::size_t N = 4;

  // Each window is tested against threshold * M / N.
  double per_window_threshold() const {
    return threshold_m * static_cast<double>(M) / static_cast<double>(N);
  }
};

inline void validate(const DetectorConfig& c) {
  require(c.M >= 1 && c.M <= c.N, "DetectorConfig: need 1 <= M <= N");
  require(c.threshold_m > 0.0, "DetectorConfig: threshold must be positive");
  require(c.window_len_s > 0.0, "DetectorConfig: window length must be positive");
}

// Cumulative displacement in meters, one value per sample (first is 0).
inline std::vector<double> unwrap_phase(std::span<const double> i, std::span<const double> q) {
  require(i.size() == q.size(), "unwrap_phase: I/Q length mismatch");
  require(!i.empty(), "unwrap_phase: empty series");
  std::vector<double> out(i.size(), 0.0);
  const double scale = radar::kWavelength / (4.0 * std::numbers::pi);
  double prev = std::atan2(q[0], i[0]);
  double acc = 0.0;
  for (std::size_t t = 1; t < i.size(); ++t) {
    const double th = std::atan2(q[t], i[t]);
    double d = th - prev;
    // wrap into (-pi, pi]
    d = std::remainder(d, 2.0 * std::numbers::pi);
    if (d <= -std::numbers::pi) d += 2.0 * std::numbers::pi;
    acc += d;
    out[t] = acc * scale;
    prev = th;
  }
  return out;
}

inline std::vector<double> unwrap_phase(const radar::IQSeries& s) { return unwrap_phase(s.i, s.q); }

// Net displacement over consecutive non-overlapping windows of `window_samples`.
inline std::vector<double> window_displacements(std::span<const double> displacement,
                                                std::size_t window_samples) {
  require(window_samples >= 1, "window_displacements: window must be >= 1 sample");
  std::vector<double> out;
  for (std::size_t s = 0; s + window_samples <= displacement.size(); s += window_samples) {
    const double start = s == 0 ? displacement[0] : displacement[s - 1];
    out.push_back(displacement[s + window_samples - 1] - start);
  }
  return out;
}

// Per-window displacements of a series at `window_len_s`.
inline std::vector<double> series_window_displacements(const radar::IQSeries& s, double window_len_s) {
  const auto n = static_cast<std::size_t>(std::llround(window_len_s * s.sample_rate_hz));
  return window_displacements(unwrap_phase(s), n);
}

struct TailFit {
  double intercept = 0.0;  // ln CCDF = intercept + slope * x
  double slope = 0.0;
  std::size_t points = 0;
};

inline TailFit fit_log_ccdf_tail(std::span<const double> magnitudes, double tail_fraction = 0.1) {
  std::vector<double> v(magnitudes.begin(), magnitudes.end());
  for (auto& x : v) x = std::abs(x);
  std::sort(v.begin(), v.end(), std::greater<>());
  const std::size_t n = v.size();
  const std::size_t m = std::max<std::size_t>(2, static_cast<std::size_t>(std::ceil(tail_fraction * static_cast<double>(n))));
  // Largest value has empirical CCDF 1/n (fraction at or above it).
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t r = 0; r < m; ++r) {
    const double x = v[r];
    const double y = std::log(static_cast<double>(r + 1) / static_cast<double>(n));
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  const double md = static_cast<double>(m);
  const double var = sxx - sx * sx / md;
  if (!(var > 1e-300 * md)) throw NumericError("calibrate_threshold: degenerate tail (all values equal)");
  TailFit f;
  f.slope = (sxy - sx * sy / md) / var;
  f.intercept = (sy - f.slope * sx) / md;
  f.points = m;
  if (!(f.slope < 0.0)) throw NumericError("calibrate_threshold: tail fit has non-negative slope");
  return f;
}

// Per-window false-alarm probability for a rate in alarms per second.
inline double per_window_fa_probability(double fa_per_s, double window_len_s) {
  return fa_per_s * window_len_s;
}

inline constexpr double kSecondsPerWeek = 7.0 * 24.0 * 3600.0;
inline constexpr double kSecondsPerMonth = 30.0 * 24.0 * 3600.0;

inline double calibrate_threshold(std::span<const double> clutter_displacements,
                                  double target_fa_per_s, double window_len_s) {
  require(clutter_displacements.size() >= 100, "calibrate_threshold: need >= 100 clutter windows");
  require(target_fa_per_s > 0.0, "calibrate_threshold: target rate must be positive");
  const double p = per_window_fa_probability(target_fa_per_s, window_len_s);
  require(p < 1.0, "calibrate_threshold: target rate implies p >= 1 per window");
  const TailFit f = fit_log_ccdf_tail(clutter_displacements);
  return (std::log(p) - f.intercept) / f.slope;
}

// decisions[j] is for the window ending at position j + N - 1.
inline std::vector<bool> m_of_n_detect(std::span<const double> displacements,
                                       const DetectorConfig& cfg) {
  validate(cfg);
  if (displacements.size() < cfg.N) return {};
  const double thr = cfg.per_window_threshold();
  std::vector<int> pos(displacements.size());
  for (std::size_t t = 0; t < displacements.size(); ++t) pos[t] = std::abs(displacements[t]) >= thr;
  std::vector<bool> out;
  out.reserve(displacements.size() - cfg.N + 1);
  std::size_t count = 0;
  for (std::size_t t = 0; t < displacements.size(); ++t) {
    count += pos[t];
    if (t >= cfg.N) count -= pos[t - cfg.N];
    if (t + 1 >= cfg.N) out.push_back(count >= cfg.M);
  }
  return out;
}

inline std::size_t detection_count(std::span<const double> displacements, const DetectorConfig& cfg) {
  const auto d = m_of_n_detect(displacements, cfg);
  return static_cast<std::size_t>(std::count(d.begin(), d.end(), true));
}

}  // namespace mscrnn::baseline
