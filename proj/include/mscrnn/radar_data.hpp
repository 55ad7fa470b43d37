#pragma once

// Synthetic pulse-Doppler I/Q returns and the windowed dataset built on them.
//
// A point target at radial displacement d(t) returns A(t) exp(j 4 pi d(t) / lambda);
// the generators below build d(t) and A(t) per class and add complex Gaussian
// noise. Clutter is a static reflector plus a few scatterers with zero-mean
// sinusoidal micro-displacements, so its net unwrapped displacement cancels.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mscrnn/binary_io.hpp"
#include "mscrnn/emi.hpp"
#include "mscrnn/numerics.hpp"

namespace mscrnn::radar {

inline constexpr double kSpeedOfLight = 299'792'458.0;
inline constexpr double kCarrierHz = 5.8e9;
inline constexpr double kWavelength = kSpeedOfLight / kCarrierHz;  // ~0.0517 m
inline constexpr double kSampleRateHz = 256.0;

enum class SourceKind { human = 0, nonhuman = 1 };

inline const std::vector<std::string>& source_class_names() {
  static const std::vector<std::string> names{"Human", "NonHuman"};
  return names;
}

inline std::string label_name(ClassLabel l) {
  if (l == kClutter) return "Clutter";
  const auto& n = source_class_names();
  return l >= 0 && static_cast<std::size_t>(l) < n.size() ? n[static_cast<std::size_t>(l)]
                                                           : "Source" + std::to_string(l);
}

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

struct GeneratorConfig {
  double sample_rate_hz = kSampleRateHz;
  double snr_db = 25.0;  // relative to a unit-amplitude target
  // Human walkers: slower, with gait modulation of speed and amplitude.
  Range human_speed{0.3, 1.2};
  Range human_amplitude{0.8, 1.2};
  Range gait_hz{1.5, 2.5};
  double gait_depth = 0.4;
  // Non-human movers: faster and smooth. Upper speed stays below the
  // unambiguous limit lambda * fs / 4 (~3.3 m/s at 256 Hz).
  Range nonhuman_speed{1.6, 2.8};
  Range nonhuman_amplitude{0.4, 0.7};
  Range segment_s{0.5, 2.0};
  double reverse_prob = 0.15;  // per velocity segment
  std::optional<double> fixed_velocity;  // overrides the trajectory model
  // Clutter.
  // The scatterers together stay below the static return, and the static
  // return stays well above the noise, so the phasor never circles the
  // origin. Weaker returns let noise cause lambda/2 cycle slips.
  std::size_t scatterers = 4;
  Range clutter_static_amplitude{0.4, 0.8};
  double scatterer_rel_amplitude = 0.2;  // max per-scatterer amplitude / static
  Range scatterer_displacement_m{0.002, 0.02};
  Range scatterer_hz{0.1, 3.0};
  double clutter_amplitude_scale = 1.0;
};

struct IQSeries {
  std::vector<double> i;
  std::vector<double> q;
  double sample_rate_hz = kSampleRateHz;
  ClassLabel label = kClutter;
  std::vector<std::pair<std::string, double>> meta;

  std::size_t size() const { return i.size(); }
};

inline double noise_sigma(double snr_db) {
  return 1.0 / std::sqrt(2.0 * std::pow(10.0, snr_db / 10.0));
}

inline std::size_t sample_count(double duration_s, double rate) {
  if (!(duration_s > 0.0)) throw ConfigError("duration must be positive");
  require(rate > 0.0, "sample rate must be positive");
  return static_cast<std::size_t>(std::llround(duration_s * rate));
}

// I/Q for a given displacement and amplitude track, plus noise.
inline IQSeries synthesize(const std::vector<double>& displacement_m,
                           const std::vector<double>& amplitude, double sigma, double rate,
                           Rng& rng) {
  IQSeries s;
  s.sample_rate_hz = rate;
  s.i.resize(displacement_m.size());
  s.q.resize(displacement_m.size());
  const double k = 4.0 * std::numbers::pi / kWavelength;
  for (std::size_t t = 0; t < displacement_m.size(); ++t) {
    const double phi = k * displacement_m[t];
    s.i[t] = amplitude[t] * std::cos(phi) + (sigma > 0 ? gaussian(rng, sigma) : 0.0);
    s.q[t] = amplitude[t] * std::sin(phi) + (sigma > 0 ? gaussian(rng, sigma) : 0.0);
  }
  return s;
}

inline IQSeries gen_source(SourceKind kind, double duration_s, std::uint64_t seed,
                           const GeneratorConfig& cfg) {
  const std::size_t n = sample_count(duration_s, cfg.sample_rate_hz);
  Rng rng(seed);
  const double dt = 1.0 / cfg.sample_rate_hz;
  const bool human = kind == SourceKind::human;
  const Range speed = human ? cfg.human_speed : cfg.nonhuman_speed;
  const Range amp = human ? cfg.human_amplitude : cfg.nonhuman_amplitude;
  const double a0 = uniform(rng, amp.lo, amp.hi);
  const double gait = uniform(rng, cfg.gait_hz.lo, cfg.gait_hz.hi);
  const double gait_phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  double direction = uniform(rng, 0.0, 1.0) < 0.5 ? -1.0 : 1.0;

  std::vector<double> d(n), a(n);
  double pos = uniform(rng, 0.0, kWavelength);
  double seg_left = 0.0, v_seg = 0.0;
  for (std::size_t t = 0; t < n; ++t) {
    const double time = static_cast<double>(t) * dt;
    double v = 0.0;
    if (cfg.fixed_velocity) {
      v = *cfg.fixed_velocity;
    } else {
      if (seg_left <= 0.0) {
        seg_left = uniform(rng, cfg.segment_s.lo, cfg.segment_s.hi);
        v_seg = uniform(rng, speed.lo, speed.hi);
        if (t > 0 && uniform(rng, 0.0, 1.0) < cfg.reverse_prob) direction = -direction;
      }
      seg_left -= dt;
      v = direction * v_seg;
      if (human) v *= 1.0 + cfg.gait_depth * std::sin(2.0 * std::numbers::pi * gait * time + gait_phase);
    }
    d[t] = pos;
    pos += v * dt;
    a[t] = human && !cfg.fixed_velocity
               ? a0 * (1.0 + 0.2 * std::sin(2.0 * std::numbers::pi * gait * time + gait_phase))
               : a0;
  }
  IQSeries s = synthesize(d, a, noise_sigma(cfg.snr_db), cfg.sample_rate_hz, rng);
  s.label = static_cast<ClassLabel>(kind);
  s.meta = {{"amplitude", a0}, {"duration_s", duration_s}, {"snr_db", cfg.snr_db}};
  return s;
}

inline IQSeries gen_clutter(double duration_s, std::uint64_t seed, const GeneratorConfig& cfg) {
  const std::size_t n = sample_count(duration_s, cfg.sample_rate_hz);
  Rng rng(seed);
  const double dt = 1.0 / cfg.sample_rate_hz;
  const double k = 4.0 * std::numbers::pi / kWavelength;
  const double stat =
      cfg.clutter_amplitude_scale * uniform(rng, cfg.clutter_static_amplitude.lo, cfg.clutter_static_amplitude.hi);
  const double stat_phase = uniform(rng, 0.0, 2.0 * std::numbers::pi);

  struct Scatterer {
    double amp, disp, freq, phase, offset;
  };
  std::vector<Scatterer> sc(cfg.scatterers);
  for (auto& s : sc)
    s = {stat * uniform(rng, 0.0, cfg.scatterer_rel_amplitude),
         uniform(rng, cfg.scatterer_displacement_m.lo, cfg.scatterer_displacement_m.hi),
         uniform(rng, cfg.scatterer_hz.lo, cfg.scatterer_hz.hi),
         uniform(rng, 0.0, 2.0 * std::numbers::pi), uniform(rng, 0.0, 2.0 * std::numbers::pi)};

  const double sigma = noise_sigma(cfg.snr_db);
  IQSeries out;
  out.sample_rate_hz = cfg.sample_rate_hz;
  out.label = kClutter;
  out.i.resize(n);
  out.q.resize(n);
  for (std::size_t t = 0; t < n; ++t) {
    const double time = static_cast<double>(t) * dt;
    double re = stat * std::cos(stat_phase), im = stat * std::sin(stat_phase);
    for (const auto& s : sc) {
      const double phi = s.offset + k * s.disp * std::sin(2.0 * std::numbers::pi * s.freq * time + s.phase);
      re += s.amp * std::cos(phi);
      im += s.amp * std::sin(phi);
    }
    out.i[t] = re + (sigma > 0 ? gaussian(rng, sigma) : 0.0);
    out.q[t] = im + (sigma > 0 ? gaussian(rng, sigma) : 0.0);
  }
  out.meta = {{"static_amplitude", stat}, {"duration_s", duration_s}, {"snr_db", cfg.snr_db}};
  return out;
}

// ---------------------------------------------------------------------------
// Windowed dataset.

enum class Split : std::uint8_t { train = 0, val = 1, test = 2 };

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "'");
}

struct WindowedDataset {
  std::size_t window_len = 0;  // T
  std::size_t features = 2;    // F (I, Q)
  double window_len_s = 1.0;
  double sample_rate_hz = kSampleRateHz;
  std::size_t omega = 48;
  std::size_t stride = 16;
  std::vector<float> samples;  // n x T x F, row-major
  std::vector<ClassLabel> labels;
  std::vector<Split> splits;
  std::vector<std::uint32_t> origins;  // source series index
  std::size_t skipped_series = 0;      // not persisted

  std::size_t size() const { return labels.size(); }

  Matrix window(std::size_t w) const {
    Matrix m(window_len, features);
    const std::size_t base = w * window_len * features;
    for (std::size_t j = 0; j < window_len * features; ++j) m.values()[j] = samples[base + j];
    return m;
  }

  std::vector<std::size_t> indices(std::optional<Split> split = std::nullopt) const {
    std::vector<std::size_t> out;
    for (std::size_t w = 0; w < size(); ++w)
      if (!split || splits[w] == *split) out.push_back(w);
    return out;
  }

  bool operator==(const WindowedDataset& o) const {
    return window_len == o.window_len && features == o.features && window_len_s == o.window_len_s &&
           sample_rate_hz == o.sample_rate_hz && omega == o.omega && stride == o.stride &&
           samples == o.samples && labels == o.labels && splits == o.splits && origins == o.origins;
  }
};

struct SplitRatios {
  double train = 0.6;
  double val = 0.2;
  double test = 0.2;
};

inline WindowedDataset window_dataset(const std::vector<IQSeries>& series, double window_len_s,
                                      SplitRatios ratios, std::uint64_t seed,
                                      std::size_t omega = 48, std::size_t stride = 16) {
  require(ratios.train > 0 && ratios.val > 0 && ratios.test > 0,
          "window_dataset: split ratios must be positive");
  require(std::abs(ratios.train + ratios.val + ratios.test - 1.0) < 1e-9,
          "window_dataset: split ratios must sum to 1");
  require(window_len_s > 0.0, "window_dataset: window length must be positive");
  WindowedDataset ds;
  ds.window_len_s = window_len_s;
  ds.sample_rate_hz = series.empty() ? kSampleRateHz : series.front().sample_rate_hz;
  ds.window_len = static_cast<std::size_t>(std::llround(window_len_s * ds.sample_rate_hz));
  ds.omega = omega;
  ds.stride = stride;
  instance_count(ds.window_len, omega, stride);  // validates the geometry

  for (std::size_t s = 0; s < series.size(); ++s) {
    const auto& ser = series[s];
    require(ser.i.size() == ser.q.size(), "window_dataset: I/Q length mismatch");
    require(ser.sample_rate_hz == ds.sample_rate_hz, "window_dataset: mixed sample rates");
    const std::size_t count = ser.size() / ds.window_len;
    if (count == 0) {
      ++ds.skipped_series;
      continue;
    }
    for (std::size_t w = 0; w < count; ++w) {
      for (std::size_t t = 0; t < ds.window_len; ++t) {
        ds.samples.push_back(static_cast<float>(ser.i[w * ds.window_len + t]));
        ds.samples.push_back(static_cast<float>(ser.q[w * ds.window_len + t]));
      }
      ds.labels.push_back(ser.label);
      ds.origins.push_back(static_cast<std::uint32_t>(s));
    }
  }

  const std::size_t n = ds.labels.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratios.train + 0.5));
  const auto n_val = std::min(n - n_train, static_cast<std::size_t>(std::floor(static_cast<double>(n) * ratios.val + 0.5)));
  ds.splits.assign(n, Split::test);
  for (std::size_t r = 0; r < n; ++r)
    ds.splits[order[r]] = r < n_train ? Split::train : (r < n_train + n_val ? Split::val : Split::test);
  return ds;
}

inline std::vector<InstanceSet> to_instance_sets(const WindowedDataset& ds,
                                                 std::optional<Split> split = std::nullopt) {
  std::vector<InstanceSet> out;
  for (auto w : ds.indices(split))
    out.push_back(make_instances(ds.window(w), ds.omega, ds.stride, ds.labels[w], w));
  return out;
}

// ---------------------------------------------------------------------------
// Dataset generation from a config.

struct DatasetSpec {
  std::size_t clutter_series = 100;
  std::size_t human_series = 75;
  std::size_t nonhuman_series = 75;
  double series_duration_s = 10.0;
  double window_len_s = 1.0;
  SplitRatios split;
  std::size_t omega = 48;
  std::size_t stride = 16;
};

inline WindowedDataset generate_dataset(const DatasetSpec& spec, const GeneratorConfig& gen,
                                        std::uint64_t seed) {
  std::vector<IQSeries> series;
  std::uint64_t idx = 0;
  for (std::size_t i = 0; i < spec.clutter_series; ++i)
    series.push_back(gen_clutter(spec.series_duration_s, derive_seed(seed, idx++), gen));
  for (std::size_t i = 0; i < spec.human_series; ++i)
    series.push_back(gen_source(SourceKind::human, spec.series_duration_s, derive_seed(seed, idx++), gen));
  for (std::size_t i = 0; i < spec.nonhuman_series; ++i)
    series.push_back(gen_source(SourceKind::nonhuman, spec.series_duration_s, derive_seed(seed, idx++), gen));
  return window_dataset(series, spec.window_len_s, spec.split, derive_seed(seed, 0xDA7A),
                        spec.omega, spec.stride);
}

// A stream of independent windows: round((1 - clutter_fraction) * n) of
// them are sources (human and non-human alternating), placed at random.
inline std::vector<InstanceSet> generate_stream(std::size_t n_windows, double clutter_fraction,
                                                const GeneratorConfig& gen, std::uint64_t seed,
                                                double window_len_s = 1.0, std::size_t omega = 48,
                                                std::size_t stride = 16) {
  require(clutter_fraction >= 0.0 && clutter_fraction <= 1.0, "generate_stream: clutter fraction must be in [0, 1]");
  const auto n_source = static_cast<std::size_t>(
      std::llround((1.0 - clutter_fraction) * static_cast<double>(n_windows)));
  std::vector<ClassLabel> labels(n_windows, kClutter);
  for (std::size_t j = 0; j < n_source; ++j) labels[j] = static_cast<ClassLabel>(j % 2);
  Rng rng(derive_seed(seed, 0x57EA));
  std::shuffle(labels.begin(), labels.end(), rng);

  std::vector<InstanceSet> out(n_windows);
  parallel_for(n_windows, [&](std::size_t w) {
    const std::uint64_t s = derive_seed(seed, w);
    const IQSeries ser = labels[w] == kClutter
                             ? gen_clutter(window_len_s, s, gen)
                             : gen_source(static_cast<SourceKind>(labels[w]), window_len_s, s, gen);
    Matrix m(ser.size(), 2);
    for (std::size_t t = 0; t < ser.size(); ++t) {
      // Same float32 rounding as stored datasets.
      m(t, 0) = static_cast<float>(ser.i[t]);
      m(t, 1) = static_cast<float>(ser.q[t]);
    }
    out[w] = make_instances(m, omega, stride, labels[w], w);
  });
  return out;
}

// ---------------------------------------------------------------------------
// File format: "MSCR", u16 version, header, per-window metadata, f32 payload,
// CRC32 of everything before it. All integers little-endian.

inline constexpr std::string_view kDatasetMagic = "MSCR";
inline constexpr std::uint16_t kDatasetVersion = 1;
inline constexpr std::size_t kDatasetHeaderBytes = 4 + 2 + 4 * 3 + 8 * 2 + 4 * 2;

inline std::vector<std::uint8_t> encode_dataset(const WindowedDataset& ds) {
  io::ByteWriter w;
  w.raw(kDatasetMagic);
  w.u16(kDatasetVersion);
  w.u32(static_cast<std::uint32_t>(ds.size()));
  w.u32(static_cast<std::uint32_t>(ds.window_len));
  w.u32(static_cast<std::uint32_t>(ds.features));
  w.f64(ds.window_len_s);
  w.f64(ds.sample_rate_hz);
  w.u32(static_cast<std::uint32_t>(ds.omega));
  w.u32(static_cast<std::uint32_t>(ds.stride));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    w.i8(static_cast<std::int8_t>(ds.labels[i]));
    w.u8(static_cast<std::uint8_t>(ds.splits[i]));
    w.u32(ds.origins[i]);
  }
  for (float v : ds.samples) w.f32(v);
  w.seal();
  return w.bytes();
}

inline WindowedDataset decode_dataset(std::span<const std::uint8_t> bytes) {
  auto r = io::ByteReader::open_framed(bytes, kDatasetMagic, "dataset");
  const auto version = r.u16();
  if (version != kDatasetVersion)
    throw FormatError(FormatError::Kind::version_mismatch,
                      "dataset: unsupported version " + std::to_string(version));
  WindowedDataset ds;
  const std::size_t n = r.u32();
  ds.window_len = r.u32();
  ds.features = r.u32();
  ds.window_len_s = r.f64();
  ds.sample_rate_hz = r.f64();
  ds.omega = r.u32();
  ds.stride = r.u32();
  // Size check first so a short file reads as truncated, not as a bad CRC.
  const std::size_t count = n * ds.window_len * ds.features;
  const std::size_t expected = kDatasetHeaderBytes + n * 6 + count * 4 + 4;
  if (bytes.size() < expected) throw FormatError(FormatError::Kind::truncated, "dataset: file truncated");
  if (bytes.size() > expected) throw FormatError(FormatError::Kind::malformed, "dataset: trailing bytes");
  io::ByteReader::verify_crc(bytes, "dataset");
  for (std::size_t i = 0; i < n; ++i) {
    ds.labels.push_back(r.i8());
    const auto sp = r.u8();
    if (sp > 2) throw FormatError(FormatError::Kind::malformed, "dataset: bad split tag");
    ds.splits.push_back(static_cast<Split>(sp));
    ds.origins.push_back(r.u32());
  }
  ds.samples.resize(count);
  for (auto& v : ds.samples) v = r.f32();
  if (r.remaining() != 0) throw FormatError(FormatError::Kind::malformed, "dataset: trailing bytes");
  return ds;
}

inline void save_dataset(const WindowedDataset& ds, const std::filesystem::path& path) {
  io::write_file_atomic(path, encode_dataset(ds));
}

inline WindowedDataset load_dataset(const std::filesystem::path& path) {
  return decode_dataset(io::read_file(path));
}

// One "i,q" pair per row; a non-numeric first row is taken as a header.
inline IQSeries load_csv_series(const std::filesystem::path& path, ClassLabel label,
                                double sample_rate_hz = kSampleRateHz) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path.string() + "'");
  IQSeries s;
  s.label = label;
  s.sample_rate_hz = sample_rate_hz;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw DataError(path.string() + ":" + std::to_string(lineno) + ": expected 'i,q'");
    try {
      std::size_t used = 0;
      const double iv = std::stod(line.substr(0, comma), &used);
      const double qv = std::stod(line.substr(comma + 1));
      s.i.push_back(iv);
      s.q.push_back(qv);
    } catch (const std::invalid_argument&) {
      if (lineno == 1) continue;
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": non-numeric value");
    }
  }
  return s;
}

}  // namespace mscrnn::radar
