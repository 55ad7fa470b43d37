#pragma once

// Run configuration: one JSON document with sections
//   seed, data, generator, emi, cascade, quant, baseline, bench.
// Every key is optional; unknown keys are an error. `resolved_json` emits
// the full document with defaults filled in, which loads back to the same
// configuration.

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>

#include "json.hpp"
#include "mscrnn/baseline.hpp"
#include "mscrnn/cascade.hpp"
#include "mscrnn/radar_data.hpp"

namespace mscrnn {

using nlohmann::json;

struct QuantConfig {
  int input_exp = -1;  // -1: pick from the training data range
  double state_headroom = 1.25;  // multiplier on the observed hidden-state range
};

struct BaselineRunConfig {
  baseline::DetectorConfig detector;
  double target_fa_per_s = 1.0 / baseline::kSecondsPerWeek;
};

struct BenchConfig {
  double clutter_fraction = 0.97;
  double device_mflops = 10.0;
  double window_period_s = 1.0;
  std::size_t stream_windows = 0;  // > 0: also measure on a synthetic stream
};

// Runs train with the piecewise-linear nonlinearities by default, so the float
// model computes the same function as the integer engine.
inline MscTrainConfig default_train_config() {
  MscTrainConfig t;
  for (CellInit* c : {&t.lower.cell, &t.upper_cell}) {
    c->gate = Activation::quant_sigm;
    c->update = Activation::quant_tanh;
  }
  t.class_names = radar::source_class_names();
  return t;
}

struct RunConfig {
  std::uint64_t seed = 1;
  radar::DatasetSpec data;
  radar::GeneratorConfig generator;
  MscTrainConfig train = default_train_config();
  QuantConfig quant;
  BaselineRunConfig baseline;
  BenchConfig bench;
};

static_assert(std::is_same_v<std::uint64_t, std::size_t>, "config assumes a 64-bit size_t");

namespace detail {

// Converters between config values and JSON. Each pair must round trip.
inline json to_value(double v) { return v; }
inline json to_value(std::size_t v) { return v; }
inline json to_value(int v) { return v; }
inline json to_value(const std::string& v) { return v; }
inline json to_value(const std::vector<std::string>& v) { return v; }
inline json to_value(const radar::Range& r) { return json::array({r.lo, r.hi}); }
inline json to_value(Activation a) { return activation_name(a); }
inline json to_value(OptimizerKind k) { return k == OptimizerKind::adam ? "adam" : "sgd"; }
template <class T>
json to_value(const std::optional<T>& v) {
  return v ? to_value(*v) : json(nullptr);
}

template <class T>
T number_from(const json& j, const std::string& key) {
  if constexpr (std::is_floating_point_v<T>) {
    if (!j.is_number()) throw ConfigError(key + ": expected a number");
    return j.get<T>();
  } else {
    if (!j.is_number_integer()) throw ConfigError(key + ": expected an integer");
    if constexpr (std::is_unsigned_v<T>) {
      if (j.is_number_unsigned()) return j.get<T>();
      if (j.get<std::int64_t>() < 0) throw ConfigError(key + ": must be non-negative");
    }
    return j.get<T>();
  }
}

inline void from_value(const json& j, const std::string& key, double& out) { out = number_from<double>(j, key); }
inline void from_value(const json& j, const std::string& key, std::size_t& out) {
  out = number_from<std::size_t>(j, key);
}
inline void from_value(const json& j, const std::string& key, int& out) { out = number_from<int>(j, key); }
inline void from_value(const json& j, const std::string& key, std::string& out) {
  if (!j.is_string()) throw ConfigError(key + ": expected a string");
  out = j.get<std::string>();
}
inline void from_value(const json& j, const std::string& key, std::vector<std::string>& out) {
  if (!j.is_array()) throw ConfigError(key + ": expected an array of strings");
  out.clear();
  for (const auto& e : j) {
    if (!e.is_string()) throw ConfigError(key + ": expected an array of strings");
    out.push_back(e.get<std::string>());
  }
}
inline void from_value(const json& j, const std::string& key, radar::Range& out) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number())
    throw ConfigError(key + ": expected [lo, hi]");
  out = {j[0].get<double>(), j[1].get<double>()};
  if (out.lo > out.hi) throw ConfigError(key + ": lo > hi");
}
inline void from_value(const json& j, const std::string& key, Activation& out) {
  std::string s;
  from_value(j, key, s);
  out = parse_activation(s);
}
inline void from_value(const json& j, const std::string& key, OptimizerKind& out) {
  std::string s;
  from_value(j, key, s);
  out = parse_optimizer(s);
}
template <class T>
void from_value(const json& j, const std::string& key, std::optional<T>& out) {
  if (j.is_null()) {
    out.reset();
    return;
  }
  T v{};
  from_value(j, key, v);
  out = v;
}

class Reader {
 public:
  explicit Reader(const json& doc) : doc_(doc) {
    if (!doc_.is_object()) throw ConfigError("config: top level must be an object");
  }

  template <class T>
  void field(const char* section, const char* key, T& out) {
    known_[section].insert(key);
    const json* s = section_of(section);
    if (!s) return;
    auto it = s->find(key);
    if (it != s->end()) from_value(*it, std::string(section) + "." + key, out);
  }

  template <class T>
  void top(const char* key, T& out) {
    top_.insert(key);
    auto it = doc_.find(key);
    if (it != doc_.end()) from_value(*it, key, out);
  }

  void finish() const {
    for (auto it = doc_.begin(); it != doc_.end(); ++it) {
      if (top_.contains(it.key())) continue;
      auto sec = known_.find(it.key());
      if (sec == known_.end()) throw ConfigError("config: unknown key '" + it.key() + "'");
      if (!it->is_object()) throw ConfigError("config: section '" + it.key() + "' must be an object");
      for (auto k = it->begin(); k != it->end(); ++k)
        if (!sec->second.contains(k.key()))
          throw ConfigError("config: unknown key '" + it.key() + "." + k.key() + "'");
    }
  }

 private:
  const json* section_of(const char* section) const {
    auto it = doc_.find(section);
    return it == doc_.end() ? nullptr : &*it;
  }

  const json& doc_;
  std::set<std::string> top_;
  std::map<std::string, std::set<std::string>> known_;
};

class Writer {
 public:
  template <class T>
  void field(const char* section, const char* key, const T& v) {
    doc_[section][key] = to_value(v);
  }
  template <class T>
  void top(const char* key, const T& v) {
    doc_[key] = to_value(v);
  }
  json take() { return std::move(doc_); }

 private:
  json doc_ = json::object();
};

// The single list of config keys. `C` is RunConfig or const RunConfig.
template <class C, class V>
void visit_config(C& c, V& v) {
  v.top("seed", c.seed);

  v.field("data", "clutter_series", c.data.clutter_series);
  v.field("data", "human_series", c.data.human_series);
  v.field("data", "nonhuman_series", c.data.nonhuman_series);
  v.field("data", "series_duration_s", c.data.series_duration_s);
  v.field("data", "window_len_s", c.data.window_len_s);
  v.field("data", "split_train", c.data.split.train);
  v.field("data", "split_val", c.data.split.val);
  v.field("data", "split_test", c.data.split.test);

  auto& g = c.generator;
  v.field("generator", "sample_rate_hz", g.sample_rate_hz);
  v.field("generator", "snr_db", g.snr_db);
  v.field("generator", "human_speed", g.human_speed);
  v.field("generator", "human_amplitude", g.human_amplitude);
  v.field("generator", "gait_hz", g.gait_hz);
  v.field("generator", "gait_depth", g.gait_depth);
  v.field("generator", "nonhuman_speed", g.nonhuman_speed);
  v.field("generator", "nonhuman_amplitude", g.nonhuman_amplitude);
  v.field("generator", "segment_s", g.segment_s);
  v.field("generator", "reverse_prob", g.reverse_prob);
  v.field("generator", "fixed_velocity", g.fixed_velocity);
  v.field("generator", "scatterers", g.scatterers);
  v.field("generator", "clutter_static_amplitude", g.clutter_static_amplitude);
  v.field("generator", "scatterer_rel_amplitude", g.scatterer_rel_amplitude);
  v.field("generator", "scatterer_displacement_m", g.scatterer_displacement_m);
  v.field("generator", "scatterer_hz", g.scatterer_hz);
  v.field("generator", "clutter_amplitude_scale", g.clutter_amplitude_scale);

  auto& e = c.train.lower;
  v.field("emi", "omega", c.data.omega);
  v.field("emi", "stride", c.data.stride);
  v.field("emi", "rounds", e.rounds);
  v.field("emi", "epochs_per_round", e.epochs_per_round);
  v.field("emi", "lr", e.optimizer.lr);
  v.field("emi", "optimizer", e.optimizer.kind);
  v.field("emi", "momentum", e.optimizer.momentum);
  v.field("emi", "batch_size", e.batch_size);
  v.field("emi", "k", e.k);
  v.field("emi", "p_hat", e.p_hat);
  v.field("emi", "hidden_dim", e.hidden_dim);
  v.field("emi", "rank", e.cell.rank_w);
  v.field("emi", "rank_u", e.cell.rank_u);
  v.field("emi", "gate", e.cell.gate);
  v.field("emi", "update", e.cell.update);

  auto& t = c.train;
  v.field("cascade", "upper_hidden_dim", t.upper_hidden_dim);
  v.field("cascade", "upper_rank", t.upper_cell.rank_w);
  v.field("cascade", "upper_rank_u", t.upper_cell.rank_u);
  v.field("cascade", "upper_gate", t.upper_cell.gate);
  v.field("cascade", "upper_update", t.upper_cell.update);
  v.field("cascade", "class_names", t.class_names);
  v.field("cascade", "n_r", t.n_r);
  v.field("cascade", "phase2_epochs", t.phase2_epochs);
  v.field("cascade", "joint_epochs_per_round", t.joint_epochs_per_round);
  v.field("cascade", "lr_phase2", t.lr_phase2);
  v.field("cascade", "lr_phase3", t.lr_phase3);
  v.field("cascade", "batch_size", t.batch_size);
  v.field("cascade", "rel_tol", t.rel_tol);

  v.field("quant", "input_exp", c.quant.input_exp);
  v.field("quant", "state_headroom", c.quant.state_headroom);

  v.field("baseline", "window_len_s", c.baseline.detector.window_len_s);
  v.field("baseline", "threshold_m", c.baseline.detector.threshold_m);
  v.field("baseline", "M", c.baseline.detector.M);
  v.field("baseline", "N", c.baseline.detector.N);
  v.field("baseline", "target_fa_per_s", c.baseline.target_fa_per_s);

  v.field("bench", "clutter_fraction", c.bench.clutter_fraction);
  v.field("bench", "device_mflops", c.bench.device_mflops);
  v.field("bench", "window_period_s", c.bench.window_period_s);
  v.field("bench", "stream_windows", c.bench.stream_windows);
}

}  // namespace detail

inline void validate(const RunConfig& c) {
  require(c.data.window_len_s > 0.0 && c.data.series_duration_s > 0.0, "data: durations must be positive");
  const auto& s = c.data.split;
  require(s.train >= 0 && s.val >= 0 && s.test >= 0 && std::abs(s.train + s.val + s.test - 1.0) < 1e-9,
          "data: split ratios must be non-negative and sum to 1");
  require(c.data.omega >= 1 && c.data.stride >= 1, "emi: omega and stride must be >= 1");
  const auto& e = c.train.lower;
  require(e.rounds >= 1, "emi: rounds must be >= 1");
  require(e.batch_size >= 1 && c.train.batch_size >= 1, "batch_size must be >= 1");
  require(e.k >= 1, "emi: k must be >= 1");
  require(e.p_hat > 0.0 && e.p_hat < 1.0, "emi: p_hat must be in (0, 1)");
  require(e.hidden_dim >= 1 && c.train.upper_hidden_dim >= 1, "hidden dims must be >= 1");
  require(e.optimizer.lr > 0.0 && c.train.lr_phase2 > 0.0 && c.train.lr_phase3 > 0.0,
          "learning rates must be positive");
  require(c.quant.input_exp >= -1, "quant: input_exp must be >= 0, or -1 for automatic");
  require(c.quant.state_headroom >= 1.0, "quant: state_headroom must be >= 1");
  baseline::validate(c.baseline.detector);
  require(c.baseline.target_fa_per_s > 0.0, "baseline: target_fa_per_s must be positive");
  require(c.bench.clutter_fraction >= 0.0 && c.bench.clutter_fraction <= 1.0,
          "bench: clutter_fraction must be in [0, 1]");
  const auto samples = static_cast<std::size_t>(std::llround(c.data.window_len_s * c.generator.sample_rate_hz));
  (void)instance_count(samples, c.data.omega, c.data.stride);  // throws on bad geometry
}

// Seeds for the stages of a run, all derived from the master seed.
inline void apply_seed(RunConfig& c) {
  c.train.seed = derive_seed(c.seed, 2);
  c.train.lower.rel_tol = c.train.rel_tol;
}

inline RunConfig parse_config(const json& doc) {
  RunConfig c;
  detail::Reader r(doc);
  detail::visit_config(c, r);
  r.finish();
  apply_seed(c);
  validate(c);
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return parse_config(doc);
}

inline json resolved_json(const RunConfig& c) {
  detail::Writer w;
  detail::visit_config(c, w);
  return w.take();
}

// Seed used for dataset generation.
inline std::uint64_t data_seed(const RunConfig& c) { return derive_seed(c.seed, 1); }

}  // namespace mscrnn
