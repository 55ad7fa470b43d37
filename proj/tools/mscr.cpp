// mscr: data generation, training, evaluation, quantization, inference,
// cost benchmarking and baseline calibration for the two-tier radar cascade.
//
// Every command writes its artifacts into --run-dir together with the fully
// resolved config (resolved_config.json). Errors print one line
//   error: class=<config_error|data_error|numeric_error> msg=<text>
// and exit with 2, 3 or 4 respectively.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "mscrnn/config.hpp"
#include "mscrnn/metrics.hpp"
#include "mscrnn/model_io.hpp"

namespace fs = std::filesystem;
using namespace mscrnn;

namespace {

struct Common {
  std::string config;
  std::string run_dir = ".";
};

RunConfig load_run_config(const Common& c) {
  return c.config.empty() ? parse_config(json::object()) : load_config(c.config);
}

fs::path prepare_run_dir(const Common& c, const RunConfig& cfg) {
  fs::path dir(c.run_dir);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("cannot create run directory " + dir.string() + ": " + ec.message());
  io::write_text_atomic(dir / "resolved_config.json", resolved_json(cfg).dump(2) + "\n");
  return dir;
}

void write_json(const fs::path& p, const json& j) { io::write_text_atomic(p, j.dump(2) + "\n"); }

radar::WindowedDataset dataset_for(const std::string& path, const RunConfig& cfg) {
  if (!path.empty()) return radar::load_dataset(path);
  return radar::generate_dataset(cfg.data, cfg.generator, data_seed(cfg));
}

radar::Split split_arg(const std::string& s) { return radar::parse_split(s); }

void check_geometry(const SavedModel& s, const radar::WindowedDataset& ds) {
  if (s.geometry.window_len != ds.window_len || s.geometry.omega != ds.omega ||
      s.geometry.stride != ds.stride || s.model.lower.cell.input_dim() != ds.features)
    throw DataError("dataset geometry (T=" + std::to_string(ds.window_len) + ", omega=" +
                    std::to_string(ds.omega) + ", stride=" + std::to_string(ds.stride) +
                    ") does not match the model");
}

std::vector<InstanceSet> split_or_throw(const radar::WindowedDataset& ds, radar::Split split,
                                        const std::string& name) {
  auto v = radar::to_instance_sets(ds, split);
  if (v.empty()) throw DataError("dataset has no windows in split '" + name + "'");
  return v;
}

std::string fmt(double v, int prec = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", prec, v);
  return buf;
}

// ---------------------------------------------------------------------------

int cmd_gen_data(const Common& c, const std::string& out) {
  const RunConfig cfg = load_run_config(c);
  const auto dir = prepare_run_dir(c, cfg);
  const auto ds = radar::generate_dataset(cfg.data, cfg.generator, data_seed(cfg));
  const fs::path path = out.empty() ? dir / "dataset.mscr" : fs::path(out);
  radar::save_dataset(ds, path);
  std::size_t counts[3] = {0, 0, 0};
  for (auto l : ds.labels) ++counts[class_index(l)];
  std::cout << "wrote " << path.string() << ": " << ds.size() << " windows (Clutter " << counts[0]
            << ", Human " << counts[1] << ", NonHuman " << counts[2] << "), T=" << ds.window_len
            << ", train/val/test " << ds.indices(radar::Split::train).size() << "/"
            << ds.indices(radar::Split::val).size() << "/" << ds.indices(radar::Split::test).size() << "\n";
  return 0;
}

int cmd_train(const Common& c, const std::string& data_path) {
  const RunConfig cfg = load_run_config(c);
  const auto dir = prepare_run_dir(c, cfg);
  const auto ds = dataset_for(data_path, cfg);
  const auto train = split_or_throw(ds, radar::Split::train, "train");

  const auto t0 = std::chrono::steady_clock::now();
  auto res = train_msc(train, cfg.train);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  SavedModel saved{res.model, ModelGeometry{ds.window_len, ds.omega, ds.stride, ds.sample_rate_hz}, std::nullopt};
  save_model(saved, dir / "model.mscm");
  write_json(dir / "loss_history.json", {{"phase1", res.phase1_loss},
                                          {"phase2", res.phase2_loss},
                                          {"phase3", res.phase3_loss},
                                          {"train_accuracy", res.train_accuracy},
                                          {"train_windows", train.size()}});
  std::cout << "trained on " << train.size() << " windows in " << fmt(secs, 1) << " s; train accuracy "
            << fmt(res.train_accuracy) << "\nwrote " << (dir / "model.mscm").string() << "\n";
  return 0;
}

void print_metrics(const EvalMetrics& m) {
  std::cout << "windows " << m.windows << "  accuracy " << fmt(m.accuracy) << "\n";
  std::cout << "\nconfusion (rows true, columns predicted)\n" << std::left;
  std::printf("%-10s", "");
  for (const auto& n : m.class_names) std::printf("%10s", n.c_str());
  std::printf("%10s\n", "recall");
  for (std::size_t t = 0; t < m.class_names.size(); ++t) {
    std::printf("%-10s", m.class_names[t].c_str());
    for (auto v : m.confusion[t]) std::printf("%10zu", v);
    std::printf("%10s\n", fmt(m.recall[t]).c_str());
  }
  std::cout << "\nmean instances consumed  " << fmt(m.mean_instances_consumed, 3)
            << "\nupper invocation rate    " << fmt(m.upper_invocation_rate)
            << "\nmean FLOPs per window    " << fmt(m.mean_flops, 0) << "\n";
}

// Published figures for the authors' real radar data; not reproducible on
// synthetic data and shown only for orientation.
json reference_figures() {
  return {{"accuracy", 0.972}, {"recall_clutter", 1.0}, {"recall_human", 0.92},
          {"note", "real-data figures from the original publication; not comparable to synthetic results"}};
}

void print_reference(const EvalMetrics& m) {
  auto recall_of = [&](const std::string& n) {
    for (std::size_t c = 0; c < m.class_names.size(); ++c)
      if (m.class_names[c] == n) return fmt(m.recall[c]);
    return std::string("n/a");
  };
  std::cout << "\n" << std::left;
  std::printf("%-18s%12s%12s\n", "", "this run", "published");
  std::printf("%-18s%12s%12s\n", "accuracy", fmt(m.accuracy).c_str(), "0.972");
  std::printf("%-18s%12s%12s\n", "clutter recall", recall_of("Clutter").c_str(), "1.000");
  std::printf("%-18s%12s%12s\n", "human recall", recall_of("Human").c_str(), "0.920");
  std::cout << "(published figures are on the authors' real radar data; this run is synthetic)\n";
}

int cmd_eval(const Common& c, const std::string& model_path, const std::string& data_path,
             const std::string& split, bool quantized) {
  const RunConfig cfg = load_run_config(c);
  const auto dir = prepare_run_dir(c, cfg);
  const auto saved = load_model(model_path);
  const auto ds = dataset_for(data_path, cfg);
  check_geometry(saved, ds);
  const auto data = split_or_throw(ds, split_arg(split), split);

  EvalMetrics m;
  if (quantized) {
    if (!saved.quantized) throw DataError("model has no quantized section; run `mscr quantize` first");
    m = summarize(infer_all(*saved.quantized, data), data, saved.model.class_names);
  } else {
    m = evaluate(saved.model, data);
  }
  json doc = to_json(m);
  doc["split"] = split;
  doc["quantized"] = quantized;
  doc["published_reference"] = reference_figures();
  write_json(dir / "metrics.json", doc);
  std::cout << (quantized ? "quantized" : "float") << " model, split " << split << "\n";
  print_metrics(m);
  print_reference(m);
  return 0;
}

int cmd_quantize(const Common& c, const std::string& model_path, const std::string& data_path) {
  const RunConfig cfg = load_run_config(c);
  const auto dir = prepare_run_dir(c, cfg);
  auto saved = load_model(model_path);
  const auto ds = dataset_for(data_path, cfg);
  check_geometry(saved, ds);
  const auto calib = split_or_throw(ds, radar::Split::train, "train");
  const auto test = split_or_throw(ds, radar::Split::test, "test");

  auto plan = quant::calibrate_scale_plan(saved.model, calib, cfg.quant.state_headroom);
  if (cfg.quant.input_exp >= 0) plan.input_exp = cfg.quant.input_exp;
  saved.quantized = quant::quantize_model(saved.model, plan);
  save_model(saved, dir / "model_q.mscm");

  const auto rep = quant::agreement_report(saved.model, *saved.quantized, test);
  write_json(dir / "agreement.json", {{"windows", rep.windows},
                                       {"label_agreement", rep.label_agreement},
                                       {"lower_decision_agreement", rep.lower_decision_agreement},
                                       {"max_hidden_deviation", rep.max_hidden_deviation},
                                       {"scale_plan",
                                        {{"input_exp", plan.input_exp},
                                         {"lower_state_exp", plan.lower_state_exp},
                                         {"upper_state_exp", plan.upper_state_exp}}}});
  std::cout << "scale plan: input 2^" << plan.input_exp << ", lower state 2^" << plan.lower_state_exp
            << ", upper state 2^" << plan.upper_state_exp << "\n"
            << "test windows " << rep.windows << "\nlabel agreement          " << fmt(rep.label_agreement)
            << "\nlower decision agreement " << fmt(rep.lower_decision_agreement)
            << "\nmax hidden deviation     " << fmt(rep.max_hidden_deviation, 6) << "\nwrote "
            << (dir / "model_q.mscm").string() << "\n";
  return 0;
}

json trace_json(const InferenceTrace& t, const InstanceSet& w, const std::vector<std::string>& names) {
  auto name = [&](ClassLabel l) {
    return l == kClutter ? std::string("Clutter")
                         : (static_cast<std::size_t>(l) < names.size() ? names[static_cast<std::size_t>(l)]
                                                                       : std::to_string(l));
  };
  return {{"window", w.origin},
          {"label", name(w.label)},
          {"decision", name(t.decision)},
          {"lower_instances_consumed", t.lower_instances_consumed},
          {"upper_invoked", t.upper_invoked},
          {"flops_lower", t.flops_lower},
          {"flops_upper", t.flops_upper}};
}

int cmd_infer(const Common& c, const std::string& model_path, const std::string& data_path,
              const std::string& split, bool quantized) {
  const RunConfig cfg = load_run_config(c);
  const auto dir = prepare_run_dir(c, cfg);
  const auto saved = load_model(model_path);
  const auto ds = dataset_for(data_path, cfg);
  check_geometry(saved, ds);
  const auto data = split == "all" ? radar::to_instance_sets(ds) : split_or_throw(ds, split_arg(split), split);
  if (data.empty()) throw DataError("dataset is empty");
  if (quantized && !saved.quantized) throw DataError("model has no quantized section");
  const auto traces = quantized ? infer_all(*saved.quantized, data) : infer_all(saved.model, data);
  json arr = json::array();
  std::size_t source = 0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    arr.push_back(trace_json(traces[i], data[i], saved.model.class_names));
    source += traces[i].decision != kClutter;
  }
  write_json(dir / "traces.json", arr);
  std::cout << data.size() << " windows, " << source << " decided as source\nwrote "
            << (dir / "traces.json").string() << "\n";
  return 0;
}

void print_cost(const cost::CostReport& r, const std::optional<double>& measured) {
  std::cout << std::left;
  std::printf("%-44s%16s\n", "quantity", "value");
  std::printf("%-44s%16s\n", "lower FLOPs per instance", fmt(r.flops_lower_per_instance, 0).c_str());
  std::printf("%-44s%16s\n", "instances per window", fmt(r.instances_per_window, 3).c_str());
  std::printf("%-44s%16s\n", "lower FLOPs per window", fmt(r.lower_flops_per_window, 0).c_str());
  std::printf("%-44s%16s\n", "upper FLOPs per invocation", fmt(r.flops_upper_per_window, 0).c_str());
  std::printf("%-44s%16s\n", "clutter fraction", fmt(r.clutter_fraction, 3).c_str());
  std::printf("%-44s%16s\n", "expected FLOPs per window", fmt(r.expected_flops_per_window, 0).c_str());
  if (measured) std::printf("%-44s%16s\n", "measured FLOPs per window (traces)", fmt(*measured, 0).c_str());
  for (const auto& cmp : r.comparisons) std::printf("%-44s%16s\n", cmp.name.c_str(), fmt(cmp.flops_per_window, 0).c_str());
}

json cost_json(const cost::CostReport& r) {
  json cmp = json::array();
  for (const auto& c : r.comparisons) cmp.push_back({{"name", c.name}, {"flops_per_window", c.flops_per_window}});
  return {{"flops_lower_per_instance", r.flops_lower_per_instance},
          {"instances_per_window", r.instances_per_window},
          {"lower_flops_per_window", r.lower_flops_per_window},
          {"flops_upper_per_window", r.flops_upper_per_window},
          {"clutter_fraction", r.clutter_fraction},
          {"expected_flops_per_window", r.expected_flops_per_window},
          {"comparisons", cmp}};
}

int cmd_bench(const Common& c, const std::string& model_path, std::optional<double> lower_flops,
              std::optional<double> upper_flops) {
  const RunConfig cfg = load_run_config(c);
  const auto dir = prepare_run_dir(c, cfg);
  const double cf = cfg.bench.clutter_fraction;
  json doc;
  if (lower_flops || upper_flops) {
    if (!lower_flops || !upper_flops) throw ConfigError("--lower-flops and --upper-flops go together");
    const double e = cost::expected_flops(*lower_flops, *upper_flops, cf);
    doc = {{"lower_flops", *lower_flops}, {"upper_flops", *upper_flops}, {"clutter_fraction", cf},
           {"expected_flops_per_window", e},
           {"duty_cycle", cost::duty_cycle(e, cfg.bench.device_mflops, cfg.bench.window_period_s)}};
    std::cout << "expected FLOPs per window = " << fmt(*lower_flops, 0) << " + (1 - " << fmt(cf, 3) << ") * "
              << fmt(*upper_flops, 0) << " = " << fmt(e, 1) << "\n";
  } else {
    if (model_path.empty()) throw ConfigError("bench needs --model or --lower-flops/--upper-flops");
    const auto saved = load_model(model_path);
    const auto dims = cost::dims_of(saved.model, saved.geometry.window_len, saved.geometry.omega, saved.geometry.stride);
    std::optional<double> measured;
    std::optional<cost::EarlyExitStats> stats;
    json stream = nullptr;
    if (cfg.bench.stream_windows > 0) {
      const auto windows = radar::generate_stream(
          cfg.bench.stream_windows, cf, cfg.generator, derive_seed(cfg.seed, 0xBE),
          static_cast<double>(saved.geometry.window_len) / saved.geometry.sample_rate_hz,
          saved.geometry.omega, saved.geometry.stride);
      const auto traces = infer_all(saved.model, windows);
      cost::EarlyExitStats st;
      double total = 0.0, backfill = 0.0;
      std::size_t invoked = 0;
      for (const auto& t : traces) {
        st.mean_instances_consumed += static_cast<double>(t.lower_instances_consumed);
        total += static_cast<double>(t.flops_lower + t.flops_upper);
        if (t.upper_invoked) {
          ++invoked;
          backfill += static_cast<double>(dims.instances() - t.lower_instances_consumed);
        }
      }
      const double n = static_cast<double>(traces.size());
      st.mean_instances_consumed /= n;
      st.mean_backfill_per_invocation = invoked ? backfill / static_cast<double>(invoked) : 0.0;
      stats = st;
      measured = total / n;
      stream = {{"windows", traces.size()}, {"upper_invocation_rate", static_cast<double>(invoked) / n},
                {"measured_flops_per_window", *measured}};
    }
    const auto rep = cost::expected_cost(dims, cf, stats);
    doc = cost_json(rep);
    doc["stream"] = stream;
    doc["duty_cycle"] = cost::duty_cycle(rep.expected_flops_per_window, cfg.bench.device_mflops,
                                         cfg.bench.window_period_s);
    print_cost(rep, measured);
  }
  write_json(dir / "cost_report.json", doc);
  return 0;
}

int cmd_calibrate(const Common& c, const std::string& data_path) {
  const RunConfig cfg = load_run_config(c);
  const auto dir = prepare_run_dir(c, cfg);
  const auto ds = dataset_for(data_path, cfg);
  const auto& det = cfg.baseline.detector;
  const auto sub = static_cast<std::size_t>(std::llround(det.window_len_s * ds.sample_rate_hz));
  std::vector<double> disp;
  std::size_t clutter_windows = 0;
  for (std::size_t w = 0; w < ds.size(); ++w) {
    if (ds.labels[w] != kClutter) continue;
    ++clutter_windows;
    const Matrix x = ds.window(w);
    std::vector<double> i(x.rows()), q(x.rows());
    for (std::size_t t = 0; t < x.rows(); ++t) {
      i[t] = x(t, 0);
      q[t] = x(t, 1);
    }
    const auto d = baseline::window_displacements(baseline::unwrap_phase(i, q), sub);
    disp.insert(disp.end(), d.begin(), d.end());
  }
  if (clutter_windows == 0) throw DataError("calibrate-baseline: dataset has no clutter windows");
  const double thr = baseline::calibrate_threshold(disp, cfg.baseline.target_fa_per_s, det.window_len_s);
  const auto fit = baseline::fit_log_ccdf_tail(disp);
  std::size_t exceed = 0;
  for (double v : disp) exceed += std::abs(v) >= thr;
  const double p = baseline::per_window_fa_probability(cfg.baseline.target_fa_per_s, det.window_len_s);
  const json doc = {
      {"target_fa_per_s", cfg.baseline.target_fa_per_s},
      {"per_window_fa_probability", p},
      {"displacement_windows", disp.size()},
      {"tail_fit", {{"intercept", fit.intercept}, {"slope", fit.slope}, {"points", fit.points}}},
      {"calibrated_per_window_threshold_m", thr},
      {"calibrated_detector_threshold_m", thr * static_cast<double>(det.N) / static_cast<double>(det.M)},
      {"empirical_exceed_fraction", static_cast<double>(exceed) / static_cast<double>(disp.size())},
      {"configured_threshold_m", det.threshold_m},
      {"configured_per_window_threshold_m", det.per_window_threshold()},
      {"M", det.M},
      {"N", det.N}};
  write_json(dir / "threshold_report.json", doc);
  std::cout << "clutter displacement windows " << disp.size() << " (" << fmt(det.window_len_s, 2) << " s)\n"
            << "target false alarms          " << cfg.baseline.target_fa_per_s << " /s (p = " << p
            << " per window)\n"
            << "tail fit ln CCDF             " << fmt(fit.intercept) << " + " << fmt(fit.slope, 2) << " * x\n"
            << "per-window threshold         " << fmt(thr, 4) << " m\n"
            << "M-of-N threshold (x N/M)     " << fmt(thr * det.N / det.M, 4) << " m\n"
            << "configured " << fmt(det.threshold_m, 3) << " m x " << det.M << "/" << det.N << " = "
            << fmt(det.per_window_threshold(), 4) << " m per window\n";
  return 0;
}

int report(const Error& e) {
  std::cerr << "error: class=" << e.class_name() << " msg=" << e.what() << "\n";
  return static_cast<int>(e.error_class());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mscr: two-tier RNN cascade for radar source classification"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* s) {
    s->add_option("--config", common.config, "run config (JSON); defaults apply to omitted keys");
    s->add_option("--run-dir", common.run_dir, "directory for outputs and the resolved config")->capture_default_str();
  };

  std::string out, data, model, split = "test";
  bool quantized = false;
  std::optional<double> lower_flops, upper_flops;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic windowed dataset");
  add_common(gen);
  gen->add_option("--out", out, "dataset path (default <run-dir>/dataset.mscr)");

  auto* train = app.add_subcommand("train", "train the cascade (three phases)");
  add_common(train);
  train->add_option("--data", data, "dataset file (default: generate from config)");

  auto* eval = app.add_subcommand("eval", "evaluate a model on a dataset split");
  add_common(eval);
  eval->add_option("--model", model, "model file")->required();
  eval->add_option("--data", data, "dataset file (default: generate from config)");
  eval->add_option("--split", split, "train, val or test")->capture_default_str();
  eval->add_flag("--quantized", quantized, "use the integer engine");

  auto* quantize = app.add_subcommand("quantize", "add a Q15 section to a model and report agreement");
  add_common(quantize);
  quantize->add_option("--model", model, "model file")->required();
  quantize->add_option("--data", data, "dataset: train split calibrates scales, test split measures agreement");

  auto* infer = app.add_subcommand("infer", "per-window decisions and inference traces");
  add_common(infer);
  infer->add_option("--model", model, "model file")->required();
  infer->add_option("--data", data, "dataset file (default: generate from config)");
  infer->add_option("--split", split, "train, val, test or all")->capture_default_str();
  infer->add_flag("--quantized", quantized, "use the integer engine");

  auto* bench = app.add_subcommand("bench", "expected per-window cost of the cascade");
  add_common(bench);
  bench->add_option("--model", model, "model file (dimensions and measured stream)");
  bench->add_option("--lower-flops", lower_flops, "closed form: lower-tier FLOPs per window");
  bench->add_option("--upper-flops", upper_flops, "closed form: upper-tier FLOPs per invocation");

  auto* calib = app.add_subcommand("calibrate-baseline", "threshold for the displacement detector from clutter");
  add_common(calib);
  calib->add_option("--data", data, "dataset file; clutter windows are used (default: generate from config)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: class=config_error msg=" << e.what() << "\n";
    return static_cast<int>(ErrorClass::config);
  }

  try {
    if (*gen) return cmd_gen_data(common, out);
    if (*train) return cmd_train(common, data);
    if (*eval) return cmd_eval(common, model, data, split, quantized);
    if (*quantize) return cmd_quantize(common, model, data);
    if (*infer) return cmd_infer(common, model, data, split, quantized);
    if (*bench) return cmd_bench(common, model, lower_flops, upper_flops);
    if (*calib) return cmd_calibrate(common, data);
  } catch (const Error& e) {
    return report(e);
  } catch (const json::exception& e) {
    std::cerr << "error: class=config_error msg=" << e.what() << "\n";
    return static_cast<int>(ErrorClass::config);
  } catch (const std::bad_alloc&) {
    std::cerr << "error: class=numeric_error msg=out of memory\n";
    return static_cast<int>(ErrorClass::numeric);
  }
  return 0;
}
