#pragma once

// Window-level evaluation. Clutter is its own class at index 0; source
// label l maps to index l + 1.

#include <string>
#include <vector>

#include "json.hpp"
#include "mscrnn/quant.hpp"

namespace mscrnn {

struct EvalMetrics {
  std::vector<std::string> class_names;  // "Clutter" first
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::size_t windows = 0;
  double accuracy = 0.0;
  std::vector<double> recall;
  double mean_instances_consumed = 0.0;
  double upper_invocation_rate = 0.0;
  double mean_flops = 0.0;
};

inline std::size_t class_index(ClassLabel l) { return l == kClutter ? 0 : static_cast<std::size_t>(l) + 1; }

inline EvalMetrics summarize(std::span<const InferenceTrace> traces, std::span<const InstanceSet> data,
                             const std::vector<std::string>& source_names) {
  require(traces.size() == data.size(), "summarize: trace/data size mismatch");
  EvalMetrics r;
  r.class_names.push_back("Clutter");
  for (const auto& n : source_names) r.class_names.push_back(n);
  const std::size_t C = r.class_names.size();
  r.confusion.assign(C, std::vector<std::size_t>(C, 0));
  r.windows = data.size();
  std::size_t correct = 0, invoked = 0;
  double consumed = 0.0, flops = 0.0;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto t = class_index(data[i].label), p = class_index(traces[i].decision);
    if (t >= C || p >= C) throw DataError("summarize: label outside the model's classes");
    ++r.confusion[t][p];
    correct += t == p;
    invoked += traces[i].upper_invoked;
    consumed += static_cast<double>(traces[i].lower_instances_consumed);
    flops += static_cast<double>(traces[i].flops_lower + traces[i].flops_upper);
  }
  const double n = std::max<double>(1.0, static_cast<double>(data.size()));
  r.accuracy = static_cast<double>(correct) / n;
  r.mean_instances_consumed = consumed / n;
  r.upper_invocation_rate = static_cast<double>(invoked) / n;
  r.mean_flops = flops / n;
  for (std::size_t c = 0; c < C; ++c) {
    std::size_t total = 0;
    for (auto v : r.confusion[c]) total += v;
    r.recall.push_back(total ? static_cast<double>(r.confusion[c][c]) / static_cast<double>(total) : 0.0);
  }
  return r;
}

inline std::vector<InferenceTrace> infer_all(const MSCModel& m, std::span<const InstanceSet> data) {
  std::vector<InferenceTrace> out(data.size());
  parallel_for(data.size(), [&](std::size_t i) { out[i] = msc_infer(m, data[i]); });
  return out;
}

inline std::vector<InferenceTrace> infer_all(const quant::QuantizedModel& q, std::span<const InstanceSet> data) {
  std::vector<InferenceTrace> out(data.size());
  parallel_for(data.size(), [&](std::size_t i) { out[i] = quant::quant_msc_infer(q, data[i]); });
  return out;
}

inline EvalMetrics evaluate(const MSCModel& m, std::span<const InstanceSet> data) {
  const auto tr = infer_all(m, data);
  return summarize(tr, data, m.class_names);
}

inline nlohmann::json to_json(const EvalMetrics& r) {
  nlohmann::json recall = nlohmann::json::object();
  for (std::size_t c = 0; c < r.class_names.size(); ++c) recall[r.class_names[c]] = r.recall[c];
  return {{"windows", r.windows},
          {"accuracy", r.accuracy},
          {"recall", recall},
          {"class_names", r.class_names},
          {"confusion", r.confusion},
          {"mean_instances_consumed", r.mean_instances_consumed},
          {"upper_invocation_rate", r.upper_invocation_rate},
          {"mean_flops", r.mean_flops}};
}

}  // namespace mscrnn
