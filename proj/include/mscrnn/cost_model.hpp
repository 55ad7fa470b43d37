#pragma once

// Analytical operation counts for the cascade.
//
// Convention: one multiply-add in a matrix-vector product counts as 2 FLOPs,
// every elementwise add/multiply counts 1, every nonlinearity counts 1.
//
//   cell step, dense:   2*H*(D + H)          (W x and U h, shared by both branches)
//                     + 4*H                  (sum + bias, for gate and update)
//                     + 6*H                  (1 - z, zeta*, +nu, two products, add)
//                     + 2*H                  (two nonlinearities)
//   low-rank matrix:    2*r*(rows + cols) in place of 2*rows*cols
//   readout:            2*C*H + C

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "mscrnn/cascade.hpp"

namespace mscrnn::cost {

inline std::uint64_t flops_matvec(std::size_t rows, std::size_t cols, std::optional<std::size_t> rank) {
  return rank ? 2ULL * *rank * (rows + cols) : 2ULL * rows * cols;
}

inline std::uint64_t flops_cell_step(std::size_t input_dim, std::size_t hidden_dim,
                                     std::optional<std::size_t> rank_w = std::nullopt,
                                     std::optional<std::size_t> rank_u = std::nullopt) {
  require(input_dim >= 1 && hidden_dim >= 1, "flops_cell_step: dims must be >= 1");
  return flops_matvec(hidden_dim, input_dim, rank_w) + flops_matvec(hidden_dim, hidden_dim, rank_u) +
         kCellElementwiseFlopsPerUnit * hidden_dim;
}

inline std::uint64_t flops_readout(std::size_t hidden_dim, std::size_t classes) {
  return 2ULL * classes * hidden_dim + classes;
}

struct ModelDims {
  std::size_t features = 2;
  std::size_t window_len = 256;
  std::size_t omega = 48;
  std::size_t stride = 16;
  std::size_t lower_hidden = 16;
  std::optional<std::size_t> lower_rank_w, lower_rank_u;
  std::size_t upper_hidden = 16;
  std::optional<std::size_t> upper_rank_w, upper_rank_u;
  std::size_t source_classes = 2;

  std::size_t instances() const { return instance_count(window_len, omega, stride); }
};

inline std::optional<std::size_t> rank_of(const Weight& w) {
  if (const auto* lr = std::get_if<LowRankMatrix>(&w)) return lr->rank();
  return std::nullopt;
}

inline ModelDims dims_of(const MSCModel& m, std::size_t window_len, std::size_t omega,
                         std::size_t stride) {
  ModelDims d;
  d.features = m.lower.cell.input_dim();
  d.window_len = window_len;
  d.omega = omega;
  d.stride = stride;
  d.lower_hidden = m.lower.cell.hidden_dim();
  d.lower_rank_w = rank_of(m.lower.cell.W);
  d.lower_rank_u = rank_of(m.lower.cell.U);
  d.upper_hidden = m.upper_cell.hidden_dim();
  d.upper_rank_w = rank_of(m.upper_cell.W);
  d.upper_rank_u = rank_of(m.upper_cell.U);
  d.source_classes = m.num_source_classes();
  return d;
}

// One lower-tier instance: omega cell steps plus the binary readout.
inline std::uint64_t flops_lower_instance(const ModelDims& d) {
  return d.omega * flops_cell_step(d.features, d.lower_hidden, d.lower_rank_w, d.lower_rank_u) +
         flops_readout(d.lower_hidden, 2);
}

// An embedding computed outside the lower scan (no readout).
inline std::uint64_t flops_embedding(const ModelDims& d) {
  return d.omega * flops_cell_step(d.features, d.lower_hidden, d.lower_rank_w, d.lower_rank_u);
}

inline std::uint64_t flops_upper_window(const ModelDims& d) {
  return d.instances() * flops_cell_step(d.lower_hidden, d.upper_hidden, d.upper_rank_w, d.upper_rank_u) +
         flops_readout(d.upper_hidden, d.source_classes);
}

struct EarlyExitStats {
  double mean_instances_consumed = 0.0;        // over all windows
  double mean_backfill_per_invocation = 0.0;   // embeddings computed on upper invocation
};

struct Comparison {
  std::string name;
  double flops_per_window = 0.0;
};

struct CostReport {
  double flops_lower_per_instance = 0.0;
  double instances_per_window = 0.0;
  double flops_upper_per_window = 0.0;
  double clutter_fraction = 0.0;
  double expected_flops_per_window = 0.0;
  double lower_flops_per_window = 0.0;  // always-on part
  std::vector<Comparison> comparisons;
};

// Closed form on tier totals: lower + (1 - c) * upper.
inline double expected_flops(double lower_total, double upper, double clutter_fraction) {
  require(clutter_fraction >= 0.0 && clutter_fraction <= 1.0, "clutter fraction must be in [0, 1]");
  return lower_total + (1.0 - clutter_fraction) * upper;
}

inline CostReport expected_cost(const ModelDims& d, double clutter_fraction,
                                std::optional<EarlyExitStats> stats = std::nullopt) {
  require(clutter_fraction >= 0.0 && clutter_fraction <= 1.0, "clutter fraction must be in [0, 1]");
  CostReport r;
  r.flops_lower_per_instance = static_cast<double>(flops_lower_instance(d));
  r.instances_per_window = stats ? stats->mean_instances_consumed : static_cast<double>(d.instances());
  r.flops_upper_per_window = static_cast<double>(flops_upper_window(d));
  if (stats) r.flops_upper_per_window += stats->mean_backfill_per_invocation * static_cast<double>(flops_embedding(d));
  r.clutter_fraction = clutter_fraction;
  r.lower_flops_per_window = r.instances_per_window * r.flops_lower_per_instance;
  r.expected_flops_per_window = expected_flops(r.lower_flops_per_window, r.flops_upper_per_window, clutter_fraction);

  const auto full_lower = static_cast<double>(d.instances() * flops_lower_instance(d));
  r.comparisons.push_back({"EMI-FastGRNN (lower tier alone, all instances)", full_lower});
  r.comparisons.push_back(
      {"FastGRNN (monolithic, full window)",
       static_cast<double>(d.window_len * flops_cell_step(d.features, d.upper_hidden) +
                           flops_readout(d.upper_hidden, d.source_classes + 1))});
  r.comparisons.push_back({"MSC-RNN (always invoke upper)", full_lower + static_cast<double>(flops_upper_window(d))});
  return r;
}

// Fraction of real time the processor is busy at `device_mflops`.
inline double duty_cycle(double flops_per_window, double device_mflops, double window_period_s) {
  require(device_mflops > 0.0 && window_period_s > 0.0, "duty_cycle: rates must be positive");
  return flops_per_window / (device_mflops * 1e6 * window_period_s);
}

}  // namespace mscrnn::cost
