#pragma once

// Lower tier: multi-instance clutter/source discrimination with early exit.
//
// A window is cut into overlapping fixed-width instances. Training alternates
// between fitting an instance classifier and re-locating, in every source
// window, the k consecutive instances with the highest source score (MI
// phase); later rounds switch to a loss applied at every time step of the kept
// instances (EMI phase), which is what makes early exit reliable.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mscrnn/fastgrnn.hpp"
#include "mscrnn/optim.hpp"
#include "mscrnn/trainer.hpp"

namespace mscrnn {

// Dataset-level class labels: clutter is -1, source types are 0, 1, ...
using ClassLabel = int;
inline constexpr ClassLabel kClutter = -1;

// Lower-tier class indices.
inline constexpr std::size_t kClutterClass = 0;
inline constexpr std::size_t kSourceClass = 1;

struct InstanceSet {
  std::vector<Matrix> instances;  // each omega x features
  ClassLabel label = kClutter;
  std::size_t origin = 0;  // window id
  std::size_t stride = 1;

  std::size_t size() const { return instances.size(); }
  bool is_source() const { return label != kClutter; }
};

inline std::size_t instance_count(std::size_t window_len, std::size_t omega, std::size_t stride) {
  require(stride >= 1, "make_instances: stride must be >= 1");
  require(window_len >= omega, "make_instances: window shorter than instance width");
  require((window_len - omega) % stride == 0,
          "make_instances: (window_len - omega) must be a multiple of stride");
  return (window_len - omega) / stride + 1;
}

// `window` is T x F. Instance tau covers rows [tau*stride, tau*stride + omega).
inline InstanceSet make_instances(const Matrix& window, std::size_t omega, std::size_t stride,
                                  ClassLabel label = kClutter, std::size_t origin = 0) {
  require(omega >= 1, "make_instances: omega must be >= 1");
  const std::size_t n = instance_count(window.rows(), omega, stride);
  InstanceSet out;
  out.label = label;
  out.origin = origin;
  out.stride = stride;
  out.instances.reserve(n);
  const std::size_t f = window.cols();
  for (std::size_t tau = 0; tau < n; ++tau) {
    const auto first = window.values().begin() + static_cast<std::ptrdiff_t>(tau * stride * f);
    out.instances.emplace_back(omega, f, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(omega * f)));
  }
  return out;
}

struct EMIModel {
  FastGRNNParams cell;
  Readout readout;  // {clutter, source}
  std::size_t k = 10;
  double p_hat = 0.5;

  bool operator==(const EMIModel&) const = default;
};

inline void validate(const EMIModel& m) {
  validate(m.cell);
  validate(m.readout, m.cell.hidden_dim());
  require(m.readout.num_classes() == 2, "EMIModel: lower readout must be binary");
  require(m.k >= 1, "EMIModel: k must be >= 1");
  require(m.p_hat > 0.0 && m.p_hat < 1.0, "EMIModel: p_hat must be in (0, 1)");
}

inline std::vector<std::span<double>> parameter_views(EMIModel& m) {
  auto v = parameter_views(m.cell);
  for (auto s : parameter_views(m.readout)) v.push_back(s);
  return v;
}

inline EMIModel zeros_like(const EMIModel& m) {
  return EMIModel{zeros_like(m.cell), zeros_like(m.readout), m.k, m.p_hat};
}

struct InstancePrediction {
  Vector probs;   // {P(clutter), P(source)}
  Vector hidden;  // final state, reused as the instance embedding
};

inline void check_instance_shape(const FastGRNNParams& cell, const Matrix& inst) {
  if (inst.cols() != cell.input_dim() || inst.rows() == 0)
    throw ConfigError("instance shape " + std::to_string(inst.rows()) + "x" +
                      std::to_string(inst.cols()) + " does not match cell input dim " +
                      std::to_string(cell.input_dim()));
}

inline InstancePrediction instance_predict(const EMIModel& m, const Matrix& instance,
                                           OpCounter* ops = nullptr) {
  check_instance_shape(m.cell, instance);
  Vector h = run_final(m.cell, instance, {}, ops);
  Vector probs = m.readout.predict(h);
  if (ops) ops->flops += 2ULL * m.readout.w.size() + m.readout.b.size();
  return {std::move(probs), std::move(h)};
}

// Start of the k-span with the largest summed source probability; ties go to
// the smallest start. Each span is summed directly (not as a sliding sum) so
// the result never depends on accumulated rounding.
inline std::size_t mi_relabel(std::span<const double> source_probs, std::size_t k) {
  require(k >= 1 && k <= source_probs.size(), "mi_relabel: k must be in [1, N_inst]");
  double best = 0.0;
  std::size_t best_start = 0;
  for (std::size_t s = 0; s + k <= source_probs.size(); ++s) {
    double sum = 0.0;
    for (std::size_t i = s; i < s + k; ++i) sum += source_probs[i];
    if (s == 0 || sum > best) {
      best = sum;
      best_start = s;
    }
  }
  return best_start;
}

inline std::size_t initial_span_start(std::size_t n_inst, std::size_t k) {
  return (n_inst - std::min(k, n_inst)) / 2;
}

struct EmiDecision {
  bool source = false;
  std::size_t instances_consumed = 0;
  std::optional<std::size_t> positive_run_end;  // index of the k-th consecutive positive
};

// The early-exit rule on already-computed source probabilities.
inline EmiDecision early_exit_rule(std::span<const double> source_probs, std::size_t k,
                                   double p_hat) {
  std::size_t run = 0;
  for (std::size_t tau = 0; tau < source_probs.size(); ++tau) {
    run = source_probs[tau] >= p_hat ? run + 1 : 0;
    if (run >= k) return {true, tau + 1, tau};
  }
  return {false, source_probs.size(), std::nullopt};
}

// Scans instances lazily and stops at the first run of k positives. When
// `embeddings` is given it receives the final hidden state of every instance
// that was evaluated (in order).
inline EmiDecision emi_infer(const EMIModel& m, const InstanceSet& inst, OpCounter* ops = nullptr,
                             std::vector<Vector>* embeddings = nullptr) {
  std::size_t run = 0;
  for (std::size_t tau = 0; tau < inst.size(); ++tau) {
    auto pred = instance_predict(m, inst.instances[tau], ops);
    if (embeddings) embeddings->push_back(std::move(pred.hidden));
    run = pred.probs[kSourceClass] >= m.p_hat ? run + 1 : 0;
    if (run >= m.k) return {true, tau + 1, tau};
  }
  return {false, inst.size(), std::nullopt};
}

inline Vector source_probabilities(const EMIModel& m, const InstanceSet& inst) {
  Vector out(inst.size());
  for (std::size_t tau = 0; tau < inst.size(); ++tau)
    out[tau] = instance_predict(m, inst.instances[tau]).probs[kSourceClass];
  return out;
}

// ---------------------------------------------------------------------------
// Losses.

enum class LowerLoss { mi, emi };

// Instances that carry a loss term: the current span for source windows,
// everything for clutter windows.
inline std::pair<std::size_t, std::size_t> kept_range(const InstanceSet& w, std::size_t span_start,
                                                      std::size_t k) {
  if (!w.is_source()) return {0, w.size()};
  const std::size_t kk = std::min(k, w.size());
  const std::size_t s = std::min(span_start, w.size() - kk);
  return {s, s + kk};
}

// Readout cross-entropy on hidden state `h` for class `target`, scaled by
// `weight`. Adds readout gradients into `grad_readout` and the state gradient
// into `grad_h`.
inline double readout_loss(const Readout& r, std::span<const double> h, std::size_t target,
                           double weight, Readout* grad_readout, std::span<double> grad_h) {
  Vector p = r.predict(h);
  const double loss = cross_entropy(p, target);
  if (grad_readout) {
    p[target] -= 1.0;
    for (auto& v : p) v *= weight;
    add_outer(grad_readout->w, p, h);
    for (std::size_t c = 0; c < p.size(); ++c) grad_readout->b[c] += p[c];
    matvec_transposed_into(r.w, p, grad_h);
  }
  return weight * loss;
}

// Lower-tier loss of one window, times `weight`.
//
// MI: mean cross-entropy over the final step of each kept instance.
// EMI: mean cross-entropy over every step of each kept instance.
//
// `traces` may hold precomputed forward traces for all instances (empty to
// compute here). `extra_final_grads`, if non-empty, adds a gradient on the final
// state of every instance; the cascade uses it to route the upper-tier loss
// through the embeddings in the same backward pass.
inline double lower_window_loss(const EMIModel& m, const InstanceSet& w, std::size_t span_start,
                                LowerLoss kind, double weight, EMIModel* grad,
                                std::span<const SequenceTrace> traces = {},
                                std::span<const Vector> extra_final_grads = {}) {
  const auto [first, last] = kept_range(w, span_start, m.k);
  const std::size_t target = w.is_source() ? kSourceClass : kClutterClass;
  const std::size_t hd = m.cell.hidden_dim();
  const double per_instance = 1.0 / static_cast<double>(last - first);
  double loss = 0.0;

  for (std::size_t tau = 0; tau < w.size(); ++tau) {
    const bool kept = tau >= first && tau < last;
    const bool extra = !extra_final_grads.empty();
    if (!kept && !(extra && grad)) continue;
    const Matrix& x = w.instances[tau];
    check_instance_shape(m.cell, x);
    SequenceTrace local;
    const SequenceTrace* tr = nullptr;
    if (!traces.empty()) {
      tr = &traces[tau];
    } else {
      local = forward(m.cell, x);
      tr = &local;
    }
    const std::size_t T = tr->steps();
    Matrix gs(T, hd);
    if (kept) {
      if (kind == LowerLoss::mi) {
        loss += readout_loss(m.readout, tr->last(), target, weight * per_instance,
                             grad ? &grad->readout : nullptr, gs.row(T - 1));
      } else {
        const double wt = weight * per_instance / static_cast<double>(T);
        for (std::size_t t = 0; t < T; ++t)
          loss += readout_loss(m.readout, tr->states.row(t), target, wt,
                               grad ? &grad->readout : nullptr, gs.row(t));
      }
    }
    if (grad) {
      if (extra)
        for (std::size_t i = 0; i < hd; ++i) gs(T - 1, i) += extra_final_grads[tau][i];
      backward_into(m.cell, x, *tr, gs, grad->cell);
    }
  }
  return loss;
}

// ---------------------------------------------------------------------------
// Training.

struct EmiTrainConfig {
  std::size_t rounds = 4;
  std::size_t epochs_per_round = 3;
  std::size_t batch_size = 64;
  std::size_t k = 10;
  double p_hat = 0.5;
  std::size_t hidden_dim = 16;
  CellInit cell;
  OptimizerConfig optimizer;
  double rel_tol = 1e-4;
  std::uint64_t seed = 1;
};

struct EmiTrainResult {
  EMIModel model;
  std::vector<double> loss_history;  // one mean loss per epoch
  std::vector<std::size_t> spans;    // final span start per window (0 for clutter)
  std::vector<std::vector<std::size_t>> span_history;  // spans after each relabel
  double train_accuracy = 0.0;       // window level, via emi_infer
};

inline LowerLoss lower_loss_for_round(std::size_t round, std::size_t rounds) {
  return 2 * round < rounds ? LowerLoss::mi : LowerLoss::emi;
}

inline EMIModel init_emi_model(std::size_t features, const EmiTrainConfig& cfg) {
  EMIModel m;
  m.cell = init_params(features, cfg.hidden_dim, cfg.cell, derive_seed(cfg.seed, 11));
  m.readout = init_readout(cfg.hidden_dim, 2, derive_seed(cfg.seed, 12));
  m.k = cfg.k;
  m.p_hat = cfg.p_hat;
  return m;
}

inline std::vector<std::size_t> initial_spans(std::span<const InstanceSet> data, std::size_t k) {
  std::vector<std::size_t> spans(data.size(), 0);
  for (std::size_t i = 0; i < data.size(); ++i)
    if (data[i].is_source()) spans[i] = initial_span_start(data[i].size(), k);
  return spans;
}

inline void relabel_all(const EMIModel& m, std::span<const InstanceSet> data,
                        std::vector<std::size_t>& spans) {
  parallel_for(data.size(), [&](std::size_t i) {
    if (data[i].is_source())
      spans[i] = mi_relabel(source_probabilities(m, data[i]), std::min(m.k, data[i].size()));
  });
}

inline double emi_accuracy(const EMIModel& m, std::span<const InstanceSet> data) {
  if (data.empty()) return 0.0;
  std::vector<int> ok(data.size(), 0);
  parallel_for(data.size(),
               [&](std::size_t i) { ok[i] = emi_infer(m, data[i]).source == data[i].is_source(); });
  return static_cast<double>(std::accumulate(ok.begin(), ok.end(), 0)) /
         static_cast<double>(data.size());
}

// Trains epochs of `kind` loss at fixed spans; returns per-epoch mean losses.
inline std::vector<double> train_lower_epochs(EMIModel& m, std::span<const InstanceSet> data,
                                              const std::vector<std::size_t>& spans,
                                              LowerLoss kind, const EpochPlan& plan,
                                              std::size_t batch_size, Optimizer& opt, Rng& rng,
                                              const std::string& tag) {
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> history;
  for (std::size_t epoch = 0; epoch < plan.max_epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (const auto& batch : make_batches(order, batch_size, rng)) {
      const double weight = 1.0 / static_cast<double>(batch.size());
      EMIModel grad = zeros_like(m);
      const double loss = batch_gradient(
          m, batch,
          [&](std::size_t i, EMIModel& g) {
            return lower_window_loss(m, data[i], spans[i], kind, weight, &g);
          },
          grad);
      check_finite_loss(loss, tag + " epoch " + std::to_string(epoch));
      opt.step(parameter_views(m), parameter_views(grad));
      epoch_loss += loss * static_cast<double>(batch.size());
    }
    history.push_back(epoch_loss / static_cast<double>(data.size()));
    if (converged(history, plan)) break;
  }
  return history;
}

// Trains a lower-tier model from scratch on windows labeled clutter (-1) or
// any source type (>= 0; all source types count as "source").
inline EmiTrainResult train_emi(std::span<const InstanceSet> data, const EmiTrainConfig& cfg,
                                std::optional<EMIModel> start = std::nullopt) {
  require(!data.empty(), "train_emi: empty dataset");
  const bool any_source =
      std::any_of(data.begin(), data.end(), [](const InstanceSet& w) { return w.is_source(); });
  if (!any_source) throw DataError("train_emi: no source windows in training data");
  require(cfg.batch_size >= 1, "train_emi: batch_size must be >= 1");
  const std::size_t n_inst = data.front().size();
  require(n_inst >= 1 && !data.front().instances.empty(), "train_emi: windows without instances");
  require(cfg.k >= 1 && cfg.k <= n_inst, "train_emi: k must be in [1, N_inst]");

  EmiTrainResult res;
  res.model = start ? *start : init_emi_model(data.front().instances.front().cols(), cfg);
  res.model.k = cfg.k;
  res.model.p_hat = cfg.p_hat;
  validate(res.model);
  res.spans = initial_spans(data, cfg.k);

  OptimizerConfig oc = cfg.optimizer;
  Optimizer opt(oc);
  Rng rng(derive_seed(cfg.seed, 13));
  for (std::size_t r = 0; r < cfg.rounds; ++r) {
    const LowerLoss kind = lower_loss_for_round(r, cfg.rounds);
    auto h = train_lower_epochs(res.model, data, res.spans, kind,
                                EpochPlan{cfg.epochs_per_round, cfg.rel_tol, 3}, cfg.batch_size,
                                opt, rng, "emi round " + std::to_string(r));
    res.loss_history.insert(res.loss_history.end(), h.begin(), h.end());
    if (kind == LowerLoss::mi) {
      relabel_all(res.model, data, res.spans);
      res.span_history.push_back(res.spans);
    }
  }
  res.train_accuracy = emi_accuracy(res.model, data);
  return res;
}

}  // namespace mscrnn
