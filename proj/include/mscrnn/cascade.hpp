#pragma once

// Two-tier cascade. The lower EMI tier runs on every window and exits early;
// only windows it calls "source" reach the upper FastGRNN, which reads the
// lower tier's per-instance final hidden states and names the source type.
//
// Training follows three phases: lower tier alone, upper tier alone on frozen
// embeddings with a clutter-masked loss, then n_r joint rounds on the sum of
// both losses (MI loss for the first half of the rounds, EMI loss after).

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mscrnn/emi.hpp"

namespace mscrnn {

struct MSCModel {
  EMIModel lower;
  FastGRNNParams upper_cell;
  Readout upper_readout;
  std::vector<std::string> class_names;  // source classes, index = label

  std::size_t num_source_classes() const { return upper_readout.num_classes(); }

  bool operator==(const MSCModel&) const = default;
};

inline void validate(const MSCModel& m) {
  validate(m.lower);
  validate(m.upper_cell);
  validate(m.upper_readout, m.upper_cell.hidden_dim());
  require(m.upper_cell.input_dim() == m.lower.cell.hidden_dim(),
          "MSCModel: upper input dim must equal lower hidden dim");
  require(m.class_names.empty() || m.class_names.size() == m.num_source_classes(),
          "MSCModel: class name count != upper class count");
}

inline std::vector<std::span<double>> parameter_views(MSCModel& m) {
  auto v = parameter_views(m.lower);
  for (auto s : parameter_views(m.upper_cell)) v.push_back(s);
  for (auto s : parameter_views(m.upper_readout)) v.push_back(s);
  return v;
}

inline std::vector<std::span<double>> upper_parameter_views(MSCModel& m) {
  auto v = parameter_views(m.upper_cell);
  for (auto s : parameter_views(m.upper_readout)) v.push_back(s);
  return v;
}

inline MSCModel zeros_like(const MSCModel& m) {
  return MSCModel{zeros_like(m.lower), zeros_like(m.upper_cell), zeros_like(m.upper_readout),
                  m.class_names};
}

// ---------------------------------------------------------------------------
// Inference.

// N_inst x H_l: row tau is the final lower-cell state of instance tau.
inline Matrix embed_instances(const EMIModel& lower, const InstanceSet& inst,
                              OpCounter* ops = nullptr) {
  require(inst.size() > 0, "embed_instances: no instances");
  Matrix out(inst.size(), lower.cell.hidden_dim());
  for (std::size_t tau = 0; tau < inst.size(); ++tau) {
    check_instance_shape(lower.cell, inst.instances[tau]);
    const Vector h = run_final(lower.cell, inst.instances[tau], {}, ops);
    std::copy(h.begin(), h.end(), out.row(tau).begin());
  }
  return out;
}

inline Vector upper_predict(const MSCModel& m, const Matrix& embeddings, OpCounter* ops = nullptr) {
  if (embeddings.rows() == 0) throw ConfigError("upper_predict: empty embedding sequence");
  require(embeddings.cols() == m.upper_cell.input_dim(),
          "upper_predict: embedding width != lower hidden dim");
  const Vector h = run_final(m.upper_cell, embeddings, {}, ops);
  if (ops) ops->flops += 2ULL * m.upper_readout.w.size() + m.upper_readout.b.size();
  return m.upper_readout.predict(h);
}

struct InferenceTrace {
  ClassLabel decision = kClutter;
  std::size_t lower_instances_consumed = 0;
  bool upper_invoked = false;
  std::uint64_t flops_lower = 0;
  std::uint64_t flops_upper = 0;
};

// Embeddings the lower tier already computed before exiting are reused; the
// rest are computed here and charged to the upper invocation.
inline InferenceTrace msc_infer(const MSCModel& m, const InstanceSet& inst) {
  InferenceTrace tr;
  OpCounter lower_ops;
  std::vector<Vector> seen;
  const EmiDecision d = emi_infer(m.lower, inst, &lower_ops, &seen);
  tr.lower_instances_consumed = d.instances_consumed;
  tr.flops_lower = lower_ops.flops;
  if (!d.source) return tr;

  OpCounter upper_ops;
  Matrix emb(inst.size(), m.lower.cell.hidden_dim());
  for (std::size_t tau = 0; tau < inst.size(); ++tau) {
    const Vector h = tau < seen.size() ? seen[tau]
                                       : run_final(m.lower.cell, inst.instances[tau], {}, &upper_ops);
    std::copy(h.begin(), h.end(), emb.row(tau).begin());
  }
  const Vector probs = upper_predict(m, emb, &upper_ops);
  tr.upper_invoked = true;
  tr.decision = static_cast<ClassLabel>(argmax(probs));
  tr.flops_upper = upper_ops.flops;
  return tr;
}

// ---------------------------------------------------------------------------
// Losses.

// Upper-tier cross-entropy of one source window, times `weight`. With `grad`,
// upper gradients are accumulated and, when `d_embeddings` is non-null, the
// gradient w.r.t. each embedding row is written there.
inline double upper_window_loss(const MSCModel& m, const Matrix& embeddings, ClassLabel label,
                                double weight, MSCModel* grad, Matrix* d_embeddings) {
  require(label >= 0 && static_cast<std::size_t>(label) < m.num_source_classes(),
          "upper loss: source label out of range");
  const SequenceTrace tr = forward(m.upper_cell, embeddings);
  const std::size_t T = tr.steps();
  Matrix gs(T, m.upper_cell.hidden_dim());
  const double loss = readout_loss(m.upper_readout, tr.last(), static_cast<std::size_t>(label),
                                   weight, grad ? &grad->upper_readout : nullptr, gs.row(T - 1));
  if (grad) backward_into(m.upper_cell, embeddings, tr, gs, grad->upper_cell, d_embeddings);
  return loss;
}

struct JointTerms {
  bool lower_loss = true;   // include the lower-tier loss
  bool upper_loss = true;   // include the conditional upper loss
  bool train_lower = true;  // let gradients reach lower parameters
  LowerLoss kind = LowerLoss::mi;
};

// L_lower(window) * lower_weight + 1[source] * CE_upper(window) * upper_weight.
inline double joint_window_loss(const MSCModel& m, const InstanceSet& w, std::size_t span_start,
                                const JointTerms& terms, double lower_weight, double upper_weight,
                                MSCModel* grad) {
  const bool need_upper = terms.upper_loss && w.is_source();
  if (!need_upper) {
    if (!terms.lower_loss) return 0.0;
    return lower_window_loss(m.lower, w, span_start, terms.kind, lower_weight,
                             grad && terms.train_lower ? &grad->lower : nullptr);
  }
  std::vector<SequenceTrace> traces;
  traces.reserve(w.size());
  Matrix emb(w.size(), m.lower.cell.hidden_dim());
  for (std::size_t tau = 0; tau < w.size(); ++tau) {
    check_instance_shape(m.lower.cell, w.instances[tau]);
    traces.push_back(forward(m.lower.cell, w.instances[tau]));
    const auto last = traces.back().last();
    std::copy(last.begin(), last.end(), emb.row(tau).begin());
  }
  Matrix d_emb;
  const bool lower_grad = grad && terms.train_lower;
  double loss = upper_window_loss(m, emb, w.label, upper_weight, grad, lower_grad ? &d_emb : nullptr);
  if (terms.lower_loss || lower_grad) {
    std::vector<Vector> extra;
    if (lower_grad) {
      extra.reserve(w.size());
      for (std::size_t tau = 0; tau < w.size(); ++tau)
        extra.emplace_back(d_emb.row(tau).begin(), d_emb.row(tau).end());
    }
    const double lw = terms.lower_loss ? lower_weight : 0.0;
    loss += lower_window_loss(m.lower, w, span_start, terms.kind, lw,
                              lower_grad ? &grad->lower : nullptr, traces, extra);
  }
  return loss;
}

// Mean upper cross-entropy over the source windows of `batch`; zero when the
// batch holds only clutter.
inline double conditional_upper_loss(const MSCModel& m, std::span<const InstanceSet> batch,
                                     MSCModel* grad = nullptr, bool train_lower = true) {
  std::size_t n_source = 0;
  for (const auto& w : batch) n_source += w.is_source();
  if (n_source == 0) return 0.0;
  const double weight = 1.0 / static_cast<double>(n_source);
  double loss = 0.0;
  const JointTerms terms{false, true, train_lower, LowerLoss::mi};
  for (const auto& w : batch)
    if (w.is_source()) loss += joint_window_loss(m, w, 0, terms, 0.0, weight, grad);
  return loss;
}

// L_lower + conditional upper loss over a batch, each normalized as in
// training (lower: mean over windows; upper: mean over source windows).
inline double joint_batch_loss(const MSCModel& m, std::span<const InstanceSet> batch,
                               std::span<const std::size_t> spans, LowerLoss kind,
                               MSCModel* grad = nullptr) {
  std::size_t n_source = 0;
  for (const auto& w : batch) n_source += w.is_source();
  const double lw = 1.0 / static_cast<double>(batch.size());
  const double uw = n_source ? 1.0 / static_cast<double>(n_source) : 0.0;
  const JointTerms terms{true, n_source > 0, true, kind};
  double loss = 0.0;
  for (std::size_t i = 0; i < batch.size(); ++i)
    loss += joint_window_loss(m, batch[i], spans[i], terms, lw, uw, grad);
  return loss;
}

// ---------------------------------------------------------------------------
// Training.

struct MscTrainConfig {
  EmiTrainConfig lower;  // phase 1: rounds x epochs_per_round, lower.optimizer
  std::size_t upper_hidden_dim = 16;
  CellInit upper_cell;
  std::size_t num_source_classes = 0;  // 0 = infer from labels
  std::vector<std::string> class_names;
  std::size_t phase2_epochs = 10;
  double lr_phase2 = 0.01;
  std::size_t n_r = 2;
  std::size_t joint_epochs_per_round = 2;
  double lr_phase3 = 0.003;
  std::size_t batch_size = 64;
  double rel_tol = 1e-4;
  std::uint64_t seed = 1;
};

struct MscTrainResult {
  MSCModel model;
  std::vector<double> phase1_loss;
  std::vector<double> phase2_loss;
  std::vector<double> phase3_loss;
  std::vector<std::size_t> spans;
  double train_accuracy = 0.0;
};

inline std::size_t infer_class_count(std::span<const InstanceSet> data) {
  ClassLabel mx = 0;
  for (const auto& w : data) mx = std::max(mx, w.label);
  return std::max<std::size_t>(2, static_cast<std::size_t>(mx) + 1);
}

inline double msc_accuracy(const MSCModel& m, std::span<const InstanceSet> data) {
  if (data.empty()) return 0.0;
  std::vector<int> ok(data.size(), 0);
  parallel_for(data.size(),
               [&](std::size_t i) { ok[i] = msc_infer(m, data[i]).decision == data[i].label; });
  return static_cast<double>(std::accumulate(ok.begin(), ok.end(), 0)) /
         static_cast<double>(data.size());
}

namespace detail {

inline std::vector<double> train_upper_frozen(MSCModel& m, std::span<const InstanceSet> data,
                                              const MscTrainConfig& cfg, Rng& rng) {
  std::vector<std::size_t> source_idx;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (data[i].is_source()) source_idx.push_back(i);
  std::vector<Matrix> emb(data.size());
  parallel_for(source_idx.size(),
               [&](std::size_t j) { emb[source_idx[j]] = embed_instances(m.lower, data[source_idx[j]]); });

  OptimizerConfig oc = cfg.lower.optimizer;
  oc.lr = cfg.lr_phase2;
  Optimizer opt(oc);
  const EpochPlan plan{cfg.phase2_epochs, cfg.rel_tol, 3};
  std::vector<double> history;
  for (std::size_t epoch = 0; epoch < plan.max_epochs; ++epoch) {
    double epoch_loss = 0.0;
    for (const auto& batch : make_batches(source_idx, cfg.batch_size, rng)) {
      const double weight = 1.0 / static_cast<double>(batch.size());
      MSCModel grad = zeros_like(m);
      const double loss = batch_gradient(
          m, batch,
          [&](std::size_t i, MSCModel& g) {
            return upper_window_loss(m, emb[i], data[i].label, weight, &g, nullptr);
          },
          grad);
      check_finite_loss(loss, "phase 2 epoch " + std::to_string(epoch));
      opt.step(upper_parameter_views(m), upper_parameter_views(grad));
      epoch_loss += loss * static_cast<double>(batch.size());
    }
    history.push_back(epoch_loss / static_cast<double>(std::max<std::size_t>(1, source_idx.size())));
    if (converged(history, plan)) break;
  }
  return history;
}

inline std::vector<double> train_joint_round(MSCModel& m, std::span<const InstanceSet> data,
                                             const std::vector<std::size_t>& spans, LowerLoss kind,
                                             const MscTrainConfig& cfg, Optimizer& opt, Rng& rng,
                                             std::size_t round) {
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const EpochPlan plan{cfg.joint_epochs_per_round, cfg.rel_tol, 3};
  std::vector<double> history;
  for (std::size_t epoch = 0; epoch < plan.max_epochs; ++epoch) {
    double epoch_loss = 0.0;
    const auto batches = make_batches(order, cfg.batch_size, rng);
    for (const auto& batch : batches) {
      std::size_t n_source = 0;
      for (auto i : batch) n_source += data[i].is_source();
      const double lw = 1.0 / static_cast<double>(batch.size());
      const double uw = n_source ? 1.0 / static_cast<double>(n_source) : 0.0;
      const JointTerms terms{true, n_source > 0, true, kind};
      MSCModel grad = zeros_like(m);
      const double loss = batch_gradient(
          m, batch,
          [&](std::size_t i, MSCModel& g) {
            return joint_window_loss(m, data[i], spans[i], terms, lw, uw, &g);
          },
          grad);
      check_finite_loss(loss, "phase 3 round " + std::to_string(round) + " epoch " +
                                  std::to_string(epoch));
      opt.step(parameter_views(m), parameter_views(grad));
      epoch_loss += loss;
    }
    history.push_back(epoch_loss / static_cast<double>(batches.size()));
    if (converged(history, plan)) break;
  }
  return history;
}

}  // namespace detail

inline MscTrainResult train_msc(std::span<const InstanceSet> data, const MscTrainConfig& cfg) {
  require(!data.empty(), "train_msc: empty dataset");
  if (std::none_of(data.begin(), data.end(), [](const InstanceSet& w) { return w.is_source(); }))
    throw DataError("train_msc: no source windows in training data");
  for (const auto& w : data)
    require(w.label >= kClutter, "train_msc: labels must be -1 (clutter) or a source index");

  MscTrainResult res;
  const std::size_t classes =
      cfg.num_source_classes ? cfg.num_source_classes : infer_class_count(data);

  // Phase 1: lower tier alone on binarized labels.
  EmiTrainConfig lcfg = cfg.lower;
  lcfg.seed = derive_seed(cfg.seed, 1);
  lcfg.batch_size = cfg.batch_size;
  lcfg.rel_tol = cfg.rel_tol;
  auto lower = train_emi(data, lcfg);
  res.phase1_loss = lower.loss_history;
  res.spans = lower.spans;
  res.model.lower = std::move(lower.model);

  res.model.upper_cell = init_params(res.model.lower.cell.hidden_dim(), cfg.upper_hidden_dim,
                                     cfg.upper_cell, derive_seed(cfg.seed, 2));
  res.model.upper_readout = init_readout(cfg.upper_hidden_dim, classes, derive_seed(cfg.seed, 3));
  res.model.class_names = cfg.class_names;
  validate(res.model);

  // Phase 2: upper tier on frozen embeddings.
  Rng rng(derive_seed(cfg.seed, 4));
  res.phase2_loss = detail::train_upper_frozen(res.model, data, cfg, rng);

  // Phase 3: joint rounds.
  OptimizerConfig oc = cfg.lower.optimizer;
  oc.lr = cfg.lr_phase3;
  Optimizer opt(oc);
  for (std::size_t r = 0; r < cfg.n_r; ++r) {
    const LowerLoss kind = lower_loss_for_round(r, cfg.n_r);
    if (kind == LowerLoss::mi) relabel_all(res.model.lower, data, res.spans);
    auto h = detail::train_joint_round(res.model, data, res.spans, kind, cfg, opt, rng, r);
    res.phase3_loss.insert(res.phase3_loss.end(), h.begin(), h.end());
  }
  res.train_accuracy = msc_accuracy(res.model, data);
  return res;
}

}  // namespace mscrnn
