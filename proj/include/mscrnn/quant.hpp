#pragma once

// Q15 fixed-point mirror of the cascade's inference path.
//
// Scale plan
// ----------
// * Every tensor carries a power-of-two scale: real = q / 2^15 * 2^e.
// * Gate/update outputs, zeta and nu live at e = 0.
// * Each tier's hidden state has its own exponent. FastGRNN states are not
//   confined to [-1, 1] (z near 1 lets nu * c accumulate), so the exponent is
//   calibrated from float runs on data (calibrate_scale_plan). The lower
//   state exponent is also the upper tier's input exponent.
// * Inputs are quantized at a per-model input exponent.
// * Pre-activations and logits are accumulated in int32 in units of 2^-15
//   (scale 0, unsaturated). Each int16 x int16 product is exact in int32 and
//   is brought to the accumulator unit by a rounding right shift of
//   15 - e_weight - e_input bits.
// * Low-rank factors go through an int16 intermediate whose exponent is set
//   from a worst-case bound at quantization time, so it never saturates.
// * Rounding is half-away-from-zero everywhere.
//
// With e_weight + e_input <= 8 each accumulator term is below 2^23, so even
// 2 * 64 + 1 terms stay far inside int32; overflow is still checked and
// reported as a NumericError.

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mscrnn/cost_model.hpp"

namespace mscrnn::quant {

inline constexpr std::int32_t kOne = 32768;  // 1.0 in accumulator units
inline constexpr std::int32_t kQ15Max = 32767;
inline constexpr std::int32_t kQ15Min = -32768;

inline std::int16_t saturate16(std::int64_t v) {
  return static_cast<std::int16_t>(std::clamp<std::int64_t>(v, kQ15Min, kQ15Max));
}

// round(v / 2^shift), ties away from zero.
inline std::int32_t rshift_round(std::int32_t v, int shift) {
  if (shift <= 0) return v;
  const std::int32_t half = std::int32_t{1} << (shift - 1);
  return v >= 0 ? static_cast<std::int32_t>((static_cast<std::int64_t>(v) + half) >> shift)
                : -static_cast<std::int32_t>((-static_cast<std::int64_t>(v) + half) >> shift);
}

inline double round_half_away(double x) { return x >= 0.0 ? std::floor(x + 0.5) : -std::floor(-x + 0.5); }

struct Q15Tensor {
  std::vector<std::int16_t> data;
  std::size_t rows = 0;
  std::size_t cols = 0;
  int scale_exp = 0;

  double value(std::size_t i) const { return std::ldexp(static_cast<double>(data[i]), scale_exp - 15); }
  std::int16_t at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  bool operator==(const Q15Tensor&) const = default;
};

// Smallest e >= 0 with max|x| <= 2^e.
inline int scale_exponent_for(double max_abs) {
  int e = 0;
  while (max_abs > std::ldexp(1.0, e)) ++e;
  return e;
}

inline Q15Tensor quantize_at(std::span<const double> x, std::size_t rows, std::size_t cols, int e) {
  require(x.size() == rows * cols, "quantize: shape mismatch");
  Q15Tensor q{std::vector<std::int16_t>(x.size()), rows, cols, e};
  for (std::size_t i = 0; i < x.size(); ++i)
    q.data[i] = saturate16(static_cast<std::int64_t>(round_half_away(std::ldexp(x[i], 15 - e))));
  return q;
}

inline Q15Tensor quantize_q15(std::span<const double> x, std::size_t rows, std::size_t cols) {
  double mx = 0.0;
  for (double v : x) {
    require(std::isfinite(v), "quantize_q15: non-finite input");
    mx = std::max(mx, std::abs(v));
  }
  return quantize_at(x, rows, cols, scale_exponent_for(mx));
}

inline Q15Tensor quantize_q15(std::span<const double> x) { return quantize_q15(x, 1, x.size()); }
inline Q15Tensor quantize_q15(const Matrix& m) { return quantize_q15(m.values(), m.rows(), m.cols()); }

inline std::vector<double> dequantize(const Q15Tensor& q) {
  std::vector<double> out(q.data.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = q.value(i);
  return out;
}

inline Matrix dequantize_matrix(const Q15Tensor& q) { return Matrix(q.rows, q.cols, dequantize(q)); }

inline std::int16_t to_q15(double x) { return saturate16(static_cast<std::int64_t>(round_half_away(x * kOne))); }

// ---------------------------------------------------------------------------
// Piecewise-linear nonlinearities on accumulator values (units of 2^-15).

inline std::int16_t quant_tanh(std::int32_t x) { return saturate16(x); }

inline std::int16_t quant_sigm(std::int32_t x) {
  const std::int64_t v = static_cast<std::int64_t>(x) + kOne;
  const std::int64_t half = v >= 0 ? (v + 1) / 2 : -((-v + 1) / 2);
  return static_cast<std::int16_t>(std::clamp<std::int64_t>(half, 0, kQ15Max));
}

// ---------------------------------------------------------------------------
// Quantized cell.

struct QuantLowRank {
  Q15Tensor left;
  Q15Tensor right;
  int inter_exp = 0;  // scale of right * x

  bool operator==(const QuantLowRank&) const = default;
};

using QuantWeight = std::variant<Q15Tensor, QuantLowRank>;

struct QuantCell {
  QuantWeight W;
  QuantWeight U;
  Q15Tensor b_h;
  Q15Tensor b_z;
  std::int16_t zeta = 0;
  std::int16_t nu = 0;
  int input_exp = 0;  // scale of the inputs this cell consumes
  int state_exp = 0;  // scale of the hidden state
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;

  bool operator==(const QuantCell&) const = default;
};

struct QuantReadout {
  Q15Tensor w;
  Q15Tensor b;

  bool operator==(const QuantReadout&) const = default;
};

struct QuantizedModel {
  QuantCell lower;
  QuantReadout lower_readout;
  QuantCell upper;
  QuantReadout upper_readout;
  std::size_t k = 10;
  std::int16_t p_hat_q15 = 0;
  std::int32_t logit_threshold = 0;  // logit(p_hat) in accumulator units
  int input_exp = 0;

  bool operator==(const QuantizedModel&) const = default;
};

namespace detail {

inline void acc_add(std::int32_t& acc, std::int32_t term) {
  if (__builtin_add_overflow(acc, term, &acc))
    throw NumericError("quantized accumulator overflow (scale plan violated)");
}

inline int product_shift(int target_exp, int weight_exp, int input_exp) {
  const int s = 15 + target_exp - weight_exp - input_exp;
  if (s < 0) throw ConfigError("quantized scale plan: negative rescale shift");
  return s;
}

// acc[i] += (M x)_i in units of 2^(target_exp - 15).
inline void dense_accumulate(const Q15Tensor& m, std::span<const std::int16_t> x, int x_exp,
                             int target_exp, std::span<std::int32_t> acc) {
  const int shift = product_shift(target_exp, m.scale_exp, x_exp);
  for (std::size_t i = 0; i < m.rows; ++i) {
    std::int32_t a = acc[i];
    const std::int16_t* row = m.data.data() + i * m.cols;
    for (std::size_t j = 0; j < m.cols; ++j)
      acc_add(a, rshift_round(static_cast<std::int32_t>(row[j]) * x[j], shift));
    acc[i] = a;
  }
}

inline void weight_accumulate(const QuantWeight& w, std::span<const std::int16_t> x, int x_exp,
                              std::span<std::int32_t> acc) {
  if (const auto* lr = std::get_if<QuantLowRank>(&w)) {
    std::vector<std::int32_t> t(lr->right.rows, 0);
    dense_accumulate(lr->right, x, x_exp, lr->inter_exp, t);
    std::vector<std::int16_t> t16(t.size());
    for (std::size_t i = 0; i < t.size(); ++i) t16[i] = saturate16(t[i]);
    dense_accumulate(lr->left, t16, lr->inter_exp, 0, acc);
  } else {
    dense_accumulate(std::get<Q15Tensor>(w), x, x_exp, 0, acc);
  }
}

inline std::int32_t bias_units(const Q15Tensor& b, std::size_t i) {
  return static_cast<std::int32_t>(b.data[i]) * (std::int32_t{1} << b.scale_exp);
}

}  // namespace detail

// One integer-only FastGRNN step. `x` is at cell.input_exp, `h` at cell.state_exp.
inline std::vector<std::int16_t> quant_cell_step(const QuantCell& c, std::span<const std::int16_t> x,
                                                 std::span<const std::int16_t> h) {
  require(x.size() == c.input_dim && h.size() == c.hidden_dim, "quant_cell_step: dimension mismatch");
  std::vector<std::int32_t> pre(c.hidden_dim, 0);
  detail::weight_accumulate(c.W, x, c.input_exp, pre);
  detail::weight_accumulate(c.U, h, c.state_exp, pre);
  std::vector<std::int16_t> out(c.hidden_dim);
  for (std::size_t i = 0; i < c.hidden_dim; ++i) {
    std::int32_t az = pre[i], ah = pre[i];
    detail::acc_add(az, detail::bias_units(c.b_z, i));
    detail::acc_add(ah, detail::bias_units(c.b_h, i));
    const std::int32_t z = quant_sigm(az);
    const std::int32_t cand = quant_tanh(ah);
    const std::int32_t g = rshift_round(static_cast<std::int32_t>(c.zeta) * (kOne - z), 15) + c.nu;
    // g < 2^16 and |cand| <= 2^15, so the product fits in 32 bits.
    const std::int32_t t1 = rshift_round(g * cand, 15 + c.state_exp);
    const std::int32_t t2 = rshift_round(z * h[i], 15);
    out[i] = saturate16(static_cast<std::int64_t>(t1) + t2);
  }
  return out;
}

// Final state after running `xs` (rows of input-scale values) from zero.
// `states`, when given, receives every step's state.
inline std::vector<std::int16_t> quant_run(const QuantCell& c,
                                           const std::vector<std::vector<std::int16_t>>& xs,
                                           std::vector<std::vector<std::int16_t>>* states = nullptr) {
  std::vector<std::int16_t> h(c.hidden_dim, 0);
  for (const auto& x : xs) {
    h = quant_cell_step(c, x, h);
    if (states) states->push_back(h);
  }
  return h;
}

// Logits in accumulator units (2^-15) for a state `h` at scale `h_exp`.
inline std::vector<std::int32_t> quant_logits(const QuantReadout& r, std::span<const std::int16_t> h,
                                              int h_exp) {
  std::vector<std::int32_t> out(r.w.rows, 0);
  detail::dense_accumulate(r.w, h, h_exp, 0, out);
  for (std::size_t c = 0; c < out.size(); ++c) detail::acc_add(out[c], detail::bias_units(r.b, c));
  return out;
}

// ---------------------------------------------------------------------------
// Float reference: same equations in doubles with quantTanh/quantSigm and the
// dequantized parameters. Differences against quant_cell_step are rounding only.

inline std::vector<double> reference_cell_step(const QuantCell& c, std::span<const double> x,
                                               std::span<const double> h) {
  auto apply = [](const QuantWeight& w, std::span<const double> v, std::vector<double>& out) {
    if (const auto* lr = std::get_if<QuantLowRank>(&w)) {
      Matrix l = dequantize_matrix(lr->left), r = dequantize_matrix(lr->right);
      std::vector<double> t(r.rows(), 0.0);
      matvec_into(r, v, t);
      matvec_into(l, t, out);
    } else {
      matvec_into(dequantize_matrix(std::get<Q15Tensor>(w)), v, out);
    }
  };
  std::vector<double> pre(c.hidden_dim, 0.0);
  apply(c.W, x, pre);
  apply(c.U, h, pre);
  const double zeta = c.zeta / static_cast<double>(kOne);
  const double nu = c.nu / static_cast<double>(kOne);
  std::vector<double> out(c.hidden_dim);
  for (std::size_t i = 0; i < c.hidden_dim; ++i) {
    const double z = activate(Activation::quant_sigm, pre[i] + c.b_z.value(i));
    const double cand = activate(Activation::quant_tanh, pre[i] + c.b_h.value(i));
    out[i] = (zeta * (1.0 - z) + nu) * cand + z * h[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Model quantization.

inline QuantWeight quantize_weight(const Weight& w, int input_exp) {
  if (const auto* lr = std::get_if<LowRankMatrix>(&w)) {
    QuantLowRank q{quantize_q15(lr->left), quantize_q15(lr->right), 0};
    // Worst case |right * x| with |x| <= 2^input_exp.
    double bound = 0.0;
    for (std::size_t k = 0; k < q.right.rows; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < q.right.cols; ++j) s += std::abs(q.right.value(k * q.right.cols + j));
      bound = std::max(bound, s * std::ldexp(1.0, input_exp));
    }
    q.inter_exp = scale_exponent_for(bound);
    return q;
  }
  return quantize_q15(std::get<Matrix>(w));
}

inline QuantCell quantize_cell(const FastGRNNParams& p, int input_exp, int state_exp) {
  require(input_exp >= 0 && state_exp >= 0, "quantize_cell: scale exponents must be >= 0");
  QuantCell c;
  c.W = quantize_weight(p.W, input_exp);
  c.U = quantize_weight(p.U, state_exp);
  c.b_h = quantize_q15(p.b_h);
  c.b_z = quantize_q15(p.b_z);
  c.zeta = to_q15(p.zeta());
  c.nu = to_q15(p.nu());
  c.input_exp = input_exp;
  c.state_exp = state_exp;
  c.input_dim = p.input_dim();
  c.hidden_dim = p.hidden_dim();
  return c;
}

inline QuantReadout quantize_readout(const Readout& r) {
  return {quantize_q15(r.w), quantize_q15(r.b)};
}

inline std::int32_t logit_threshold_units(double p_hat) {
  const double logit = std::log(p_hat / (1.0 - p_hat));
  return static_cast<std::int32_t>(round_half_away(logit * kOne));
}

// Scale plan: exponents for the raw I/Q samples and for each tier's hidden
// state. The lower state is also the upper tier's input.
struct ScalePlan {
  int input_exp = 1;
  int lower_state_exp = 0;
  int upper_state_exp = 0;

  bool operator==(const ScalePlan&) const = default;
};

inline QuantizedModel quantize_model(const MSCModel& m, const ScalePlan& plan) {
  validate(m);
  for (auto v : parameter_views(const_cast<MSCModel&>(m)))
    require(all_finite(v), "quantize_model: non-finite weight");
  const int input_exp = plan.input_exp;
  QuantizedModel q;
  q.lower = quantize_cell(m.lower.cell, input_exp, plan.lower_state_exp);
  q.lower_readout = quantize_readout(m.lower.readout);
  q.upper = quantize_cell(m.upper_cell, plan.lower_state_exp, plan.upper_state_exp);
  q.upper_readout = quantize_readout(m.upper_readout);
  q.k = m.lower.k;
  q.p_hat_q15 = to_q15(m.lower.p_hat);
  q.logit_threshold = logit_threshold_units(m.lower.p_hat);
  q.input_exp = input_exp;
  return q;
}

// Plan with unit-scale hidden states.
inline QuantizedModel quantize_model(const MSCModel& m, int input_exp = 1) {
  return quantize_model(m, ScalePlan{input_exp, 0, 0});
}

inline Weight dequantize_weight(const QuantWeight& w) {
  if (const auto* lr = std::get_if<QuantLowRank>(&w))
    return LowRankMatrix(dequantize_matrix(lr->left), dequantize_matrix(lr->right));
  return dequantize_matrix(std::get<Q15Tensor>(w));
}

// Float model whose weights sit exactly on the quantization grid. The cell
// activations are switched to the piecewise-linear forms the integer engine uses.
inline MSCModel dequantize_model(const QuantizedModel& q, const MSCModel& like) {
  MSCModel m = like;
  auto cell = [](const QuantCell& c, FastGRNNParams& p) {
    p.W = dequantize_weight(c.W);
    p.U = dequantize_weight(c.U);
    p.b_h = dequantize(c.b_h);
    p.b_z = dequantize(c.b_z);
    auto logit = [](std::int16_t v) {
      const double x = std::clamp(v / static_cast<double>(kOne), 1.0 / kOne, 1.0 - 1.0 / kOne);
      return std::log(x / (1.0 - x));
    };
    p.zeta_raw = logit(c.zeta);
    p.nu_raw = logit(c.nu);
    p.gate = Activation::quant_sigm;
    p.update = Activation::quant_tanh;
  };
  cell(q.lower, m.lower.cell);
  cell(q.upper, m.upper_cell);
  m.lower.readout = Readout{dequantize_matrix(q.lower_readout.w), dequantize(q.lower_readout.b)};
  m.upper_readout = Readout{dequantize_matrix(q.upper_readout.w), dequantize(q.upper_readout.b)};
  return m;
}

// ---------------------------------------------------------------------------
// Quantized inference.

inline std::vector<std::vector<std::int16_t>> quantize_instance(const Matrix& x, int input_exp) {
  std::vector<std::vector<std::int16_t>> out(x.rows(), std::vector<std::int16_t>(x.cols()));
  for (std::size_t t = 0; t < x.rows(); ++t)
    for (std::size_t f = 0; f < x.cols(); ++f)
      out[t][f] = saturate16(static_cast<std::int64_t>(round_half_away(std::ldexp(x(t, f), 15 - input_exp))));
  return out;
}

inline bool quant_is_positive(const QuantizedModel& q, std::span<const std::int16_t> h) {
  const auto l = quant_logits(q.lower_readout, h, q.lower.state_exp);
  return static_cast<std::int64_t>(l[kSourceClass]) - l[kClutterClass] >= q.logit_threshold;
}

inline cost::ModelDims quant_dims(const QuantizedModel& q, std::size_t window_len, std::size_t omega,
                                  std::size_t stride) {
  auto rank = [](const QuantWeight& w) -> std::optional<std::size_t> {
    if (const auto* lr = std::get_if<QuantLowRank>(&w)) return lr->left.cols;
    return std::nullopt;
  };
  cost::ModelDims d;
  d.features = q.lower.input_dim;
  d.window_len = window_len;
  d.omega = omega;
  d.stride = stride;
  d.lower_hidden = q.lower.hidden_dim;
  d.lower_rank_w = rank(q.lower.W);
  d.lower_rank_u = rank(q.lower.U);
  d.upper_hidden = q.upper.hidden_dim;
  d.upper_rank_w = rank(q.upper.W);
  d.upper_rank_u = rank(q.upper.U);
  d.source_classes = q.upper_readout.w.rows;
  return d;
}

struct QuantLowerResult {
  EmiDecision decision;
  std::vector<std::vector<std::int16_t>> embeddings;  // evaluated instances only
};

inline QuantLowerResult quant_emi_infer(const QuantizedModel& q, const InstanceSet& inst) {
  QuantLowerResult r;
  std::size_t run = 0;
  for (std::size_t tau = 0; tau < inst.size(); ++tau) {
    require(inst.instances[tau].cols() == q.lower.input_dim, "quantized infer: input width mismatch");
    auto h = quant_run(q.lower, quantize_instance(inst.instances[tau], q.input_exp));
    run = quant_is_positive(q, h) ? run + 1 : 0;
    r.embeddings.push_back(std::move(h));
    if (run >= q.k) {
      r.decision = {true, tau + 1, tau};
      return r;
    }
  }
  r.decision = {false, inst.size(), std::nullopt};
  return r;
}

inline InferenceTrace quant_msc_infer(const QuantizedModel& q, const InstanceSet& inst) {
  InferenceTrace tr;
  auto lower = quant_emi_infer(q, inst);
  tr.lower_instances_consumed = lower.decision.instances_consumed;
  const std::size_t omega = inst.instances.front().rows();
  const cost::ModelDims d = quant_dims(q, omega + (inst.size() - 1) * inst.stride, omega, inst.stride);
  tr.flops_lower = tr.lower_instances_consumed * cost::flops_lower_instance(d);
  if (!lower.decision.source) return tr;
  const std::size_t backfill = inst.size() - lower.embeddings.size();
  for (std::size_t tau = lower.embeddings.size(); tau < inst.size(); ++tau)
    lower.embeddings.push_back(quant_run(q.lower, quantize_instance(inst.instances[tau], q.input_exp)));
  const auto h = quant_run(q.upper, lower.embeddings);
  const auto logits = quant_logits(q.upper_readout, h, q.upper.state_exp);
  tr.upper_invoked = true;
  tr.decision = static_cast<ClassLabel>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  tr.flops_upper = backfill * cost::flops_embedding(d) + cost::flops_upper_window(d);
  return tr;
}

// ---------------------------------------------------------------------------
// Float vs quantized agreement.

struct AgreementReport {
  std::size_t windows = 0;
  double label_agreement = 0.0;
  double lower_decision_agreement = 0.0;
  double max_hidden_deviation = 0.0;  // lower tier, any step, any coordinate
};

inline void check_architecture(const MSCModel& f, const QuantizedModel& q) {
  if (f.lower.cell.input_dim() != q.lower.input_dim || f.lower.cell.hidden_dim() != q.lower.hidden_dim ||
      f.upper_cell.input_dim() != q.upper.input_dim || f.upper_cell.hidden_dim() != q.upper.hidden_dim ||
      f.num_source_classes() != q.upper_readout.w.rows || f.lower.k != q.k)
    throw ConfigError("agreement_report: float and quantized architectures differ");
}

inline AgreementReport agreement_report(const MSCModel& f, const QuantizedModel& q,
                                        std::span<const InstanceSet> data) {
  if (data.empty()) throw DataError("agreement_report: empty dataset");
  check_architecture(f, q);
  std::vector<int> same_label(data.size()), same_lower(data.size());
  std::vector<double> dev(data.size(), 0.0);
  parallel_for(data.size(), [&](std::size_t i) {
    const auto a = msc_infer(f, data[i]);
    const auto b = quant_msc_infer(q, data[i]);
    same_label[i] = a.decision == b.decision;
    same_lower[i] = a.upper_invoked == b.upper_invoked;
    for (const auto& x : data[i].instances) {
      const auto tr = forward(f.lower.cell, x);
      std::vector<std::vector<std::int16_t>> qs;
      quant_run(q.lower, quantize_instance(x, q.input_exp), &qs);
      for (std::size_t t = 0; t < qs.size(); ++t)
        for (std::size_t j = 0; j < qs[t].size(); ++j)
          dev[i] = std::max(dev[i], std::abs(tr.states(t, j) - std::ldexp(qs[t][j], q.lower.state_exp - 15)));
    }
  });
  AgreementReport r;
  r.windows = data.size();
  const double n = static_cast<double>(data.size());
  r.label_agreement = std::accumulate(same_label.begin(), same_label.end(), 0) / n;
  r.lower_decision_agreement = std::accumulate(same_lower.begin(), same_lower.end(), 0) / n;
  r.max_hidden_deviation = *std::max_element(dev.begin(), dev.end());
  return r;
}

// Smallest input exponent covering every sample of `data`.
inline int input_exp_for(std::span<const InstanceSet> data) {
  double mx = 0.0;
  for (const auto& w : data)
    for (const auto& x : w.instances)
      for (double v : x.values()) mx = std::max(mx, std::abs(v));
  return scale_exponent_for(mx);
}

// Exponents covering the inputs and every float hidden state seen on `data`,
// with `headroom` as a multiplier on the observed state range.
inline ScalePlan calibrate_scale_plan(const MSCModel& m, std::span<const InstanceSet> data,
                                      double headroom = 1.25) {
  if (data.empty()) throw DataError("calibrate_scale_plan: empty dataset");
  std::vector<double> lo(data.size(), 0.0), up(data.size(), 0.0);
  parallel_for(data.size(), [&](std::size_t i) {
    Matrix emb(data[i].size(), m.lower.cell.hidden_dim());
    for (std::size_t tau = 0; tau < data[i].size(); ++tau) {
      const auto tr = forward(m.lower.cell, data[i].instances[tau]);
      for (double v : tr.states.values()) lo[i] = std::max(lo[i], std::abs(v));
      const auto h = tr.last();
      std::copy(h.begin(), h.end(), emb.row(tau).begin());
    }
    const auto upper = forward(m.upper_cell, emb);
    for (double v : upper.states.values()) up[i] = std::max(up[i], std::abs(v));
  });
  ScalePlan p;
  p.input_exp = input_exp_for(data);
  p.lower_state_exp = scale_exponent_for(headroom * *std::max_element(lo.begin(), lo.end()));
  p.upper_state_exp = scale_exponent_for(headroom * *std::max_element(up.begin(), up.end()));
  return p;
}

}  // namespace mscrnn::quant
