#include <gtest/gtest.h>

#include <cmath>

#include "mscrnn/quant.hpp"
#include "test_util.hpp"

using namespace mscrnn;
using namespace mscrnn::quant;

namespace {

FastGRNNParams random_float_cell(std::size_t D, std::size_t H, std::optional<std::size_t> rank, Rng& rng) {
  auto p = init_params(D, H, CellInit{rank, rank, Activation::quant_sigm, Activation::quant_tanh}, rng());
  for (auto& v : p.b_h) v = uniform(rng, -0.5, 0.5);
  for (auto& v : p.b_z) v = uniform(rng, -0.5, 0.5);
  p.zeta_raw = uniform(rng, -2, 2);
  p.nu_raw = uniform(rng, -4, 0);
  return p;
}

std::vector<std::int16_t> random_q(std::size_t n, int max_abs, Rng& rng) {
  std::vector<std::int16_t> out(n);
  for (auto& v : out) v = static_cast<std::int16_t>(static_cast<int>(rng() % (2 * max_abs + 1)) - max_abs);
  return out;
}

std::vector<double> dequant_vec(std::span<const std::int16_t> q, int e) {
  std::vector<double> out(q.size());
  for (std::size_t i = 0; i < q.size(); ++i) out[i] = std::ldexp(q[i], e - 15);
  return out;
}

MSCModel random_msc(std::size_t Hl, std::size_t Hu, std::optional<std::size_t> rank, Rng& rng) {
  MSCModel m;
  m.lower.cell = random_float_cell(2, Hl, rank, rng);
  m.lower.readout = init_readout(Hl, 2, rng());
  m.lower.k = 3;
  m.lower.p_hat = 0.5;
  m.upper_cell = random_float_cell(Hl, Hu, rank, rng);
  m.upper_readout = init_readout(Hu, 2, rng());
  return m;
}

std::vector<InstanceSet> random_windows(std::size_t n, Rng& rng) {
  std::vector<InstanceSet> out;
  for (std::size_t i = 0; i < n; ++i)
    out.push_back(make_instances(testutil::random_matrix(128, 2, rng, 1.5), 48, 16,
                                 static_cast<ClassLabel>(i % 3) - 1, i));
  return out;
}

}  // namespace

TEST(Quantize, Examples) {
  EXPECT_EQ(quantize_q15(std::vector<double>{0.5}).data[0], 16384);
  EXPECT_EQ(quantize_q15(std::vector<double>{1.0}).data[0], 32767);
  EXPECT_EQ(quantize_q15(std::vector<double>{-1.0}).data[0], -32768);
  EXPECT_EQ(quantize_q15(std::vector<double>{-1.0}).scale_exp, 0);
  const auto q = quantize_q15(std::vector<double>{1.7, -0.3});
  EXPECT_EQ(q.scale_exp, 1);
  EXPECT_EQ(q.data[0], static_cast<std::int16_t>(std::lround(1.7 / 2 * 32768)));
  EXPECT_EQ(quantize_q15(std::vector<double>{0.0, 0.0}).scale_exp, 0);
}

TEST(Quantize, RoundsHalfAwayFromZero) {
  // 1.5 / 2^15 and -1.5 / 2^15 sit exactly between two codes.
  const double half = 1.5 / 32768.0;
  const auto q = quantize_q15(std::vector<double>{half, -half});
  EXPECT_EQ(q.data[0], 2);
  EXPECT_EQ(q.data[1], -2);
  EXPECT_EQ(rshift_round(3, 1), 2);
  EXPECT_EQ(rshift_round(-3, 1), -2);
  EXPECT_EQ(rshift_round(5, 2), 1);
  EXPECT_EQ(rshift_round(-6, 2), -2);
}

TEST(Quantize, HalfUlpBound) {
  Rng rng(1);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> x(1 + rng() % 40);
    const double scale = std::ldexp(1.0, static_cast<int>(rng() % 6)) * uniform(rng, 0.1, 1.0);
    for (auto& v : x) v = uniform(rng, -scale, scale);
    const auto q = quantize_q15(x);
    const auto back = dequantize(q);
    const double bound = std::ldexp(1.0, q.scale_exp - 15);
    for (std::size_t i = 0; i < x.size(); ++i) EXPECT_LE(std::abs(back[i] - x[i]), bound);
  }
  EXPECT_THROW(quantize_q15(std::vector<double>{NAN}), ConfigError);
}

TEST(Quantize, IdempotentRoundTrip) {
  Rng rng(2);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> x(1 + rng() % 30);
    for (auto& v : x) v = uniform(rng, -3, 3);
    const auto q = quantize_q15(x);
    EXPECT_EQ(quantize_q15(dequantize(q)), q);
  }
}

TEST(Activations, Examples) {
  EXPECT_EQ(quant_tanh(0), 0);
  EXPECT_EQ(quant_sigm(0), 16384);
  EXPECT_EQ(quant_tanh(static_cast<std::int32_t>(2.5 * kOne)), 32767);
  EXPECT_EQ(quant_tanh(static_cast<std::int32_t>(-2.5 * kOne)), -32768);
  EXPECT_EQ(quant_sigm(-3 * kOne), 0);
  EXPECT_EQ(quant_sigm(kOne), 32767);
}

TEST(Activations, MonotoneAndIdempotent) {
  Rng rng(3);
  std::vector<std::int32_t> xs;
  for (int i = -200000; i <= 200000; i += 7) xs.push_back(i);
  for (int i = 0; i < 10000; ++i) xs.push_back(static_cast<std::int32_t>(rng() % (1u << 24)) - (1 << 23));
  std::sort(xs.begin(), xs.end());
  for (std::size_t i = 1; i < xs.size(); ++i) {
    EXPECT_LE(quant_tanh(xs[i - 1]), quant_tanh(xs[i]));
    EXPECT_LE(quant_sigm(xs[i - 1]), quant_sigm(xs[i]));
  }
  for (auto x : xs) {
    EXPECT_EQ(quant_tanh(quant_tanh(x)), quant_tanh(x));
    // quant_sigm maps into [0, 1); on that range the unit-scale value is its
    // own clamp, so clamping again changes nothing.
    const std::int16_t s = quant_sigm(x);
    EXPECT_GE(s, 0);
    EXPECT_EQ(quant_tanh(s), s);
    // Error against the real formula is at most one code.
    const double real = std::clamp((x / 32768.0 + 1.0) / 2.0, 0.0, 32767.0 / 32768.0);
    EXPECT_LE(std::abs(s / 32768.0 - real), 1.0 / 32768.0);
  }
}

TEST(CellStep, ZeroWeightsHalveUnitState) {
  FastGRNNParams p;
  p.W = Matrix(1, 1);
  p.U = Matrix(1, 1);
  p.b_h = {0.0};
  p.b_z = {0.0};
  auto c = quantize_cell(p, 0, 0);
  c.zeta = 32767;
  c.nu = 0;
  const std::vector<std::int16_t> x{12345}, h{32767};
  const auto out = quant_cell_step(c, x, h);
  EXPECT_NEAR(out[0], 16384, 1);
}

TEST(CellStep, MatchesFloatReference) {
  Rng rng(4);
  double worst = 0.0;
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t D = 1 + rng() % 8, H = 1 + rng() % 16;
    std::optional<std::size_t> rank;
    if (trial % 3 == 0) rank = 1 + rng() % std::min(D, H);
    const int in_exp = static_cast<int>(rng() % 3), st_exp = static_cast<int>(rng() % 3);
    const auto c = quantize_cell(random_float_cell(D, H, rank, rng), in_exp, st_exp);
    const auto qx = random_q(D, 32767, rng), qh = random_q(H, 32767, rng);
    const auto out = quant_cell_step(c, qx, qh);
    const auto ref = reference_cell_step(c, dequant_vec(qx, in_exp), dequant_vec(qh, st_exp));
    for (std::size_t i = 0; i < H; ++i) {
      // Saturation at the state scale is part of the contract, so compare
      // against the clamped reference.
      const double lim = std::ldexp(1.0, st_exp);
      const double r = std::clamp(ref[i], -lim, lim * 32767.0 / 32768.0);
      const double dev = std::abs(std::ldexp(out[i], st_exp - 15) - r);
      worst = std::max(worst, dev);
      EXPECT_LE(dev, std::ldexp(1.0, -10)) << "trial " << trial;
    }
  }
  RecordProperty("worst_deviation", std::to_string(worst));
}

TEST(CellStep, NoOverflowAtMaximumWidth) {
  // Every weight, input and state at full scale with D = D_hat = 64.
  FastGRNNParams p;
  p.W = Matrix(64, 64, 1.0);
  p.U = Matrix(64, 64, -1.0);
  p.b_h.assign(64, 1.0);
  p.b_z.assign(64, -1.0);
  for (int e : {0, 1, 3}) {
    const auto c = quantize_cell(p, e, e);
    const std::vector<std::int16_t> x(64, 32767), h(64, -32768);
    EXPECT_NO_THROW(quant_cell_step(c, x, h));
  }
  EXPECT_THROW(quant_cell_step(quantize_cell(p, 0, 0), std::vector<std::int16_t>(3), std::vector<std::int16_t>(64)),
               ConfigError);
}

TEST(CellStep, PinnedOutputsAreBitExact) {
  // Cell built from integers only (no floating-point generation), so the
  // checksum is portable.
  QuantCell c;
  c.input_dim = 3;
  c.hidden_dim = 5;
  c.input_exp = 1;
  c.state_exp = 1;
  std::uint32_t s = 12345;
  auto next = [&] {
    s = s * 1103515245u + 12345u;
    return static_cast<std::int16_t>(static_cast<int>((s >> 8) % 40001) - 20000);
  };
  auto tensor = [&](std::size_t r, std::size_t cols, int e) {
    Q15Tensor t{std::vector<std::int16_t>(r * cols), r, cols, e};
    for (auto& v : t.data) v = next();
    return t;
  };
  c.W = tensor(5, 3, 0);
  c.U = QuantLowRank{tensor(5, 2, 0), tensor(2, 5, 0), 2};
  c.b_h = tensor(1, 5, 0);
  c.b_z = tensor(1, 5, 0);
  c.zeta = 28000;
  c.nu = 900;
  std::vector<std::vector<std::int16_t>> xs(20, std::vector<std::int16_t>(3));
  for (auto& x : xs)
    for (auto& v : x) v = next();
  std::vector<std::vector<std::int16_t>> states;
  quant_run(c, xs, &states);
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a over the state codes
  for (const auto& st : states)
    for (auto v : st) {
      h ^= static_cast<std::uint16_t>(v);
      h *= 1099511628211ULL;
    }
  std::vector<std::vector<std::int16_t>> again;
  quant_run(c, xs, &again);
  EXPECT_EQ(states, again);
  EXPECT_EQ(h, 17849417608723743076ULL) << "pinned checksum";
}

TEST(QuantizeModel, WeightsWithinUnitGetUnitScale) {
  Rng rng(5);
  auto m = random_msc(4, 3, std::nullopt, rng);
  const auto q = quantize_model(m);
  EXPECT_EQ(std::get<Q15Tensor>(q.lower.W).scale_exp, 0);
  EXPECT_EQ(std::get<Q15Tensor>(q.upper.U).scale_exp, 0);
  EXPECT_EQ(q.lower_readout.w.scale_exp, 0);
  std::get<Matrix>(m.lower.cell.W)(0, 0) = 1.7;
  EXPECT_EQ(std::get<Q15Tensor>(quantize_model(m).lower.W).scale_exp, 1);
}

TEST(QuantizeModel, IdempotentThroughDequantize) {
  Rng rng(6);
  for (auto rank : {std::optional<std::size_t>{}, std::optional<std::size_t>{2}}) {
    const auto m = random_msc(4, 3, rank, rng);
    const ScalePlan plan{1, 1, 0};
    const auto q = quantize_model(m, plan);
    EXPECT_EQ(quantize_model(dequantize_model(q, m), plan), q);
  }
}

TEST(QuantizeModel, RejectsNonFiniteWeights) {
  Rng rng(7);
  auto m = random_msc(4, 3, std::nullopt, rng);
  m.upper_readout.b[0] = INFINITY;
  EXPECT_THROW(quantize_model(m), ConfigError);
}

TEST(QuantInfer, LogitThresholdMatchesProbabilityRule) {
  EXPECT_EQ(logit_threshold_units(0.5), 0);
  EXPECT_NEAR(logit_threshold_units(0.9) / 32768.0, std::log(9.0), 1e-4);
}

TEST(QuantInfer, BitIdenticalAcrossRuns) {
  Rng rng(8);
  const auto m = random_msc(6, 4, std::nullopt, rng);
  const auto data = random_windows(30, rng);
  const auto q = quantize_model(m, calibrate_scale_plan(m, data));
  for (const auto& w : data) {
    const auto a = quant_msc_infer(q, w), b = quant_msc_infer(q, w);
    EXPECT_EQ(a.decision, b.decision);
    EXPECT_EQ(a.lower_instances_consumed, b.lower_instances_consumed);
    EXPECT_EQ(a.flops_lower + a.flops_upper, b.flops_lower + b.flops_upper);
  }
}

TEST(QuantInfer, GatingAndCostMatchFloatPath) {
  Rng rng(9);
  const auto m = random_msc(6, 4, std::nullopt, rng);
  const auto data = random_windows(30, rng);
  const auto q = quantize_model(m, calibrate_scale_plan(m, data));
  const auto d = cost::dims_of(m, 128, 48, 16);
  for (const auto& w : data) {
    const auto t = quant_msc_infer(q, w);
    EXPECT_EQ(t.flops_lower, t.lower_instances_consumed * cost::flops_lower_instance(d));
    if (!t.upper_invoked) {
      EXPECT_EQ(t.flops_upper, 0u);
      EXPECT_EQ(t.decision, kClutter);
    }
  }
}

TEST(Agreement, LosslessModelAgreesFully) {
  Rng rng(10);
  const auto m = random_msc(6, 4, std::nullopt, rng);
  const auto data = random_windows(40, rng);
  const auto q = quantize_model(m, calibrate_scale_plan(m, data));
  const auto f = dequantize_model(q, m);  // weights on the Q15 grid
  const auto r = agreement_report(f, q, data);
  EXPECT_EQ(r.windows, 40u);
  EXPECT_EQ(r.label_agreement, 1.0);
  EXPECT_EQ(r.lower_decision_agreement, 1.0);
  // Only per-step rounding remains, but it compounds over 48 steps.
  EXPECT_LE(r.max_hidden_deviation, std::ldexp(1.0, -5));
}

TEST(Agreement, Errors) {
  Rng rng(11);
  const auto m = random_msc(6, 4, std::nullopt, rng);
  const auto q = quantize_model(m);
  EXPECT_THROW(agreement_report(m, q, std::span<const InstanceSet>{}), DataError);
  EXPECT_THROW(calibrate_scale_plan(m, std::span<const InstanceSet>{}), DataError);
  const auto other = random_msc(5, 4, std::nullopt, rng);
  EXPECT_THROW(agreement_report(other, q, random_windows(2, rng)), ConfigError);
}

TEST(ScalePlan, CoversObservedStates) {
  Rng rng(12);
  const auto m = random_msc(6, 4, std::nullopt, rng);
  const auto data = random_windows(10, rng);
  const auto plan = calibrate_scale_plan(m, data, 1.0);
  EXPECT_EQ(plan.input_exp, 1);  // samples in [-1.5, 1.5]
  for (const auto& w : data)
    for (const auto& x : w.instances) {
      const auto tr = forward(m.lower.cell, x);
      for (double v : tr.states.values()) EXPECT_LE(std::abs(v), std::ldexp(1.0, plan.lower_state_exp));
    }
}
