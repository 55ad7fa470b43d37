#include <gtest/gtest.h>

#include <cmath>

#include "mscrnn/emi.hpp"
#include "test_util.hpp"

using namespace mscrnn;

namespace {

Matrix ramp_window(std::size_t T, std::size_t F) {
  Matrix w(T, F);
  for (std::size_t i = 0; i < w.size(); ++i) w.values()[i] = static_cast<double>(i);
  return w;
}

EMIModel random_model(std::size_t F, std::size_t H, std::size_t k, Rng& rng) {
  EmiTrainConfig cfg;
  cfg.hidden_dim = H;
  cfg.k = k;
  cfg.seed = rng();
  auto m = init_emi_model(F, cfg);
  for (auto& v : m.readout.b) v = uniform(rng, -0.5, 0.5);
  return m;
}

InstanceSet random_window(std::size_t T, std::size_t F, std::size_t omega, std::size_t stride,
                          ClassLabel label, Rng& rng) {
  return make_instances(testutil::random_matrix(T, F, rng), omega, stride, label);
}

std::size_t brute_force_span(std::span<const double> p, std::size_t k) {
  std::size_t best = 0;
  double best_sum = -1.0;
  for (std::size_t s = 0; s + k <= p.size(); ++s) {
    double sum = 0.0;
    for (std::size_t i = s; i < s + k; ++i) sum += p[i];
    if (sum > best_sum) {
      best_sum = sum;
      best = s;
    }
  }
  return best;
}

double span_sum(std::span<const double> p, std::size_t s, std::size_t k) {
  double sum = 0.0;
  for (std::size_t i = s; i < s + k; ++i) sum += p[i];
  return sum;
}

}  // namespace

TEST(MakeInstances, Counts) {
  EXPECT_EQ(make_instances(ramp_window(256, 2), 48, 16).size(), 14u);
  EXPECT_EQ(make_instances(ramp_window(80, 2), 48, 16).size(), 3u);
  const auto one = make_instances(ramp_window(48, 2), 48, 16);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one.instances[0], ramp_window(48, 2));
}

TEST(MakeInstances, InstanceCoversStridedRows) {
  const auto w = ramp_window(256, 2);
  const auto set = make_instances(w, 48, 16, 1, 9);
  EXPECT_EQ(set.label, 1);
  EXPECT_EQ(set.origin, 9u);
  for (std::size_t tau = 0; tau < set.size(); ++tau) {
    ASSERT_EQ(set.instances[tau].rows(), 48u);
    ASSERT_EQ(set.instances[tau].cols(), 2u);
    for (std::size_t r = 0; r < 48; ++r)
      for (std::size_t c = 0; c < 2; ++c) EXPECT_EQ(set.instances[tau](r, c), w(tau * 16 + r, c));
  }
}

TEST(MakeInstances, RejectsShortOrRaggedWindows) {
  EXPECT_THROW(make_instances(ramp_window(40, 2), 48, 16), ConfigError);
  EXPECT_THROW(make_instances(ramp_window(70, 2), 48, 16), ConfigError);
  EXPECT_THROW(make_instances(ramp_window(64, 2), 48, 0), ConfigError);
}

TEST(InstancePredict, ZeroReadoutIsUniform) {
  Rng rng(1);
  auto m = random_model(2, 6, 2, rng);
  m.readout = zeros_like(m.readout);
  const auto p = instance_predict(m, testutil::random_matrix(48, 2, rng));
  EXPECT_EQ(p.probs, (Vector{0.5, 0.5}));
}

TEST(InstancePredict, EqualsManualComposition) {
  Rng rng(2);
  const auto m = random_model(2, 6, 2, rng);
  const auto x = testutil::random_matrix(48, 2, rng);
  const auto p = instance_predict(m, x);
  const auto tr = forward(m.cell, x);
  const auto h = tr.last();
  Vector logits = m.readout.b;
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t j = 0; j < 6; ++j) logits[c] += m.readout.w(c, j) * h[j];
  const auto expect = softmax(logits);
  for (std::size_t c = 0; c < 2; ++c) EXPECT_NEAR(p.probs[c], expect[c], 1e-15);
  EXPECT_EQ(instance_predict(m, x).probs, p.probs);
  EXPECT_THROW(instance_predict(m, testutil::random_matrix(48, 3, rng)), ConfigError);
}

TEST(MiRelabel, Examples) {
  EXPECT_EQ(mi_relabel(Vector{0.1, 0.9, 0.8, 0.2}, 2), 1u);
  EXPECT_EQ(mi_relabel(Vector(9, 0.4), 3), 0u);
  EXPECT_EQ(mi_relabel(Vector{0.3, 0.9, 0.1}, 3), 0u);
  EXPECT_THROW(mi_relabel(Vector{0.3}, 2), ConfigError);
  EXPECT_THROW(mi_relabel(Vector{0.3}, 0), ConfigError);
}

TEST(MiRelabel, MatchesBruteForce) {
  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    Vector p(1 + rng() % 20);
    // Coarse values make ties common, which exercises the tie rule.
    for (auto& v : p) v = trial % 2 ? uniform(rng, 0, 1) : static_cast<double>(rng() % 4) / 4.0;
    for (std::size_t k = 1; k <= p.size(); ++k) EXPECT_EQ(mi_relabel(p, k), brute_force_span(p, k));
  }
}

TEST(EarlyExit, Examples) {
  auto d = early_exit_rule(Vector(14, 0.9), 2, 0.5);
  EXPECT_TRUE(d.source);
  EXPECT_EQ(d.instances_consumed, 2u);
  EXPECT_EQ(d.positive_run_end, 1u);

  d = early_exit_rule(Vector(14, 0.2), 2, 0.5);
  EXPECT_FALSE(d.source);
  EXPECT_EQ(d.instances_consumed, 14u);
  EXPECT_FALSE(d.positive_run_end);

  d = early_exit_rule(Vector{0.7, 0.1, 0.1}, 1, 0.5);
  EXPECT_TRUE(d.source);
  EXPECT_EQ(d.instances_consumed, 1u);

  // A broken run restarts the count.
  d = early_exit_rule(Vector{0.9, 0.1, 0.9, 0.9}, 2, 0.5);
  EXPECT_EQ(d.instances_consumed, 4u);
}

TEST(EarlyExit, MonotoneInThreshold) {
  Rng rng(4);
  for (int trial = 0; trial < 2000; ++trial) {
    Vector p(1 + rng() % 20);
    for (auto& v : p) v = uniform(rng, 0, 1);
    const std::size_t k = 1 + rng() % p.size();
    double lo = uniform(rng, 0.01, 0.99), hi = uniform(rng, 0.01, 0.99);
    if (lo > hi) std::swap(lo, hi);
    const auto a = early_exit_rule(p, k, lo), b = early_exit_rule(p, k, hi);
    EXPECT_LE(a.instances_consumed, p.size());
    EXPECT_LE(b.instances_consumed, p.size());
    if (b.source) {
      EXPECT_TRUE(a.source);
      EXPECT_LE(a.instances_consumed, b.instances_consumed);
    }
  }
}

TEST(EmiInfer, AgreesWithRuleOnModelProbabilities) {
  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto m = random_model(2, 5, 1 + rng() % 4, rng);
    m.p_hat = uniform(rng, 0.3, 0.7);
    const auto w = random_window(128, 2, 48, 16, 0, rng);
    const auto probs = source_probabilities(m, w);
    std::vector<Vector> emb;
    OpCounter ops;
    const auto d = emi_infer(m, w, &ops, &emb);
    const auto r = early_exit_rule(probs, m.k, m.p_hat);
    EXPECT_EQ(d.source, r.source);
    EXPECT_EQ(d.instances_consumed, r.instances_consumed);
    EXPECT_EQ(emb.size(), d.instances_consumed);
    EXPECT_EQ(ops.preactivations, 48 * d.instances_consumed);
  }
}

TEST(LowerLoss, PhaseSwitchesHalfway) {
  EXPECT_EQ(lower_loss_for_round(0, 4), LowerLoss::mi);
  EXPECT_EQ(lower_loss_for_round(1, 4), LowerLoss::mi);
  EXPECT_EQ(lower_loss_for_round(2, 4), LowerLoss::emi);
  EXPECT_EQ(lower_loss_for_round(3, 4), LowerLoss::emi);
  EXPECT_EQ(lower_loss_for_round(0, 1), LowerLoss::mi);
}

TEST(LowerLoss, ClutterKeepsEveryInstance) {
  Rng rng(6);
  const auto c = random_window(256, 2, 48, 16, kClutter, rng);
  for (std::size_t s = 0; s < 14; ++s) EXPECT_EQ(kept_range(c, s, 10), (std::pair<std::size_t, std::size_t>{0, 14}));
  const auto src = random_window(256, 2, 48, 16, 0, rng);
  EXPECT_EQ(kept_range(src, 3, 10), (std::pair<std::size_t, std::size_t>{3, 13}));
  EXPECT_EQ(kept_range(src, 9, 10), (std::pair<std::size_t, std::size_t>{4, 14}));
  EXPECT_EQ(initial_span_start(14, 10), 2u);
}

TEST(LowerLoss, GradientMatchesFiniteDifference) {
  Rng rng(7);
  for (auto kind : {LowerLoss::mi, LowerLoss::emi}) {
    for (ClassLabel label : {kClutter, 0}) {
      const auto m = random_model(2, 4, 2, rng);
      const auto w = random_window(20, 2, 8, 4, label, rng);
      EMIModel g = zeros_like(m);
      lower_window_loss(m, w, 1, kind, 0.7, &g);
      const auto fd = testutil::numeric_grad(
          m, [](EMIModel& q) { return parameter_views(q); },
          [&](const EMIModel& q) { return lower_window_loss(q, w, 1, kind, 0.7, nullptr); });
      EXPECT_LE(testutil::max_rel_err(testutil::flatten(parameter_views(g)), fd), 1e-4);
    }
  }
}

// Relabeling maximizes the summed source probability of the kept span, so
// that sum never drops across a relabel with the parameters held fixed.
TEST(Relabel, KeptSourceScoreNeverDrops) {
  Rng rng(8);
  for (int trial = 0; trial < 30; ++trial) {
    const auto m = random_model(2, 4, 3, rng);
    const auto w = random_window(96, 2, 16, 8, 0, rng);
    const auto probs = source_probabilities(m, w);
    const std::size_t before = rng() % (w.size() - 3 + 1);
    const std::size_t after = mi_relabel(probs, 3);
    EXPECT_GE(span_sum(probs, after, 3), span_sum(probs, before, 3) - 1e-12);
    // Same predictions give the same span.
    EXPECT_EQ(mi_relabel(source_probabilities(m, w), 3), after);
  }
}

// The max-probability-sum span does not always minimize the cross-entropy,
// so the kept-span loss can rise across a relabel.
TEST(Relabel, ProbabilitySumIsNotLogLikelihood) {
  const Vector p{0.6, 0.6, 0.3, 0.99};
  ASSERT_EQ(mi_relabel(p, 2), 2u);
  EXPECT_LT(std::log(0.3) + std::log(0.99), std::log(0.6) + std::log(0.6));
}

namespace {

std::vector<InstanceSet> toy_separable(std::size_t n) {
  std::vector<InstanceSet> out;
  for (std::size_t i = 0; i < n; ++i) {
    const bool src = i % 2 == 1;
    out.push_back(make_instances(Matrix(64, 2, src ? 1.0 : 0.0), 16, 8, src ? 0 : kClutter, i));
  }
  return out;
}

EmiTrainConfig toy_config() {
  EmiTrainConfig cfg;
  cfg.rounds = 2;
  cfg.epochs_per_round = 15;
  cfg.batch_size = 8;
  cfg.k = 3;
  cfg.hidden_dim = 4;
  cfg.optimizer.lr = 0.05;
  cfg.rel_tol = 0.0;
  cfg.seed = 3;
  return cfg;
}

}  // namespace

TEST(TrainEmi, ToySeparableReachesPerfectAccuracy) {
  const auto data = toy_separable(40);
  const auto res = train_emi(data, toy_config());
  EXPECT_EQ(res.train_accuracy, 1.0);
  EXPECT_EQ(res.loss_history.size(), 30u);
  EXPECT_LT(res.loss_history.back(), res.loss_history.front());
  EXPECT_EQ(res.span_history.size(), 1u);  // one MI round out of two
}

TEST(TrainEmi, Deterministic) {
  const auto data = toy_separable(20);
  auto cfg = toy_config();
  cfg.epochs_per_round = 3;
  const auto a = train_emi(data, cfg), b = train_emi(data, cfg);
  EXPECT_EQ(a.model, b.model);
  EXPECT_EQ(a.loss_history, b.loss_history);
  EXPECT_EQ(a.spans, b.spans);
}

TEST(TrainEmi, ZeroRoundsReturnsInitialModel) {
  const auto data = toy_separable(10);
  auto cfg = toy_config();
  cfg.rounds = 0;
  const auto res = train_emi(data, cfg);
  EXPECT_EQ(res.model, init_emi_model(2, cfg));
  EXPECT_TRUE(res.loss_history.empty());
}

TEST(TrainEmi, RejectsDataWithoutSources) {
  auto data = toy_separable(10);
  for (auto& w : data) w.label = kClutter;
  EXPECT_THROW(train_emi(data, toy_config()), DataError);
  EXPECT_THROW(train_emi(std::span<const InstanceSet>{}, toy_config()), ConfigError);
  auto cfg = toy_config();
  cfg.k = 99;
  EXPECT_THROW(train_emi(toy_separable(10), cfg), ConfigError);
}

TEST(TrainEmi, DivergenceReportsRound) {
  auto data = toy_separable(10);
  data[0].instances[0](0, 0) = std::nan("");  // clutter: always in the loss
  try {
    train_emi(data, toy_config());
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("round 0"), std::string::npos) << e.what();
  }
}
