#include <gtest/gtest.h>

#include <cmath>

#include "mscrnn/numerics.hpp"
#include "test_util.hpp"

using namespace mscrnn;

TEST(Matvec, IdentityReturnsInput) {
  const Vector x{3.0, -1.0};
  EXPECT_EQ(matvec(Matrix::identity(2), x), x);
}

TEST(Matvec, RankOneByHand) {
  LowRankMatrix m(Matrix(2, 1, {1.0, 0.0}), Matrix(1, 2, {2.0, 0.0}));
  EXPECT_EQ(matvec(m, Vector{1.0, 1.0}), (Vector{2.0, 0.0}));
}

TEST(Matvec, ZeroMatrixGivesZeros) {
  EXPECT_EQ(matvec(Matrix(3, 2), Vector{5.0, -7.0}), Vector(3, 0.0));
}

TEST(Matvec, DimensionMismatchThrows) {
  EXPECT_THROW(matvec(Matrix(2, 3), Vector{1.0, 2.0}), ConfigError);
  EXPECT_THROW(matvec(Weight(LowRankMatrix(Matrix(2, 1), Matrix(1, 3))), Vector{1.0}), ConfigError);
}

TEST(LowRank, RankAboveMinDimensionThrows) {
  EXPECT_THROW(LowRankMatrix(Matrix(2, 3), Matrix(3, 4)), ConfigError);
}

TEST(LowRank, MatchesMaterializedProduct) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t rows = 1 + rng() % 16, cols = 1 + rng() % 16;
    const std::size_t r = 1 + rng() % std::min<std::size_t>({4, rows, cols});
    LowRankMatrix lr(testutil::random_matrix(rows, r, rng), testutil::random_matrix(r, cols, rng));
    Vector x(cols);
    for (auto& v : x) v = uniform(rng, -1, 1);
    const Vector a = matvec(lr, x), b = matvec(lr.materialize(), x);
    for (std::size_t i = 0; i < rows; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);

    // Transposed product agrees too.
    Vector y(rows);
    for (auto& v : y) v = uniform(rng, -1, 1);
    Vector ta(cols, 0.0), tb(cols, 0.0);
    matvec_transposed_into(lr, y, ta);
    matvec_transposed_into(lr.materialize(), y, tb);
    for (std::size_t j = 0; j < cols; ++j) EXPECT_NEAR(ta[j], tb[j], 1e-12);
  }
}

TEST(Elementwise, SigmoidAndSoftmaxExamples) {
  EXPECT_EQ(sigmoid(0.0), 0.5);
  const Vector s = softmax(Vector{0.0, 0.0, 0.0});
  for (double v : s) EXPECT_NEAR(v, 1.0 / 3.0, 1e-15);
}

TEST(Elementwise, SigmoidStaysInOpenIntervalForLargeInputs) {
  EXPECT_GT(sigmoid(-700.0), 0.0);
  EXPECT_LT(sigmoid(30.0), 1.0);
  EXPECT_TRUE(std::isfinite(sigmoid(-1e6)));
  EXPECT_EQ(sigmoid(1e6), 1.0);
}

TEST(Elementwise, CrossEntropyExampleAndFloor) {
  EXPECT_NEAR(cross_entropy(Vector{0.25, 0.75}, 1), -std::log(0.75), 1e-15);
  EXPECT_NEAR(cross_entropy(Vector{0.25, 0.75}, 1), 0.2877, 1e-4);
  EXPECT_NEAR(cross_entropy(Vector{1.0, 0.0}, 1), -std::log(kProbabilityFloor), 1e-9);
}

TEST(Elementwise, SoftmaxIsProbabilityVectorForLargeInputs) {
  Rng rng(9);
  for (int trial = 0; trial < 1000; ++trial) {
    Vector v(1 + rng() % 10);
    for (auto& x : v) x = uniform(rng, -50.0, 50.0);
    const Vector p = softmax(v);
    double sum = 0.0;
    for (double x : p) {
      EXPECT_GE(x, 0.0);
      sum += x;
    }
    EXPECT_NEAR(sum, 1.0, 1e-9);
  }
  const Vector big = softmax(Vector{1000.0, 999.0});
  EXPECT_TRUE(all_finite(big));
}

TEST(FiniteDiff, Examples) {
  const auto sq = finite_diff_grad([](std::span<const double> t) { return t[0] * t[0]; }, Vector{3.0}, 1e-5);
  EXPECT_NEAR(sq[0], 6.0, 1e-6);

  const auto constant = finite_diff_grad([](std::span<const double>) { return 4.2; }, Vector{1.0, 2.0, 3.0}, 1e-5);
  EXPECT_EQ(constant, Vector(3, 0.0));

  const auto prod = finite_diff_grad([](std::span<const double> t) { return t[0] * t[1]; }, Vector{2.0, 5.0}, 1e-5);
  EXPECT_NEAR(prod[0], 5.0, 1e-6);
  EXPECT_NEAR(prod[1], 2.0, 1e-6);
}

TEST(FiniteDiff, NonFiniteValueNamesCoordinate) {
  try {
    finite_diff_grad([](std::span<const double> t) { return t[1] > 1.5 ? NAN : 0.0; }, Vector{0.0, 1.5}, 0.1);
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("coordinate 1"), std::string::npos);
  }
  EXPECT_THROW(finite_diff_grad([](std::span<const double>) { return 0.0; }, Vector{1.0}, 0.0), ConfigError);
}

TEST(Seeds, DeriveSeedIsDeterministicAndSpreads) {
  EXPECT_EQ(derive_seed(7, 3), derive_seed(7, 3));
  EXPECT_NE(derive_seed(7, 3), derive_seed(7, 4));
  EXPECT_NE(derive_seed(7, 3), derive_seed(8, 3));
  Rng a(derive_seed(1, 1)), b(derive_seed(1, 1));
  for (int i = 0; i < 10; ++i) EXPECT_EQ(uniform(a, 0, 1), uniform(b, 0, 1));
}

TEST(Matrix, ShapeContract) {
  EXPECT_THROW(Matrix(2, 2, Vector{1.0, 2.0, 3.0}), ConfigError);
  Matrix m(2, 3);
  m(1, 2) = 4.0;
  EXPECT_EQ(m.row(1)[2], 4.0);
  EXPECT_EQ(m.values()[5], 4.0);
}
