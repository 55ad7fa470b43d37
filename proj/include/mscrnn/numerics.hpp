#pragma once

// Dense and low-rank linear algebra plus the elementwise functions shared by
// the float training path. Everything here is pure and allocation-light; the
// hot loops take output spans so callers can reuse buffers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mscrnn/error.hpp"

namespace mscrnn {

using Vector = std::vector<double>;

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows_ * cols_, "Matrix: data length != rows*cols");
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

// Represents left * right without ever forming the product.
struct LowRankMatrix {
  Matrix left;   // rows x r
  Matrix right;  // r x cols

  LowRankMatrix() = default;
  LowRankMatrix(Matrix l, Matrix r) : left(std::move(l)), right(std::move(r)) {
    require(left.cols() == right.rows(), "LowRankMatrix: left.cols != right.rows");
    require(rank() <= std::min(rows(), cols()), "LowRankMatrix: rank exceeds min(rows, cols)");
  }

  std::size_t rows() const noexcept { return left.rows(); }
  std::size_t cols() const noexcept { return right.cols(); }
  std::size_t rank() const noexcept { return left.cols(); }

  Matrix materialize() const {
    Matrix out(rows(), cols());
    for (std::size_t i = 0; i < rows(); ++i)
      for (std::size_t k = 0; k < rank(); ++k) {
        const double l = left(i, k);
        for (std::size_t j = 0; j < cols(); ++j) out(i, j) += l * right(k, j);
      }
    return out;
  }

  bool operator==(const LowRankMatrix&) const = default;
};

using Weight = std::variant<Matrix, LowRankMatrix>;

inline std::size_t rows_of(const Weight& w) {
  return std::visit([](const auto& m) { return m.rows(); }, w);
}
inline std::size_t cols_of(const Weight& w) {
  return std::visit([](const auto& m) { return m.cols(); }, w);
}
inline bool is_low_rank(const Weight& w) { return std::holds_alternative<LowRankMatrix>(w); }

inline std::size_t parameter_count(const Weight& w) {
  if (const auto* lr = std::get_if<LowRankMatrix>(&w)) return lr->left.size() + lr->right.size();
  return std::get<Matrix>(w).size();
}

// ---------------------------------------------------------------------------
// Products. The `_into` forms accumulate (+=) into `out`.

inline void matvec_into(const Matrix& m, std::span<const double> x, std::span<double> out) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double* row = m.values().data() + i * m.cols();
    double acc = 0.0;
    for (std::size_t j = 0; j < m.cols(); ++j) acc += row[j] * x[j];
    out[i] += acc;
  }
}

// out += m^T y
inline void matvec_transposed_into(const Matrix& m, std::span<const double> y,
                                   std::span<double> out) {
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const double* row = m.values().data() + i * m.cols();
    const double yi = y[i];
    if (yi == 0.0) continue;
    for (std::size_t j = 0; j < m.cols(); ++j) out[j] += row[j] * yi;
  }
}

inline void matvec_into(const LowRankMatrix& m, std::span<const double> x, std::span<double> out) {
  Vector tmp(m.rank(), 0.0);
  matvec_into(m.right, x, tmp);
  matvec_into(m.left, tmp, out);
}

inline void matvec_transposed_into(const LowRankMatrix& m, std::span<const double> y,
                                   std::span<double> out) {
  Vector tmp(m.rank(), 0.0);
  matvec_transposed_into(m.left, y, tmp);
  matvec_transposed_into(m.right, tmp, out);
}

inline void matvec_into(const Weight& w, std::span<const double> x, std::span<double> out) {
  std::visit([&](const auto& m) { matvec_into(m, x, out); }, w);
}

inline void matvec_transposed_into(const Weight& w, std::span<const double> y,
                                   std::span<double> out) {
  std::visit([&](const auto& m) { matvec_transposed_into(m, y, out); }, w);
}

template <class M>
Vector matvec(const M& m, std::span<const double> x) {
  if constexpr (std::is_same_v<M, Weight>) {
    require(x.size() == cols_of(m), "matvec: dimension mismatch");
    Vector out(rows_of(m), 0.0);
    matvec_into(m, x, out);
    return out;
  } else {
    require(x.size() == m.cols(), "matvec: dimension mismatch");
    Vector out(m.rows(), 0.0);
    matvec_into(m, x, out);
    return out;
  }
}

// g += a b^T
inline void add_outer(Matrix& g, std::span<const double> a, std::span<const double> b) {
  for (std::size_t i = 0; i < g.rows(); ++i) {
    const double ai = a[i];
    if (ai == 0.0) continue;
    double* row = g.values().data() + i * g.cols();
    for (std::size_t j = 0; j < g.cols(); ++j) row[j] += ai * b[j];
  }
}

// Gradient of <y, W x> w.r.t. W (dense or factored), accumulated into `grad`,
// which must have the same alternative as `w`.
inline void accumulate_weight_grad(const Weight& w, Weight& grad, std::span<const double> y,
                                   std::span<const double> x) {
  if (const auto* lr = std::get_if<LowRankMatrix>(&w)) {
    auto& g = std::get<LowRankMatrix>(grad);
    Vector rx(lr->rank(), 0.0);
    matvec_into(lr->right, x, rx);
    add_outer(g.left, y, rx);
    Vector lty(lr->rank(), 0.0);
    matvec_transposed_into(lr->left, y, lty);
    add_outer(g.right, lty, x);
  } else {
    add_outer(std::get<Matrix>(grad), y, x);
  }
}

inline Weight zeros_like(const Weight& w) {
  if (const auto* lr = std::get_if<LowRankMatrix>(&w))
    return LowRankMatrix{Matrix(lr->left.rows(), lr->left.cols()),
                         Matrix(lr->right.rows(), lr->right.cols())};
  const auto& m = std::get<Matrix>(w);
  return Matrix(m.rows(), m.cols());
}

inline void append_views(Weight& w, std::vector<std::span<double>>& out) {
  if (auto* lr = std::get_if<LowRankMatrix>(&w)) {
    out.push_back(lr->left.values());
    out.push_back(lr->right.values());
  } else {
    out.push_back(std::get<Matrix>(w).values());
  }
}

// ---------------------------------------------------------------------------
// Elementwise functions.

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline double tanh(double x) { return std::tanh(x); }

// Max-subtracted; safe for large logits.
inline Vector softmax(std::span<const double> v) {
  require(!v.empty(), "softmax: empty input");
  const double mx = *std::max_element(v.begin(), v.end());
  Vector out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(v[i] - mx);
    sum += out[i];
  }
  for (auto& o : out) o /= sum;
  return out;
}

inline constexpr double kProbabilityFloor = 1e-12;

inline double cross_entropy(std::span<const double> p, std::size_t y) {
  require(y < p.size(), "cross_entropy: class index out of range");
  return -std::log(std::max(p[y], kProbabilityFloor));
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

inline bool all_finite(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

// Central-difference gradient; test oracle for every backward pass.
inline Vector finite_diff_grad(const std::function<double(std::span<const double>)>& f,
                               std::span<const double> theta, double eps) {
  require(eps > 0.0, "finite_diff_grad: eps must be positive");
  Vector probe(theta.begin(), theta.end());
  Vector grad(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double fp = f(probe);
    probe[i] = orig - eps;
    const double fm = f(probe);
    probe[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericError("finite_diff_grad: non-finite value at coordinate " + std::to_string(i));
    grad[i] = (fp - fm) / (2.0 * eps);
  }
  return grad;
}

// ---------------------------------------------------------------------------
// Seeding.

inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// Independent child seed `index` of `master`.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index) {
  std::uint64_t s = master ^ (0xD1B54A32D192ED03ULL * (index + 1));
  return splitmix64(s);
}

using Rng = std::mt19937_64;

inline double uniform(Rng& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

inline double gaussian(Rng& rng, double sigma) {
  return std::normal_distribution<double>(0.0, sigma)(rng);
}

}  // namespace mscrnn
