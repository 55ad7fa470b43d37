#pragma once

// FastGRNN cell:
//
//   a_t  = W x_t + U h_{t-1}                  (shared pre-activation)
//   z_t  = gate(a_t + b_z)
//   c_t  = update(a_t + b_h)
//   h_t  = (zeta (1 - z_t) + nu) * c_t + z_t * h_{t-1}
//
// zeta and nu are stored as unconstrained reals and read through a sigmoid.
// W and U may independently be dense or low-rank factored.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "mscrnn/numerics.hpp"

namespace mscrnn {

enum class Activation : std::uint8_t { sigmoid, tanh, quant_sigm, quant_tanh };

inline double activate(Activation a, double x) {
  switch (a) {
    case Activation::sigmoid: return sigmoid(x);
    case Activation::tanh: return std::tanh(x);
    case Activation::quant_sigm: return std::clamp((x + 1.0) * 0.5, 0.0, 1.0);
    case Activation::quant_tanh: return std::clamp(x, -1.0, 1.0);
  }
  return 0.0;
}

// Derivative given the pre-activation x and the activation value y.
inline double activate_grad(Activation a, double x, double y) {
  switch (a) {
    case Activation::sigmoid: return y * (1.0 - y);
    case Activation::tanh: return 1.0 - y * y;
    case Activation::quant_sigm: return (x > -1.0 && x < 1.0) ? 0.5 : 0.0;
    case Activation::quant_tanh: return (x > -1.0 && x < 1.0) ? 1.0 : 0.0;
  }
  return 0.0;
}

inline const char* activation_name(Activation a) {
  switch (a) {
    case Activation::sigmoid: return "sigmoid";
    case Activation::tanh: return "tanh";
    case Activation::quant_sigm: return "quant_sigm";
    case Activation::quant_tanh: return "quant_tanh";
  }
  return "?";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "sigmoid") return Activation::sigmoid;
  if (s == "tanh") return Activation::tanh;
  if (s == "quant_sigm") return Activation::quant_sigm;
  if (s == "quant_tanh") return Activation::quant_tanh;
  throw ConfigError("unknown activation '" + s + "'");
}

struct FastGRNNParams {
  Weight W;  // hidden x input
  Weight U;  // hidden x hidden
  Vector b_h;
  Vector b_z;
  double zeta_raw = 0.0;
  double nu_raw = 0.0;
  Activation gate = Activation::sigmoid;
  Activation update = Activation::tanh;

  std::size_t input_dim() const { return cols_of(W); }
  std::size_t hidden_dim() const { return rows_of(W); }
  double zeta() const { return sigmoid(zeta_raw); }
  double nu() const { return sigmoid(nu_raw); }

  bool operator==(const FastGRNNParams&) const = default;
};

struct Readout {
  Matrix w;  // classes x hidden
  Vector b;

  std::size_t num_classes() const { return w.rows(); }

  Vector logits(std::span<const double> h) const {
    Vector out(b);
    matvec_into(w, h, out);
    return out;
  }
  Vector predict(std::span<const double> h) const { return softmax(logits(h)); }

  bool operator==(const Readout&) const = default;
};

// Throws unless every tensor agrees with the declared dims.
inline void validate(const FastGRNNParams& p) {
  const auto hd = p.hidden_dim();
  require(hd >= 1 && p.input_dim() >= 1, "FastGRNN: empty dimensions");
  require(rows_of(p.U) == hd && cols_of(p.U) == hd, "FastGRNN: U must be hidden x hidden");
  require(p.b_h.size() == hd && p.b_z.size() == hd, "FastGRNN: bias length != hidden dim");
}

inline void validate(const Readout& r, std::size_t hidden) {
  require(r.w.rows() >= 2, "Readout: needs at least 2 classes");
  require(r.w.cols() == hidden, "Readout: width != hidden dim");
  require(r.b.size() == r.w.rows(), "Readout: bias length != class count");
}

// Flat views over every trainable scalar, in a fixed canonical order. The
// same order is used by the optimizer, the gradient checks and the model file.
inline std::vector<std::span<double>> parameter_views(FastGRNNParams& p) {
  std::vector<std::span<double>> out;
  append_views(p.W, out);
  append_views(p.U, out);
  out.emplace_back(p.b_h);
  out.emplace_back(p.b_z);
  out.emplace_back(&p.zeta_raw, 1);
  out.emplace_back(&p.nu_raw, 1);
  return out;
}

inline std::vector<std::span<double>> parameter_views(Readout& r) {
  return {r.w.values(), std::span<double>(r.b)};
}

inline FastGRNNParams zeros_like(const FastGRNNParams& p) {
  FastGRNNParams g;
  g.W = zeros_like(p.W);
  g.U = zeros_like(p.U);
  g.b_h.assign(p.b_h.size(), 0.0);
  g.b_z.assign(p.b_z.size(), 0.0);
  g.gate = p.gate;
  g.update = p.update;
  return g;
}

inline Readout zeros_like(const Readout& r) {
  return Readout{Matrix(r.w.rows(), r.w.cols()), Vector(r.b.size(), 0.0)};
}

inline std::size_t parameter_count(const FastGRNNParams& p) {
  return parameter_count(p.W) + parameter_count(p.U) + p.b_h.size() + p.b_z.size() + 2;
}

// ---------------------------------------------------------------------------
// Instrumentation.

struct OpCounter {
  std::uint64_t flops = 0;
  std::uint64_t preactivations = 0;  // shared W x + U h evaluations
};

inline std::uint64_t matvec_flops(const Weight& w) {
  if (const auto* lr = std::get_if<LowRankMatrix>(&w))
    return 2ULL * lr->rank() * (lr->rows() + lr->cols());
  return 2ULL * rows_of(w) * cols_of(w);
}

// Per-coordinate elementwise work of one step: 4 bias/sum adds, 6 gate and
// update ops, 2 nonlinearities.
inline constexpr std::uint64_t kCellElementwiseFlopsPerUnit = 12;

// ---------------------------------------------------------------------------
// Forward.

struct StepCache {
  Vector pre;   // W x + U h_prev
  Vector z;     // gate output
  Vector cand;  // update output
};

struct StepResult {
  Vector h;
  StepCache cache;
};

namespace detail {

// One step written into caller-provided rows. `pre`, `z`, `cand`, `h` must have
// hidden-dim length; `pre` is overwritten.
inline void step_into(const FastGRNNParams& p, std::span<const double> x,
                      std::span<const double> h_prev, std::span<double> pre, std::span<double> z,
                      std::span<double> cand, std::span<double> h, OpCounter* ops) {
  std::fill(pre.begin(), pre.end(), 0.0);
  matvec_into(p.W, x, pre);
  matvec_into(p.U, h_prev, pre);
  const double zeta = p.zeta();
  const double nu = p.nu();
  const std::size_t n = pre.size();
  for (std::size_t i = 0; i < n; ++i) {
    z[i] = activate(p.gate, pre[i] + p.b_z[i]);
    cand[i] = activate(p.update, pre[i] + p.b_h[i]);
    h[i] = (zeta * (1.0 - z[i]) + nu) * cand[i] + z[i] * h_prev[i];
  }
  if (ops) {
    ops->preactivations += 1;
    ops->flops += matvec_flops(p.W) + matvec_flops(p.U) + kCellElementwiseFlopsPerUnit * n;
  }
}

}  // namespace detail

inline StepResult cell_step(const FastGRNNParams& p, std::span<const double> x,
                            std::span<const double> h_prev, OpCounter* ops = nullptr) {
  const auto hd = p.hidden_dim();
  require(x.size() == p.input_dim(), "cell_step: input length != input dim");
  require(h_prev.size() == hd, "cell_step: state length != hidden dim");
  StepResult r{Vector(hd), StepCache{Vector(hd), Vector(hd), Vector(hd)}};
  detail::step_into(p, x, h_prev, r.cache.pre, r.cache.z, r.cache.cand, r.h, ops);
  return r;
}

// Everything backward() needs from a forward pass. Row t of each matrix is
// step t; `h0` is the initial state.
struct SequenceTrace {
  Matrix states;
  Matrix pre;
  Matrix z;
  Matrix cand;
  Vector h0;

  std::size_t steps() const { return states.rows(); }
  std::span<const double> last() const { return states.row(states.rows() - 1); }
  std::span<const double> state_before(std::size_t t) const {
    return t == 0 ? std::span<const double>(h0) : states.row(t - 1);
  }
};

// `xs` is T x input_dim, one step per row. An empty h0 means zeros.
inline SequenceTrace forward(const FastGRNNParams& p, const Matrix& xs,
                             std::span<const double> h0 = {}, OpCounter* ops = nullptr) {
  const auto hd = p.hidden_dim();
  require(xs.rows() > 0, "forward: empty sequence");
  require(xs.cols() == p.input_dim(), "forward: input width != input dim");
  require(h0.empty() || h0.size() == hd, "forward: h0 length != hidden dim");
  const std::size_t T = xs.rows();
  SequenceTrace tr{Matrix(T, hd), Matrix(T, hd), Matrix(T, hd), Matrix(T, hd),
                   h0.empty() ? Vector(hd, 0.0) : Vector(h0.begin(), h0.end())};
  for (std::size_t t = 0; t < T; ++t)
    detail::step_into(p, xs.row(t), tr.state_before(t), tr.pre.row(t), tr.z.row(t),
                      tr.cand.row(t), tr.states.row(t), ops);
  return tr;
}

// Final hidden state only, without keeping per-step caches.
inline Vector run_final(const FastGRNNParams& p, const Matrix& xs,
                        std::span<const double> h0 = {}, OpCounter* ops = nullptr) {
  const auto hd = p.hidden_dim();
  require(xs.rows() > 0, "forward: empty sequence");
  require(xs.cols() == p.input_dim(), "forward: input width != input dim");
  Vector h = h0.empty() ? Vector(hd, 0.0) : Vector(h0.begin(), h0.end());
  Vector next(hd), pre(hd), z(hd), cand(hd);
  for (std::size_t t = 0; t < xs.rows(); ++t) {
    detail::step_into(p, xs.row(t), h, pre, z, cand, next, ops);
    h.swap(next);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Backward (BPTT).

struct CellGradients {
  FastGRNNParams params;  // same layout as the forward params
  Matrix inputs;          // d/dx_t, T x input_dim
  Vector h0;
};

// Accumulates the gradient of sum_t <grad_states[t], h_t> into `grad` (which
// must be shaped like `p`). When `input_grad` is non-null it receives d/dx_t.
inline void backward_into(const FastGRNNParams& p, const Matrix& xs, const SequenceTrace& tr,
                          const Matrix& grad_states, FastGRNNParams& grad,
                          Matrix* input_grad = nullptr, Vector* h0_grad = nullptr) {
  const std::size_t T = tr.steps();
  const std::size_t hd = p.hidden_dim();
  require(xs.rows() == T, "backward: sequence length != cache length");
  require(grad_states.rows() == T && grad_states.cols() == hd,
          "backward: grad_states shape mismatch");
  if (input_grad) *input_grad = Matrix(T, p.input_dim());

  const double zeta = p.zeta();
  const double nu = p.nu();
  double dzeta = 0.0, dnu = 0.0;
  Vector dh(hd, 0.0), da(hd), dh_prev(hd);

  for (std::size_t step = T; step-- > 0;) {
    const auto gs = grad_states.row(step);
    for (std::size_t i = 0; i < hd; ++i) dh[i] += gs[i];

    const auto h_prev = tr.state_before(step);
    const auto pre = tr.pre.row(step);
    const auto z = tr.z.row(step);
    const auto c = tr.cand.row(step);
    for (std::size_t i = 0; i < hd; ++i) {
      const double g = zeta * (1.0 - z[i]) + nu;
      const double dg = dh[i] * c[i];
      dzeta += dg * (1.0 - z[i]);
      dnu += dg;
      const double dc = dh[i] * g;
      const double dz = dh[i] * (h_prev[i] - zeta * c[i]);
      const double daz = dz * activate_grad(p.gate, pre[i] + p.b_z[i], z[i]);
      const double dac = dc * activate_grad(p.update, pre[i] + p.b_h[i], c[i]);
      grad.b_z[i] += daz;
      grad.b_h[i] += dac;
      da[i] = daz + dac;
      dh_prev[i] = dh[i] * z[i];
    }
    accumulate_weight_grad(p.W, grad.W, da, xs.row(step));
    accumulate_weight_grad(p.U, grad.U, da, h_prev);
    if (input_grad) matvec_transposed_into(p.W, da, input_grad->row(step));
    matvec_transposed_into(p.U, da, dh_prev);
    dh.swap(dh_prev);
  }
  grad.zeta_raw += dzeta * zeta * (1.0 - zeta);
  grad.nu_raw += dnu * nu * (1.0 - nu);
  if (h0_grad) *h0_grad = dh;
}

inline CellGradients backward(const FastGRNNParams& p, const Matrix& xs, const SequenceTrace& tr,
                              const Matrix& grad_states) {
  CellGradients g{zeros_like(p), Matrix(), Vector()};
  backward_into(p, xs, tr, grad_states, g.params, &g.inputs, &g.h0);
  return g;
}

// ---------------------------------------------------------------------------
// Initialization.

struct CellInit {
  std::optional<std::size_t> rank_w;
  std::optional<std::size_t> rank_u;
  Activation gate = Activation::sigmoid;
  Activation update = Activation::tanh;
};

inline constexpr double kInitZetaRaw = 2.0;
inline constexpr double kInitNuRaw = -4.0;

inline FastGRNNParams init_params(std::size_t input_dim, std::size_t hidden_dim,
                                  const CellInit& init, std::uint64_t seed) {
  require(input_dim >= 1 && hidden_dim >= 1, "init_params: dims must be >= 1");
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
  auto fill = [&](Matrix m) {
    for (auto& v : m.values()) v = uniform(rng, -bound, bound);
    return m;
  };
  auto make = [&](std::size_t rows, std::size_t cols, std::optional<std::size_t> rank) -> Weight {
    if (!rank) return fill(Matrix(rows, cols));
    require(*rank >= 1 && *rank <= std::min(rows, cols),
            "init_params: rank must be in [1, min(rows, cols)]");
    Matrix left = fill(Matrix(rows, *rank));
    Matrix right = fill(Matrix(*rank, cols));
    return LowRankMatrix(std::move(left), std::move(right));
  };
  FastGRNNParams p;
  p.W = make(hidden_dim, input_dim, init.rank_w);
  p.U = make(hidden_dim, hidden_dim, init.rank_u);
  p.b_h.assign(hidden_dim, 0.0);
  p.b_z.assign(hidden_dim, 0.0);
  p.zeta_raw = kInitZetaRaw;
  p.nu_raw = kInitNuRaw;
  p.gate = init.gate;
  p.update = init.update;
  return p;
}

// Convenience overload: one rank for both matrices.
inline FastGRNNParams init_params(std::size_t input_dim, std::size_t hidden_dim,
                                  std::optional<std::size_t> rank, std::uint64_t seed) {
  return init_params(input_dim, hidden_dim, CellInit{rank, rank}, seed);
}

inline Readout init_readout(std::size_t hidden_dim, std::size_t classes, std::uint64_t seed) {
  require(classes >= 2, "init_readout: needs at least 2 classes");
  Rng rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(hidden_dim));
  Readout r{Matrix(classes, hidden_dim), Vector(classes, 0.0)};
  for (auto& v : r.w.values()) v = uniform(rng, -bound, bound);
  return r;
}

}  // namespace mscrnn
