#pragma once

// Shared mini-batch machinery: per-window gradients computed (optionally in
// parallel) into private buffers and reduced in window order, so a fixed seed
// gives the same bits regardless of thread count.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "mscrnn/numerics.hpp"
#include "mscrnn/parallel.hpp"

namespace mscrnn {

// Stop when the epoch budget is spent or the loss improved by less than
// `rel_tol` (relative) over the last `patience` epochs.
struct EpochPlan {
  std::size_t max_epochs = 10;
  double rel_tol = 1e-4;
  std::size_t patience = 3;
};

inline bool converged(const std::vector<double>& losses, const EpochPlan& plan) {
  if (plan.patience == 0 || losses.size() <= plan.patience) return false;
  const double before = losses[losses.size() - 1 - plan.patience];
  const double now = losses.back();
  const double denom = std::max(std::abs(before), 1e-300);
  return (before - now) / denom < plan.rel_tol;
}

// Adds every tensor of `src` into `dst`; both lists must be shaped alike.
inline void add_views(const std::vector<std::span<double>>& dst,
                      const std::vector<std::span<double>>& src) {
  for (std::size_t k = 0; k < dst.size(); ++k)
    for (std::size_t i = 0; i < dst[k].size(); ++i) dst[k][i] += src[k][i];
}

// Gradient of a batch. `window_fn(index, grad)` accumulates one window's
// (already weighted) loss gradient into `grad` and returns its loss.
template <class Model, class WindowFn>
double batch_gradient(const Model& model, std::span<const std::size_t> batch, WindowFn&& window_fn,
                      Model& grad) {
  std::vector<Model> partial(batch.size(), zeros_like(model));
  std::vector<double> losses(batch.size(), 0.0);
  parallel_for(batch.size(), [&](std::size_t b) { losses[b] = window_fn(batch[b], partial[b]); });
  double total = 0.0;
  auto dst = parameter_views(grad);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    add_views(dst, parameter_views(partial[b]));
    total += losses[b];
  }
  return total;
}

inline std::vector<std::vector<std::size_t>> make_batches(std::vector<std::size_t> order,
                                                          std::size_t batch_size, Rng& rng) {
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < order.size(); i += batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                     order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
  return out;
}

inline void check_finite_loss(double loss, const std::string& where) {
  if (!std::isfinite(loss)) throw NumericError("non-finite loss at " + where);
}

}  // namespace mscrnn
