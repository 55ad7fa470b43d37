#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <vector>

#include "mscrnn/numerics.hpp"

namespace testutil {

using mscrnn::Vector;

// Concatenation of a list of parameter views.
inline Vector flatten(const std::vector<std::span<double>>& views) {
  Vector out;
  for (auto v : views) out.insert(out.end(), v.begin(), v.end());
  return out;
}

inline void unflatten(std::span<const double> flat, const std::vector<std::span<double>>& views) {
  std::size_t k = 0;
  for (auto v : views)
    for (auto& x : v) x = flat[k++];
}

// |a - b| / max(|a|, |b|, floor): relative where the gradient is sizable,
// absolute below `floor`, where central differences have no relative accuracy.
inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline double max_rel_err(std::span<const double> a, std::span<const double> b, double floor = 1e-6) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, rel_err(a[i], b[i], floor));
  return m;
}

inline mscrnn::Matrix random_matrix(std::size_t r, std::size_t c, mscrnn::Rng& rng, double scale = 1.0) {
  mscrnn::Matrix m(r, c);
  for (auto& v : m.values()) v = mscrnn::uniform(rng, -scale, scale);
  return m;
}

// Central differences of `loss` over the model's flat parameters, where
// `views(model)` lists the parameters.
template <class Model, class Views, class Loss>
Vector numeric_grad(Model model, Views views, Loss loss, double eps = 1e-6) {
  const Vector theta = flatten(views(model));
  return mscrnn::finite_diff_grad(
      [&](std::span<const double> t) {
        unflatten(t, views(model));
        return loss(model);
      },
      theta, eps);
}

}  // namespace testutil
