#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

#include "losses.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace pbflow::testutil {

inline double rel_err(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Central finite difference of a scalar function of a flat parameter
// vector, evaluated coordinate by coordinate.
inline std::vector<double> central_diff(
    const std::function<double(std::span<const double>)>& f,
    std::vector<double> x, double h = 1e-5) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double fp = f(x);
    x[i] = saved - h;
    const double fm = f(x);
    x[i] = saved;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

// Largest relative error between an analytic gradient and its central
// finite difference.
inline double max_grad_rel_err(
    const std::function<double(std::span<const double>)>& f,
    const std::vector<double>& x, std::span<const double> analytic,
    double h = 1e-5, double floor = 1e-6) {
  const std::vector<double> fd = central_diff(f, x, h);
  double worst = 0.0;
  for (std::size_t i = 0; i < fd.size(); ++i)
    worst = std::max(worst, rel_err(analytic[i], fd[i], floor));
  return worst;
}

// Random distance batch kept away from the hinge (|D - m| > 0.05 m), away
// from D = 0, and with non-degenerate per-label spread, so that analytic
// and finite-difference gradients are comparable.
inline DistanceBatch well_conditioned_batch(Rng& rng, double margin,
                                            std::size_t min_per_class = 2) {
  for (;;) {
    const std::size_t n0 =
        min_per_class + static_cast<std::size_t>(rng.uniform_int(0, 8));
    const std::size_t n1 =
        min_per_class + static_cast<std::size_t>(rng.uniform_int(0, 8));
    std::vector<double> d;
    std::vector<int> labels;
    for (std::size_t i = 0; i < n0 + n1; ++i)
      labels.push_back(i < n0 ? 0 : 1);
    for (int y : labels) {
      (void)y;
      double v;
      do {
        v = rng.uniform(0.05 * margin, 1.9 * margin);
      } while (std::abs(v - margin) < 0.05 * margin);
      d.push_back(v);
    }
    // Deterministic shuffle so label order is not fixed.
    for (std::size_t i = d.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(d[i - 1], d[j]);
      std::swap(labels[i - 1], labels[j]);
    }
    // Reject batches whose per-label spread is too small for a stable
    // SD gradient.
    double lo[2] = {1e300, 1e300}, hi[2] = {-1e300, -1e300};
    for (std::size_t i = 0; i < d.size(); ++i) {
      lo[labels[i]] = std::min(lo[labels[i]], d[i]);
      hi[labels[i]] = std::max(hi[labels[i]], d[i]);
    }
    if (hi[0] - lo[0] < 0.01 * margin || hi[1] - lo[1] < 0.01 * margin) continue;
    DistanceBatch batch;
    const std::size_t n = d.size();
    batch.distances = Tensor({n}, std::move(d));
    batch.labels = std::move(labels);
    return batch;
  }
}

// Flat copy of every model parameter, in declaration order.
template <typename Model>
std::vector<double> flatten_params(Model& model) {
  std::vector<double> out;
  for (Tensor* p : model.parameters())
    out.insert(out.end(), p->values().begin(), p->values().end());
  return out;
}

template <typename Model>
void set_params(Model& model, std::span<const double> flat) {
  std::size_t at = 0;
  for (Tensor* p : model.parameters())
    for (double& v : p->values()) v = flat[at++];
}

template <typename Model>
std::vector<double> flatten_grads(Model& model) {
  std::vector<double> out;
  for (Tensor* g : model.gradients())
    out.insert(out.end(), g->values().begin(), g->values().end());
  return out;
}

}  // namespace pbflow::testutil
