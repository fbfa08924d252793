#pragma once

#include <utility>
#include <vector>

#include "flow_field.hpp"
#include "tensor.hpp"

namespace pbflow {

// Non-negative per-pixel traversal costs derived from image edges.
struct EdgeCostMap {
  int width = 0, height = 0;
  std::vector<double> cost;

  EdgeCostMap() = default;
  EdgeCostMap(int w, int h)
      : width(w), height(h), cost(static_cast<std::size_t>(w) * h, 0.0) {}

  std::size_t idx(int x, int y) const {
    return static_cast<std::size_t>(y) * width + x;
  }
  void validate() const;
};

// Sobel gradient magnitude with replicated borders, normalized so the
// maximum is 1 (all zero for a constant image).
EdgeCostMap edge_cost(const Tensor& image);

// Exact shortest-path distances from (sx, sy) on the 4-connected grid;
// stepping into pixel p costs 1 + kappa * cost(p). Source distance is 0.
std::vector<double> geodesic_distances(const EdgeCostMap& costs, int sx, int sy,
                                       double kappa);

struct SeedNeighbor {
  int seed_id = 0;
  double dist = 0.0;
};

// For every pixel, the K geodesically nearest of the given seed pixels,
// sorted by (distance, seed_id). Exact: multi-source best-first expansion
// where each pixel settles at most K distinct seeds.
std::vector<std::vector<SeedNeighbor>> geodesic_knn(
    const EdgeCostMap& costs, const std::vector<std::pair<int, int>>& seeds,
    int k, double kappa);

// Sparse-to-dense interpolation: per pixel, weighted least-squares affine fit
// over its K nearest seeds with weights exp(-d / sigma), sigma = mean of the
// K distances. Rank-deficient fits fall back to the weighted mean.
DenseFlow densify(const FlowField& seeds, const EdgeCostMap& costs, int k = 25,
                  double kappa = 100.0);

}  // namespace pbflow
