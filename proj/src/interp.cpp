#include "interp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <queue>
#include <tuple>

#include "errors.hpp"

namespace pbflow {

void EdgeCostMap::validate() const {
  if (width < 1 || height < 1)
    throw DimensionError("edge cost map: width and height must be >= 1");
  if (cost.size() != static_cast<std::size_t>(width) * height)
    throw DimensionError("edge cost map: grid size mismatch");
  for (double c : cost)
    if (!std::isfinite(c) || c < 0.0)
      throw DomainError("edge cost map: costs must be finite and >= 0");
}

EdgeCostMap edge_cost(const Tensor& image) {
  if (image.rank() != 2)
    throw DimensionError("edge cost: image must be rank-2 [H, W]");
  const int h = static_cast<int>(image.dim(0));
  const int w = static_cast<int>(image.dim(1));

  auto px = [&](int x, int y) {
    x = std::clamp(x, 0, w - 1);
    y = std::clamp(y, 0, h - 1);
    return image.data()[static_cast<std::size_t>(y) * w + x];
  };

  EdgeCostMap map(w, h);
  double max_mag = 0.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double gx = -px(x - 1, y - 1) + px(x + 1, y - 1) - 2.0 * px(x - 1, y) +
                        2.0 * px(x + 1, y) - px(x - 1, y + 1) + px(x + 1, y + 1);
      const double gy = -px(x - 1, y - 1) - 2.0 * px(x, y - 1) - px(x + 1, y - 1) +
                        px(x - 1, y + 1) + 2.0 * px(x, y + 1) + px(x + 1, y + 1);
      const double mag = std::sqrt(gx * gx + gy * gy);
      map.cost[map.idx(x, y)] = mag;
      max_mag = std::max(max_mag, mag);
    }
  }
  if (max_mag > 0.0)
    for (double& c : map.cost) c /= max_mag;
  else
    std::fill(map.cost.begin(), map.cost.end(), 0.0);
  return map;
}

namespace {

constexpr int kDx[4] = {-1, 1, 0, 0};
constexpr int kDy[4] = {0, 0, -1, 1};

}  // namespace

std::vector<double> geodesic_distances(const EdgeCostMap& costs, int sx, int sy,
                                       double kappa) {
  costs.validate();
  if (sx < 0 || sx >= costs.width || sy < 0 || sy >= costs.height)
    throw DomainError("geodesic distances: source out of bounds");
  if (kappa < 0.0 || !std::isfinite(kappa))
    throw DomainError("geodesic distances: kappa must be finite and >= 0");

  const std::size_t n = costs.cost.size();
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  using Item = std::pair<double, std::size_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<Item>> pq;
  dist[costs.idx(sx, sy)] = 0.0;
  pq.emplace(0.0, costs.idx(sx, sy));

  while (!pq.empty()) {
    auto [d, i] = pq.top();
    pq.pop();
    if (d > dist[i]) continue;
    const int x = static_cast<int>(i % costs.width);
    const int y = static_cast<int>(i / costs.width);
    for (int k = 0; k < 4; ++k) {
      const int nx = x + kDx[k], ny = y + kDy[k];
      if (nx < 0 || nx >= costs.width || ny < 0 || ny >= costs.height) continue;
      const std::size_t j = costs.idx(nx, ny);
      const double nd = d + 1.0 + kappa * costs.cost[j];
      if (nd < dist[j]) {
        dist[j] = nd;
        pq.emplace(nd, j);
      }
    }
  }
  return dist;
}

std::vector<std::vector<SeedNeighbor>> geodesic_knn(
    const EdgeCostMap& costs, const std::vector<std::pair<int, int>>& seeds,
    int k, double kappa) {
  costs.validate();
  if (k < 1) throw DomainError("geodesic knn: k must be >= 1");
  if (kappa < 0.0 || !std::isfinite(kappa))
    throw DomainError("geodesic knn: kappa must be finite and >= 0");
  for (const auto& [x, y] : seeds)
    if (x < 0 || x >= costs.width || y < 0 || y >= costs.height)
      throw DomainError("geodesic knn: seed out of bounds");

  const std::size_t n = costs.cost.size();
  const int cap = std::min<int>(k, static_cast<int>(seeds.size()));
  std::vector<std::vector<SeedNeighbor>> settled(n);
  for (auto& s : settled) s.reserve(cap);

  // (distance, seed_id, pixel): the seed_id component makes tie order
  // deterministic and mirrors the oracle's sort key.
  using Item = std::tuple<double, int, std::size_t>;
  std::priority_queue<Item, std::vector<Item>, std::greater<Item>> pq;
  for (std::size_t s = 0; s < seeds.size(); ++s)
    pq.emplace(0.0, static_cast<int>(s), costs.idx(seeds[s].first, seeds[s].second));

  while (!pq.empty()) {
    auto [d, sid, i] = pq.top();
    pq.pop();
    auto& list = settled[i];
    if (static_cast<int>(list.size()) >= cap) continue;
    bool seen = false;
    for (const SeedNeighbor& s : list)
      if (s.seed_id == sid) seen = true;
    if (seen) continue;
    list.push_back({sid, d});

    const int x = static_cast<int>(i % costs.width);
    const int y = static_cast<int>(i / costs.width);
    for (int step = 0; step < 4; ++step) {
      const int nx = x + kDx[step], ny = y + kDy[step];
      if (nx < 0 || nx >= costs.width || ny < 0 || ny >= costs.height) continue;
      const std::size_t j = costs.idx(nx, ny);
      if (static_cast<int>(settled[j].size()) >= cap) continue;
      pq.emplace(d + 1.0 + kappa * costs.cost[j], sid, j);
    }
  }
  return settled;
}

namespace {

// Solves the 3x3 system in place via Gaussian elimination with partial
// pivoting. Returns false when a pivot is so small that only the 1e-9
// regularizer is holding the system up (rank-deficient neighborhood).
bool solve3(double a[3][3], double b[3], double out[3]) {
  int order[3] = {0, 1, 2};
  for (int col = 0; col < 3; ++col) {
    int pivot = col;
    for (int r = col + 1; r < 3; ++r)
      if (std::abs(a[order[r]][col]) > std::abs(a[order[pivot]][col])) pivot = r;
    std::swap(order[col], order[pivot]);
    const double p = a[order[col]][col];
    if (std::abs(p) < 1e-8) return false;
    for (int r = col + 1; r < 3; ++r) {
      const double f = a[order[r]][col] / p;
      for (int c = col; c < 3; ++c) a[order[r]][c] -= f * a[order[col]][c];
      b[order[r]] -= f * b[order[col]];
    }
  }
  for (int col = 2; col >= 0; --col) {
    double s = b[order[col]];
    for (int c = col + 1; c < 3; ++c) s -= a[order[col]][c] * out[c];
    out[col] = s / a[order[col]][col];
  }
  return true;
}

// Solves (a0 + 1e-9 I) x = b, then applies one iterative-refinement step
// against the unregularized a0 so well-conditioned fits are not biased by
// the stabilizer. Returns false on a rank-deficient neighborhood.
bool solve_refined(const double a0[3][3], const double areg[3][3],
                   const double b[3], double out[3]) {
  double work[3][3], rhs[3];
  std::copy(&areg[0][0], &areg[0][0] + 9, &work[0][0]);
  std::copy(b, b + 3, rhs);
  if (!solve3(work, rhs, out)) return false;

  double resid[3], delta[3];
  for (int r = 0; r < 3; ++r) {
    resid[r] = b[r];
    for (int c = 0; c < 3; ++c) resid[r] -= a0[r][c] * out[c];
  }
  std::copy(&areg[0][0], &areg[0][0] + 9, &work[0][0]);
  if (solve3(work, resid, delta))
    for (int r = 0; r < 3; ++r) out[r] += delta[r];
  return true;
}

}  // namespace

DenseFlow densify(const FlowField& seeds, const EdgeCostMap& costs, int k,
                  double kappa) {
  costs.validate();
  if (seeds.width != costs.width || seeds.height != costs.height)
    throw DimensionError("densify: seed grid and cost map sizes differ");
  if (k < 1) throw DomainError("densify: k must be >= 1");

  std::vector<std::pair<int, int>> seed_pixels;
  std::vector<double> seed_u, seed_v;
  for (int y = 0; y < seeds.height; ++y) {
    for (int x = 0; x < seeds.width; ++x) {
      const std::size_t i = seeds.idx(x, y);
      if (!seeds.valid[i]) continue;
      seed_pixels.emplace_back(x, y);
      seed_u.push_back(static_cast<double>(seeds.u[i]));
      seed_v.push_back(static_cast<double>(seeds.v[i]));
    }
  }
  if (seed_pixels.empty())
    throw InterpolationError("densify: no valid seeds to interpolate from");

  const auto knn = geodesic_knn(costs, seed_pixels, k, kappa);
  DenseFlow out(seeds.width, seeds.height);

  for (int y = 0; y < seeds.height; ++y) {
    for (int x = 0; x < seeds.width; ++x) {
      const std::size_t i = out.idx(x, y);
      const auto& neigh = knn[i];
      double mean_d = 0.0;
      for (const SeedNeighbor& s : neigh) mean_d += s.dist;
      mean_d /= static_cast<double>(neigh.size());
      const double sigma = std::max(mean_d, 1e-12);

      double a[3][3] = {{0, 0, 0}, {0, 0, 0}, {0, 0, 0}};
      double bu[3] = {0, 0, 0}, bv[3] = {0, 0, 0};
      double wsum = 0.0, wu = 0.0, wv = 0.0;
      for (const SeedNeighbor& s : neigh) {
        const double w = std::exp(-s.dist / sigma);
        const double dx = seed_pixels[s.seed_id].first - x;
        const double dy = seed_pixels[s.seed_id].second - y;
        const double phi[3] = {1.0, dx, dy};
        for (int r = 0; r < 3; ++r)
          for (int c = 0; c < 3; ++c) a[r][c] += w * phi[r] * phi[c];
        for (int r = 0; r < 3; ++r) {
          bu[r] += w * phi[r] * seed_u[s.seed_id];
          bv[r] += w * phi[r] * seed_v[s.seed_id];
        }
        wsum += w;
        wu += w * seed_u[s.seed_id];
        wv += w * seed_v[s.seed_id];
      }
      double areg[3][3];
      std::copy(&a[0][0], &a[0][0] + 9, &areg[0][0]);
      for (int r = 0; r < 3; ++r) areg[r][r] += 1e-9;

      double au[3], av[3];
      const bool ok_u = solve_refined(a, areg, bu, au);
      const bool ok_v = solve_refined(a, areg, bv, av);
      if (ok_u && ok_v) {
        out.u[i] = au[0];  // centered basis: the intercept is the prediction
        out.v[i] = av[0];
      } else {
        out.u[i] = wu / wsum;
        out.v[i] = wv / wsum;
      }
    }
  }
  return out;
}

}  // namespace pbflow
