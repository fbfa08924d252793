#include <algorithm>
#include <cmath>
#include <limits>
#include <utility>
#include <vector>

#include "doctest.h"
#include "errors.hpp"
#include "interp.hpp"
#include "rng.hpp"

using namespace pbflow;

namespace {

// Independent O(V*E) relaxation oracle for the grid shortest path.
std::vector<double> bellman_ford(const EdgeCostMap& m, int sx, int sy,
                                 double kappa) {
  const std::size_t n = m.cost.size();
  std::vector<double> dist(n, std::numeric_limits<double>::infinity());
  dist[m.idx(sx, sy)] = 0.0;
  const int dxs[4] = {-1, 1, 0, 0};
  const int dys[4] = {0, 0, -1, 1};
  for (std::size_t round = 0; round < n; ++round) {
    bool changed = false;
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x) {
        const std::size_t i = m.idx(x, y);
        if (!std::isfinite(dist[i])) continue;
        for (int k = 0; k < 4; ++k) {
          const int nx = x + dxs[k], ny = y + dys[k];
          if (nx < 0 || nx >= m.width || ny < 0 || ny >= m.height) continue;
          const std::size_t j = m.idx(nx, ny);
          const double nd = dist[i] + 1.0 + kappa * m.cost[j];
          if (nd < dist[j] - 1e-15) {
            dist[j] = nd;
            changed = true;
          }
        }
      }
    if (!changed) break;
  }
  return dist;
}

EdgeCostMap random_costs(int w, int h, Rng& rng) {
  EdgeCostMap m(w, h);
  for (double& c : m.cost) c = rng.uniform();
  return m;
}

}  // namespace

TEST_CASE("edge cost: constant, step edge, normalization") {
  SUBCASE("constant image maps to zero cost") {
    Tensor image = Tensor::full({6, 8}, 3.5);
    EdgeCostMap m = edge_cost(image);
    for (double c : m.cost) CHECK(c == 0.0);
  }

  SUBCASE("vertical step concentrates cost on the step columns") {
    Tensor image({8, 10});
    for (std::size_t y = 0; y < 8; ++y)
      for (std::size_t x = 0; x < 10; ++x)
        image.data()[y * 10 + x] = x >= 3 ? 10.0 : 0.0;
    EdgeCostMap m = edge_cost(image);
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 10; ++x) {
        const double c = m.cost[m.idx(x, y)];
        if (x == 2 || x == 3)
          CHECK(c == doctest::Approx(1.0).epsilon(1e-12));
        else
          CHECK(c == doctest::Approx(0.0).epsilon(1e-12));
      }
  }

  SUBCASE("random image: range [0,1] with max exactly 1") {
    Rng rng(8);
    Tensor image({12, 12});
    for (double& v : image.values()) v = rng.uniform(0.0, 255.0);
    EdgeCostMap m = edge_cost(image);
    double max_c = 0.0;
    for (double c : m.cost) {
      CHECK(c >= 0.0);
      CHECK(c <= 1.0);
      max_c = std::max(max_c, c);
    }
    CHECK(max_c == 1.0);
  }

  SUBCASE("single pixel image is constant") {
    Tensor image = Tensor::full({1, 1}, 42.0);
    EdgeCostMap m = edge_cost(image);
    CHECK(m.cost[0] == 0.0);
  }

  CHECK_THROWS_AS(edge_cost(Tensor({2, 2, 2})), DimensionError);
}

TEST_CASE("geodesic distances: manhattan limit, oracle, kappa monotonicity") {
  SUBCASE("zero cost map gives manhattan distances") {
    EdgeCostMap m(7, 5);
    std::vector<double> d = geodesic_distances(m, 3, 2, 100.0);
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 7; ++x)
        CHECK(d[m.idx(x, y)] ==
              doctest::Approx(std::abs(x - 3) + std::abs(y - 2)).epsilon(1e-12));
    CHECK(d[m.idx(3, 2)] == 0.0);
  }

  SUBCASE("wall column routes around; matches relaxation oracle") {
    EdgeCostMap m(5, 5);
    for (int y = 0; y < 4; ++y) m.cost[m.idx(2, y)] = 1.0;  // wall with a gap at y=4
    std::vector<double> fast = geodesic_distances(m, 0, 0, 100.0);
    std::vector<double> slow = bellman_ford(m, 0, 0, 100.0);
    for (std::size_t i = 0; i < fast.size(); ++i)
      CHECK(fast[i] == doctest::Approx(slow[i]).epsilon(1e-12));
    // Route to (4,0): around the gap costs 12 steps; through the wall 104.
    CHECK(fast[m.idx(4, 0)] == doctest::Approx(12.0).epsilon(1e-12));
  }

  SUBCASE("random maps match the oracle") {
    Rng rng(19);
    for (int trial = 0; trial < 10; ++trial) {
      const int w = 2 + static_cast<int>(rng.uniform_int(0, 6));
      const int h = 2 + static_cast<int>(rng.uniform_int(0, 6));
      EdgeCostMap m = random_costs(w, h, rng);
      const int sx = static_cast<int>(rng.uniform_int(0, w - 1));
      const int sy = static_cast<int>(rng.uniform_int(0, h - 1));
      const double kappa = rng.uniform(0.0, 50.0);
      std::vector<double> fast = geodesic_distances(m, sx, sy, kappa);
      std::vector<double> slow = bellman_ford(m, sx, sy, kappa);
      for (std::size_t i = 0; i < fast.size(); ++i)
        CHECK(fast[i] == doctest::Approx(slow[i]).epsilon(1e-10));
    }
  }

  SUBCASE("triangle inequality over sampled triples") {
    Rng rng(23);
    EdgeCostMap m = random_costs(8, 8, rng);
    for (int trial = 0; trial < 12; ++trial) {
      const int ax = static_cast<int>(rng.uniform_int(0, 7));
      const int ay = static_cast<int>(rng.uniform_int(0, 7));
      const int bx = static_cast<int>(rng.uniform_int(0, 7));
      const int by = static_cast<int>(rng.uniform_int(0, 7));
      std::vector<double> da = geodesic_distances(m, ax, ay, 100.0);
      std::vector<double> db = geodesic_distances(m, bx, by, 100.0);
      for (int cy = 0; cy < 8; ++cy)
        for (int cx = 0; cx < 8; ++cx)
          CHECK(da[m.idx(cx, cy)] <=
                da[m.idx(bx, by)] + db[m.idx(cx, cy)] + 1e-9);
    }
  }

  SUBCASE("larger kappa never shrinks distances") {
    Rng rng(29);
    EdgeCostMap m = random_costs(9, 6, rng);
    std::vector<double> d0 = geodesic_distances(m, 4, 3, 0.0);
    std::vector<double> d50 = geodesic_distances(m, 4, 3, 50.0);
    std::vector<double> d100 = geodesic_distances(m, 4, 3, 100.0);
    for (std::size_t i = 0; i < d0.size(); ++i) {
      CHECK(d0[i] <= d50[i] + 1e-12);
      CHECK(d50[i] <= d100[i] + 1e-12);
    }
  }

  EdgeCostMap m(3, 3);
  CHECK_THROWS_AS(geodesic_distances(m, 3, 0, 100.0), DomainError);
  CHECK_THROWS_AS(geodesic_distances(m, 0, 0, -1.0), DomainError);
}

TEST_CASE("geodesic knn: exact parity with per-seed oracle") {
  Rng rng(37);
  for (int trial = 0; trial < 8; ++trial) {
    const int w = 3 + static_cast<int>(rng.uniform_int(0, 5));
    const int h = 3 + static_cast<int>(rng.uniform_int(0, 5));
    EdgeCostMap m = random_costs(w, h, rng);
    const int n_seeds = 2 + static_cast<int>(rng.uniform_int(0, 5));
    std::vector<std::pair<int, int>> seeds;
    while (static_cast<int>(seeds.size()) < n_seeds) {
      const int x = static_cast<int>(rng.uniform_int(0, w - 1));
      const int y = static_cast<int>(rng.uniform_int(0, h - 1));
      if (std::find(seeds.begin(), seeds.end(), std::make_pair(x, y)) ==
          seeds.end())
        seeds.emplace_back(x, y);
    }
    const int k = 1 + static_cast<int>(rng.uniform_int(0, 3));
    const double kappa = rng.uniform(0.0, 30.0);

    auto fast = geodesic_knn(m, seeds, k, kappa);

    // Oracle: exhaustive per-seed relaxation, then sort by (dist, seed_id).
    std::vector<std::vector<double>> per_seed;
    for (const auto& [sx, sy] : seeds)
      per_seed.push_back(bellman_ford(m, sx, sy, kappa));
    const int cap = std::min<int>(k, n_seeds);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t i = m.idx(x, y);
        std::vector<std::pair<double, int>> all;
        for (int s = 0; s < n_seeds; ++s) all.emplace_back(per_seed[s][i], s);
        std::sort(all.begin(), all.end());
        REQUIRE(static_cast<int>(fast[i].size()) == cap);
        for (int r = 0; r < cap; ++r) {
          CHECK(fast[i][r].seed_id == all[r].second);
          CHECK(fast[i][r].dist == doctest::Approx(all[r].first).epsilon(1e-10));
        }
      }
  }
  EdgeCostMap m(4, 4);
  CHECK_THROWS_AS(geodesic_knn(m, {{0, 0}}, 0, 100.0), DomainError);
  CHECK_THROWS_AS(geodesic_knn(m, {{4, 0}}, 1, 100.0), DomainError);
}

TEST_CASE("densify: constant and affine reproduction") {
  SUBCASE("constant seed flow reproduces exactly everywhere") {
    FlowField seeds(9, 7);
    Rng rng(3);
    for (int t = 0; t < 10; ++t) {
      const int x = static_cast<int>(rng.uniform_int(0, 8));
      const int y = static_cast<int>(rng.uniform_int(0, 6));
      const std::size_t i = seeds.idx(x, y);
      seeds.valid[i] = 1;
      seeds.u[i] = 4;
      seeds.v[i] = -2;
    }
    EdgeCostMap costs(9, 7);
    DenseFlow dense = densify(seeds, costs, 5, 100.0);
    for (std::size_t i = 0; i < dense.u.size(); ++i) {
      CHECK(dense.u[i] == doctest::Approx(4.0).epsilon(1e-10));
      CHECK(dense.v[i] == doctest::Approx(-2.0).epsilon(1e-10));
    }
  }

  SUBCASE("integer affine flow reproduces to 1e-8") {
    const int w = 10, h = 8;
    FlowField seeds(w, h);
    auto fu = [](int x, int y) { return 2 + x - 2 * y; };
    auto fv = [](int x, int y) { return -1 + 3 * x + y; };
    const int sx[] = {0, 4, 9, 2, 7, 5, 1, 8};
    const int sy[] = {0, 6, 3, 2, 7, 5, 4, 1};
    for (int t = 0; t < 8; ++t) {
      const std::size_t i = seeds.idx(sx[t], sy[t]);
      seeds.valid[i] = 1;
      seeds.u[i] = fu(sx[t], sy[t]);
      seeds.v[i] = fv(sx[t], sy[t]);
    }
    EdgeCostMap costs(w, h);
    DenseFlow dense = densify(seeds, costs, 8, 100.0);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const std::size_t i = dense.idx(x, y);
        CHECK(std::abs(dense.u[i] - fu(x, y)) <= 1e-8);
        CHECK(std::abs(dense.v[i] - fv(x, y)) <= 1e-8);
      }
  }

  SUBCASE("k=1: each seed pixel reproduces its own flow") {
    FlowField seeds(6, 6);
    const int px[] = {1, 4, 2};
    const int py[] = {1, 4, 5};
    const int pu[] = {3, -5, 7};
    const int pv[] = {-2, 6, 0};
    for (int t = 0; t < 3; ++t) {
      const std::size_t i = seeds.idx(px[t], py[t]);
      seeds.valid[i] = 1;
      seeds.u[i] = pu[t];
      seeds.v[i] = pv[t];
    }
    EdgeCostMap costs(6, 6);
    DenseFlow dense = densify(seeds, costs, 1, 100.0);
    for (int t = 0; t < 3; ++t) {
      const std::size_t i = dense.idx(px[t], py[t]);
      CHECK(dense.u[i] == doctest::Approx(pu[t]).epsilon(1e-12));
      CHECK(dense.v[i] == doctest::Approx(pv[t]).epsilon(1e-12));
    }
  }
}

TEST_CASE("densify: high-cost wall separates flow regions") {
  const int w = 9, h = 7;
  EdgeCostMap costs(w, h);
  for (int y = 0; y < h; ++y) costs.cost[costs.idx(4, y)] = 1.0;  // full wall

  FlowField seeds(w, h);
  for (int y = 1; y < h; y += 2) {
    std::size_t l = seeds.idx(1, y);
    seeds.valid[l] = 1;
    seeds.u[l] = 5;
    std::size_t r = seeds.idx(7, y);
    seeds.valid[r] = 1;
    seeds.u[r] = -7;
  }
  DenseFlow dense = densify(seeds, costs, 2, 100.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      if (x == 4) continue;  // on the wall either side may win
      const double expect = x < 4 ? 5.0 : -7.0;
      CHECK(dense.u[dense.idx(x, y)] == doctest::Approx(expect).epsilon(1e-9));
      CHECK(dense.v[dense.idx(x, y)] == doctest::Approx(0.0).epsilon(1e-9));
    }
}

TEST_CASE("densify: validation") {
  FlowField empty(4, 4);
  EdgeCostMap costs(4, 4);
  CHECK_THROWS_AS(densify(empty, costs, 5, 100.0), InterpolationError);

  FlowField seeds(4, 4, true);
  EdgeCostMap wrong(5, 4);
  CHECK_THROWS_AS(densify(seeds, wrong, 5, 100.0), DimensionError);
  CHECK_THROWS_AS(densify(seeds, costs, 0, 100.0), DomainError);
}
