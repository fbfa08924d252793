#include "matcher.hpp"

#include <algorithm>
#include <limits>
#include <numeric>

#include "errors.hpp"

namespace pbflow {

void DescriptorField::validate() const {
  if (width < 1 || height < 1 || dim < 1)
    throw DimensionError("descriptor field: width, height, dim must be >= 1");
  if (data.rank() != 3 || data.dim(0) != static_cast<std::size_t>(height) ||
      data.dim(1) != static_cast<std::size_t>(width) || data.dim(2) != dim)
    throw DimensionError("descriptor field: tensor shape must be [H, W, D]");
  if (!data.all_finite())
    throw DomainError("descriptor field: non-finite descriptor values");
}

void MatchConfig::validate() const {
  if (iterations < 1) throw DomainError("match config: iterations must be >= 1");
  if (search_radius < 1)
    throw DomainError("match config: search radius must be >= 1");
  if (cc_area_threshold < 0)
    throw DomainError("match config: area threshold must be >= 0");
  if (border_margin < 0)
    throw DomainError("match config: border margin must be >= 0");
}

namespace {

// Squared L2 with early exit once the running sum reaches `bound`.
inline double sqdist(const double* a, const double* b, std::size_t d, double bound) {
  double s = 0.0;
  for (std::size_t k = 0; k < d; ++k) {
    const double diff = a[k] - b[k];
    s += diff * diff;
    if (s >= bound) return s;
  }
  return s;
}

}  // namespace

FlowField patchmatch(const DescriptorField& src, const DescriptorField& dst,
                     const MatchConfig& cfg, Rng& rng, PatchMatchTrace* trace) {
  src.validate();
  dst.validate();
  if (src.dim != dst.dim)
    throw DimensionError("patchmatch: descriptor dimensions differ");
  cfg.validate();

  const int w = src.width, h = src.height;
  const int w2 = dst.width, h2 = dst.height;
  const std::size_t d = src.dim;
  constexpr double kInf = std::numeric_limits<double>::infinity();

  FlowField flow(w, h, true);
  std::vector<double> cost(static_cast<std::size_t>(w) * h, kInf);

  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t i = flow.idx(x, y);
      const int tx = static_cast<int>(rng.uniform_int(0, w2 - 1));
      const int ty = static_cast<int>(rng.uniform_int(0, h2 - 1));
      flow.u[i] = tx - x;
      flow.v[i] = ty - y;
      cost[i] = sqdist(src.at(x, y), dst.at(tx, ty), d, kInf);
    }
  }
  if (trace) trace->sweep_costs.push_back(cost);

  auto try_target = [&](int x, int y, std::size_t i, int tx, int ty) {
    tx = std::clamp(tx, 0, w2 - 1);
    ty = std::clamp(ty, 0, h2 - 1);
    const double c = sqdist(src.at(x, y), dst.at(tx, ty), d, cost[i]);
    if (c < cost[i]) {
      cost[i] = c;
      flow.u[i] = tx - x;
      flow.v[i] = ty - y;
    }
  };

  for (int sweep = 0; sweep < cfg.iterations; ++sweep) {
    const bool forward = sweep % 2 == 0;
    for (int row = 0; row < h; ++row) {
      const int y = forward ? row : h - 1 - row;
      for (int col = 0; col < w; ++col) {
        const int x = forward ? col : w - 1 - col;
        const std::size_t i = flow.idx(x, y);
        if (forward) {
          if (x > 0) try_target(x, y, i, x + flow.u[i - 1], y + flow.v[i - 1]);
          if (y > 0) try_target(x, y, i, x + flow.u[i - w], y + flow.v[i - w]);
        } else {
          if (x < w - 1) try_target(x, y, i, x + flow.u[i + 1], y + flow.v[i + 1]);
          if (y < h - 1) try_target(x, y, i, x + flow.u[i + w], y + flow.v[i + w]);
        }
        for (int r = cfg.search_radius; r >= 1; r /= 2) {
          const int dx = static_cast<int>(rng.uniform_int(-r, r));
          const int dy = static_cast<int>(rng.uniform_int(-r, r));
          try_target(x, y, i, x + flow.u[i] + dx, y + flow.v[i] + dy);
        }
      }
    }
    if (trace) trace->sweep_costs.push_back(cost);
  }
  return flow;
}

FlowField patchmatch(const DescriptorField& src, const DescriptorField& dst,
                     const MatchConfig& cfg) {
  Rng rng(cfg.seed);
  return patchmatch(src, dst, cfg, rng);
}

FlowField bidirectional_filter(const FlowField& fwd, const FlowField& bwd) {
  if (fwd.width != bwd.width || fwd.height != bwd.height)
    throw DimensionError("bidirectional filter: flow sizes differ");
  FlowField out = fwd;
  for (int y = 0; y < fwd.height; ++y) {
    for (int x = 0; x < fwd.width; ++x) {
      const std::size_t i = fwd.idx(x, y);
      if (!fwd.valid[i]) {
        out.valid[i] = 0;
        continue;
      }
      const int tx = x + fwd.u[i], ty = y + fwd.v[i];
      if (!bwd.in_bounds(tx, ty)) {
        out.valid[i] = 0;
        continue;
      }
      const std::size_t j = bwd.idx(tx, ty);
      out.valid[i] = (bwd.valid[j] && bwd.u[j] == -fwd.u[i] && bwd.v[j] == -fwd.v[i])
                         ? 1
                         : 0;
    }
  }
  return out;
}

namespace {

struct UnionFind {
  std::vector<std::size_t> parent, size;

  explicit UnionFind(std::size_t n) : parent(n), size(n, 1) {
    std::iota(parent.begin(), parent.end(), std::size_t{0});
  }
  std::size_t find(std::size_t a) {
    while (parent[a] != a) {
      parent[a] = parent[parent[a]];
      a = parent[a];
    }
    return a;
  }
  void unite(std::size_t a, std::size_t b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    if (size[a] < size[b]) std::swap(a, b);
    parent[b] = a;
    size[a] += size[b];
  }
};

}  // namespace

FlowField connected_component_filter(const FlowField& flow, int area_threshold) {
  FlowField out = flow;
  const std::size_t n = flow.valid.size();
  UnionFind uf(n);
  for (int y = 0; y < flow.height; ++y) {
    for (int x = 0; x < flow.width; ++x) {
      const std::size_t i = flow.idx(x, y);
      if (!flow.valid[i]) continue;
      if (x > 0 && flow.valid[i - 1]) uf.unite(i, i - 1);
      if (y > 0 && flow.valid[i - flow.width]) uf.unite(i, i - flow.width);
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!flow.valid[i]) continue;
    if (uf.size[uf.find(i)] < static_cast<std::size_t>(std::max(area_threshold, 0)))
      out.valid[i] = 0;
  }
  return out;
}

FlowField border_filter(const FlowField& flow, int margin) {
  if (margin < 0) throw DomainError("border filter: margin must be >= 0");
  FlowField out = flow;
  for (int y = 0; y < flow.height; ++y) {
    for (int x = 0; x < flow.width; ++x) {
      if (x < margin || y < margin || x >= flow.width - margin ||
          y >= flow.height - margin)
        out.valid[out.idx(x, y)] = 0;
    }
  }
  return out;
}

FlowField downsample_seeds(const FlowField& flow, int factor) {
  if (factor < 1) throw DomainError("seed downsample: factor must be >= 1");
  FlowField out = flow;
  if (factor == 1) return out;
  for (int y = 0; y < flow.height; ++y) {
    for (int x = 0; x < flow.width; ++x) {
      if (x % factor != 0 || y % factor != 0) out.valid[out.idx(x, y)] = 0;
    }
  }
  return out;
}

}  // namespace pbflow
