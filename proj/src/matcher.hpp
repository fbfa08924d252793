#pragma once

#include <cstdint>
#include <vector>

#include "flow_field.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace pbflow {

// Per-pixel descriptors, [H, W, D] row-major.
struct DescriptorField {
  int width = 0;
  int height = 0;
  std::size_t dim = 0;
  Tensor data;

  const double* at(int x, int y) const {
    return data.data() +
           (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
            static_cast<std::size_t>(x)) *
               dim;
  }
  double* at(int x, int y) {
    return data.data() +
           (static_cast<std::size_t>(y) * static_cast<std::size_t>(width) +
            static_cast<std::size_t>(x)) *
               dim;
  }
  void validate() const;  // shape [H, W, D], finite, H/W/D >= 1
};

struct MatchConfig {
  int iterations = 2;      // total sweeps, alternating scan direction
  int search_radius = 32;  // initial random-search window, halves down to 1
  int cc_area_threshold = 50;
  int border_margin = 8;
  std::uint64_t seed = 0;

  void validate() const;
};

// Squared-L2 match costs per pixel, recorded after initialization and after
// every sweep; lets tests assert monotone improvement.
struct PatchMatchTrace {
  std::vector<std::vector<double>> sweep_costs;
};

// Randomized correspondence search: random init, then cfg.iterations sweeps.
// Even sweeps scan top-left to bottom-right propagating from left/up; odd
// sweeps scan in reverse propagating from right/down. Each visit ends with a
// random search around the current target, radius halving from
// cfg.search_radius to 1. Candidates are clamped to dst bounds. Output offsets
// are integers, valid everywhere.
FlowField patchmatch(const DescriptorField& src, const DescriptorField& dst,
                     const MatchConfig& cfg, Rng& rng,
                     PatchMatchTrace* trace = nullptr);

// Convenience overload seeding from cfg.seed.
FlowField patchmatch(const DescriptorField& src, const DescriptorField& dst,
                     const MatchConfig& cfg);

// Keeps (x, y) iff bwd at (x+u, y+v) is valid and exactly (-u, -v).
FlowField bidirectional_filter(const FlowField& fwd, const FlowField& bwd);

// Invalidates 4-connected components of the valid mask smaller than
// area_threshold pixels.
FlowField connected_component_filter(const FlowField& flow, int area_threshold);

// Clears validity within margin pixels of any edge.
FlowField border_filter(const FlowField& flow, int margin);

// Strided subsampling: only pixels with x % factor == 0 and y % factor == 0
// keep their validity.
FlowField downsample_seeds(const FlowField& flow, int factor);

}  // namespace pbflow
