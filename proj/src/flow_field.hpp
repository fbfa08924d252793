#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace pbflow {

// Integer pixel correspondences with a validity mask, row-major.
// u is the x-displacement, v the y-displacement.
struct FlowField {
  int width = 0, height = 0;
  std::vector<int> u, v;
  std::vector<std::uint8_t> valid;

  FlowField() = default;
  FlowField(int w, int h, bool all_valid = false)
      : width(w),
        height(h),
        u(static_cast<std::size_t>(w) * h, 0),
        v(static_cast<std::size_t>(w) * h, 0),
        valid(static_cast<std::size_t>(w) * h, all_valid ? 1 : 0) {}

  std::size_t idx(int x, int y) const {
    return static_cast<std::size_t>(y) * width + x;
  }
  bool in_bounds(int x, int y) const {
    return x >= 0 && x < width && y >= 0 && y < height;
  }
  std::size_t valid_count() const {
    std::size_t n = 0;
    for (std::uint8_t m : valid) n += m ? 1 : 0;
    return n;
  }
};

// Densified flow: a displacement at every pixel.
struct DenseFlow {
  int width = 0, height = 0;
  std::vector<double> u, v;

  DenseFlow() = default;
  DenseFlow(int w, int h)
      : width(w),
        height(h),
        u(static_cast<std::size_t>(w) * h, 0.0),
        v(static_cast<std::size_t>(w) * h, 0.0) {}

  std::size_t idx(int x, int y) const {
    return static_cast<std::size_t>(y) * width + x;
  }
};

}  // namespace pbflow
