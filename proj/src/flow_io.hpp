#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flow_field.hpp"

namespace pbflow {

// On-disk flow record set: float displacements plus a validity byte per
// pixel. Matches the PBFL1 file layout and the C API flow object.
struct FlowData {
  int width = 0, height = 0;
  std::vector<float> u, v;
  std::vector<std::uint8_t> valid;

  FlowData() = default;
  FlowData(int w, int h)
      : width(w),
        height(h),
        u(static_cast<std::size_t>(w) * h, 0.0f),
        v(static_cast<std::size_t>(w) * h, 0.0f),
        valid(static_cast<std::size_t>(w) * h, 0) {}

  std::size_t idx(int x, int y) const {
    return static_cast<std::size_t>(y) * width + x;
  }
  void validate() const;
};

// PBFL1 format: ASCII header "PBFL1 <width> <height>\n", then width*height
// row-major records of little-endian float32 u, float32 v, uint8 valid.
FlowData read_flow(const std::string& path);
void write_flow(const std::string& path, const FlowData& flow);

FlowData to_flow_data(const FlowField& field);
FlowData to_flow_data(const DenseFlow& dense);  // valid everywhere

// Rounds displacements to the nearest integer.
FlowField to_flow_field(const FlowData& data);
DenseFlow to_dense_flow(const FlowData& data);

}  // namespace pbflow
