#include "flow_io.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "errors.hpp"

namespace pbflow {

void FlowData::validate() const {
  if (width < 1 || height < 1)
    throw DimensionError("flow data: width and height must be >= 1");
  const std::size_t n = static_cast<std::size_t>(width) * height;
  if (u.size() != n || v.size() != n || valid.size() != n)
    throw DimensionError("flow data: grid sizes do not match dimensions");
  for (std::size_t i = 0; i < n; ++i) {
    if (!std::isfinite(u[i]) || !std::isfinite(v[i]))
      throw DomainError("flow data: non-finite displacement");
    if (valid[i] > 1) throw DomainError("flow data: validity must be 0 or 1");
  }
}

namespace {

void put_f32(std::ostream& os, float x) {
  const std::uint32_t v = std::bit_cast<std::uint32_t>(x);
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

float get_f32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw IoError("flow file: truncated record");
  const std::uint32_t v = static_cast<std::uint32_t>(b[0]) |
                          static_cast<std::uint32_t>(b[1]) << 8 |
                          static_cast<std::uint32_t>(b[2]) << 16 |
                          static_cast<std::uint32_t>(b[3]) << 24;
  return std::bit_cast<float>(v);
}

}  // namespace

FlowData read_flow(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("flow file: cannot open " + path);

  std::string header;
  if (!std::getline(in, header)) throw IoError("flow file: missing header");
  std::istringstream hs(header);
  std::string magic;
  int w = 0, h = 0;
  if (!(hs >> magic >> w >> h) || magic != "PBFL1")
    throw IoError("flow file: bad header in " + path);
  std::string rest;
  if (hs >> rest) throw IoError("flow file: trailing header fields");
  if (w < 1 || h < 1) throw IoError("flow file: non-positive dimensions");

  FlowData flow(w, h);
  const std::size_t n = static_cast<std::size_t>(w) * h;
  for (std::size_t i = 0; i < n; ++i) {
    flow.u[i] = get_f32(in);
    flow.v[i] = get_f32(in);
    int b = in.get();
    if (b == EOF) throw IoError("flow file: truncated record");
    if (b != 0 && b != 1) throw IoError("flow file: validity byte must be 0 or 1");
    flow.valid[i] = static_cast<std::uint8_t>(b);
    if (!std::isfinite(flow.u[i]) || !std::isfinite(flow.v[i]))
      throw IoError("flow file: non-finite displacement");
  }
  if (in.get() != EOF) throw IoError("flow file: trailing bytes");
  return flow;
}

void write_flow(const std::string& path, const FlowData& flow) {
  flow.validate();
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("flow file: cannot open " + tmp + " for writing");
    out << "PBFL1 " << flow.width << ' ' << flow.height << '\n';
    const std::size_t n = static_cast<std::size_t>(flow.width) * flow.height;
    for (std::size_t i = 0; i < n; ++i) {
      put_f32(out, flow.u[i]);
      put_f32(out, flow.v[i]);
      out.put(static_cast<char>(flow.valid[i]));
    }
    if (!out) throw IoError("flow file: write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw IoError("flow file: cannot move " + tmp + " into place");
}

FlowData to_flow_data(const FlowField& field) {
  FlowData out(field.width, field.height);
  const std::size_t n = field.valid.size();
  for (std::size_t i = 0; i < n; ++i) {
    out.u[i] = static_cast<float>(field.u[i]);
    out.v[i] = static_cast<float>(field.v[i]);
    out.valid[i] = field.valid[i] ? 1 : 0;
  }
  return out;
}

FlowData to_flow_data(const DenseFlow& dense) {
  FlowData out(dense.width, dense.height);
  const std::size_t n = dense.u.size();
  for (std::size_t i = 0; i < n; ++i) {
    out.u[i] = static_cast<float>(dense.u[i]);
    out.v[i] = static_cast<float>(dense.v[i]);
    out.valid[i] = 1;
  }
  return out;
}

FlowField to_flow_field(const FlowData& data) {
  data.validate();
  FlowField out(data.width, data.height);
  const std::size_t n = data.valid.size();
  for (std::size_t i = 0; i < n; ++i) {
    out.u[i] = static_cast<int>(std::lround(data.u[i]));
    out.v[i] = static_cast<int>(std::lround(data.v[i]));
    out.valid[i] = data.valid[i];
  }
  return out;
}

DenseFlow to_dense_flow(const FlowData& data) {
  data.validate();
  DenseFlow out(data.width, data.height);
  const std::size_t n = data.u.size();
  for (std::size_t i = 0; i < n; ++i) {
    out.u[i] = data.u[i];
    out.v[i] = data.v[i];
  }
  return out;
}

}  // namespace pbflow
