#include <cstdint>
#include <cstdio>
#include <fstream>
#include <memory>
#include <string>

#include "errors.hpp"
#include "net.hpp"

// Checkpoint layout, all integers and floats little-endian:
//   magic "PBNET1"
//   u32 layer count
//   layer descriptor table: u8 kind code + kind-specific fields
//     1 dense:          u32 in_dim, u32 out_dim
//     2 conv2d:         u32 in_ch, u32 out_ch, u32 k, u32 stride
//     3 maxpool:        u32 k, u32 stride
//     4 leaky_relu:     f64 alpha
//     5 batchnorm_fine: u32 rank, u32 dims[rank], f64 eps, f64 momentum
//     6 batchnorm_conv: u32 channels, f64 eps, f64 momentum
//   parameter blobs in layer order, row-major f64:
//     dense: weight, bias; conv2d: weight, bias;
//     batchnorm: gamma, beta, running_mean, running_var

namespace pbflow {

namespace {

constexpr char kMagic[6] = {'P', 'B', 'N', 'E', 'T', '1'};

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16),
                        static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_f64(std::ostream& os, double x) {
  std::uint64_t v;
  static_assert(sizeof(v) == sizeof(x));
  __builtin_memcpy(&v, &x, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

void put_u8(std::ostream& os, std::uint8_t v) {
  os.put(static_cast<char>(v));
}

void put_blob(std::ostream& os, const Tensor& t) {
  for (double x : t.values()) put_f64(os, x);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw IoError("checkpoint: truncated file");
  return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
         static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
}

double get_f64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8))
    throw IoError("checkpoint: truncated file");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  double x;
  __builtin_memcpy(&x, &v, 8);
  return x;
}

std::uint8_t get_u8(std::istream& is) {
  const int c = is.get();
  if (c < 0) throw IoError("checkpoint: truncated file");
  return static_cast<std::uint8_t>(c);
}

void get_blob(std::istream& is, Tensor& t) {
  for (double& x : t.values()) x = get_f64(is);
}

}  // namespace

void save_model(const EncoderModel& model, const std::string& path) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("checkpoint: cannot open for writing: " + tmp);
    os.write(kMagic, sizeof(kMagic));
    put_u32(os, static_cast<std::uint32_t>(model.layer_count()));
    for (std::size_t i = 0; i < model.layer_count(); ++i) {
      const Layer& layer = model.layer(i);
      if (const auto* d = dynamic_cast<const Dense*>(&layer)) {
        put_u8(os, 1);
        put_u32(os, static_cast<std::uint32_t>(d->in_dim));
        put_u32(os, static_cast<std::uint32_t>(d->out_dim));
      } else if (const auto* c = dynamic_cast<const Conv2D*>(&layer)) {
        put_u8(os, 2);
        put_u32(os, static_cast<std::uint32_t>(c->in_ch));
        put_u32(os, static_cast<std::uint32_t>(c->out_ch));
        put_u32(os, static_cast<std::uint32_t>(c->k));
        put_u32(os, static_cast<std::uint32_t>(c->stride));
      } else if (const auto* p = dynamic_cast<const MaxPool*>(&layer)) {
        put_u8(os, 3);
        put_u32(os, static_cast<std::uint32_t>(p->k));
        put_u32(os, static_cast<std::uint32_t>(p->stride));
      } else if (const auto* r = dynamic_cast<const LeakyReLU*>(&layer)) {
        put_u8(os, 4);
        put_f64(os, r->alpha);
      } else if (const auto* bf = dynamic_cast<const BatchNormFineGrained*>(&layer)) {
        put_u8(os, 5);
        put_u32(os, static_cast<std::uint32_t>(bf->activation_shape.size()));
        for (std::size_t dim : bf->activation_shape)
          put_u32(os, static_cast<std::uint32_t>(dim));
        put_f64(os, bf->eps);
        put_f64(os, bf->momentum);
      } else if (const auto* bc = dynamic_cast<const BatchNormConventional*>(&layer)) {
        put_u8(os, 6);
        put_u32(os, static_cast<std::uint32_t>(bc->channels));
        put_f64(os, bc->eps);
        put_f64(os, bc->momentum);
      } else {
        throw IoError(std::string("checkpoint: unserializable layer kind: ") +
                      layer.kind());
      }
    }
    for (std::size_t i = 0; i < model.layer_count(); ++i) {
      const Layer& layer = model.layer(i);
      if (const auto* d = dynamic_cast<const Dense*>(&layer)) {
        put_blob(os, d->weight);
        put_blob(os, d->bias);
      } else if (const auto* c = dynamic_cast<const Conv2D*>(&layer)) {
        put_blob(os, c->weight);
        put_blob(os, c->bias);
      } else if (const auto* bf = dynamic_cast<const BatchNormFineGrained*>(&layer)) {
        put_blob(os, bf->gamma);
        put_blob(os, bf->beta);
        put_blob(os, bf->running_mean);
        put_blob(os, bf->running_var);
      } else if (const auto* bc = dynamic_cast<const BatchNormConventional*>(&layer)) {
        put_blob(os, bc->gamma);
        put_blob(os, bc->beta);
        put_blob(os, bc->running_mean);
        put_blob(os, bc->running_var);
      }
    }
    os.flush();
    if (!os.good()) throw IoError("checkpoint: write failed: " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw IoError("checkpoint: cannot move into place: " + path);
}

EncoderModel load_model(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("checkpoint: cannot open: " + path);
  char magic[6];
  if (!is.read(magic, 6) || __builtin_memcmp(magic, kMagic, 6) != 0)
    throw IoError("checkpoint: bad magic: " + path);
  const std::uint32_t count = get_u32(is);
  EncoderModel model;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint8_t code = get_u8(is);
    switch (code) {
      case 1: {
        const std::uint32_t in = get_u32(is), out = get_u32(is);
        model.add(std::make_unique<Dense>(in, out));
        break;
      }
      case 2: {
        const std::uint32_t ic = get_u32(is), oc = get_u32(is);
        const std::uint32_t k = get_u32(is), stride = get_u32(is);
        model.add(std::make_unique<Conv2D>(ic, oc, k, stride));
        break;
      }
      case 3: {
        const std::uint32_t k = get_u32(is), stride = get_u32(is);
        model.add(std::make_unique<MaxPool>(k, stride));
        break;
      }
      case 4: {
        model.add(std::make_unique<LeakyReLU>(get_f64(is)));
        break;
      }
      case 5: {
        const std::uint32_t rank = get_u32(is);
        std::vector<std::size_t> dims(rank);
        for (auto& d : dims) d = get_u32(is);
        const double eps = get_f64(is), momentum = get_f64(is);
        model.add(std::make_unique<BatchNormFineGrained>(std::move(dims), eps, momentum));
        break;
      }
      case 6: {
        const std::uint32_t channels = get_u32(is);
        const double eps = get_f64(is), momentum = get_f64(is);
        model.add(std::make_unique<BatchNormConventional>(channels, eps, momentum));
        break;
      }
      default:
        throw IoError("checkpoint: unknown layer code");
    }
  }
  for (std::size_t i = 0; i < model.layer_count(); ++i) {
    Layer& layer = model.layer(i);
    if (auto* d = dynamic_cast<Dense*>(&layer)) {
      get_blob(is, d->weight);
      get_blob(is, d->bias);
    } else if (auto* c = dynamic_cast<Conv2D*>(&layer)) {
      get_blob(is, c->weight);
      get_blob(is, c->bias);
    } else if (auto* bf = dynamic_cast<BatchNormFineGrained*>(&layer)) {
      get_blob(is, bf->gamma);
      get_blob(is, bf->beta);
      get_blob(is, bf->running_mean);
      get_blob(is, bf->running_var);
    } else if (auto* bc = dynamic_cast<BatchNormConventional*>(&layer)) {
      get_blob(is, bc->gamma);
      get_blob(is, bc->beta);
      get_blob(is, bc->running_mean);
      get_blob(is, bc->running_var);
    }
  }
  if (is.peek() != std::char_traits<char>::eof())
    throw IoError("checkpoint: trailing bytes: " + path);
  return model;
}

}  // namespace pbflow
