#include "net.hpp"

#include <algorithm>
#include <cmath>

#include "errors.hpp"

namespace pbflow {

namespace {

void accumulate(Tensor& into, const Tensor& add) {
  for (std::size_t i = 0; i < into.size(); ++i) into[i] += add[i];
}

std::size_t per_sample_size(const Tensor& x) {
  return x.dim(0) == 0 ? 0 : x.size() / x.dim(0);
}

void require_filled(const LayerContext& ctx, const char* kind) {
  if (!ctx.filled)
    throw StateError(std::string(kind) + ": backward needs a train-mode forward cache");
}

}  // namespace

// ----------------------------------------------------------------- Dense

Dense::Dense(std::size_t in_dim, std::size_t out_dim)
    : in_dim(in_dim),
      out_dim(out_dim),
      weight({out_dim, in_dim}),
      bias({out_dim}),
      dweight({out_dim, in_dim}),
      dbias({out_dim}) {
  if (in_dim == 0 || out_dim == 0) throw DimensionError("dense: zero dimension");
}

std::vector<std::size_t> Dense::output_shape(const std::vector<std::size_t>& in) const {
  if (in.size() != 1 || in[0] != in_dim)
    throw DimensionError("dense: per-sample input must be rank-1 of matching length");
  return {out_dim};
}

void Dense::init(Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in_dim + out_dim));
  for (double& w : weight.values()) w = rng.uniform(-bound, bound);
  bias.fill(0.0);
}

Tensor Dense::forward(const Tensor& x, Mode mode, LayerContext* ctx) {
  if (x.rank() != 2 || x.dim(1) != in_dim)
    throw DimensionError("dense: expected input [n, in_dim]");
  Tensor y = matmul_nt(x, weight);  // [n, out]
  for (std::size_t i = 0; i < y.dim(0); ++i)
    for (std::size_t j = 0; j < out_dim; ++j) y.at(i, j) += bias[j];
  if (ctx) {
    ctx->saved.clear();
    ctx->ints.clear();
    ctx->saved.push_back(x);
    ctx->filled = mode == Mode::Train;
  }
  return y;
}

Tensor Dense::backward(const LayerContext& ctx, const Tensor& grad_out,
                       bool need_input_grad) {
  require_filled(ctx, kind());
  const Tensor& x = ctx.saved[0];
  if (grad_out.rank() != 2 || grad_out.dim(1) != out_dim ||
      grad_out.dim(0) != x.dim(0))
    throw DimensionError("dense: gradient shape mismatch");
  accumulate(dweight, matmul_tn(grad_out, x));  // [out, in]
  for (std::size_t i = 0; i < grad_out.dim(0); ++i)
    for (std::size_t j = 0; j < out_dim; ++j) dbias[j] += grad_out.at(i, j);
  if (!need_input_grad) return {};
  return matmul(grad_out, weight);  // [n, in]
}

// ---------------------------------------------------------------- Conv2D

Conv2D::Conv2D(std::size_t in_ch, std::size_t out_ch, std::size_t k, std::size_t stride)
    : in_ch(in_ch),
      out_ch(out_ch),
      k(k),
      stride(stride),
      weight({out_ch, in_ch, k, k}),
      bias({out_ch}),
      dweight({out_ch, in_ch, k, k}),
      dbias({out_ch}) {
  if (in_ch == 0 || out_ch == 0 || k == 0 || stride == 0)
    throw DimensionError("conv2d: zero dimension");
}

std::vector<std::size_t> Conv2D::output_shape(const std::vector<std::size_t>& in) const {
  if (in.size() != 3 || in[0] != in_ch)
    throw DimensionError("conv2d: per-sample input must be [in_ch, h, w]");
  if (in[1] < k || in[2] < k)
    throw DimensionError("conv2d: input smaller than the kernel");
  return {out_ch, (in[1] - k) / stride + 1, (in[2] - k) / stride + 1};
}

void Conv2D::init(Rng& rng) {
  const double fan_in = static_cast<double>(in_ch * k * k);
  const double fan_out = static_cast<double>(out_ch * k * k);
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  for (double& w : weight.values()) w = rng.uniform(-bound, bound);
  bias.fill(0.0);
}

namespace {

// Unrolls conv windows into rows: col[(i*ho+oy)*wo+ox, (ci*k+ky)*k+kx].
Tensor im2col(const Tensor& x, std::size_t k, std::size_t stride, std::size_t ho,
              std::size_t wo) {
  const std::size_t n = x.dim(0), ic = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor col({n * ho * wo, ic * k * k});
  const double* src = x.data();
  double* dst = col.data();
  const std::size_t patch = ic * k * k;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        double* row = dst + ((i * ho + oy) * wo + ox) * patch;
        for (std::size_t ci = 0; ci < ic; ++ci)
          for (std::size_t ky = 0; ky < k; ++ky) {
            const double* line =
                src + ((i * ic + ci) * h + oy * stride + ky) * w + ox * stride;
            double* out = row + (ci * k + ky) * k;
            for (std::size_t kx = 0; kx < k; ++kx) out[kx] = line[kx];
          }
      }
  return col;
}

void col2im_add(const Tensor& col, std::size_t n, std::size_t ic, std::size_t h,
                std::size_t w, std::size_t k, std::size_t stride, std::size_t ho,
                std::size_t wo, Tensor& x_grad) {
  const double* src = col.data();
  double* dst = x_grad.data();
  const std::size_t patch = ic * k * k;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const double* row = src + ((i * ho + oy) * wo + ox) * patch;
        for (std::size_t ci = 0; ci < ic; ++ci)
          for (std::size_t ky = 0; ky < k; ++ky) {
            double* line =
                dst + ((i * ic + ci) * h + oy * stride + ky) * w + ox * stride;
            const double* in = row + (ci * k + ky) * k;
            for (std::size_t kx = 0; kx < k; ++kx) line[kx] += in[kx];
          }
      }
}

}  // namespace

Tensor Conv2D::forward(const Tensor& x, Mode mode, LayerContext* ctx) {
  if (x.rank() != 4 || x.dim(1) != in_ch)
    throw DimensionError("conv2d: expected input [n, in_ch, h, w]");
  if (x.dim(2) < k || x.dim(3) < k)
    throw DimensionError("conv2d: input smaller than the kernel");
  const std::size_t n = x.dim(0), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = (h - k) / stride + 1, wo = (w - k) / stride + 1;
  Tensor col = im2col(x, k, stride, ho, wo);
  Tensor w2 = weight.reshaped({out_ch, in_ch * k * k});
  Tensor y2 = matmul_nt(col, w2);  // [n*ho*wo, out_ch]
  Tensor y({n, out_ch, ho, wo});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const std::size_t row = (i * ho + oy) * wo + ox;
        for (std::size_t co = 0; co < out_ch; ++co)
          y[((i * out_ch + co) * ho + oy) * wo + ox] = y2[row * out_ch + co] + bias[co];
      }
  if (ctx) {
    ctx->saved.clear();
    ctx->ints.assign({n, h, w});
    ctx->saved.push_back(std::move(col));
    ctx->filled = mode == Mode::Train;
  }
  return y;
}

Tensor Conv2D::backward(const LayerContext& ctx, const Tensor& grad_out,
                        bool need_input_grad) {
  require_filled(ctx, kind());
  const Tensor& col = ctx.saved[0];
  const std::size_t n = ctx.ints[0], h = ctx.ints[1], w = ctx.ints[2];
  const std::size_t ho = (h - k) / stride + 1, wo = (w - k) / stride + 1;
  if (grad_out.rank() != 4 || grad_out.dim(0) != n || grad_out.dim(1) != out_ch ||
      grad_out.dim(2) != ho || grad_out.dim(3) != wo)
    throw DimensionError("conv2d: gradient shape mismatch");
  Tensor dy2({n * ho * wo, out_ch});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t oy = 0; oy < ho; ++oy)
      for (std::size_t ox = 0; ox < wo; ++ox) {
        const std::size_t row = (i * ho + oy) * wo + ox;
        for (std::size_t co = 0; co < out_ch; ++co)
          dy2[row * out_ch + co] = grad_out[((i * out_ch + co) * ho + oy) * wo + ox];
      }
  accumulate(dweight, matmul_tn(dy2, col).reshaped({out_ch, in_ch, k, k}));
  for (std::size_t r = 0; r < dy2.dim(0); ++r)
    for (std::size_t co = 0; co < out_ch; ++co) dbias[co] += dy2.at(r, co);
  if (!need_input_grad) return {};
  Tensor w2 = weight.reshaped({out_ch, in_ch * k * k});
  Tensor dcol = matmul(dy2, w2);  // [n*ho*wo, ic*k*k]
  Tensor dx({n, in_ch, h, w});
  col2im_add(dcol, n, in_ch, h, w, k, stride, ho, wo, dx);
  return dx;
}

// --------------------------------------------------------------- MaxPool

MaxPool::MaxPool(std::size_t k, std::size_t stride) : k(k), stride(stride) {
  if (k == 0 || stride == 0) throw DimensionError("maxpool: zero dimension");
}

std::size_t MaxPool::out_extent(std::size_t in, std::size_t k, std::size_t stride) {
  if (in == 0) throw DimensionError("maxpool: empty input");
  if (in <= k) return 1;
  return (in - k + stride - 1) / stride + 1;
}

std::vector<std::size_t> MaxPool::output_shape(const std::vector<std::size_t>& in) const {
  if (in.size() != 3) throw DimensionError("maxpool: per-sample input must be [c, h, w]");
  return {in[0], out_extent(in[1], k, stride), out_extent(in[2], k, stride)};
}

Tensor MaxPool::forward(const Tensor& x, Mode mode, LayerContext* ctx) {
  if (x.rank() != 4) throw DimensionError("maxpool: expected input [n, c, h, w]");
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t ho = out_extent(h, k, stride), wo = out_extent(w, k, stride);
  Tensor y({n, c, ho, wo});
  std::vector<std::size_t> argmax(y.size());
  std::size_t out = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ci = 0; ci < c; ++ci)
      for (std::size_t oy = 0; oy < ho; ++oy)
        for (std::size_t ox = 0; ox < wo; ++ox, ++out) {
          const std::size_t y0 = oy * stride, x0 = ox * stride;
          const std::size_t y1 = std::min(y0 + k, h), x1 = std::min(x0 + k, w);
          double best = -1e308;
          std::size_t best_idx = 0;
          for (std::size_t yy = y0; yy < y1; ++yy)
            for (std::size_t xx = x0; xx < x1; ++xx) {
              const std::size_t idx = ((i * c + ci) * h + yy) * w + xx;
              if (x[idx] > best) {
                best = x[idx];
                best_idx = idx;
              }
            }
          y[out] = best;
          argmax[out] = best_idx;
        }
  if (ctx) {
    ctx->saved.clear();
    ctx->ints = std::move(argmax);
    ctx->ints.push_back(n);
    ctx->ints.push_back(c);
    ctx->ints.push_back(h);
    ctx->ints.push_back(w);
    ctx->filled = mode == Mode::Train;
  }
  return y;
}

Tensor MaxPool::backward(const LayerContext& ctx, const Tensor& grad_out,
                         bool need_input_grad) {
  require_filled(ctx, kind());
  const std::size_t meta = ctx.ints.size() - 4;
  const std::size_t n = ctx.ints[meta], c = ctx.ints[meta + 1];
  const std::size_t h = ctx.ints[meta + 2], w = ctx.ints[meta + 3];
  if (grad_out.size() != meta) throw DimensionError("maxpool: gradient shape mismatch");
  if (!need_input_grad) return {};
  Tensor dx({n, c, h, w});
  for (std::size_t out = 0; out < meta; ++out) dx[ctx.ints[out]] += grad_out[out];
  return dx;
}

// ------------------------------------------------------------- LeakyReLU

Tensor LeakyReLU::forward(const Tensor& x, Mode mode, LayerContext* ctx) {
  Tensor y = x;
  for (double& v : y.values())
    if (v < 0.0) v *= alpha;
  if (ctx) {
    ctx->saved.clear();
    ctx->ints.clear();
    ctx->saved.push_back(x);
    ctx->filled = mode == Mode::Train;
  }
  return y;
}

Tensor LeakyReLU::backward(const LayerContext& ctx, const Tensor& grad_out,
                           bool need_input_grad) {
  require_filled(ctx, kind());
  const Tensor& x = ctx.saved[0];
  if (!x.same_shape(grad_out)) throw DimensionError("leaky_relu: gradient shape mismatch");
  if (!need_input_grad) return {};
  Tensor dx = grad_out;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (x[i] <= 0.0) dx[i] *= alpha;
  return dx;
}

// ------------------------------------------------- BatchNormFineGrained

BatchNormFineGrained::BatchNormFineGrained(std::vector<std::size_t> shape, double eps,
                                           double momentum)
    : activation_shape(std::move(shape)), eps(eps), momentum(momentum) {
  std::size_t a = 1;
  for (std::size_t d : activation_shape) a *= d;
  if (a == 0) throw DimensionError("batchnorm: empty activation shape");
  gamma = Tensor::full({a}, 1.0);
  beta = Tensor({a});
  running_mean = Tensor({a});
  running_var = Tensor::full({a}, 1.0);
  dgamma = Tensor({a});
  dbeta = Tensor({a});
}

std::vector<std::size_t> BatchNormFineGrained::output_shape(
    const std::vector<std::size_t>& in) const {
  if (in != activation_shape)
    throw DimensionError("batchnorm_fine: activation shape mismatch");
  return in;
}

Tensor BatchNormFineGrained::forward(const Tensor& x, Mode mode, LayerContext* ctx) {
  const std::size_t a = gamma.size();
  if (x.rank() < 2 || per_sample_size(x) != a)
    throw DimensionError("batchnorm_fine: activation shape mismatch");
  const std::size_t n = x.dim(0);
  Tensor y(x.shape());
  if (mode == Mode::Eval) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < a; ++j) {
        const double xh =
            (x[i * a + j] - running_mean[j]) / std::sqrt(running_var[j] + eps);
        y[i * a + j] = gamma[j] * xh + beta[j];
      }
    if (ctx) {
      ctx->saved.clear();
      ctx->ints.clear();
      ctx->filled = false;
    }
    return y;
  }
  if (n < 2)
    throw DegenerateBatchError("batchnorm_fine: train mode needs a batch of at least 2");
  std::vector<double> mean(a, 0.0), var(a, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < a; ++j) mean[j] += x[i * a + j];
  for (std::size_t j = 0; j < a; ++j) mean[j] /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < a; ++j) {
      const double d = x[i * a + j] - mean[j];
      var[j] += d * d;
    }
  for (std::size_t j = 0; j < a; ++j) var[j] /= static_cast<double>(n);

  Tensor xhat(x.shape());
  Tensor inv_std({a});
  for (std::size_t j = 0; j < a; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < a; ++j) {
      const double xh = (x[i * a + j] - mean[j]) * inv_std[j];
      xhat[i * a + j] = xh;
      y[i * a + j] = gamma[j] * xh + beta[j];
    }
  for (std::size_t j = 0; j < a; ++j) {
    running_mean[j] = (1.0 - momentum) * running_mean[j] + momentum * mean[j];
    running_var[j] = (1.0 - momentum) * running_var[j] + momentum * var[j];
  }
  if (ctx) {
    ctx->saved.clear();
    ctx->ints.clear();
    ctx->saved.push_back(std::move(xhat));
    ctx->saved.push_back(std::move(inv_std));
    ctx->filled = true;
  }
  return y;
}

Tensor BatchNormFineGrained::backward(const LayerContext& ctx, const Tensor& grad_out,
                                      bool need_input_grad) {
  require_filled(ctx, kind());
  const Tensor& xhat = ctx.saved[0];
  const Tensor& inv_std = ctx.saved[1];
  if (!xhat.same_shape(grad_out))
    throw DimensionError("batchnorm_fine: gradient shape mismatch");
  const std::size_t n = grad_out.dim(0), a = gamma.size();
  std::vector<double> mg(a, 0.0), mgx(a, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < a; ++j) {
      const double g = grad_out[i * a + j];
      const double xh = xhat[i * a + j];
      dgamma[j] += g * xh;
      dbeta[j] += g;
      mg[j] += g;
      mgx[j] += g * xh;
    }
  if (!need_input_grad) return {};
  for (std::size_t j = 0; j < a; ++j) {
    mg[j] /= static_cast<double>(n);
    mgx[j] /= static_cast<double>(n);
  }
  // dx = gamma * inv_std * (g - mean(g) - xhat * mean(g * xhat)),
  // the exact gradient through the batch statistics.
  Tensor dx(grad_out.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < a; ++j)
      dx[i * a + j] = gamma[j] * inv_std[j] *
                      (grad_out[i * a + j] - mg[j] - xhat[i * a + j] * mgx[j]);
  return dx;
}

// ----------------------------------------------- BatchNormConventional

BatchNormConventional::BatchNormConventional(std::size_t channels, double eps,
                                             double momentum)
    : channels(channels), eps(eps), momentum(momentum) {
  if (channels == 0) throw DimensionError("batchnorm: zero channels");
  gamma = Tensor::full({channels}, 1.0);
  beta = Tensor({channels});
  running_mean = Tensor({channels});
  running_var = Tensor::full({channels}, 1.0);
  dgamma = Tensor({channels});
  dbeta = Tensor({channels});
}

std::vector<std::size_t> BatchNormConventional::output_shape(
    const std::vector<std::size_t>& in) const {
  if (in.empty() || in[0] != channels)
    throw DimensionError("batchnorm_conv: channel count mismatch");
  if (in.size() != 1 && in.size() != 3)
    throw DimensionError("batchnorm_conv: expects [C] or [C, H, W] per sample");
  return in;
}

Tensor BatchNormConventional::forward(const Tensor& x, Mode mode, LayerContext* ctx) {
  if ((x.rank() != 2 && x.rank() != 4) || x.dim(1) != channels)
    throw DimensionError("batchnorm_conv: expected [n, C] or [n, C, H, W]");
  const std::size_t n = x.dim(0);
  const std::size_t spatial = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  const std::size_t m = n * spatial;  // samples pooled per channel
  auto value_index = [&](std::size_t i, std::size_t c, std::size_t s) {
    return (i * channels + c) * spatial + s;
  };
  Tensor y(x.shape());
  if (mode == Mode::Eval) {
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < channels; ++c) {
        const double scale = gamma[c] / std::sqrt(running_var[c] + eps);
        for (std::size_t s = 0; s < spatial; ++s) {
          const std::size_t idx = value_index(i, c, s);
          y[idx] = scale * (x[idx] - running_mean[c]) + beta[c];
        }
      }
    if (ctx) {
      ctx->saved.clear();
      ctx->ints.clear();
      ctx->filled = false;
    }
    return y;
  }
  if (m < 2)
    throw DegenerateBatchError("batchnorm_conv: train mode needs at least 2 values per channel");
  std::vector<double> mean(channels, 0.0), var(channels, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t s = 0; s < spatial; ++s) mean[c] += x[value_index(i, c, s)];
  for (std::size_t c = 0; c < channels; ++c) mean[c] /= static_cast<double>(m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t s = 0; s < spatial; ++s) {
        const double d = x[value_index(i, c, s)] - mean[c];
        var[c] += d * d;
      }
  for (std::size_t c = 0; c < channels; ++c) var[c] /= static_cast<double>(m);

  Tensor xhat(x.shape());
  Tensor inv_std({channels});
  for (std::size_t c = 0; c < channels; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t s = 0; s < spatial; ++s) {
        const std::size_t idx = value_index(i, c, s);
        xhat[idx] = (x[idx] - mean[c]) * inv_std[c];
        y[idx] = gamma[c] * xhat[idx] + beta[c];
      }
  for (std::size_t c = 0; c < channels; ++c) {
    running_mean[c] = (1.0 - momentum) * running_mean[c] + momentum * mean[c];
    running_var[c] = (1.0 - momentum) * running_var[c] + momentum * var[c];
  }
  if (ctx) {
    ctx->saved.clear();
    ctx->ints.assign({spatial});
    ctx->saved.push_back(std::move(xhat));
    ctx->saved.push_back(std::move(inv_std));
    ctx->filled = true;
  }
  return y;
}

Tensor BatchNormConventional::backward(const LayerContext& ctx, const Tensor& grad_out,
                                       bool need_input_grad) {
  require_filled(ctx, kind());
  const Tensor& xhat = ctx.saved[0];
  const Tensor& inv_std = ctx.saved[1];
  if (!xhat.same_shape(grad_out))
    throw DimensionError("batchnorm_conv: gradient shape mismatch");
  const std::size_t spatial = ctx.ints[0];
  const std::size_t n = grad_out.dim(0);
  const std::size_t m = n * spatial;
  auto value_index = [&](std::size_t i, std::size_t c, std::size_t s) {
    return (i * channels + c) * spatial + s;
  };
  std::vector<double> mg(channels, 0.0), mgx(channels, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t s = 0; s < spatial; ++s) {
        const std::size_t idx = value_index(i, c, s);
        dgamma[c] += grad_out[idx] * xhat[idx];
        dbeta[c] += grad_out[idx];
        mg[c] += grad_out[idx];
        mgx[c] += grad_out[idx] * xhat[idx];
      }
  if (!need_input_grad) return {};
  for (std::size_t c = 0; c < channels; ++c) {
    mg[c] /= static_cast<double>(m);
    mgx[c] /= static_cast<double>(m);
  }
  Tensor dx(grad_out.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t s = 0; s < spatial; ++s) {
        const std::size_t idx = value_index(i, c, s);
        dx[idx] = gamma[c] * inv_std[c] * (grad_out[idx] - mg[c] - xhat[idx] * mgx[c]);
      }
  return dx;
}

// ----------------------------------------------------------- EncoderModel

void EncoderModel::init_params(Rng& rng) {
  for (auto& layer : layers_) layer->init(rng);
}

void EncoderModel::zero_grad() {
  for (Tensor* g : gradients()) g->fill(0.0);
}

std::vector<Tensor*> EncoderModel::parameters() {
  std::vector<Tensor*> out;
  for (auto& layer : layers_)
    for (Tensor* p : layer->parameters()) out.push_back(p);
  return out;
}

std::vector<Tensor*> EncoderModel::gradients() {
  std::vector<Tensor*> out;
  for (auto& layer : layers_)
    for (Tensor* g : layer->gradients()) out.push_back(g);
  return out;
}

Tensor EncoderModel::forward(const Tensor& x, ForwardCache* cache) {
  if (layers_.empty()) throw StateError("model: no layers");
  if (x.rank() < 2) throw DimensionError("model: input must carry a batch axis");
  if (cache) {
    cache->mode = mode_;
    cache->layers.assign(layers_.size(), LayerContext{});
  }
  Tensor cur = x;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    cur = layers_[i]->forward(cur, mode_, cache ? &cache->layers[i] : nullptr);
  return cur;
}

Tensor EncoderModel::backward(const ForwardCache& cache, const Tensor& grad_descriptors,
                              bool want_input_grad) {
  if (cache.mode != Mode::Train)
    throw StateError("model: backward needs a train-mode forward cache");
  if (cache.layers.size() != layers_.size())
    throw DimensionError("model: cache does not match the layer stack");
  Tensor g = grad_descriptors;
  for (std::size_t i = layers_.size(); i-- > 0;) {
    const bool need = want_input_grad || i > 0;
    g = layers_[i]->backward(cache.layers[i], g, need);
  }
  return want_input_grad ? g : Tensor{};
}

std::vector<std::size_t> EncoderModel::output_shape(
    const std::vector<std::size_t>& per_sample_input) const {
  if (layers_.empty()) throw StateError("model: no layers");
  std::vector<std::size_t> shape = per_sample_input;
  for (const auto& layer : layers_) shape = layer->output_shape(shape);
  return shape;
}

// ----------------------------------------------------------- siamese head

DistanceBatch siamese_distance(EncoderModel& model, const PairBatch& batch,
                               SiameseCache* cache) {
  if (!batch.left.same_shape(batch.right))
    throw DimensionError("siamese: left and right shapes differ");
  if (batch.left.rank() < 2 || batch.left.dim(0) != batch.labels.size())
    throw DimensionError("siamese: batch size and labels disagree");
  Tensor dl = model.forward(batch.left, cache ? &cache->left : nullptr);
  Tensor dr = model.forward(batch.right, cache ? &cache->right : nullptr);
  const std::size_t n = dl.dim(0);
  const std::size_t d = per_sample_size(dl);
  Tensor distances({n});
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double delta = dl[i * d + j] - dr[i * d + j];
      ss += delta * delta;
    }
    distances[i] = std::sqrt(ss);
  }
  if (cache) {
    cache->out_shape = dl.shape();
    cache->desc_left = dl.reshaped({n, d});
    cache->desc_right = dr.reshaped({n, d});
  }
  DistanceBatch out;
  out.distances = std::move(distances);
  out.labels = batch.labels;
  return out;
}

void siamese_backward(EncoderModel& model, const SiameseCache& cache,
                      const Tensor& grad_distances) {
  const std::size_t n = cache.desc_left.dim(0);
  const std::size_t d = cache.desc_left.dim(1);
  if (grad_distances.rank() != 1 || grad_distances.size() != n)
    throw DimensionError("siamese: distance gradient shape mismatch");
  Tensor gl({n, d}), gr({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double delta = cache.desc_left[i * d + j] - cache.desc_right[i * d + j];
      ss += delta * delta;
    }
    const double dist = std::sqrt(ss);
    if (dist <= 0.0) continue;  // subgradient 0 at coincident descriptors
    const double scale = grad_distances[i] / dist;
    for (std::size_t j = 0; j < d; ++j) {
      const double delta = cache.desc_left[i * d + j] - cache.desc_right[i * d + j];
      gl.at(i, j) = scale * delta;
      gr.at(i, j) = -scale * delta;
    }
  }
  // Descriptors were flattened for the distance; the stack wants its own
  // output shape back.
  model.backward(cache.left, gl.reshaped(cache.out_shape));
  model.backward(cache.right, gr.reshaped(cache.out_shape));
}

// --------------------------------------------------------------- AdaDelta

AdaDelta::AdaDelta(double rho, double eps) : rho_(rho), eps_(eps) {
  if (!(rho > 0.0 && rho < 1.0)) throw DomainError("adadelta: rho must lie in (0,1)");
  if (!(eps > 0.0)) throw DomainError("adadelta: eps must be positive");
}

void AdaDelta::step(const std::vector<Tensor*>& params,
                    const std::vector<Tensor*>& grads) {
  if (params.size() != grads.size())
    throw DimensionError("adadelta: parameter and gradient counts differ");
  if (!initialised_) {
    for (Tensor* p : params) {
      eg2_.emplace_back(p->shape());
      edx2_.emplace_back(p->shape());
    }
    initialised_ = true;
  }
  if (params.size() != eg2_.size())
    throw DimensionError("adadelta: parameter count changed between steps");
  for (std::size_t t = 0; t < params.size(); ++t) {
    Tensor& p = *params[t];
    const Tensor& g = *grads[t];
    if (!p.same_shape(g) || !p.same_shape(eg2_[t]))
      throw DimensionError("adadelta: shape mismatch against optimizer state");
    Tensor& eg2 = eg2_[t];
    Tensor& edx2 = edx2_[t];
    for (std::size_t i = 0; i < p.size(); ++i) {
      eg2[i] = rho_ * eg2[i] + (1.0 - rho_) * g[i] * g[i];
      const double dx = -std::sqrt(edx2[i] + eps_) / std::sqrt(eg2[i] + eps_) * g[i];
      edx2[i] = rho_ * edx2[i] + (1.0 - rho_) * dx * dx;
      p[i] += dx;
    }
  }
}

// -------------------------------------------------------------- factories

EncoderModel make_synth_encoder(std::size_t in_dim, std::size_t hidden,
                                std::size_t depth) {
  EncoderModel m;
  std::size_t cur = in_dim;
  for (std::size_t d = 0; d < depth; ++d) {
    m.add(std::make_unique<Dense>(cur, hidden));
    m.add(std::make_unique<LeakyReLU>(0.0));  // plain ReLU
    cur = hidden;
  }
  return m;
}

EncoderModel make_patch_encoder(std::size_t patch, std::size_t c1, std::size_t c2,
                                std::size_t descriptor) {
  if (patch < 7) throw DimensionError("patch encoder: patch must be at least 7");
  EncoderModel m;
  std::size_t s = patch - 2;  // conv k=3
  m.add(std::make_unique<Conv2D>(1, c1, 3));
  m.add(std::make_unique<BatchNormFineGrained>(std::vector<std::size_t>{c1, s, s}));
  m.add(std::make_unique<LeakyReLU>(0.1));
  m.add(std::make_unique<MaxPool>(2, 2));
  s = MaxPool::out_extent(s, 2, 2);
  m.add(std::make_unique<Conv2D>(c1, c2, 3));
  s = s - 2;
  m.add(std::make_unique<BatchNormFineGrained>(std::vector<std::size_t>{c2, s, s}));
  m.add(std::make_unique<LeakyReLU>(0.1));
  m.add(std::make_unique<MaxPool>(2, 2));
  s = MaxPool::out_extent(s, 2, 2);
  m.add(std::make_unique<Conv2D>(c2, descriptor, 1));
  m.add(std::make_unique<BatchNormFineGrained>(
      std::vector<std::size_t>{descriptor, s, s}));
  m.add(std::make_unique<LeakyReLU>(0.1));
  return m;
}

EncoderModel make_reference_encoder() {
  EncoderModel m;
  const std::size_t chans[] = {1, 32, 64, 128, 256};
  std::size_t s = 51;
  for (int block = 0; block < 4; ++block) {
    m.add(std::make_unique<Conv2D>(chans[block], chans[block + 1], 3));
    s -= 2;
    m.add(std::make_unique<BatchNormFineGrained>(
        std::vector<std::size_t>{chans[block + 1], s, s}));
    m.add(std::make_unique<LeakyReLU>(0.1));
    m.add(std::make_unique<MaxPool>(2, 2));
    s = MaxPool::out_extent(s, 2, 2);
  }
  m.add(std::make_unique<Conv2D>(256, 512, 2));
  s -= 1;
  m.add(std::make_unique<BatchNormFineGrained>(std::vector<std::size_t>{512, s, s}));
  m.add(std::make_unique<LeakyReLU>(0.1));
  return m;
}

int required_patch_size(const EncoderModel& model) {
  if (model.layer_count() == 0) return 0;
  const auto* conv = dynamic_cast<const Conv2D*>(&model.layer(0));
  if (!conv) return 0;
  for (int s = 1; s <= 256; ++s) {
    std::vector<std::size_t> in{conv->in_ch, static_cast<std::size_t>(s),
                                static_cast<std::size_t>(s)};
    std::vector<std::size_t> out;
    try {
      out = model.output_shape(in);
    } catch (const DimensionError&) {
      continue;
    }
    bool spatial_one = true;
    for (std::size_t i = 1; i < out.size(); ++i)
      if (out[i] != 1) spatial_one = false;
    if (spatial_one) return s;
  }
  return 0;
}

std::size_t descriptor_dim(const EncoderModel& model, int patch) {
  std::vector<std::size_t> in;
  if (model.layer_count() > 0 && dynamic_cast<const Conv2D*>(&model.layer(0))) {
    const auto* conv = dynamic_cast<const Conv2D*>(&model.layer(0));
    in = {conv->in_ch, static_cast<std::size_t>(patch), static_cast<std::size_t>(patch)};
  } else {
    in = {static_cast<std::size_t>(patch) * static_cast<std::size_t>(patch)};
  }
  std::size_t d = 1;
  for (std::size_t v : model.output_shape(in)) d *= v;
  return d;
}

// ------------------------------------------------------------ pair sampler

namespace {

void rotate90(std::vector<double>& p, int size, std::vector<double>& scratch) {
  scratch.resize(p.size());
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      scratch[static_cast<std::size_t>(y) * size + x] =
          p[static_cast<std::size_t>(x) * size + (size - 1 - y)];
  p.swap(scratch);
}

void flip_horizontal(std::vector<double>& p, int size, std::vector<double>& scratch) {
  scratch.resize(p.size());
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      scratch[static_cast<std::size_t>(y) * size + x] =
          p[static_cast<std::size_t>(y) * size + (size - 1 - x)];
  p.swap(scratch);
}

}  // namespace

PairBatch sample_pairs(const Tensor& first, const Tensor& second, const FlowField& gt,
                       int patch, int count, Rng& rng, const SamplerOptions& opt) {
  if (first.rank() != 2 || second.rank() != 2)
    throw DimensionError("sample_pairs: images must be rank-2");
  if (gt.width != static_cast<int>(first.dim(1)) ||
      gt.height != static_cast<int>(first.dim(0)))
    throw DimensionError("sample_pairs: flow and first image sizes differ");
  if (patch < 1) throw DomainError("sample_pairs: patch must be positive");
  if (count < 2 || count % 2 != 0)
    throw DomainError("sample_pairs: count must be even and at least 2");
  if (opt.min_shift < 1 || opt.max_shift < opt.min_shift)
    throw DomainError("sample_pairs: bad shift range");

  const int h1 = static_cast<int>(first.dim(0)), w1 = static_cast<int>(first.dim(1));
  const int h2 = static_cast<int>(second.dim(0)), w2 = static_cast<int>(second.dim(1));
  const int lo = (patch - 1) / 2;          // pixels to the left/top of the center
  const int hi = patch - lo;               // pixels at and right/below the center
  auto fits = [&](int w, int h, int cx, int cy) {
    return cx - lo >= 0 && cx + hi <= w && cy - lo >= 0 && cy + hi <= h;
  };

  // Centers where the ground-truth correspondence keeps both patches inside.
  std::vector<std::pair<int, int>> centers;
  for (int y = 0; y < gt.height; ++y)
    for (int x = 0; x < gt.width; ++x) {
      const std::size_t i = gt.idx(x, y);
      if (!gt.valid[i]) continue;
      if (fits(w1, h1, x, y) && fits(w2, h2, x + gt.u[i], y + gt.v[i]))
        centers.emplace_back(x, y);
    }
  if (centers.empty())
    throw SamplingError("sample_pairs: no valid centers for the given patch size");

  auto extract = [&](const Tensor& img, int w, int cx, int cy) {
    (void)w;
    std::vector<double> out(static_cast<std::size_t>(patch) * patch);
    for (int y = 0; y < patch; ++y)
      for (int x = 0; x < patch; ++x)
        out[static_cast<std::size_t>(y) * patch + x] =
            img.at(static_cast<std::size_t>(cy - lo + y),
                   static_cast<std::size_t>(cx - lo + x));
    return out;
  };

  const std::size_t pixels = static_cast<std::size_t>(patch) * patch;
  const std::size_t nu = static_cast<std::size_t>(count);
  Tensor left({nu, 1, static_cast<std::size_t>(patch), static_cast<std::size_t>(patch)});
  Tensor right(left.shape());
  std::vector<int> labels(nu, 0);
  std::vector<double> scratch;

  for (int j = 0; j < count; ++j) {
    const bool matching = j < count / 2;
    std::vector<double> pl, pr;
    for (int attempt = 0;; ++attempt) {
      if (attempt >= 100)
        throw SamplingError("sample_pairs: could not place a shifted pair");
      const auto [cx, cy] =
          centers[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(centers.size()) - 1))];
      const std::size_t fi = gt.idx(cx, cy);
      int tx = cx + gt.u[fi], ty = cy + gt.v[fi];
      if (!matching) {
        const auto mag_x = static_cast<int>(rng.uniform_int(opt.min_shift, opt.max_shift));
        const int sign_x = rng.uniform_int(0, 1) == 0 ? 1 : -1;
        const auto mag_y = static_cast<int>(rng.uniform_int(opt.min_shift, opt.max_shift));
        const int sign_y = rng.uniform_int(0, 1) == 0 ? 1 : -1;
        tx += sign_x * mag_x;
        ty += sign_y * mag_y;
        if (!fits(w2, h2, tx, ty)) continue;
      }
      pl = extract(first, w1, cx, cy);
      pr = extract(second, w2, tx, ty);
      break;
    }
    if (opt.augment) {
      const auto rotations = static_cast<int>(rng.uniform_int(0, 3));
      const bool flip = rng.uniform_int(0, 1) == 1;
      for (int r = 0; r < rotations; ++r) {
        rotate90(pl, patch, scratch);
        rotate90(pr, patch, scratch);
      }
      if (flip) {
        flip_horizontal(pl, patch, scratch);
        flip_horizontal(pr, patch, scratch);
      }
    }
    labels[static_cast<std::size_t>(j)] = matching ? 0 : 1;
    std::copy(pl.begin(), pl.end(), left.data() + static_cast<std::size_t>(j) * pixels);
    std::copy(pr.begin(), pr.end(), right.data() + static_cast<std::size_t>(j) * pixels);
  }

  PairBatch out;
  out.left = std::move(left);
  out.right = std::move(right);
  out.labels = std::move(labels);
  return out;
}

// ---------------------------------------------------------------- trainer

namespace {

// Row gather along the batch axis, shape-agnostic per sample.
Tensor gather_samples(const Tensor& src, const std::vector<std::size_t>& rows) {
  std::vector<std::size_t> shape = src.shape();
  const std::size_t stride = src.size() / shape[0];
  shape[0] = rows.size();
  Tensor out(std::move(shape));
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(src.data() + rows[i] * stride, stride, out.data() + i * stride);
  return out;
}

PairBatch gather_batch(const PairBatch& src, const std::vector<std::size_t>& rows) {
  PairBatch out;
  out.left = gather_samples(src.left, rows);
  out.right = gather_samples(src.right, rows);
  out.labels.reserve(rows.size());
  for (std::size_t r : rows) out.labels.push_back(src.labels[r]);
  return out;
}

void shuffle(std::vector<std::size_t>& idx, Rng& rng) {
  for (std::size_t i = idx.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
    std::swap(idx[i - 1], idx[j]);
  }
}

}  // namespace

TrainResult train_encoder(EncoderModel& model, const PairBatch& train,
                          const TrainOptions& opt, Rng& rng) {
  if (opt.batch < 4 || opt.batch % 2 != 0)
    throw DomainError("train: batch must be even and >= 4");
  if (opt.epochs < 1) throw DomainError("train: epochs must be >= 1");
  LossConfig loss_cfg{opt.variant, opt.margin, opt.lambda};
  loss_cfg.validate();

  std::vector<std::size_t> match_idx, nonmatch_idx;
  for (std::size_t i = 0; i < train.size(); ++i)
    (train.labels[i] == 0 ? match_idx : nonmatch_idx).push_back(i);
  if (match_idx.size() < 2 || nonmatch_idx.size() < 2)
    throw DegenerateBatchError("train: need >= 2 pairs per label");

  TrainResult result;
  AdaDelta opt_state;
  model.set_mode(Mode::Train);
  const std::size_t per = static_cast<std::size_t>(opt.batch) / 2;

  for (int epoch = 0; epoch < opt.epochs; ++epoch) {
    shuffle(match_idx, rng);
    shuffle(nonmatch_idx, rng);
    double loss_sum = 0.0;
    std::size_t steps = 0;
    const std::size_t n_half = std::min(match_idx.size(), nonmatch_idx.size());

    for (std::size_t pos = 0; pos < n_half; pos += per) {
      const std::size_t take = std::min(per, n_half - pos);
      if (take < 2) break;  // the spread term needs two per class
      std::vector<std::size_t> rows;
      rows.reserve(2 * take);
      rows.insert(rows.end(), match_idx.begin() + pos, match_idx.begin() + pos + take);
      rows.insert(rows.end(), nonmatch_idx.begin() + pos,
                  nonmatch_idx.begin() + pos + take);
      PairBatch sub = gather_batch(train, rows);

      SiameseCache cache;
      DistanceBatch dist = [&]() -> DistanceBatch {
        try {
          return siamese_distance(model, sub, &cache);
        } catch (const DomainError&) {
          return DistanceBatch{};
        }
      }();
      if (dist.distances.size() == 0 || !dist.distances.all_finite()) {
        result.ok = false;
        result.message = "non-finite distances at epoch " + std::to_string(epoch);
        return result;
      }

      auto [loss, grad] = batch_loss_with_grad(loss_cfg, dist);
      if (!std::isfinite(loss)) {
        result.ok = false;
        result.message = "non-finite loss at epoch " + std::to_string(epoch);
        return result;
      }
      model.zero_grad();
      siamese_backward(model, cache, grad);
      opt_state.step(model.parameters(), model.gradients());
      loss_sum += loss;
      ++steps;
    }
    result.epoch_losses.push_back(steps ? loss_sum / static_cast<double>(steps) : 0.0);
    if (opt.on_epoch) opt.on_epoch(epoch, result.epoch_losses.back());
  }

  for (Tensor* p : model.parameters()) {
    if (!p->all_finite()) {
      result.ok = false;
      result.message = "non-finite parameters after training";
      return result;
    }
  }
  return result;
}

}  // namespace pbflow
