#include "tensor.hpp"

#include <Eigen/Core>
#include <cmath>

#include "errors.hpp"

namespace pbflow {

namespace {

std::size_t checked_size(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

using ConstMap = Eigen::Map<
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using MutMap =
    Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

void require_rank2(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rank() != 2 || b.rank() != 2)
    throw DimensionError(std::string(op) + ": rank-2 operands required");
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(checked_size(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != checked_size(shape_))
    throw DimensionError("tensor: data size does not match shape");
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::reshaped(std::vector<std::size_t> new_shape) const {
  if (checked_size(new_shape) != data_.size())
    throw DimensionError("reshape: total size must be preserved");
  return Tensor(std::move(new_shape), data_);
}

void Tensor::fill(double value) {
  for (double& x : data_) x = value;
}

bool Tensor::all_finite() const {
  for (double x : data_)
    if (!std::isfinite(x)) return false;
  return true;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, b, "matmul");
  if (a.dim(1) != b.dim(0))
    throw DimensionError("matmul: inner dimensions disagree");
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  Tensor out({a.dim(0), b.dim(1)});
  MutMap(out.data(), m, n).noalias() = ConstMap(a.data(), m, k) * ConstMap(b.data(), k, n);
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, b, "matmul_nt");
  if (a.dim(1) != b.dim(1))
    throw DimensionError("matmul_nt: inner dimensions disagree");
  const auto m = static_cast<Eigen::Index>(a.dim(0));
  const auto k = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(0));
  Tensor out({a.dim(0), b.dim(0)});
  MutMap(out.data(), m, n).noalias() =
      ConstMap(a.data(), m, k) * ConstMap(b.data(), n, k).transpose();
  return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_rank2(a, b, "matmul_tn");
  if (a.dim(0) != b.dim(0))
    throw DimensionError("matmul_tn: inner dimensions disagree");
  const auto k = static_cast<Eigen::Index>(a.dim(0));
  const auto m = static_cast<Eigen::Index>(a.dim(1));
  const auto n = static_cast<Eigen::Index>(b.dim(1));
  Tensor out({a.dim(1), b.dim(1)});
  MutMap(out.data(), m, n).noalias() =
      ConstMap(a.data(), k, m).transpose() * ConstMap(b.data(), k, n);
  return out;
}

std::pair<double, double> mean_std(std::span<const double> xs) {
  if (xs.empty()) throw DomainError("mean_std: empty input");
  double sum = 0.0;
  for (double x : xs) sum += x;
  const double mean = sum / static_cast<double>(xs.size());
  double ss = 0.0;
  for (double x : xs) {
    const double d = x - mean;
    ss += d * d;
  }
  // Population convention: divisor n, not n-1.
  return {mean, std::sqrt(ss / static_cast<double>(xs.size()))};
}

std::pair<double, double> reduce_mean_std(const Tensor& x) {
  return mean_std(x.values());
}

}  // namespace pbflow
