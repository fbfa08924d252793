#pragma once

#include <cstddef>
#include <span>
#include <utility>
#include <vector>

namespace pbflow {

// Dense n-dimensional array of doubles, row-major.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<std::size_t> shape, double value);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t dim(std::size_t i) const { return shape_[i]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Rank-2 element access.
  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  // Same data, new shape; total size must be preserved.
  Tensor reshaped(std::vector<std::size_t> new_shape) const;

  void fill(double value);
  bool all_finite() const;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

// a [m,k] x b [k,n] -> [m,n]
Tensor matmul(const Tensor& a, const Tensor& b);
// a [m,k] x b^T where b is [n,k] -> [m,n]; avoids materialising the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
// a^T x b where a is [k,m], b is [k,n] -> [m,n]
Tensor matmul_tn(const Tensor& a, const Tensor& b);

// Mean and population standard deviation (divisor n) of a value sequence.
std::pair<double, double> mean_std(std::span<const double> xs);
std::pair<double, double> reduce_mean_std(const Tensor& x);

}  // namespace pbflow
