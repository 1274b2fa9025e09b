#include "moelab/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

#include "moelab/error.hpp"

namespace moelab {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return shape.empty() ? 0 : n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
  for (std::size_t d : shape_) {
    if (d == 0) throw ConfigError("tensor shape must be positive: " + shape_to_string(shape_));
  }
  cache_dims();
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_)) {
    throw ConfigError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                      shape_to_string(shape_));
  }
  cache_dims();
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
  return Tensor({rows, cols}, std::vector<double>(values));
}

void Tensor::cache_dims() noexcept {
  if (shape_.empty()) return;
  rows_ = shape_.size() == 1 ? 1 : shape_[0];
  cols_ = shape_.size() == 1 ? shape_[0] : data_.size() / shape_[0];
}

void Tensor::fill(double v) {
  for (double& x : data_) x = v;
}

bool Tensor::all_finite() const noexcept {
  for (double x : data_) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

bool bitwise_equal(const Tensor& a, const Tensor& b) noexcept {
  if (a.shape() != b.shape()) return false;
  return a.numel() == 0 || std::memcmp(a.data(), b.data(), a.numel() * sizeof(double)) == 0;
}

}  // namespace moelab
