#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "medpeft/error.hpp"

namespace medpeft {

/// Spatial extent of a 3D grid, (x, y, z), C-order with z fastest.
struct Dims3 {
  int64_t x = 0;
  int64_t y = 0;
  int64_t z = 0;

  int64_t voxels() const noexcept { return x * y * z; }
  int64_t operator[](int i) const noexcept { return i == 0 ? x : (i == 1 ? y : z); }
  int64_t& operator[](int i) noexcept { return i == 0 ? x : (i == 1 ? y : z); }
  int64_t index(int64_t i, int64_t j, int64_t k) const noexcept { return (i * y + j) * z + k; }
  friend bool operator==(const Dims3&, const Dims3&) = default;
};

std::string to_string(const Dims3& d);

/// Dense row-major N-d array. Feature maps use shape (C, X, Y, Z); convolution
/// weights use (out, in/groups, k, k, k).
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape, T fill = T(0))
      : shape_(std::move(shape)), data_(static_cast<size_t>(product(shape_)), fill) {}
  Tensor(std::initializer_list<int64_t> shape, T fill = T(0))
      : Tensor(std::vector<int64_t>(shape), fill) {}
  Tensor(std::vector<int64_t> shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<int64_t>(data_.size()) != product(shape_)) {
      fail(ErrorKind::ShapeMismatch, "tensor data size does not match shape");
    }
  }

  /// Feature map with C channels over a spatial grid.
  static Tensor feature_map(int64_t channels, const Dims3& d, T fill = T(0)) {
    return Tensor({channels, d.x, d.y, d.z}, fill);
  }

  const std::vector<int64_t>& shape() const noexcept { return shape_; }
  int64_t dim(size_t i) const { return shape_.at(i); }
  size_t rank() const noexcept { return shape_.size(); }
  int64_t size() const noexcept { return static_cast<int64_t>(data_.size()); }
  bool empty() const noexcept { return data_.empty(); }

  // Feature-map accessors; only meaningful for rank-4 tensors.
  int64_t channels() const { return shape_.at(0); }
  Dims3 spatial() const { return {shape_.at(1), shape_.at(2), shape_.at(3)}; }
  int64_t voxels() const { return shape_.at(1) * shape_.at(2) * shape_.at(3); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  std::span<T> channel(int64_t c) { return {data_.data() + c * voxels(), static_cast<size_t>(voxels())}; }
  std::span<const T> channel(int64_t c) const {
    return {data_.data() + c * voxels(), static_cast<size_t>(voxels())};
  }

  T& operator[](int64_t i) noexcept { return data_[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const noexcept { return data_[static_cast<size_t>(i)]; }
  T& at(int64_t c, int64_t x, int64_t y, int64_t z) {
    return data_[static_cast<size_t>(((c * shape_[1] + x) * shape_[2] + y) * shape_[3] + z)];
  }
  const T& at(int64_t c, int64_t x, int64_t y, int64_t z) const {
    return data_[static_cast<size_t>(((c * shape_[1] + x) * shape_[2] + y) * shape_[3] + z)];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(T(0)); }

  Tensor& operator+=(const Tensor& o) {
    check_same_shape(o);
    for (size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  void check_same_shape(const Tensor& o) const {
    if (o.shape_ != shape_) fail(ErrorKind::ShapeMismatch, "tensor shapes differ");
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (size_t i = 0; i < data_.size(); ++i) out[static_cast<int64_t>(i)] = static_cast<U>(data_[i]);
    return out;
  }

  friend bool operator==(const Tensor&, const Tensor&) = default;

  static int64_t product(const std::vector<int64_t>& s) {
    return std::accumulate(s.begin(), s.end(), int64_t{1}, std::multiplies<>());
  }

 private:
  std::vector<int64_t> shape_;
  std::vector<T> data_;
};

template <typename T>
Tensor<T> operator+(Tensor<T> a, const Tensor<T>& b) {
  a += b;
  return a;
}

std::string shape_string(const std::vector<int64_t>& shape);

}  // namespace medpeft
