// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensor. Image-like data is laid out NHWC ([batch, height,
// width, channels]) so per-pixel class vectors and convolution inner products
// run over contiguous memory.
#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "diversenet/errors.hpp"

namespace diversenet {

using Shape = std::vector<std::int64_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

template <typename T>
class Tensor {
public:
  Tensor() = default;

  explicit Tensor(Shape dims, T fill_value = T{}) : dims_(std::move(dims)) {
    std::int64_t n = 1;
    for (auto d : dims_) {
      if (d <= 0) throw ShapeError("Tensor: dimensions must be positive, got " + shape_str(dims_));
      n *= d;
    }
    data_.assign(static_cast<std::size_t>(n), fill_value);
  }

  Tensor(Shape dims, std::vector<T> values) : dims_(std::move(dims)), data_(std::move(values)) {
    std::int64_t n = 1;
    for (auto d : dims_) n *= d;
    if (static_cast<std::size_t>(n) != data_.size())
      throw ShapeError("Tensor: value count does not match shape " + shape_str(dims_));
  }

  const Shape& dims() const { return dims_; }
  std::int64_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t rank() const { return dims_.size(); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  T& at(std::int64_t i, std::int64_t j) { return data_[idx2(i, j)]; }
  const T& at(std::int64_t i, std::int64_t j) const { return data_[idx2(i, j)]; }
  T& at(std::int64_t i, std::int64_t j, std::int64_t k) { return data_[idx3(i, j, k)]; }
  const T& at(std::int64_t i, std::int64_t j, std::int64_t k) const { return data_[idx3(i, j, k)]; }
  T& at(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t l) { return data_[idx4(i, j, k, l)]; }
  const T& at(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t l) const {
    return data_[idx4(i, j, k, l)];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& other) const { return dims_ == other.dims_; }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.dims_ == b.dims_ && a.data_ == b.data_;
  }

private:
  std::size_t idx2(std::int64_t i, std::int64_t j) const {
    return static_cast<std::size_t>(i * dims_[1] + j);
  }
  std::size_t idx3(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return static_cast<std::size_t>((i * dims_[1] + j) * dims_[2] + k);
  }
  std::size_t idx4(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t l) const {
    return static_cast<std::size_t>(((i * dims_[1] + j) * dims_[2] + k) * dims_[3] + l);
  }

  Shape dims_;
  std::vector<T> data_;
};

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* what) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.dims()) + " vs " +
                     shape_str(b.dims()));
}

}  // namespace diversenet
