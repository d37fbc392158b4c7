#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "p2i/error.hpp"

namespace p2i {

/// Extents of a rank-4 NCHW tensor.
struct Shape {
  int n = 0;
  int c = 0;
  int h = 0;
  int w = 0;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  std::size_t plane() const { return static_cast<std::size_t>(h) * w; }

  friend bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& s);

/// Dense NCHW array. `float` is the production precision; `double` is used
/// for finite-difference gradient checks.
template <typename T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape, T fill = T(0)) : shape_(shape) {
    if (shape.n < 0 || shape.c < 0 || shape.h < 0 || shape.w < 0) {
      fail(ErrorCode::kShape, "negative extent in tensor shape " + to_string(shape));
    }
    data_.assign(shape.numel(), fill);
  }

  BasicTensor(Shape shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape.numel()) {
      fail(ErrorCode::kShape, "data length " + std::to_string(data_.size()) +
                                  " does not match shape " + to_string(shape));
    }
  }

  const Shape& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  std::size_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  T& at(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
  const T& at(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }

  T* plane(int n, int c) { return data_.data() + index(n, c, 0, 0); }
  const T* plane(int n, int c) const { return data_.data() + index(n, c, 0, 0); }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  // Optional gradient buffer, same shape as the data when present.
  bool has_grad() const { return has_grad_; }
  std::span<T> grad() { return grad_; }
  std::span<const T> grad() const { return grad_; }
  void ensure_grad() {
    if (!has_grad_) grad_.assign(data_.size(), T(0));
    has_grad_ = true;
  }
  void zero_grad() { std::fill(grad_.begin(), grad_.end(), T(0)); }
  void drop_grad() {
    grad_.clear();
    grad_.shrink_to_fit();
    has_grad_ = false;
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  Shape shape_{};
  std::vector<T> data_;
  std::vector<T> grad_;
  bool has_grad_ = false;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

template <typename To, typename From>
BasicTensor<To> tensor_cast(const BasicTensor<From>& t) {
  std::vector<To> out(t.size());
  std::transform(t.values().begin(), t.values().end(), out.begin(),
                 [](From v) { return static_cast<To>(v); });
  return BasicTensor<To>(t.shape(), std::move(out));
}

/// Copies batch item `n` out of `t` as a (1,C,H,W) tensor.
template <typename T>
BasicTensor<T> batch_item(const BasicTensor<T>& t, int n) {
  Shape s{1, t.c(), t.h(), t.w()};
  std::vector<T> out(t.data() + t.index(n, 0, 0, 0), t.data() + t.index(n, 0, 0, 0) + s.numel());
  return BasicTensor<T>(s, std::move(out));
}

/// Stacks equally shaped (1,C,H,W) tensors along the batch dimension.
template <typename T>
BasicTensor<T> stack_batch(std::span<const BasicTensor<T>> items);

}  // namespace p2i
