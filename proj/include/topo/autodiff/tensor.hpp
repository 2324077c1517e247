#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace topo::ad {

using Shape = std::vector<int>;

class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::size_t element_count(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major tensor. Owns its storage. Models run on the float32
/// instantiation; the float64 one exists for verification oracles.
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;
  explicit BasicTensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(element_count(shape_), fill) {}
  BasicTensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (element_count(shape_) != data_.size()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_string(shape_));
    }
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int axis) const {
    if (axis < 0 || axis >= rank()) throw ShapeError("axis out of range for shape " + shape_string(shape_));
    return shape_[axis];
  }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* ptr() { return data_.data(); }
  const T* ptr() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  /// Element access for rank-4 NCHW tensors.
  T& at(int n, int c, int y, int x) { return data_[offset(n, c, y, x)]; }
  T at(int n, int c, int y, int x) const { return data_[offset(n, c, y, x)]; }

  BasicTensor reshaped(Shape shape) const {
    if (element_count(shape) != data_.size()) {
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    }
    return BasicTensor(std::move(shape), data_);
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  /// Copy of sample n along axis 0, keeping a leading dimension of 1.
  BasicTensor slice_batch(int n) const {
    if (rank() == 0 || n < 0 || n >= shape_[0]) throw ShapeError("batch index out of range");
    Shape s = shape_;
    s[0] = 1;
    const std::size_t stride = data_.size() / shape_[0];
    return BasicTensor(std::move(s), std::vector<T>(data_.begin() + n * stride, data_.begin() + (n + 1) * stride));
  }

  /// Concatenate along axis 0; trailing dimensions must match.
  static BasicTensor stack_batch(std::span<const BasicTensor> parts) {
    if (parts.empty()) throw ShapeError("stack_batch of zero tensors");
    Shape s = parts[0].shape();
    int total = 0;
    for (const auto& p : parts) {
      if (p.rank() != static_cast<int>(s.size()) || !std::equal(s.begin() + 1, s.end(), p.shape().begin() + 1)) {
        throw ShapeError("stack_batch: trailing shape mismatch " + shape_string(p.shape()));
      }
      total += p.shape()[0];
    }
    s[0] = total;
    std::vector<T> d;
    d.reserve(element_count(s));
    for (const auto& p : parts) d.insert(d.end(), p.storage().begin(), p.storage().end());
    return BasicTensor(std::move(s), std::move(d));
  }

  friend bool operator==(const BasicTensor& a, const BasicTensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  std::size_t offset(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x;
  }

  Shape shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;
using TensorD = BasicTensor<double>;

template <class U, class T>
BasicTensor<U> tensor_cast(const BasicTensor<T>& t) {
  std::vector<U> d(t.storage().begin(), t.storage().end());
  return BasicTensor<U>(t.shape(), std::move(d));
}

float max_abs_diff(const Tensor& a, const Tensor& b);
double l2_norm(std::span<const float> v);

}  // namespace topo::ad
