#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "flowvae/errors.hpp"

namespace flowvae {

using Shape = std::vector<int>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         [](std::size_t a, int b) { return a * static_cast<std::size_t>(b); });
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Buffers share one alignment so vectorized kernels see the same memory
// layout, and hence the same summation order, on every run.
template <class T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

// Dense row-major array. The last axis is the channel axis for image
// tensors laid out as [n, h, w, c].
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
    for (int d : shape_) require(d >= 0, "negative tensor extent");
  }
  Tensor(Shape shape, AlignedVector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    require(shape_size(shape_) == data_.size(),
            "tensor data length " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
  }
  Tensor(Shape shape, const std::vector<T>& data) : shape_(std::move(shape)), data_(data.begin(), data.end()) {
    require(shape_size(shape_) == data_.size(),
            "tensor data length " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(i < 0 ? shape_.size() + i : i); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty() && shape_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  AlignedVector<T>& storage() { return data_; }
  const AlignedVector<T>& storage() const { return data_; }
  std::vector<T> to_vector() const { return {data_.begin(), data_.end()}; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Element count per leading-axis slice.
  std::size_t row_size() const { return shape_.empty() || shape_[0] == 0 ? 0 : data_.size() / shape_[0]; }

  Tensor reshaped(Shape s) const {
    require(shape_size(s) == data_.size(), "reshape " + shape_str(shape_) + " -> " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  // Copy of rows [begin, begin+count) along the leading axis.
  Tensor rows(int begin, int count) const {
    Shape s = shape_;
    s[0] = count;
    const std::size_t rs = row_size();
    return Tensor(s, AlignedVector<T>(data_.begin() + begin * rs, data_.begin() + (begin + count) * rs));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  T max_abs() const {
    T m = 0;
    for (T v : data_) m = std::max(m, std::abs(v));
    return m;
  }

  template <class U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, AlignedVector<U>(data_.begin(), data_.end()));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape_ == b.shape_ && a.data_ == b.data_; }

 private:
  Shape shape_;
  AlignedVector<T> data_;
};

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "max_abs_diff shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  T m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// Stacks equally shaped tensors along a new leading axis.
template <class T>
Tensor<T> stack(std::span<const Tensor<T>> items) {
  require(!items.empty(), "stack of zero tensors");
  Shape s = items[0].shape();
  s.insert(s.begin(), static_cast<int>(items.size()));
  std::vector<T> data;
  data.reserve(shape_size(s));
  for (const auto& t : items) {
    require(t.shape() == items[0].shape(), "stack shape mismatch");
    data.insert(data.end(), t.values().begin(), t.values().end());
  }
  return Tensor<T>(std::move(s), std::move(data));
}

template <class T>
Tensor<T> stack(const std::vector<Tensor<T>>& items) {
  return stack(std::span<const Tensor<T>>(items));
}

// Inverse of stack: splits the leading axis.
template <class T>
std::vector<Tensor<T>> unstack(const Tensor<T>& t) {
  std::vector<Tensor<T>> out;
  Shape s(t.shape().begin() + 1, t.shape().end());
  for (int i = 0; i < t.dim(0); ++i) out.push_back(t.rows(i, 1).reshaped(s));
  return out;
}

}  // namespace flowvae
