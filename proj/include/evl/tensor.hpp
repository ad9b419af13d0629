#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "evl/error.hpp"

namespace evl {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape &shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_str(const Shape &shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

/// Dense row-major n-d array. Value semantics: copies are deep.
template <class T> class Tensor {
public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    check_extents();
  }

  Tensor(Shape shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_numel(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  /// Builds a 2-d tensor from nested rows; all rows must share a length.
  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows) {
    std::vector<T> data;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto &row : rows) {
      if (row.size() != cols) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({rows.size(), cols}, std::move(data));
  }

  static Tensor vector(std::initializer_list<T> values) {
    return Tensor({values.size()}, std::vector<T>(values));
  }

  static Tensor scalar(T value) { return Tensor({1}, std::vector<T>{value}); }

  template <class Rng>
  static Tensor randn(Shape shape, Rng &rng, T stddev = T(1), T mean = T(0)) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(static_cast<double>(mean),
                                          static_cast<double>(stddev));
    for (auto &v : t.data_) v = static_cast<T>(dist(rng));
    return t;
  }

  template <class Rng>
  static Tensor uniform(Shape shape, Rng &rng, T lo, T hi) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(static_cast<double>(lo),
                                                static_cast<double>(hi));
    for (auto &v : t.data_) v = static_cast<T>(dist(rng));
    return t;
  }

  const Shape &shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return shape_.empty(); }

  T *ptr() noexcept { return data_.data(); }
  const T *ptr() const noexcept { return data_.data(); }
  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  std::vector<T> &storage() noexcept { return data_; }
  const std::vector<T> &storage() const noexcept { return data_; }

  T &operator[](std::size_t i) { return data_[i]; }
  const T &operator[](std::size_t i) const { return data_[i]; }

  T &at(std::initializer_list<std::size_t> idx) { return data_[offset(idx)]; }
  const T &at(std::initializer_list<std::size_t> idx) const {
    return data_[offset(idx)];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel()) {
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " +
                           shape_str(shape));
    }
    return Tensor(std::move(shape), data_);
  }

  template <class U> Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(),
                   [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](T v) { return std::isfinite(v); });
  }

  Tensor &operator+=(const Tensor &other) {
    require_same_shape(other, "+=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  Tensor &operator-=(const Tensor &other) {
    require_same_shape(other, "-=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
  }

  Tensor &operator*=(T s) {
    for (auto &v : data_) v *= s;
    return *this;
  }

  friend Tensor operator+(Tensor a, const Tensor &b) { return a += b; }
  friend Tensor operator-(Tensor a, const Tensor &b) { return a -= b; }
  friend Tensor operator*(Tensor a, T s) { return a *= s; }

  bool operator==(const Tensor &other) const = default;

  void require_same_shape(const Tensor &other, const char *op) const {
    if (shape_ != other.shape_) {
      throw DimensionError(std::string(op) + ": shape mismatch " +
                           shape_str(shape_) + " vs " + shape_str(other.shape_));
    }
  }

private:
  void check_extents() const {
    for (auto e : shape_) {
      if (e == 0) {
        throw DimensionError("tensor extents must be positive, got " +
                             shape_str(shape_));
      }
    }
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != shape_.size()) {
      throw DimensionError("index rank " + std::to_string(idx.size()) +
                           " does not match tensor rank " +
                           std::to_string(shape_.size()));
    }
    std::size_t off = 0;
    std::size_t d = 0;
    for (auto i : idx) {
      if (i >= shape_[d]) throw DimensionError("index out of range");
      off = off * shape_[d] + i;
      ++d;
    }
    return off;
  }

  Shape shape_;
  std::vector<T> data_;
};

template <class T> T max_abs(const Tensor<T> &t) {
  T m = T(0);
  for (auto v : t.data()) m = std::max(m, std::abs(v));
  return m;
}

template <class T> T max_abs_diff(const Tensor<T> &a, const Tensor<T> &b) {
  a.require_same_shape(b, "max_abs_diff");
  T m = T(0);
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

} // namespace evl
