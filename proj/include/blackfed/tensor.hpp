#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <vector>

#include "blackfed/common.hpp"

namespace blackfed {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major array. Image tensors use (batch, channel, height, width);
/// class-index masks use (batch, height, width) with an integer element type.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_size(shape_)) {
      throw Error(ErrorCode::invalid_shape, "tensor of shape " + shape_string(shape_) + " given " +
                                                std::to_string(data_.size()) + " values");
    }
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }
  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(std::size_t n, std::size_t c, std::size_t h, std::size_t w) const {
    return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  void fill(T value) { std::fill(data_.begin(), data_.end(), value); }

  bool all_finite() const {
    if constexpr (std::is_floating_point_v<T>) {
      return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
    } else {
      return true;
    }
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  /// Copy of items [begin, end) along the leading axis.
  Tensor slice(std::size_t begin, std::size_t end) const {
    if (rank() == 0 || begin > end || end > shape_[0]) {
      throw Error(ErrorCode::invalid_shape, "slice out of range for " + shape_string(shape_));
    }
    const std::size_t stride = shape_[0] ? data_.size() / shape_[0] : 0;
    Shape s = shape_;
    s[0] = end - begin;
    return Tensor(std::move(s), std::vector<T>(data_.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                                               data_.begin() + static_cast<std::ptrdiff_t>(end * stride)));
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_extents() const {
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (shape_[i] == 0) {
        throw Error(ErrorCode::invalid_shape,
                    "extent " + std::to_string(i) + " of " + shape_string(shape_) + " is not positive");
      }
    }
  }

  Shape shape_;
  std::vector<T> data_;
};

using Labels = Tensor<std::uint16_t>;

/// Stacks equally shaped tensors along a new leading axis.
template <typename T>
Tensor<T> stack(std::span<const Tensor<T>* const> items) {
  if (items.empty()) throw Error(ErrorCode::invalid_shape, "stack of zero tensors");
  const Shape& inner = items.front()->shape();
  std::vector<T> data;
  data.reserve(items.size() * shape_size(inner));
  for (const Tensor<T>* t : items) {
    if (t->shape() != inner) {
      throw Error(ErrorCode::invalid_shape,
                  "stack: " + shape_string(t->shape()) + " differs from " + shape_string(inner));
    }
    data.insert(data.end(), t->values().begin(), t->values().end());
  }
  Shape s{items.size()};
  s.insert(s.end(), inner.begin(), inner.end());
  return Tensor<T>(std::move(s), std::move(data));
}

template <typename T>
void require_finite(const Tensor<T>& t, const char* where) {
  if (!t.all_finite()) throw Error(ErrorCode::non_finite, std::string("non-finite value in ") + where);
}

}  // namespace blackfed
