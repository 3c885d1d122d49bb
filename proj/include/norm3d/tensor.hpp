#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "norm3d/errors.hpp"

namespace norm3d {

/// Extents of a dense 5-axis tensor, axes (N, D, H, W, C).
struct Shape5 {
  std::size_t n = 1;
  std::size_t d = 1;
  std::size_t h = 1;
  std::size_t w = 1;
  std::size_t c = 1;

  bool operator==(const Shape5&) const = default;

  /// Element count with overflow checking.
  std::size_t numel() const {
    const std::array<std::size_t, 5> ext{n, d, h, w, c};
    std::size_t total = 1;
    for (std::size_t e : ext) {
      if (e == 0) throw ShapeError("Shape5: all extents must be >= 1");
      if (e > std::numeric_limits<std::size_t>::max() / total) {
        throw SizeError("Shape5: element count overflows addressable size");
      }
      total *= e;
    }
    return total;
  }

  std::string to_string() const {
    return "(" + std::to_string(n) + "," + std::to_string(d) + "," +
           std::to_string(h) + "," + std::to_string(w) + "," +
           std::to_string(c) + ")";
  }
};

/// Dense 5-axis tensor. Linearization is fixed: N-major, then D, H, W,
/// with C contiguous (NDHWC). Flat index of (n,d,h,w,c) is
/// (((n*D + d)*H + h)*W + w)*C + c.
template <std::floating_point T>
class BasicTensor5 {
 public:
  BasicTensor5() : shape_{1, 1, 1, 1, 1}, data_(1, T(0)) {}

  explicit BasicTensor5(const Shape5& shape)
      : shape_(shape), data_(shape.numel(), T(0)) {}

  BasicTensor5(const Shape5& shape, std::vector<T> values)
      : shape_(shape), data_(std::move(values)) {
    if (data_.size() != shape_.numel()) {
      throw ShapeError("Tensor5: data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.to_string());
    }
  }

  static BasicTensor5 zeros(const Shape5& shape) { return BasicTensor5(shape); }

  static BasicTensor5 full(const Shape5& shape, T value) {
    BasicTensor5 t(shape);
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
  }

  const Shape5& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  std::size_t flat_index(std::size_t n, std::size_t d, std::size_t h,
                         std::size_t w, std::size_t c) const {
    return (((n * shape_.d + d) * shape_.h + h) * shape_.w + w) * shape_.c + c;
  }

  std::array<std::size_t, 5> multi_index(std::size_t flat) const {
    std::array<std::size_t, 5> idx{};
    idx[4] = flat % shape_.c;
    flat /= shape_.c;
    idx[3] = flat % shape_.w;
    flat /= shape_.w;
    idx[2] = flat % shape_.h;
    flat /= shape_.h;
    idx[1] = flat % shape_.d;
    flat /= shape_.d;
    idx[0] = flat;
    return idx;
  }

  T& at(std::size_t n, std::size_t d, std::size_t h, std::size_t w,
        std::size_t c) {
    return data_[flat_index(n, d, h, w, c)];
  }
  T at(std::size_t n, std::size_t d, std::size_t h, std::size_t w,
       std::size_t c) const {
    return data_[flat_index(n, d, h, w, c)];
  }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

 private:
  Shape5 shape_;
  std::vector<T> data_;
};

using Tensor5 = BasicTensor5<double>;
using Tensor5f = BasicTensor5<float>;

template <std::floating_point T, typename F>
BasicTensor5<T> map_binary(const BasicTensor5<T>& a, const BasicTensor5<T>& b,
                           F&& f) {
  if (!(a.shape() == b.shape())) {
    throw ShapeError("map_binary: shape mismatch " + a.shape().to_string() +
                     " vs " + b.shape().to_string());
  }
  BasicTensor5<T> out(a.shape());
  const auto pa = a.data();
  const auto pb = b.data();
  auto po = out.data();
  for (std::size_t i = 0; i < pa.size(); ++i) po[i] = f(pa[i], pb[i]);
  return out;
}

template <std::floating_point T, typename F>
BasicTensor5<T> map_unary(const BasicTensor5<T>& a, F&& f) {
  BasicTensor5<T> out(a.shape());
  const auto pa = a.data();
  auto po = out.data();
  for (std::size_t i = 0; i < pa.size(); ++i) po[i] = f(pa[i]);
  return out;
}

template <std::floating_point T>
BasicTensor5<T> add(const BasicTensor5<T>& a, const BasicTensor5<T>& b) {
  return map_binary(a, b, [](T x, T y) { return x + y; });
}

template <std::floating_point T>
BasicTensor5<T> sub(const BasicTensor5<T>& a, const BasicTensor5<T>& b) {
  return map_binary(a, b, [](T x, T y) { return x - y; });
}

template <std::floating_point T>
BasicTensor5<T> mul(const BasicTensor5<T>& a, const BasicTensor5<T>& b) {
  return map_binary(a, b, [](T x, T y) { return x * y; });
}

}  // namespace norm3d
