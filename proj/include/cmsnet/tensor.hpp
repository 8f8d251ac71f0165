#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <concepts>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cmsnet/error.hpp"

namespace cmsnet {

/// Activation tensor extent in (batch, channels, height, width) order.
struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  constexpr std::size_t size() const { return n * c * h * w; }
  constexpr std::array<std::size_t, 4> dims() const { return {n, c, h, w}; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string to_string() const {
    return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" +
           std::to_string(w);
  }
};

/// Filter bank extent: (out-channels, in-channels, kernel-height, kernel-width).
struct KernelShape {
  std::size_t out = 0;
  std::size_t in = 0;
  std::size_t kh = 0;
  std::size_t kw = 0;

  constexpr std::size_t size() const { return out * in * kh * kw; }
  constexpr std::array<std::size_t, 4> dims() const { return {out, in, kh, kw}; }
  friend constexpr bool operator==(const KernelShape&, const KernelShape&) = default;

  std::string to_string() const {
    return std::to_string(out) + "x" + std::to_string(in) + "x" + std::to_string(kh) + "x" +
           std::to_string(kw);
  }
};

/// Dense rank-4 array with an optional same-sized gradient buffer.
///
/// Storage is row-major over the four axes of `ShapeT`. The shape type is
/// part of the array type, so activations (`BasicTensor`) and filter banks
/// (`BasicKernel`) cannot be mixed up at call sites.
template <std::floating_point T, class ShapeT>
class Array4 {
 public:
  using value_type = T;
  using shape_type = ShapeT;

  Array4() = default;

  explicit Array4(ShapeT shape, T fill = T{0}) : shape_(shape), data_(shape.size(), fill) {}

  Array4(ShapeT shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
      throw DimensionError("data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_.to_string());
    }
  }

  const ShapeT& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<T> data() { return data_; }
  std::span<const T> data() const { return data_; }
  std::vector<T>& values() { return data_; }
  const std::vector<T>& values() const { return data_; }

  std::size_t offset(std::size_t i0, std::size_t i1, std::size_t i2, std::size_t i3) const {
    const auto d = shape_.dims();
    return ((i0 * d[1] + i1) * d[2] + i2) * d[3] + i3;
  }

  T& operator()(std::size_t i0, std::size_t i1, std::size_t i2, std::size_t i3) {
    return data_[offset(i0, i1, i2, i3)];
  }
  T operator()(std::size_t i0, std::size_t i1, std::size_t i2, std::size_t i3) const {
    return data_[offset(i0, i1, i2, i3)];
  }

  bool has_grad() const { return grad_.has_value(); }

  /// Allocates the gradient buffer on first use and clears it.
  void zero_grad() {
    if (grad_) {
      std::fill(grad_->begin(), grad_->end(), T{0});
    } else {
      grad_.emplace(data_.size(), T{0});
    }
  }
  void drop_grad() { grad_.reset(); }

  std::span<T> grad() {
    if (!grad_) zero_grad();
    return *grad_;
  }
  std::span<const T> grad() const {
    if (!grad_) throw DimensionError("tensor has no gradient buffer");
    return *grad_;
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  template <std::floating_point U>
  Array4<U, ShapeT> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Array4<U, ShapeT>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

 private:
  ShapeT shape_{};
  std::vector<T> data_;
  std::optional<std::vector<T>> grad_;
};

template <std::floating_point T>
using BasicTensor = Array4<T, Shape>;
template <std::floating_point T>
using BasicKernel = Array4<T, KernelShape>;

using Tensor = BasicTensor<float>;
using KernelTensor = BasicKernel<float>;

/// Label id that marks pixels excluded from loss and metrics.
inline constexpr std::int32_t kVoidLabel = 255;

/// Per-pixel class indices, (batch, height, width).
struct LabelMap {
  std::size_t n = 0;
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<std::int32_t> labels;

  LabelMap() = default;
  LabelMap(std::size_t n_, std::size_t h_, std::size_t w_, std::int32_t fill = 0)
      : n(n_), h(h_), w(w_), labels(n_ * h_ * w_, fill) {}

  std::size_t size() const { return labels.size(); }
  std::int32_t& at(std::size_t b, std::size_t y, std::size_t x) { return labels[(b * h + y) * w + x]; }
  std::int32_t at(std::size_t b, std::size_t y, std::size_t x) const {
    return labels[(b * h + y) * w + x];
  }
  friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

// Debug assertion mode for the finite-values invariant. Enabled with
// CMSNET_CHECK_FINITE; a no-op otherwise.
template <class A>
inline void debug_check_finite([[maybe_unused]] const A& a, [[maybe_unused]] const char* where) {
#ifdef CMSNET_CHECK_FINITE
  if (!a.all_finite()) throw ValidationError(std::string("non-finite value produced by ") + where);
#endif
}

}  // namespace cmsnet
