#pragma once

// Forward and backward rules for every layer primitive the segmentation
// networks are composed of. All functions are pure except batch_norm in
// train mode, which updates the running statistics of its state argument.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cmsnet/error.hpp"
#include "cmsnet/tensor.hpp"

namespace cmsnet {

enum class Padding { same_ceil, valid };
enum class Groups { dense, depthwise };
enum class Mode { train, infer };
enum class Activation { relu6, relu, none };

struct ConvSpec {
  std::size_t stride = 1;
  std::size_t dilation = 1;
  Padding padding = Padding::same_ceil;
  Groups groups = Groups::dense;

  void validate() const {
    if (stride < 1) throw ConfigError("conv stride must be >= 1");
    if (dilation < 1) throw ConfigError("conv dilation must be >= 1");
  }
  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

/// Output extent and leading pad of one spatial axis.
struct AxisGeometry {
  std::size_t out = 0;
  std::size_t pad_before = 0;
};

/// Same-ceil gives ceil(in / stride) with the total pad split floor/ceil
/// (before/after); valid pads nothing.
inline AxisGeometry axis_geometry(std::size_t in, std::size_t kernel, std::size_t stride,
                                  std::size_t dilation, Padding padding, const char* axis) {
  const std::size_t extent = (kernel - 1) * dilation + 1;
  if (padding == Padding::valid) {
    if (in < extent) {
      throw DimensionError(std::string("axis ") + axis + ": input " + std::to_string(in) +
                           " smaller than kernel extent " + std::to_string(extent));
    }
    return {(in - extent) / stride + 1, 0};
  }
  const std::size_t out = (in + stride - 1) / stride;
  const std::size_t needed = (out - 1) * stride + extent;
  const std::size_t total = needed > in ? needed - in : 0;
  return {out, total / 2};
}

namespace detail {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMatrix<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMatrix<T>>;

inline void require_nonempty(const Shape& s, const char* op) {
  if (s.h == 0 || s.w == 0) {
    throw EmptyTensorError(std::string(op) + ": zero-sized spatial input " + s.to_string());
  }
}

struct ConvGeometry {
  AxisGeometry y;
  AxisGeometry x;
};

inline ConvGeometry conv_geometry(const Shape& in, const KernelShape& k, const ConvSpec& spec) {
  return {axis_geometry(in.h, k.kh, spec.stride, spec.dilation, spec.padding, "height"),
          axis_geometry(in.w, k.kw, spec.stride, spec.dilation, spec.padding, "width")};
}

// Unrolls one batch item into a (C*kh*kw) x (oh*ow) matrix.
template <class T>
void im2col(const T* src, std::size_t c, std::size_t h, std::size_t w, const KernelShape& k,
            const ConvSpec& spec, const ConvGeometry& g, T* col) {
  const std::size_t oh = g.y.out;
  const std::size_t ow = g.x.out;
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < c; ++ci) {
    const T* plane = src + ci * h * w;
    for (std::size_t ky = 0; ky < k.kh; ++ky) {
      for (std::size_t kx = 0; kx < k.kw; ++kx, ++row) {
        T* dst = col + row * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * spec.stride + ky * spec.dilation) -
                          static_cast<long>(g.y.pad_before);
          if (iy < 0 || iy >= static_cast<long>(h)) {
            std::fill(dst + oy * ow, dst + (oy + 1) * ow, T{0});
            continue;
          }
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * spec.stride + kx * spec.dilation) -
                            static_cast<long>(g.x.pad_before);
            dst[oy * ow + ox] =
                (ix < 0 || ix >= static_cast<long>(w)) ? T{0} : plane[iy * w + ix];
          }
        }
      }
    }
  }
}

template <class T>
void col2im(const T* col, std::size_t c, std::size_t h, std::size_t w, const KernelShape& k,
            const ConvSpec& spec, const ConvGeometry& g, T* dst) {
  const std::size_t oh = g.y.out;
  const std::size_t ow = g.x.out;
  std::size_t row = 0;
  for (std::size_t ci = 0; ci < c; ++ci) {
    T* plane = dst + ci * h * w;
    for (std::size_t ky = 0; ky < k.kh; ++ky) {
      for (std::size_t kx = 0; kx < k.kw; ++kx, ++row) {
        const T* src = col + row * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const long iy = static_cast<long>(oy * spec.stride + ky * spec.dilation) -
                          static_cast<long>(g.y.pad_before);
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const long ix = static_cast<long>(ox * spec.stride + kx * spec.dilation) -
                            static_cast<long>(g.x.pad_before);
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            plane[iy * w + ix] += src[oy * ow + ox];
          }
        }
      }
    }
  }
}

inline bool is_plain_pointwise(const KernelShape& k, const ConvSpec& spec) {
  return k.kh == 1 && k.kw == 1 && spec.stride == 1;
}

inline void check_conv_args(const Shape& in, const KernelShape& k, const ConvSpec& spec,
                            std::size_t bias_len, bool has_bias, const char* op) {
  spec.validate();
  require_nonempty(in, op);
  if (spec.groups == Groups::dense) {
    if (k.in != in.c) {
      throw DimensionError(std::string(op) + ": kernel in-channels (axis 1) = " +
                           std::to_string(k.in) + " but input channels (axis 1) = " +
                           std::to_string(in.c));
    }
  } else {
    if (k.in != 1 || k.out != in.c) {
      throw DimensionError(std::string(op) + ": depthwise kernel must be " +
                           std::to_string(in.c) + "x1xKxK, got " + k.to_string());
    }
  }
  if (k.kh == 0 || k.kw == 0) throw DimensionError(std::string(op) + ": empty kernel");
  if (has_bias && bias_len != k.out) {
    throw DimensionError(std::string(op) + ": bias length " + std::to_string(bias_len) +
                         " does not match kernel out-channels (axis 0) " + std::to_string(k.out));
  }
}

}  // namespace detail

/// Output shape of a convolution without running it.
inline Shape conv_output_shape(const Shape& in, const KernelShape& k, const ConvSpec& spec) {
  detail::check_conv_args(in, k, spec, 0, false, "conv2d");
  const auto g = detail::conv_geometry(in, k, spec);
  return {in.n, k.out, g.y.out, g.x.out};
}

template <class T>
struct ConvGrads {
  BasicTensor<T> input;
  BasicKernel<T> kernel;
  std::vector<T> bias;
};

template <class T>
BasicTensor<T> depthwise_conv2d(const BasicTensor<T>& input, const BasicKernel<T>& kernel,
                                const ConvSpec& spec);

/// Cross-correlation of `input` with a filter bank (no kernel flip),
/// generalised with stride, dilation and padding.
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicKernel<T>& kernel,
                      std::optional<std::span<const T>> bias, const ConvSpec& spec) {
  const Shape& in = input.shape();
  const KernelShape& k = kernel.shape();
  detail::check_conv_args(in, k, spec, bias ? bias->size() : 0, bias.has_value(), "conv2d");
  if (spec.groups == Groups::depthwise) {
    auto out = depthwise_conv2d(input, kernel, spec);
    if (bias) {
      const std::size_t plane = out.shape().h * out.shape().w;
      auto d = out.data();
      for (std::size_t b = 0; b < in.n; ++b)
        for (std::size_t c = 0; c < k.out; ++c)
          for (std::size_t i = 0; i < plane; ++i) d[(b * k.out + c) * plane + i] += (*bias)[c];
    }
    return out;
  }

  const auto g = detail::conv_geometry(in, k, spec);
  BasicTensor<T> out({in.n, k.out, g.y.out, g.x.out});
  const std::size_t patch = k.in * k.kh * k.kw;
  const std::size_t positions = g.y.out * g.x.out;
  const bool direct = detail::is_plain_pointwise(k, spec);
  std::vector<T> col(direct ? 0 : patch * positions);
  detail::ConstMatMap<T> weights(kernel.data().data(), k.out, patch);

  for (std::size_t b = 0; b < in.n; ++b) {
    const T* src = input.data().data() + b * in.c * in.h * in.w;
    const T* col_ptr = src;
    if (!direct) {
      detail::im2col(src, in.c, in.h, in.w, k, spec, g, col.data());
      col_ptr = col.data();
    }
    detail::ConstMatMap<T> cols(col_ptr, patch, positions);
    detail::MatMap<T> dst(out.data().data() + b * k.out * positions, k.out, positions);
    dst.noalias() = weights * cols;
    if (bias) {
      for (std::size_t o = 0; o < k.out; ++o) dst.row(o).array() += (*bias)[o];
    }
  }
  debug_check_finite(out, "conv2d");
  return out;
}

template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& input, const BasicKernel<T>& kernel,
                      const ConvSpec& spec) {
  return conv2d<T>(input, kernel, std::nullopt, spec);
}

/// Per-channel spatial filtering; channel i of the output only sees channel i
/// of the input.
template <class T>
BasicTensor<T> depthwise_conv2d(const BasicTensor<T>& input, const BasicKernel<T>& kernel,
                                const ConvSpec& spec) {
  const Shape& in = input.shape();
  const KernelShape& k = kernel.shape();
  if (spec.groups != Groups::depthwise) {
    throw ConfigError("depthwise_conv2d requires spec.groups = depthwise");
  }
  detail::check_conv_args(in, k, spec, 0, false, "depthwise_conv2d");
  const auto g = detail::conv_geometry(in, k, spec);
  const std::size_t oh = g.y.out, ow = g.x.out;
  BasicTensor<T> out({in.n, in.c, oh, ow});
  auto dst = out.data();
  auto src = input.data();
  auto w = kernel.data();
  for (std::size_t b = 0; b < in.n; ++b) {
    for (std::size_t c = 0; c < in.c; ++c) {
      const T* plane = src.data() + (b * in.c + c) * in.h * in.w;
      const T* taps = w.data() + c * k.kh * k.kw;
      T* o = dst.data() + (b * in.c + c) * oh * ow;
      for (std::size_t ky = 0; ky < k.kh; ++ky) {
        for (std::size_t kx = 0; kx < k.kw; ++kx) {
          const T tap = taps[ky * k.kw + kx];
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const long iy = static_cast<long>(oy * spec.stride + ky * spec.dilation) -
                            static_cast<long>(g.y.pad_before);
            if (iy < 0 || iy >= static_cast<long>(in.h)) continue;
            const T* row = plane + iy * in.w;
            T* orow = o + oy * ow;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const long ix = static_cast<long>(ox * spec.stride + kx * spec.dilation) -
                              static_cast<long>(g.x.pad_before);
              if (ix < 0 || ix >= static_cast<long>(in.w)) continue;
              orow[ox] += tap * row[ix];
            }
          }
        }
      }
    }
  }
  debug_check_finite(out, "depthwise_conv2d");
  return out;
}

/// 1x1 channel mixing at every pixel.
template <class T>
BasicTensor<T> pointwise_conv2d(const BasicTensor<T>& input, const BasicKernel<T>& kernel) {
  if (kernel.shape().kh != 1 || kernel.shape().kw != 1) {
    throw DimensionError("pointwise_conv2d: kernel spatial axes (2,3) must be 1x1, got " +
                         kernel.shape().to_string());
  }
  return conv2d<T>(input, kernel, std::nullopt, ConvSpec{});
}

template <class T>
ConvGrads<T> depthwise_conv2d_backward(const BasicTensor<T>& input, const BasicKernel<T>& kernel,
                                       const ConvSpec& spec, const BasicTensor<T>& grad_out) {
  const Shape& in = input.shape();
  const KernelShape& k = kernel.shape();
  const auto g = detail::conv_geometry(in, k, spec);
  const std::size_t oh = g.y.out, ow = g.x.out;
  ConvGrads<T> grads{BasicTensor<T>(in), BasicKernel<T>(k), std::vector<T>(k.out, T{0})};
  auto gi = grads.input.data();
  auto gk = grads.kernel.data();
  auto src = input.data();
  auto w = kernel.data();
  auto go = grad_out.data();
  for (std::size_t b = 0; b < in.n; ++b) {
    for (std::size_t c = 0; c < in.c; ++c) {
      const T* plane = src.data() + (b * in.c + c) * in.h * in.w;
      T* gplane = gi.data() + (b * in.c + c) * in.h * in.w;
      const T* gop = go.data() + (b * in.c + c) * oh * ow;
      for (std::size_t i = 0; i < oh * ow; ++i) grads.bias[c] += gop[i];
      for (std::size_t ky = 0; ky < k.kh; ++ky) {
        for (std::size_t kx = 0; kx < k.kw; ++kx) {
          const T tap = w[c * k.kh * k.kw + ky * k.kw + kx];
          T acc{0};
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const long iy = static_cast<long>(oy * spec.stride + ky * spec.dilation) -
                            static_cast<long>(g.y.pad_before);
            if (iy < 0 || iy >= static_cast<long>(in.h)) continue;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const long ix = static_cast<long>(ox * spec.stride + kx * spec.dilation) -
                              static_cast<long>(g.x.pad_before);
              if (ix < 0 || ix >= static_cast<long>(in.w)) continue;
              const T go_v = gop[oy * ow + ox];
              acc += go_v * plane[iy * in.w + ix];
              gplane[iy * in.w + ix] += go_v * tap;
            }
          }
          gk[c * k.kh * k.kw + ky * k.kw + kx] += acc;
        }
      }
    }
  }
  return grads;
}

/// Gradients of conv2d with respect to input, kernel and bias. `bias` of the
/// result is always filled (sum of the output gradient per channel); callers
/// without a bias ignore it.
template <class T>
ConvGrads<T> conv2d_backward(const BasicTensor<T>& input, const BasicKernel<T>& kernel,
                             const ConvSpec& spec, const BasicTensor<T>& grad_out) {
  const Shape& in = input.shape();
  const KernelShape& k = kernel.shape();
  detail::check_conv_args(in, k, spec, 0, false, "conv2d_backward");
  if (spec.groups == Groups::depthwise) {
    return depthwise_conv2d_backward(input, kernel, spec, grad_out);
  }
  const auto g = detail::conv_geometry(in, k, spec);
  const std::size_t positions = g.y.out * g.x.out;
  if (grad_out.shape() != Shape{in.n, k.out, g.y.out, g.x.out}) {
    throw DimensionError("conv2d_backward: grad shape " + grad_out.shape().to_string() +
                         " does not match output shape");
  }
  const std::size_t patch = k.in * k.kh * k.kw;
  ConvGrads<T> grads{BasicTensor<T>(in), BasicKernel<T>(k), std::vector<T>(k.out, T{0})};
  const bool direct = detail::is_plain_pointwise(k, spec);
  std::vector<T> col(direct ? 0 : patch * positions);
  std::vector<T> dcol(direct ? 0 : patch * positions);
  detail::ConstMatMap<T> weights(kernel.data().data(), k.out, patch);
  detail::MatMap<T> dweights(grads.kernel.data().data(), k.out, patch);

  for (std::size_t b = 0; b < in.n; ++b) {
    const T* src = input.data().data() + b * in.c * in.h * in.w;
    T* gsrc = grads.input.data().data() + b * in.c * in.h * in.w;
    detail::ConstMatMap<T> gout(grad_out.data().data() + b * k.out * positions, k.out,
                                positions);
    for (std::size_t o = 0; o < k.out; ++o) grads.bias[o] += gout.row(o).sum();
    if (direct) {
      detail::ConstMatMap<T> cols(src, patch, positions);
      dweights.noalias() += gout * cols.transpose();
      detail::MatMap<T> gin(gsrc, patch, positions);
      gin.noalias() = weights.transpose() * gout;
    } else {
      detail::im2col(src, in.c, in.h, in.w, k, spec, g, col.data());
      detail::ConstMatMap<T> cols(col.data(), patch, positions);
      dweights.noalias() += gout * cols.transpose();
      detail::MatMap<T> dc(dcol.data(), patch, positions);
      dc.noalias() = weights.transpose() * gout;
      detail::col2im(dcol.data(), in.c, in.h, in.w, k, spec, g, gsrc);
    }
  }
  return grads;
}

template <class T>
T apply_activation(Activation act, T x) {
  switch (act) {
    case Activation::relu6: return std::min(std::max(x, T{0}), T{6});
    case Activation::relu: return std::max(x, T{0});
    case Activation::none: return x;
  }
  return x;
}

template <class T>
BasicTensor<T> activate(const BasicTensor<T>& input, Activation act) {
  BasicTensor<T> out(input.shape());
  auto src = input.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = apply_activation(act, src[i]);
  return out;
}

template <class T>
BasicTensor<T> activate_backward(const BasicTensor<T>& input, const BasicTensor<T>& grad_out,
                                 Activation act) {
  BasicTensor<T> grad(input.shape());
  auto x = input.data();
  auto go = grad_out.data();
  auto gi = grad.data();
  for (std::size_t i = 0; i < x.size(); ++i) {
    bool pass = true;
    if (act == Activation::relu6) pass = x[i] > T{0} && x[i] < T{6};
    if (act == Activation::relu) pass = x[i] > T{0};
    gi[i] = pass ? go[i] : T{0};
  }
  return grad;
}

/// min(max(x, 0), 6) elementwise.
template <class T>
BasicTensor<T> relu6(const BasicTensor<T>& input) {
  return activate(input, Activation::relu6);
}

/// Gradient passes only where 0 < x < 6.
template <class T>
BasicTensor<T> relu6_backward(const BasicTensor<T>& input, const BasicTensor<T>& grad_out) {
  return activate_backward(input, grad_out, Activation::relu6);
}

// ---------------------------------------------------------------------------
// Batch normalisation

template <class T>
struct BatchNormState {
  std::vector<T> gamma;
  std::vector<T> beta;
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T epsilon = T(1e-3);
  T momentum = T(0.99);
  Mode mode = Mode::train;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels)
      : gamma(channels, T{1}),
        beta(channels, T{0}),
        running_mean(channels, T{0}),
        running_var(channels, T{1}) {}

  std::size_t channels() const { return gamma.size(); }

  void validate() const {
    const std::size_t c = gamma.size();
    if (beta.size() != c || running_mean.size() != c || running_var.size() != c) {
      throw DimensionError("batch norm state vectors differ in length");
    }
    for (T v : running_var)
      if (v < T{0}) throw ValidationError("batch norm running variance is negative");
  }
};

template <class T>
struct BatchNormCache {
  BasicTensor<T> normalized;
  std::vector<T> inv_std;
  Mode mode = Mode::train;
};

template <class T>
struct BatchNormGrads {
  BasicTensor<T> input;
  std::vector<T> gamma;
  std::vector<T> beta;
};

namespace detail {

template <class T>
BasicTensor<T> batch_norm_apply(const BasicTensor<T>& input, const BatchNormState<T>& state,
                                const std::vector<T>& mean, const std::vector<T>& var,
                                Mode mode, BatchNormCache<T>* cache) {
  const Shape& s = input.shape();
  const std::size_t plane = s.h * s.w;
  BasicTensor<T> out(s);
  BasicTensor<T> normalized(cache ? s : Shape{});
  std::vector<T> inv_std(s.c);
  auto x = input.data();
  auto y = out.data();
  for (std::size_t c = 0; c < s.c; ++c) {
    const T inv = T{1} / std::sqrt(var[c] + state.epsilon);
    inv_std[c] = inv;
    for (std::size_t b = 0; b < s.n; ++b) {
      const std::size_t base = (b * s.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const T v = (x[base + i] - mean[c]) * inv;
        if (cache) normalized.data()[base + i] = v;
        y[base + i] = state.gamma[c] * v + state.beta[c];
      }
    }
  }
  if (cache) {
    cache->normalized = std::move(normalized);
    cache->inv_std = std::move(inv_std);
    cache->mode = mode;
  }
  debug_check_finite(out, "batch_norm");
  return out;
}

template <class T>
void check_batch_norm(const Shape& s, const BatchNormState<T>& state) {
  state.validate();
  if (state.channels() != s.c) {
    throw DimensionError("batch_norm: state has " + std::to_string(state.channels()) +
                         " channels, input channels (axis 1) = " + std::to_string(s.c));
  }
}

}  // namespace detail

/// Normalises with the running statistics; the state is not touched.
template <class T>
BasicTensor<T> batch_norm_infer(const BasicTensor<T>& input, const BatchNormState<T>& state,
                                BatchNormCache<T>* cache = nullptr) {
  detail::check_batch_norm(input.shape(), state);
  return detail::batch_norm_apply(input, state, state.running_mean, state.running_var,
                                  Mode::infer, cache);
}

/// Train mode normalises by batch statistics and folds them into the running
/// statistics (EMA with `momentum` on the old value); infer mode uses the
/// running statistics.
template <class T>
BasicTensor<T> batch_norm(const BasicTensor<T>& input, BatchNormState<T>& state,
                          BatchNormCache<T>* cache = nullptr) {
  const Shape& s = input.shape();
  detail::check_batch_norm(s, state);
  if (state.mode == Mode::infer) return batch_norm_infer(input, state, cache);
  const std::size_t plane = s.h * s.w;
  const std::size_t count = s.n * plane;
  if (count == 0) throw EmptyTensorError("batch_norm: empty batch in train mode");
  std::vector<T> mean(s.c), var(s.c);
  auto x = input.data();
  for (std::size_t c = 0; c < s.c; ++c) {
    double sum = 0;
    for (std::size_t b = 0; b < s.n; ++b)
      for (std::size_t i = 0; i < plane; ++i) sum += x[(b * s.c + c) * plane + i];
    const double m = sum / static_cast<double>(count);
    double sq = 0;
    for (std::size_t b = 0; b < s.n; ++b)
      for (std::size_t i = 0; i < plane; ++i) {
        const double d = x[(b * s.c + c) * plane + i] - m;
        sq += d * d;
      }
    mean[c] = static_cast<T>(m);
    var[c] = static_cast<T>(sq / static_cast<double>(count));
    const double unbiased = count > 1 ? sq / static_cast<double>(count - 1) : 0.0;
    state.running_mean[c] =
        state.momentum * state.running_mean[c] + (T{1} - state.momentum) * mean[c];
    state.running_var[c] = state.momentum * state.running_var[c] +
                           (T{1} - state.momentum) * static_cast<T>(unbiased);
  }
  return detail::batch_norm_apply(input, state, mean, var, Mode::train, cache);
}

template <class T>
BatchNormGrads<T> batch_norm_backward(const BasicTensor<T>& grad_out,
                                      const BatchNormState<T>& state,
                                      const BatchNormCache<T>& cache) {
  const Shape& s = grad_out.shape();
  const std::size_t plane = s.h * s.w;
  const std::size_t count = s.n * plane;
  BatchNormGrads<T> g{BasicTensor<T>(s), std::vector<T>(s.c, T{0}), std::vector<T>(s.c, T{0})};
  auto go = grad_out.data();
  auto xh = cache.normalized.data();
  auto gi = g.input.data();
  for (std::size_t c = 0; c < s.c; ++c) {
    T sum_dy{0}, sum_dy_xh{0};
    for (std::size_t b = 0; b < s.n; ++b) {
      const std::size_t base = (b * s.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sum_dy += go[base + i];
        sum_dy_xh += go[base + i] * xh[base + i];
      }
    }
    g.beta[c] = sum_dy;
    g.gamma[c] = sum_dy_xh;
    const T scale = state.gamma[c] * cache.inv_std[c];
    for (std::size_t b = 0; b < s.n; ++b) {
      const std::size_t base = (b * s.c + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        if (cache.mode == Mode::train) {
          const T n = static_cast<T>(count);
          gi[base + i] = scale * (go[base + i] - sum_dy / n - xh[base + i] * sum_dy_xh / n);
        } else {
          gi[base + i] = scale * go[base + i];
        }
      }
    }
  }
  return g;
}

// ---------------------------------------------------------------------------
// Pooling

namespace detail {

struct PoolGeometry {
  AxisGeometry y;
  AxisGeometry x;
};

inline PoolGeometry pool_geometry(const Shape& s, std::size_t window, std::size_t stride,
                                  Padding padding, const char* op) {
  if (window < 1) throw ConfigError(std::string(op) + ": window must be >= 1");
  if (stride < 1) throw ConfigError(std::string(op) + ": stride must be >= 1");
  require_nonempty(s, op);
  auto axis = [&](std::size_t in, const char* name) {
    const auto g = axis_geometry(in, window, stride, 1, padding, name);
    const std::size_t padded = std::max(in, (g.out - 1) * stride + window);
    if (window > padded) {
      throw DimensionError(std::string(op) + ": window " + std::to_string(window) +
                           " larger than padded " + name);
    }
    return g;
  };
  return {axis(s.h, "height"), axis(s.w, "width")};
}

}  // namespace detail

template <class T>
BasicTensor<T> max_pool(const BasicTensor<T>& input, std::size_t window, std::size_t stride,
                        Padding padding) {
  const Shape& s = input.shape();
  const auto g = detail::pool_geometry(s, window, stride, padding, "max_pool");
  BasicTensor<T> out({s.n, s.c, g.y.out, g.x.out});
  for (std::size_t b = 0; b < s.n; ++b)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t oy = 0; oy < g.y.out; ++oy)
        for (std::size_t ox = 0; ox < g.x.out; ++ox) {
          T best = -std::numeric_limits<T>::infinity();
          for (std::size_t ky = 0; ky < window; ++ky) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(g.y.pad_before);
            if (iy < 0 || iy >= static_cast<long>(s.h)) continue;
            for (std::size_t kx = 0; kx < window; ++kx) {
              const long ix =
                  static_cast<long>(ox * stride + kx) - static_cast<long>(g.x.pad_before);
              if (ix < 0 || ix >= static_cast<long>(s.w)) continue;
              best = std::max(best, input(b, c, iy, ix));
            }
          }
          out(b, c, oy, ox) = best;
        }
  return out;
}

/// Routes each output gradient to the first maximal input of its window
/// (row-major scan order).
template <class T>
BasicTensor<T> max_pool_backward(const BasicTensor<T>& input, const BasicTensor<T>& grad_out,
                                 std::size_t window, std::size_t stride, Padding padding) {
  const Shape& s = input.shape();
  const auto g = detail::pool_geometry(s, window, stride, padding, "max_pool_backward");
  BasicTensor<T> grad(s);
  for (std::size_t b = 0; b < s.n; ++b)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t oy = 0; oy < g.y.out; ++oy)
        for (std::size_t ox = 0; ox < g.x.out; ++ox) {
          T best = -std::numeric_limits<T>::infinity();
          long by = -1, bx = -1;
          for (std::size_t ky = 0; ky < window; ++ky) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(g.y.pad_before);
            if (iy < 0 || iy >= static_cast<long>(s.h)) continue;
            for (std::size_t kx = 0; kx < window; ++kx) {
              const long ix =
                  static_cast<long>(ox * stride + kx) - static_cast<long>(g.x.pad_before);
              if (ix < 0 || ix >= static_cast<long>(s.w)) continue;
              if (by < 0 || input(b, c, iy, ix) > best) {
                best = input(b, c, iy, ix);
                by = iy;
                bx = ix;
              }
            }
          }
          if (by >= 0) grad(b, c, by, bx) += grad_out(b, c, oy, ox);
        }
  return grad;
}

/// Average over the in-bounds part of each window (padding is not counted).
template <class T>
BasicTensor<T> avg_pool(const BasicTensor<T>& input, std::size_t window, std::size_t stride,
                        Padding padding) {
  const Shape& s = input.shape();
  const auto g = detail::pool_geometry(s, window, stride, padding, "avg_pool");
  BasicTensor<T> out({s.n, s.c, g.y.out, g.x.out});
  for (std::size_t b = 0; b < s.n; ++b)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t oy = 0; oy < g.y.out; ++oy)
        for (std::size_t ox = 0; ox < g.x.out; ++ox) {
          T sum{0};
          std::size_t count = 0;
          for (std::size_t ky = 0; ky < window; ++ky) {
            const long iy = static_cast<long>(oy * stride + ky) - static_cast<long>(g.y.pad_before);
            if (iy < 0 || iy >= static_cast<long>(s.h)) continue;
            for (std::size_t kx = 0; kx < window; ++kx) {
              const long ix =
                  static_cast<long>(ox * stride + kx) - static_cast<long>(g.x.pad_before);
              if (ix < 0 || ix >= static_cast<long>(s.w)) continue;
              sum += input(b, c, iy, ix);
              ++count;
            }
          }
          out(b, c, oy, ox) = count ? sum / static_cast<T>(count) : T{0};
        }
  return out;
}

template <class T>
BasicTensor<T> avg_pool_backward(const Shape& input_shape, const BasicTensor<T>& grad_out,
                                 std::size_t window, std::size_t stride, Padding padding) {
  const Shape& s = input_shape;
  const auto g = detail::pool_geometry(s, window, stride, padding, "avg_pool_backward");
  BasicTensor<T> grad(s);
  for (std::size_t b = 0; b < s.n; ++b)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t oy = 0; oy < g.y.out; ++oy)
        for (std::size_t ox = 0; ox < g.x.out; ++ox) {
          const long y0 = static_cast<long>(oy * stride) - static_cast<long>(g.y.pad_before);
          const long x0 = static_cast<long>(ox * stride) - static_cast<long>(g.x.pad_before);
          const long ya = std::max(y0, 0L), yb = std::min(y0 + static_cast<long>(window), static_cast<long>(s.h));
          const long xa = std::max(x0, 0L), xb = std::min(x0 + static_cast<long>(window), static_cast<long>(s.w));
          if (ya >= yb || xa >= xb) continue;
          const T share = grad_out(b, c, oy, ox) / static_cast<T>((yb - ya) * (xb - xa));
          for (long iy = ya; iy < yb; ++iy)
            for (long ix = xa; ix < xb; ++ix) grad(b, c, iy, ix) += share;
        }
  return grad;
}

namespace detail {

inline void check_adaptive(const Shape& s, std::size_t out_h, std::size_t out_w) {
  if (out_h == 0 || out_w == 0) {
    throw DimensionError("adaptive_avg_pool: output dims must be positive");
  }
  require_nonempty(s, "adaptive_avg_pool");
  if (out_h > s.h || out_w > s.w) {
    throw DimensionError("adaptive_avg_pool: output " + std::to_string(out_h) + "x" +
                         std::to_string(out_w) + " exceeds input spatial " + std::to_string(s.h) +
                         "x" + std::to_string(s.w));
  }
}

inline std::size_t cell_begin(std::size_t i, std::size_t dim, std::size_t out) {
  return i * dim / out;
}

}  // namespace detail

/// Averages each of out_h x out_w near-equal cells; cell i spans
/// [floor(i*dim/out), floor((i+1)*dim/out)).
template <class T>
BasicTensor<T> adaptive_avg_pool(const BasicTensor<T>& input, std::size_t out_h,
                                 std::size_t out_w) {
  const Shape& s = input.shape();
  detail::check_adaptive(s, out_h, out_w);
  BasicTensor<T> out({s.n, s.c, out_h, out_w});
  for (std::size_t b = 0; b < s.n; ++b)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        const std::size_t y0 = detail::cell_begin(oy, s.h, out_h);
        const std::size_t y1 = detail::cell_begin(oy + 1, s.h, out_h);
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const std::size_t x0 = detail::cell_begin(ox, s.w, out_w);
          const std::size_t x1 = detail::cell_begin(ox + 1, s.w, out_w);
          T sum{0};
          for (std::size_t y = y0; y < y1; ++y)
            for (std::size_t x = x0; x < x1; ++x) sum += input(b, c, y, x);
          out(b, c, oy, ox) = sum / static_cast<T>((y1 - y0) * (x1 - x0));
        }
      }
  return out;
}

template <class T>
BasicTensor<T> adaptive_avg_pool_backward(const Shape& input_shape, const BasicTensor<T>& grad_out) {
  const Shape& s = input_shape;
  const std::size_t out_h = grad_out.shape().h, out_w = grad_out.shape().w;
  detail::check_adaptive(s, out_h, out_w);
  BasicTensor<T> grad(s);
  for (std::size_t b = 0; b < s.n; ++b)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        const std::size_t y0 = detail::cell_begin(oy, s.h, out_h);
        const std::size_t y1 = detail::cell_begin(oy + 1, s.h, out_h);
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const std::size_t x0 = detail::cell_begin(ox, s.w, out_w);
          const std::size_t x1 = detail::cell_begin(ox + 1, s.w, out_w);
          const T share = grad_out(b, c, oy, ox) / static_cast<T>((y1 - y0) * (x1 - x0));
          for (std::size_t y = y0; y < y1; ++y)
            for (std::size_t x = x0; x < x1; ++x) grad(b, c, y, x) += share;
        }
      }
  return grad;
}

// ---------------------------------------------------------------------------
// Bilinear resize (align-corners = false)

namespace detail {

struct Tap {
  std::size_t lo = 0;
  std::size_t hi = 0;
  double frac = 0;  // weight of `hi`
};

inline std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    const std::size_t hi = std::min(lo + 1, in - 1);
    taps[i] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

template <class T>
BasicTensor<T> bilinear_resize(const BasicTensor<T>& input, std::size_t out_h, std::size_t out_w) {
  const Shape& s = input.shape();
  if (out_h == 0 || out_w == 0) throw DimensionError("bilinear_resize: output dims must be >= 1");
  detail::require_nonempty(s, "bilinear_resize");
  if (out_h == s.h && out_w == s.w) return BasicTensor<T>(s, input.values());
  const auto ty = detail::bilinear_taps(s.h, out_h);
  const auto tx = detail::bilinear_taps(s.w, out_w);
  BasicTensor<T> out({s.n, s.c, out_h, out_w});
  for (std::size_t b = 0; b < s.n; ++b)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        const auto& y = ty[oy];
        const T fy = static_cast<T>(y.frac);
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const auto& x = tx[ox];
          const T fx = static_cast<T>(x.frac);
          const T top = (T{1} - fx) * input(b, c, y.lo, x.lo) + fx * input(b, c, y.lo, x.hi);
          const T bot = (T{1} - fx) * input(b, c, y.hi, x.lo) + fx * input(b, c, y.hi, x.hi);
          out(b, c, oy, ox) = (T{1} - fy) * top + fy * bot;
        }
      }
  return out;
}

/// Transpose of the (linear) resize map.
template <class T>
BasicTensor<T> bilinear_resize_backward(const Shape& input_shape, const BasicTensor<T>& grad_out) {
  const Shape& s = input_shape;
  const std::size_t out_h = grad_out.shape().h, out_w = grad_out.shape().w;
  if (out_h == s.h && out_w == s.w) return BasicTensor<T>(s, grad_out.values());
  const auto ty = detail::bilinear_taps(s.h, out_h);
  const auto tx = detail::bilinear_taps(s.w, out_w);
  BasicTensor<T> grad(s);
  for (std::size_t b = 0; b < s.n; ++b)
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        const auto& y = ty[oy];
        const T fy = static_cast<T>(y.frac);
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          const auto& x = tx[ox];
          const T fx = static_cast<T>(x.frac);
          const T g = grad_out(b, c, oy, ox);
          grad(b, c, y.lo, x.lo) += (T{1} - fy) * (T{1} - fx) * g;
          grad(b, c, y.lo, x.hi) += (T{1} - fy) * fx * g;
          grad(b, c, y.hi, x.lo) += fy * (T{1} - fx) * g;
          grad(b, c, y.hi, x.hi) += fy * fx * g;
        }
      }
  return grad;
}

// ---------------------------------------------------------------------------
// Concatenation and addition

template <class T>
using TensorRefs = std::vector<std::reference_wrapper<const BasicTensor<T>>>;

/// Stacks inputs along the channel axis, in argument order.
template <class T>
BasicTensor<T> concat_channels(const TensorRefs<T>& inputs) {
  if (inputs.empty()) throw DimensionError("concat_channels: no inputs");
  const Shape& first = inputs.front().get().shape();
  std::size_t channels = 0;
  for (const auto& ref : inputs) {
    const Shape& s = ref.get().shape();
    if (s.n != first.n || s.h != first.h || s.w != first.w) {
      throw DimensionError("concat_channels: axes (n,h,w) differ: " + first.to_string() + " vs " +
                           s.to_string());
    }
    channels += s.c;
  }
  const std::size_t plane = first.h * first.w;
  BasicTensor<T> out({first.n, channels, first.h, first.w});
  auto dst = out.data();
  for (std::size_t b = 0; b < first.n; ++b) {
    std::size_t offset = b * channels * plane;
    for (const auto& ref : inputs) {
      const auto& t = ref.get();
      const std::size_t chunk = t.shape().c * plane;
      std::copy_n(t.data().begin() + b * chunk, chunk, dst.begin() + offset);
      offset += chunk;
    }
  }
  return out;
}

template <class T>
BasicTensor<T> concat_channels(std::initializer_list<std::reference_wrapper<const BasicTensor<T>>> inputs) {
  return concat_channels<T>(TensorRefs<T>(inputs));
}

/// Inverse of concat_channels on the gradient: one slice per input width.
template <class T>
std::vector<BasicTensor<T>> split_channels(const BasicTensor<T>& grad,
                                           const std::vector<std::size_t>& channel_counts) {
  const Shape& s = grad.shape();
  std::size_t total = 0;
  for (auto c : channel_counts) total += c;
  if (total != s.c) throw DimensionError("split_channels: channel counts do not sum to axis 1");
  const std::size_t plane = s.h * s.w;
  std::vector<BasicTensor<T>> parts;
  parts.reserve(channel_counts.size());
  for (auto c : channel_counts) parts.emplace_back(Shape{s.n, c, s.h, s.w});
  auto src = grad.data();
  for (std::size_t b = 0; b < s.n; ++b) {
    std::size_t offset = b * s.c * plane;
    for (auto& part : parts) {
      const std::size_t chunk = part.shape().c * plane;
      std::copy_n(src.begin() + offset, chunk, part.data().begin() + b * chunk);
      offset += chunk;
    }
  }
  return parts;
}

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shapes differ: " + a.shape().to_string() + " vs " +
                         b.shape().to_string());
  }
  BasicTensor<T> out(a.shape());
  auto x = a.data();
  auto y = b.data();
  auto z = out.data();
  for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] + y[i];
  return out;
}

// ---------------------------------------------------------------------------
// Loss

template <class T>
struct LossResult {
  double loss = 0;
  BasicTensor<T> grad;      // d loss / d logits
  std::size_t counted = 0;  // non-ignored pixels
};

/// Mean per-pixel cross-entropy over non-ignored pixels, computed with
/// max-subtraction. Gradient is (softmax - onehot) / counted.
template <class T>
LossResult<T> softmax_cross_entropy(const BasicTensor<T>& logits, const LabelMap& labels,
                                    std::optional<std::int32_t> ignore_index = kVoidLabel) {
  const Shape& s = logits.shape();
  if (labels.n != s.n || labels.h != s.h || labels.w != s.w) {
    throw DimensionError("softmax_cross_entropy: labels (n,h,w) = (" + std::to_string(labels.n) +
                         "," + std::to_string(labels.h) + "," + std::to_string(labels.w) +
                         ") do not match logits " + s.to_string());
  }
  const std::size_t plane = s.h * s.w;
  const auto classes = static_cast<std::int32_t>(s.c);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto l = labels.labels[i];
    if (ignore_index && l == *ignore_index) continue;
    if (l < 0 || l >= classes) {
      throw ValidationError("softmax_cross_entropy: label " + std::to_string(l) +
                            " out of range for " + std::to_string(s.c) + " classes");
    }
  }
  LossResult<T> r{0.0, BasicTensor<T>(s), 0};
  auto x = logits.data();
  auto g = r.grad.data();
  std::vector<double> prob(s.c);
  double total = 0;
  for (std::size_t b = 0; b < s.n; ++b) {
    for (std::size_t p = 0; p < plane; ++p) {
      const auto label = labels.labels[b * plane + p];
      if (ignore_index && label == *ignore_index) continue;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < s.c; ++c) mx = std::max<double>(mx, x[(b * s.c + c) * plane + p]);
      double z = 0;
      for (std::size_t c = 0; c < s.c; ++c) {
        prob[c] = std::exp(static_cast<double>(x[(b * s.c + c) * plane + p]) - mx);
        z += prob[c];
      }
      total += -(static_cast<double>(x[(b * s.c + label) * plane + p]) - mx - std::log(z));
      for (std::size_t c = 0; c < s.c; ++c) {
        g[(b * s.c + c) * plane + p] =
            static_cast<T>(prob[c] / z - (static_cast<std::int32_t>(c) == label ? 1.0 : 0.0));
      }
      ++r.counted;
    }
  }
  if (r.counted > 0) {
    r.loss = total / static_cast<double>(r.counted);
    const T inv = static_cast<T>(1.0 / static_cast<double>(r.counted));
    for (auto& v : g) v *= inv;
  }
  return r;
}

}  // namespace cmsnet
