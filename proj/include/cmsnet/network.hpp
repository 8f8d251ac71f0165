#pragma once

// Layer graph, shape inference, parameter bookkeeping, forward/backward
// execution, and the builders for the adapted MobileNetV2 backbone, the
// three pyramid heads and the nine CM0-CM8 arrangements.

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "cmsnet/error.hpp"
#include "cmsnet/ops.hpp"
#include "cmsnet/tensor.hpp"

namespace cmsnet {

enum class PyramidKind { gpp, spp, aspp };

inline std::string to_string(PyramidKind kind) {
  switch (kind) {
    case PyramidKind::gpp: return "GPP";
    case PyramidKind::spp: return "SPP";
    case PyramidKind::aspp: return "ASPP";
  }
  return "?";
}

inline PyramidKind parse_pyramid(std::string_view text) {
  if (text == "GPP" || text == "gpp") return PyramidKind::gpp;
  if (text == "SPP" || text == "spp") return PyramidKind::spp;
  if (text == "ASPP" || text == "aspp") return PyramidKind::aspp;
  throw ConfigError("unknown pyramid kind '" + std::string(text) + "' (expected GPP, SPP or ASPP)");
}

inline std::string to_string(Activation act) {
  switch (act) {
    case Activation::relu6: return "relu6";
    case Activation::relu: return "relu";
    case Activation::none: return "none";
  }
  return "?";
}

inline Activation parse_activation(std::string_view text) {
  if (text == "relu6") return Activation::relu6;
  if (text == "relu") return Activation::relu;
  if (text == "none") return Activation::none;
  throw ConfigError("unknown activation '" + std::string(text) + "'");
}

/// One row of the arrangement table plus the knobs needed to scale it down.
struct ArrangementConfig {
  std::string name = "custom";
  int output_stride = 16;
  PyramidKind pyramid = PyramidKind::gpp;
  bool shortcut = false;
  std::size_t num_classes = 4;
  double width_multiplier = 1.0;
  std::size_t in_channels = 3;
  Activation activation = Activation::relu6;
  std::uint64_t init_seed = 0;

  void validate() const {
    if (output_stride != 8 && output_stride != 16) {
      throw ConfigError("output stride must be 8 or 16, got " + std::to_string(output_stride));
    }
    if (shortcut && output_stride != 16) {
      throw ConfigError(
          "shortcut requires output stride 16 (arrangement table: shortcuts only with OS16)");
    }
    if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
    if (!(width_multiplier > 0)) throw ConfigError("width multiplier must be positive");
    if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
  }
};

inline constexpr std::array<std::string_view, 9> kArrangementNames = {
    "CM0", "CM1", "CM2", "CM3", "CM4", "CM5", "CM6", "CM7", "CM8"};

/// CM0..CM8 at width 1.0.
inline ArrangementConfig arrangement(std::string_view name) {
  struct Row {
    std::string_view name;
    int os;
    PyramidKind pyramid;
    bool shortcut;
  };
  static constexpr std::array<Row, 9> rows = {{
      {"CM0", 8, PyramidKind::gpp, false},
      {"CM1", 8, PyramidKind::spp, false},
      {"CM2", 8, PyramidKind::aspp, false},
      {"CM3", 16, PyramidKind::gpp, false},
      {"CM4", 16, PyramidKind::spp, false},
      {"CM5", 16, PyramidKind::aspp, false},
      {"CM6", 16, PyramidKind::gpp, true},
      {"CM7", 16, PyramidKind::spp, true},
      {"CM8", 16, PyramidKind::aspp, true},
  }};
  for (const auto& r : rows) {
    if (r.name == name) {
      ArrangementConfig c;
      c.name = std::string(r.name);
      c.output_stride = r.os;
      c.pyramid = r.pyramid;
      c.shortcut = r.shortcut;
      return c;
    }
  }
  throw ConfigError("unknown arrangement '" + std::string(name) + "' (expected CM0..CM8)");
}

/// Inverted-residual group: expansion e, output channels d, repeats n,
/// stride s of the first block, dilation of every block.
struct BottleneckSpec {
  int expansion = 1;
  std::size_t out_channels = 0;
  int repeats = 1;
  int stride = 1;
  int dilation = 1;
};

inline constexpr std::size_t kStemChannels = 32;

/// MobileNetV2 groups with the 160-group stride removed (final row 320 kept,
/// final 1x1x1280 conv and pooling dropped).
inline constexpr std::array<BottleneckSpec, 7> kBackboneGroups = {{
    {1, 16, 1, 1, 1},
    {6, 24, 2, 2, 1},
    {6, 32, 3, 2, 1},
    {6, 64, 4, 2, 1},
    {6, 96, 3, 1, 1},
    {6, 160, 3, 1, 1},
    {6, 320, 1, 1, 1},
}};

/// Index of the group whose output is the stride-4 shortcut tap.
inline constexpr std::size_t kTapGroup = 1;

/// Realised strides and dilations for a given output stride. OS16 keeps the
/// 64-group stride and dilates everything after it by 2; OS8 trades the
/// 64-group stride for dilation 2 and dilates later groups by 4.
inline std::vector<BottleneckSpec> backbone_schedule(int output_stride) {
  std::vector<BottleneckSpec> groups(kBackboneGroups.begin(), kBackboneGroups.end());
  if (output_stride == 16) {
    for (std::size_t g = 4; g < groups.size(); ++g) groups[g].dilation = 2;
  } else if (output_stride == 8) {
    groups[3].stride = 1;
    groups[3].dilation = 2;
    for (std::size_t g = 4; g < groups.size(); ++g) groups[g].dilation = 4;
  } else {
    throw ConfigError("output stride must be 8 or 16, got " + std::to_string(output_stride));
  }
  return groups;
}

inline std::size_t scale_channels(std::size_t channels, double width) {
  const auto v = static_cast<std::size_t>(std::llround(static_cast<double>(channels) * width));
  return std::max<std::size_t>(1, v);
}

inline std::array<int, 4> aspp_rates(int output_stride) {
  if (output_stride == 16) return {1, 6, 12, 18};
  if (output_stride == 8) return {1, 12, 24, 36};
  throw ConfigError("output stride must be 8 or 16, got " + std::to_string(output_stride));
}

/// Pyramid bins for SPP: global, then ceil(dim * f) for f in {1/2, 1/3, 1/6}
/// with a floor of one cell.
inline std::array<std::pair<std::size_t, std::size_t>, 4> spp_bins(std::size_t h, std::size_t w) {
  auto frac = [](std::size_t dim, std::size_t den) {
    return std::max<std::size_t>(1, (dim + den - 1) / den);
  };
  return {{{1, 1}, {frac(h, 2), frac(w, 2)}, {frac(h, 3), frac(w, 3)}, {frac(h, 6), frac(w, 6)}}};
}

// ---------------------------------------------------------------------------
// Layers

struct InputLayer {};

template <class T>
struct ConvLayer {
  BasicKernel<T> weight;
  ConvSpec spec;
  bool has_bias = false;
  std::vector<T> bias;
  std::vector<T> bias_grad;
};

template <class T>
struct BatchNormLayer {
  BatchNormState<T> state;
  std::vector<T> gamma_grad;
  std::vector<T> beta_grad;
};

struct ActivationLayer {
  Activation act = Activation::relu6;
};
struct AddLayer {};
struct ConcatLayer {};
struct AdaptivePoolLayer {
  std::size_t out_h = 1;
  std::size_t out_w = 1;
};
struct ResizeLayer {
  std::size_t out_h = 1;
  std::size_t out_w = 1;
};

template <class T>
using Layer = std::variant<InputLayer, ConvLayer<T>, BatchNormLayer<T>, ActivationLayer, AddLayer,
                           ConcatLayer, AdaptivePoolLayer, ResizeLayer>;

template <class T>
std::string_view kind_name(const Layer<T>& layer) {
  static constexpr std::array<std::string_view, 8> names = {
      "input", "conv", "batch_norm", "activation", "add", "concat", "adaptive_avg_pool", "resize"};
  return names[layer.index()];
}

template <class T>
struct Node {
  std::string name;
  Layer<T> layer;
  std::vector<std::size_t> inputs;
  Shape shape;  // output shape for the declared input
};

/// Mutable view of one learnable (or buffer) vector.
template <class T>
struct ParamRef {
  std::string name;
  std::vector<std::size_t> shape;
  std::span<T> value;
  std::span<T> grad;  // empty for buffers
};

/// One row of the backbone layout report (declared stride, as in the table).
struct StageRecord {
  std::string op;
  std::size_t in_h = 0;
  std::size_t in_w = 0;
  std::size_t in_c = 0;
  int expansion = 0;
  std::size_t out_channels = 0;
  int repeats = 1;
  int stride = 1;
  int realized_stride = 1;
  int dilation = 1;
};

template <class T>
struct Trace {
  std::vector<BasicTensor<T>> values;
  std::vector<BatchNormCache<T>> bn;  // indexed by node, empty for other kinds
};

struct NodeShape {
  std::string name;
  std::string kind;
  Shape shape;
};

template <class T>
class BasicNetwork {
 public:
  explicit BasicNetwork(Shape input_shape) : input_shape_(input_shape) {
    if (input_shape.c == 0 || input_shape.h == 0 || input_shape.w == 0) {
      throw DimensionError("network input shape must be non-empty, got " + input_shape.to_string());
    }
    nodes_.push_back({"input", InputLayer{}, {}, input_shape});
  }

  /// Appends a node, inferring (and thereby validating) its output shape.
  std::size_t add(std::string name, Layer<T> layer, std::vector<std::size_t> inputs) {
    for (auto i : inputs) {
      if (i >= nodes_.size()) throw DimensionError("node '" + name + "' refers to a later node");
    }
    Node<T> node{std::move(name), std::move(layer), std::move(inputs), {}};
    node.shape = infer_node_shape(node);
    nodes_.push_back(std::move(node));
    output_ = nodes_.size() - 1;
    return output_;
  }

  const std::vector<Node<T>>& nodes() const { return nodes_; }
  Node<T>& node(std::size_t i) { return nodes_.at(i); }
  const Node<T>& node(std::size_t i) const { return nodes_.at(i); }
  std::size_t size() const { return nodes_.size(); }

  std::size_t output() const { return output_; }
  void set_output(std::size_t i) { output_ = i; }
  const Shape& input_shape() const { return input_shape_; }
  const Shape& output_shape() const { return nodes_[output_].shape; }

  std::size_t find(std::string_view name) const {
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      if (nodes_[i].name == name) return i;
    throw ConfigError("no node named '" + std::string(name) + "'");
  }

  // Metadata filled by the builders.
  std::optional<ArrangementConfig> config;
  std::vector<StageRecord> stages;
  std::optional<std::size_t> tap;

  std::vector<NodeShape> infer_shapes() const {
    std::vector<NodeShape> out;
    out.reserve(nodes_.size());
    for (const auto& n : nodes_) out.push_back({n.name, std::string(kind_name<T>(n.layer)), n.shape});
    return out;
  }

  void check_input(const Shape& s) const {
    if (s.n == 0 || s.c != input_shape_.c || s.h != input_shape_.h || s.w != input_shape_.w) {
      throw DimensionError("input " + s.to_string() + " does not match declared (c,h,w) of " +
                           input_shape_.to_string());
    }
  }

  /// Runs the graph. Train mode uses batch statistics and updates the BN
  /// running statistics; with a trace, activations are kept for backward.
  BasicTensor<T> forward(const BasicTensor<T>& input, Mode mode, Trace<T>* trace = nullptr) {
    check_input(input.shape());
    for (auto& n : nodes_)
      if (auto* bn = std::get_if<BatchNormLayer<T>>(&n.layer)) bn->state.mode = mode;
    return run(input, trace, mode);
  }

  /// Inference-mode forward; does not mutate the network.
  BasicTensor<T> infer(const BasicTensor<T>& input) const {
    check_input(input.shape());
    return const_cast<BasicNetwork*>(this)->run(input, nullptr, Mode::infer);
  }

  /// Accumulates parameter gradients from d loss / d output.
  void backward(const Trace<T>& trace, const BasicTensor<T>& grad_output) {
    if (trace.values.size() != nodes_.size()) throw DimensionError("trace does not match network");
    std::vector<BasicTensor<T>> grads(nodes_.size());
    std::vector<bool> has(nodes_.size(), false);
    grads[output_] = BasicTensor<T>(grad_output.shape(), grad_output.values());
    has[output_] = true;
    auto accumulate = [&](std::size_t i, BasicTensor<T>&& g) {
      if (!has[i]) {
        grads[i] = std::move(g);
        has[i] = true;
      } else {
        auto dst = grads[i].data();
        auto src = g.data();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += src[k];
      }
    };
    for (std::size_t i = output_; i >= 1; --i) {
      if (!has[i]) continue;
      auto& node = nodes_[i];
      const auto& g = grads[i];
      std::visit(
          [&](auto& layer) {
            using L = std::decay_t<decltype(layer)>;
            const auto& x = trace.values[node.inputs.empty() ? 0 : node.inputs[0]];
            if constexpr (std::is_same_v<L, ConvLayer<T>>) {
              auto cg = conv2d_backward(x, layer.weight, layer.spec, g);
              auto wg = layer.weight.grad();
              auto src = cg.kernel.data();
              for (std::size_t k = 0; k < wg.size(); ++k) wg[k] += src[k];
              if (layer.has_bias)
                for (std::size_t k = 0; k < layer.bias_grad.size(); ++k)
                  layer.bias_grad[k] += cg.bias[k];
              accumulate(node.inputs[0], std::move(cg.input));
            } else if constexpr (std::is_same_v<L, BatchNormLayer<T>>) {
              auto bg = batch_norm_backward(g, layer.state, trace.bn[i]);
              for (std::size_t k = 0; k < bg.gamma.size(); ++k) {
                layer.gamma_grad[k] += bg.gamma[k];
                layer.beta_grad[k] += bg.beta[k];
              }
              accumulate(node.inputs[0], std::move(bg.input));
            } else if constexpr (std::is_same_v<L, ActivationLayer>) {
              accumulate(node.inputs[0], activate_backward(x, g, layer.act));
            } else if constexpr (std::is_same_v<L, AddLayer>) {
              for (auto in : node.inputs) accumulate(in, BasicTensor<T>(g.shape(), g.values()));
            } else if constexpr (std::is_same_v<L, ConcatLayer>) {
              std::vector<std::size_t> counts;
              for (auto in : node.inputs) counts.push_back(trace.values[in].shape().c);
              auto parts = split_channels(g, counts);
              for (std::size_t k = 0; k < parts.size(); ++k)
                accumulate(node.inputs[k], std::move(parts[k]));
            } else if constexpr (std::is_same_v<L, AdaptivePoolLayer>) {
              accumulate(node.inputs[0], adaptive_avg_pool_backward(x.shape(), g));
            } else if constexpr (std::is_same_v<L, ResizeLayer>) {
              accumulate(node.inputs[0], bilinear_resize_backward(x.shape(), g));
            }
          },
          node.layer);
    }
  }

  void zero_grad() {
    for (auto& n : nodes_) {
      if (auto* c = std::get_if<ConvLayer<T>>(&n.layer)) {
        c->weight.zero_grad();
        std::fill(c->bias_grad.begin(), c->bias_grad.end(), T{0});
      } else if (auto* bn = std::get_if<BatchNormLayer<T>>(&n.layer)) {
        std::fill(bn->gamma_grad.begin(), bn->gamma_grad.end(), T{0});
        std::fill(bn->beta_grad.begin(), bn->beta_grad.end(), T{0});
      }
    }
  }

  /// Learnable vectors in node order: conv weight/bias, BN gamma/beta.
  std::vector<ParamRef<T>> parameters() { return collect(false); }

  /// Learnables plus BN running statistics (everything a checkpoint stores).
  std::vector<ParamRef<T>> state_tensors() { return collect(true); }

  std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& n : nodes_) {
      if (const auto* c = std::get_if<ConvLayer<T>>(&n.layer)) {
        total += c->weight.size() + (c->has_bias ? c->bias.size() : 0);
      } else if (const auto* bn = std::get_if<BatchNormLayer<T>>(&n.layer)) {
        total += 2 * bn->state.channels();
      }
    }
    return total;
  }

 private:
  Shape infer_node_shape(const Node<T>& node) const {
    auto in_shape = [&](std::size_t k) -> const Shape& { return nodes_[node.inputs.at(k)].shape; };
    auto need = [&](std::size_t count) {
      if (node.inputs.size() != count) {
        throw DimensionError("node '" + node.name + "' expects " + std::to_string(count) +
                             " input(s)");
      }
    };
    return std::visit(
        [&](const auto& layer) -> Shape {
          using L = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<L, InputLayer>) {
            throw ConfigError("only one input node is allowed");
          } else if constexpr (std::is_same_v<L, ConvLayer<T>>) {
            need(1);
            if (layer.has_bias && layer.bias.size() != layer.weight.shape().out) {
              throw DimensionError("node '" + node.name + "': bias length mismatch");
            }
            return conv_output_shape(in_shape(0), layer.weight.shape(), layer.spec);
          } else if constexpr (std::is_same_v<L, BatchNormLayer<T>>) {
            need(1);
            if (layer.state.channels() != in_shape(0).c) {
              throw DimensionError("node '" + node.name + "': batch norm channels " +
                                   std::to_string(layer.state.channels()) + " vs input channels " +
                                   std::to_string(in_shape(0).c));
            }
            return in_shape(0);
          } else if constexpr (std::is_same_v<L, ActivationLayer>) {
            need(1);
            return in_shape(0);
          } else if constexpr (std::is_same_v<L, AddLayer>) {
            need(2);
            if (in_shape(0) != in_shape(1)) {
              throw DimensionError("node '" + node.name + "': add of " + in_shape(0).to_string() +
                                   " and " + in_shape(1).to_string());
            }
            return in_shape(0);
          } else if constexpr (std::is_same_v<L, ConcatLayer>) {
            if (node.inputs.empty()) throw DimensionError("concat without inputs");
            Shape s = in_shape(0);
            s.c = 0;
            for (std::size_t k = 0; k < node.inputs.size(); ++k) {
              const Shape& o = in_shape(k);
              if (o.h != s.h || o.w != s.w) {
                throw DimensionError("node '" + node.name + "': concat spatial mismatch");
              }
              s.c += o.c;
            }
            return s;
          } else if constexpr (std::is_same_v<L, AdaptivePoolLayer>) {
            need(1);
            detail::check_adaptive(in_shape(0), layer.out_h, layer.out_w);
            return {in_shape(0).n, in_shape(0).c, layer.out_h, layer.out_w};
          } else {
            need(1);
            if (layer.out_h == 0 || layer.out_w == 0) {
              throw DimensionError("node '" + node.name + "': resize to empty extent");
            }
            return {in_shape(0).n, in_shape(0).c, layer.out_h, layer.out_w};
          }
        },
        node.layer);
  }

  BasicTensor<T> run(const BasicTensor<T>& input, Trace<T>* trace, Mode mode) {
    std::vector<BasicTensor<T>> values(nodes_.size());
    // Values needed by later nodes; everything else is released early unless traced.
    std::vector<std::size_t> last_use(nodes_.size(), 0);
    for (std::size_t i = 0; i < nodes_.size(); ++i)
      for (auto in : nodes_[i].inputs) last_use[in] = std::max(last_use[in], i);
    if (trace) trace->bn.assign(nodes_.size(), {});
    values[0] = BasicTensor<T>(input.shape(), input.values());
    for (std::size_t i = 1; i <= output_; ++i) {
      auto& node = nodes_[i];
      const auto& x = values[node.inputs[0]];
      values[i] = std::visit(
          [&](auto& layer) -> BasicTensor<T> {
            using L = std::decay_t<decltype(layer)>;
            if constexpr (std::is_same_v<L, ConvLayer<T>>) {
              if (layer.has_bias) {
                return conv2d<T>(x, layer.weight, std::span<const T>(layer.bias), layer.spec);
              }
              return conv2d<T>(x, layer.weight, std::nullopt, layer.spec);
            } else if constexpr (std::is_same_v<L, BatchNormLayer<T>>) {
              BatchNormCache<T>* cache = trace ? &trace->bn[i] : nullptr;
              if (mode == Mode::infer) return batch_norm_infer(x, layer.state, cache);
              return batch_norm(x, layer.state, cache);
            } else if constexpr (std::is_same_v<L, ActivationLayer>) {
              return activate(x, layer.act);
            } else if constexpr (std::is_same_v<L, AddLayer>) {
              return cmsnet::add(x, values[node.inputs[1]]);
            } else if constexpr (std::is_same_v<L, ConcatLayer>) {
              TensorRefs<T> refs;
              for (auto in : node.inputs) refs.push_back(std::cref(values[in]));
              return concat_channels(refs);
            } else if constexpr (std::is_same_v<L, AdaptivePoolLayer>) {
              return adaptive_avg_pool(x, layer.out_h, layer.out_w);
            } else if constexpr (std::is_same_v<L, ResizeLayer>) {
              return bilinear_resize(x, layer.out_h, layer.out_w);
            } else {
              throw ConfigError("unexpected input node inside the graph");
            }
          },
          node.layer);
      if (!trace) {
        for (auto in : node.inputs)
          if (last_use[in] == i && in != output_) values[in] = BasicTensor<T>();
      }
    }
    BasicTensor<T> out(values[output_].shape(), values[output_].values());
    if (trace) trace->values = std::move(values);
    return out;
  }

  std::vector<ParamRef<T>> collect(bool with_buffers) {
    std::vector<ParamRef<T>> refs;
    for (auto& n : nodes_) {
      if (auto* c = std::get_if<ConvLayer<T>>(&n.layer)) {
        const auto d = c->weight.shape().dims();
        refs.push_back({n.name + ".weight", {d.begin(), d.end()}, c->weight.data(), c->weight.grad()});
        if (c->has_bias) refs.push_back({n.name + ".bias", {c->bias.size()}, c->bias, c->bias_grad});
      } else if (auto* bn = std::get_if<BatchNormLayer<T>>(&n.layer)) {
        const std::size_t ch = bn->state.channels();
        refs.push_back({n.name + ".gamma", {ch}, bn->state.gamma, bn->gamma_grad});
        refs.push_back({n.name + ".beta", {ch}, bn->state.beta, bn->beta_grad});
        if (with_buffers) {
          refs.push_back({n.name + ".running_mean", {ch}, bn->state.running_mean, {}});
          refs.push_back({n.name + ".running_var", {ch}, bn->state.running_var, {}});
        }
      }
    }
    return refs;
  }

  Shape input_shape_;
  std::vector<Node<T>> nodes_;
  std::size_t output_ = 0;
};

using Network = BasicNetwork<float>;

template <class T>
std::size_t count_parameters(const BasicNetwork<T>& net) {
  return net.parameter_count();
}

template <class T>
std::vector<NodeShape> infer_shapes(const BasicNetwork<T>& net) {
  return net.infer_shapes();
}

/// Per-pixel argmax over channels; ties resolve to the lowest class index.
template <class T>
LabelMap argmax_labels(const BasicTensor<T>& logits) {
  const Shape& s = logits.shape();
  LabelMap out(s.n, s.h, s.w);
  const std::size_t plane = s.h * s.w;
  auto x = logits.data();
  for (std::size_t b = 0; b < s.n; ++b)
    for (std::size_t p = 0; p < plane; ++p) {
      std::int32_t best = 0;
      T best_v = x[(b * s.c) * plane + p];
      for (std::size_t c = 1; c < s.c; ++c) {
        const T v = x[(b * s.c + c) * plane + p];
        if (v > best_v) {
          best_v = v;
          best = static_cast<std::int32_t>(c);
        }
      }
      out.labels[b * plane + p] = best;
    }
  return out;
}

template <class T>
LabelMap predict(const BasicNetwork<T>& net, const BasicTensor<T>& image) {
  return argmax_labels(net.infer(image));
}

// ---------------------------------------------------------------------------
// Builders

namespace build {

/// Fan-in scaled Gaussian weights, unit gamma / zero beta.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  template <class T>
  BasicKernel<T> kernel(const KernelShape& shape) {
    BasicKernel<T> k(shape);
    const double fan_in = static_cast<double>(shape.in * shape.kh * shape.kw);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
    for (auto& v : k.data()) v = static_cast<T>(dist(rng_));
    return k;
  }

 private:
  std::mt19937_64 rng_;
};

template <class T>
std::size_t conv(BasicNetwork<T>& net, Initializer& init, const std::string& name, std::size_t input,
                 std::size_t out_channels, std::size_t kernel, ConvSpec spec, bool bias = false) {
  const std::size_t in_c = net.node(input).shape.c;
  const KernelShape ks = spec.groups == Groups::depthwise
                             ? KernelShape{in_c, 1, kernel, kernel}
                             : KernelShape{out_channels, in_c, kernel, kernel};
  ConvLayer<T> layer{init.kernel<T>(ks), spec, bias, {}, {}};
  if (bias) {
    layer.bias.assign(ks.out, T{0});
    layer.bias_grad.assign(ks.out, T{0});
  }
  return net.add(name, std::move(layer), {input});
}

template <class T>
std::size_t batch_norm(BasicNetwork<T>& net, const std::string& name, std::size_t input) {
  const std::size_t c = net.node(input).shape.c;
  BatchNormLayer<T> layer{BatchNormState<T>(c), std::vector<T>(c, T{0}), std::vector<T>(c, T{0})};
  return net.add(name, std::move(layer), {input});
}

/// conv -> BN -> activation (activation skipped when `act` is none).
template <class T>
std::size_t conv_bn(BasicNetwork<T>& net, Initializer& init, const std::string& name,
                    std::size_t input, std::size_t out_channels, std::size_t kernel, ConvSpec spec,
                    Activation act) {
  std::size_t x = conv(net, init, name + ".conv", input, out_channels, kernel, spec);
  x = batch_norm(net, name + ".bn", x);
  if (act != Activation::none) x = net.add(name + ".act", ActivationLayer{act}, {x});
  return x;
}

/// conv with bias -> activation. Used on 1x1 pooled maps, where batch
/// statistics would be taken over as few values as there are batch items.
template <class T>
std::size_t conv_act(BasicNetwork<T>& net, Initializer& init, const std::string& name,
                     std::size_t input, std::size_t out_channels, Activation act) {
  std::size_t x = conv(net, init, name + ".conv", input, out_channels, 1, ConvSpec{}, true);
  if (act != Activation::none) x = net.add(name + ".act", ActivationLayer{act}, {x});
  return x;
}

/// Expand (1x1, skipped when e = 1) -> depthwise 3x3 -> linear 1x1 project,
/// residual add iff stride 1 and channel counts match.
template <class T>
std::size_t bottleneck(BasicNetwork<T>& net, Initializer& init, const std::string& name,
                       std::size_t input, int expansion, std::size_t out_channels, int stride,
                       int dilation, Activation act) {
  const std::size_t in_c = net.node(input).shape.c;
  std::size_t x = input;
  if (expansion != 1) {
    const auto hidden = static_cast<std::size_t>(std::llround(static_cast<double>(in_c) * expansion));
    x = conv_bn(net, init, name + ".expand", x, hidden, 1, ConvSpec{}, act);
  }
  ConvSpec dw{static_cast<std::size_t>(stride), static_cast<std::size_t>(dilation),
              Padding::same_ceil, Groups::depthwise};
  x = conv_bn(net, init, name + ".depthwise", x, 0, 3, dw, act);
  x = conv_bn(net, init, name + ".project", x, out_channels, 1, ConvSpec{}, Activation::none);
  if (stride == 1 && in_c == out_channels) {
    // Residual branches start switched off (zero gamma on the projection BN).
    std::get<BatchNormLayer<T>>(net.node(x).layer).state.gamma.assign(out_channels, T{0});
    x = net.add(name + ".add", AddLayer{}, {input, x});
  }
  return x;
}

struct BackboneNodes {
  std::size_t features = 0;
  std::size_t tap = 0;
  std::vector<StageRecord> stages;
};

template <class T>
BackboneNodes backbone(BasicNetwork<T>& net, Initializer& init, std::size_t input, int output_stride,
                       double width, Activation act) {
  const auto schedule = backbone_schedule(output_stride);
  BackboneNodes out;
  const Shape& in = net.node(input).shape;
  const std::size_t stem_c = scale_channels(kStemChannels, width);
  out.stages.push_back({"conv2d", in.h, in.w, in.c, 0, stem_c, 1, 2, 2, 1});
  std::size_t x = conv_bn(net, init, "stem", input, stem_c, 3, ConvSpec{2, 1}, act);
  for (std::size_t g = 0; g < schedule.size(); ++g) {
    const auto& spec = schedule[g];
    const Shape& s = net.node(x).shape;
    const std::size_t out_c = scale_channels(spec.out_channels, width);
    out.stages.push_back({"bottleneck", s.h, s.w, s.c, spec.expansion, out_c, spec.repeats,
                          kBackboneGroups[g].stride, spec.stride, spec.dilation});
    for (int b = 0; b < spec.repeats; ++b) {
      const std::string name = "g" + std::to_string(g) + ".b" + std::to_string(b);
      x = bottleneck(net, init, name, x, spec.expansion, out_c, b == 0 ? spec.stride : 1,
                     spec.dilation, act);
    }
    if (g == kTapGroup) out.tap = x;
  }
  out.features = x;
  return out;
}

/// Appends a pyramid head on `features`; returns the concat node.
template <class T>
std::size_t pyramid(BasicNetwork<T>& net, Initializer& init, std::size_t features, PyramidKind kind,
                    int output_stride, double width, Activation act) {
  const Shape f = net.node(features).shape;
  const std::size_t branch_c = scale_channels(256, width);
  switch (kind) {
    case PyramidKind::gpp: {
      std::size_t x = net.add("gpp.pool", AdaptivePoolLayer{1, 1}, {features});
      x = conv_act(net, init, "gpp.proj", x, branch_c, act);
      x = net.add("gpp.upsample", ResizeLayer{f.h, f.w}, {x});
      return net.add("gpp.concat", ConcatLayer{}, {features, x});
    }
    case PyramidKind::spp: {
      const std::size_t level_c = std::max<std::size_t>(1, f.c / 4);
      std::vector<std::size_t> parts{features};
      const auto bins = spp_bins(f.h, f.w);
      for (std::size_t k = 0; k < bins.size(); ++k) {
        const std::string name = "spp.level" + std::to_string(k);
        std::size_t x = net.add(name + ".pool", AdaptivePoolLayer{bins[k].first, bins[k].second},
                                {features});
        x = bins[k].first * bins[k].second == 1
                ? conv_act(net, init, name + ".proj", x, level_c, act)
                : conv_bn(net, init, name + ".proj", x, level_c, 1, ConvSpec{}, act);
        parts.push_back(net.add(name + ".upsample", ResizeLayer{f.h, f.w}, {x}));
      }
      return net.add("spp.concat", ConcatLayer{}, std::move(parts));
    }
    case PyramidKind::aspp: {
      std::vector<std::size_t> parts;
      for (int rate : aspp_rates(output_stride)) {
        const std::string name = "aspp.rate" + std::to_string(rate);
        const std::size_t k = rate == 1 ? 1 : 3;
        ConvSpec spec{1, static_cast<std::size_t>(rate)};
        parts.push_back(conv_bn(net, init, name, features, branch_c, k, spec, act));
      }
      return net.add("aspp.concat", ConcatLayer{}, std::move(parts));
    }
  }
  throw ConfigError("unknown pyramid kind");
}

}  // namespace build

/// Backbone alone; output node is the final 320*w feature map.
template <class T = float>
BasicNetwork<T> build_backbone(int output_stride, std::size_t in_channels, double width_multiplier,
                               Shape input_shape = {1, 3, 483, 769}, std::uint64_t seed = 0) {
  if (output_stride != 8 && output_stride != 16) {
    throw ConfigError("output stride must be 8 or 16, got " + std::to_string(output_stride));
  }
  input_shape.c = in_channels;
  BasicNetwork<T> net(input_shape);
  build::Initializer init(seed);
  auto nodes = build::backbone(net, init, 0, output_stride, width_multiplier, Activation::relu6);
  net.stages = nodes.stages;
  net.tap = nodes.tap;
  net.set_output(nodes.features);
  return net;
}

/// Pyramid alone on a feature map of `feature_shape`; output is the concat.
template <class T = float>
BasicNetwork<T> build_pyramid(PyramidKind kind, Shape feature_shape, int output_stride,
                              double width_multiplier = 1.0, std::uint64_t seed = 0) {
  if (output_stride != 8 && output_stride != 16) {
    throw ConfigError("output stride must be 8 or 16, got " + std::to_string(output_stride));
  }
  BasicNetwork<T> net(feature_shape);
  build::Initializer init(seed);
  build::pyramid(net, init, 0, kind, output_stride, width_multiplier, Activation::relu6);
  return net;
}

/// Full arrangement: backbone -> pyramid -> 1x1 fusion -> [shortcut] ->
/// classifier -> bilinear resize to the input resolution.
///
/// With a shortcut, the fused head features are first resized to the
/// stride-4 tap resolution and the tap, projected to the head width, is added
/// before classification.
template <class T = float>
BasicNetwork<T> build_arrangement(const ArrangementConfig& config, Shape input_shape) {
  config.validate();
  input_shape.c = config.in_channels;
  BasicNetwork<T> net(input_shape);
  net.config = config;
  build::Initializer init(config.init_seed);
  const double w = config.width_multiplier;
  auto bb = build::backbone(net, init, 0, config.output_stride, w, config.activation);
  net.stages = bb.stages;
  net.tap = bb.tap;
  std::size_t x = build::pyramid(net, init, bb.features, config.pyramid, config.output_stride, w,
                                 config.activation);
  const std::size_t head_c = scale_channels(256, w);
  x = build::conv_bn(net, init, "head.fuse", x, head_c, 1, ConvSpec{}, config.activation);
  if (config.shortcut) {
    const Shape tap = net.node(bb.tap).shape;
    x = net.add("shortcut.upsample", ResizeLayer{tap.h, tap.w}, {x});
    const std::size_t proj =
        build::conv_bn(net, init, "shortcut.proj", bb.tap, head_c, 1, ConvSpec{}, Activation::none);
    x = net.add("shortcut.add", AddLayer{}, {x, proj});
  }
  x = build::conv(net, init, "classifier", x, config.num_classes, 1, ConvSpec{}, true);
  net.add("upsample", ResizeLayer{input_shape.h, input_shape.w}, {x});
  return net;
}

}  // namespace cmsnet
