#pragma once

// Checkpoint container: a JSON manifest describing the node list (kinds,
// inputs, specs, inferred shapes) and every stored tensor (name, shape, byte
// offset and length) next to a flat little-endian float32 blob.
//
//   <stem>.json   manifest, "format": "cmsnet-checkpoint", "version": 1
//   <stem>.bin    concatenated float32 tensors in manifest order
//
// Loading rebuilds the graph from the manifest node list and then fills the
// tensors, so any graph the builders produce round-trips bit-exactly.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cmsnet/error.hpp"
#include "cmsnet/network.hpp"

namespace cmsnet {

inline constexpr int kCheckpointVersion = 1;

namespace detail {

inline nlohmann::json shape_json(const Shape& s) { return {s.n, s.c, s.h, s.w}; }
inline Shape shape_from_json(const nlohmann::json& j) {
  return {j.at(0).get<std::size_t>(), j.at(1).get<std::size_t>(), j.at(2).get<std::size_t>(),
          j.at(3).get<std::size_t>()};
}

inline std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::big) {
    v = ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
  }
  return v;
}

inline nlohmann::json arrangement_json(const ArrangementConfig& c) {
  return {{"name", c.name},
          {"output_stride", c.output_stride},
          {"pyramid", to_string(c.pyramid)},
          {"shortcut", c.shortcut},
          {"num_classes", c.num_classes},
          {"width_multiplier", c.width_multiplier},
          {"in_channels", c.in_channels},
          {"activation", to_string(c.activation)},
          {"init_seed", c.init_seed}};
}

inline ArrangementConfig arrangement_from_json(const nlohmann::json& j) {
  ArrangementConfig c;
  c.name = j.value("name", c.name);
  c.output_stride = j.value("output_stride", c.output_stride);
  c.pyramid = parse_pyramid(j.value("pyramid", std::string("GPP")));
  c.shortcut = j.value("shortcut", c.shortcut);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.width_multiplier = j.value("width_multiplier", c.width_multiplier);
  c.in_channels = j.value("in_channels", c.in_channels);
  c.activation = parse_activation(j.value("activation", std::string("relu6")));
  c.init_seed = j.value("init_seed", c.init_seed);
  return c;
}

}  // namespace detail

template <class T>
nlohmann::json checkpoint_manifest(const BasicNetwork<T>& net) {
  using nlohmann::json;
  json nodes = json::array();
  for (const auto& n : net.nodes()) {
    json j{{"name", n.name},
           {"kind", std::string(kind_name<T>(n.layer))},
           {"inputs", n.inputs},
           {"shape", detail::shape_json(n.shape)}};
    std::visit(
        [&](const auto& layer) {
          using L = std::decay_t<decltype(layer)>;
          if constexpr (std::is_same_v<L, ConvLayer<T>>) {
            const auto d = layer.weight.shape().dims();
            j["kernel"] = d;
            j["stride"] = layer.spec.stride;
            j["dilation"] = layer.spec.dilation;
            j["padding"] = layer.spec.padding == Padding::same_ceil ? "same_ceil" : "valid";
            j["groups"] = layer.spec.groups == Groups::dense ? "dense" : "depthwise";
            j["bias"] = layer.has_bias;
          } else if constexpr (std::is_same_v<L, BatchNormLayer<T>>) {
            j["epsilon"] = static_cast<double>(layer.state.epsilon);
            j["momentum"] = static_cast<double>(layer.state.momentum);
          } else if constexpr (std::is_same_v<L, ActivationLayer>) {
            j["activation"] = to_string(layer.act);
          } else if constexpr (std::is_same_v<L, AdaptivePoolLayer> ||
                               std::is_same_v<L, ResizeLayer>) {
            j["out"] = {layer.out_h, layer.out_w};
          }
        },
        n.layer);
    nodes.push_back(std::move(j));
  }
  json manifest{{"format", "cmsnet-checkpoint"},
                {"version", kCheckpointVersion},
                {"dtype", "float32"},
                {"byte_order", "little"},
                {"input_shape", detail::shape_json(net.input_shape())},
                {"output", net.output()},
                {"nodes", std::move(nodes)}};
  if (net.config) manifest["arrangement"] = detail::arrangement_json(*net.config);
  if (net.tap) manifest["tap"] = *net.tap;
  return manifest;
}

/// Writes `<stem>.json` and `<stem>.bin`.
template <class T>
void save_checkpoint(BasicNetwork<T>& net, const std::filesystem::path& stem) {
  auto manifest = checkpoint_manifest(net);
  nlohmann::json tensors = nlohmann::json::array();
  std::string blob;
  for (const auto& ref : net.state_tensors()) {
    const std::size_t offset = blob.size();
    for (T v : ref.value) {
      const float f = static_cast<float>(v);
      const std::uint32_t bits = detail::to_le(std::bit_cast<std::uint32_t>(f));
      char bytes[4];
      std::memcpy(bytes, &bits, 4);
      blob.append(bytes, 4);
    }
    tensors.push_back({{"name", ref.name},
                       {"shape", ref.shape},
                       {"offset", offset},
                       {"bytes", blob.size() - offset}});
  }
  auto bin_path = stem;
  bin_path += ".bin";
  manifest["blob"] = bin_path.filename().string();
  manifest["tensors"] = std::move(tensors);
  auto json_path = stem;
  json_path += ".json";
  if (stem.has_parent_path()) std::filesystem::create_directories(stem.parent_path());
  std::ofstream(json_path) << manifest.dump(2) << '\n';
  std::ofstream bin(bin_path, std::ios::binary);
  bin.write(blob.data(), static_cast<std::streamsize>(blob.size()));
  if (!bin) throw Error("failed to write checkpoint blob " + bin_path.string());
}

template <class T = float>
BasicNetwork<T> load_checkpoint(const std::filesystem::path& stem) {
  using nlohmann::json;
  auto json_path = stem;
  json_path += ".json";
  std::ifstream in(json_path);
  if (!in) throw ParseError("cannot open checkpoint manifest " + json_path.string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ParseError("checkpoint manifest " + json_path.string() + ": " + e.what());
  }
  if (manifest.value("format", "") != "cmsnet-checkpoint" ||
      manifest.value("version", 0) != kCheckpointVersion) {
    throw ParseError("unsupported checkpoint format in " + json_path.string());
  }

  BasicNetwork<T> net(detail::shape_from_json(manifest.at("input_shape")));
  const auto& nodes = manifest.at("nodes");
  for (std::size_t i = 1; i < nodes.size(); ++i) {
    const auto& j = nodes[i];
    const std::string kind = j.at("kind");
    auto inputs = j.at("inputs").get<std::vector<std::size_t>>();
    Layer<T> layer;
    if (kind == "conv") {
      const auto d = j.at("kernel").get<std::vector<std::size_t>>();
      ConvLayer<T> c;
      c.weight = BasicKernel<T>({d.at(0), d.at(1), d.at(2), d.at(3)});
      c.spec.stride = j.at("stride");
      c.spec.dilation = j.at("dilation");
      c.spec.padding = j.at("padding") == "valid" ? Padding::valid : Padding::same_ceil;
      c.spec.groups = j.at("groups") == "depthwise" ? Groups::depthwise : Groups::dense;
      c.has_bias = j.at("bias");
      if (c.has_bias) {
        c.bias.assign(d.at(0), T{0});
        c.bias_grad.assign(d.at(0), T{0});
      }
      layer = std::move(c);
    } else if (kind == "batch_norm") {
      const std::size_t ch = j.at("shape").at(1);
      BatchNormLayer<T> bn{BatchNormState<T>(ch), std::vector<T>(ch, T{0}), std::vector<T>(ch, T{0})};
      bn.state.epsilon = static_cast<T>(j.at("epsilon").get<double>());
      bn.state.momentum = static_cast<T>(j.at("momentum").get<double>());
      layer = std::move(bn);
    } else if (kind == "activation") {
      layer = ActivationLayer{parse_activation(j.at("activation").get<std::string>())};
    } else if (kind == "add") {
      layer = AddLayer{};
    } else if (kind == "concat") {
      layer = ConcatLayer{};
    } else if (kind == "adaptive_avg_pool") {
      layer = AdaptivePoolLayer{j.at("out").at(0), j.at("out").at(1)};
    } else if (kind == "resize") {
      layer = ResizeLayer{j.at("out").at(0), j.at("out").at(1)};
    } else {
      throw ParseError("checkpoint node " + std::to_string(i) + ": unknown kind '" + kind + "'");
    }
    const std::size_t idx = net.add(j.at("name"), std::move(layer), std::move(inputs));
    if (net.node(idx).shape != detail::shape_from_json(j.at("shape"))) {
      throw ParseError("checkpoint node '" + net.node(idx).name + "': shape mismatch");
    }
  }
  net.set_output(manifest.at("output"));
  if (manifest.contains("arrangement")) net.config = detail::arrangement_from_json(manifest["arrangement"]);
  if (manifest.contains("tap")) net.tap = manifest["tap"].get<std::size_t>();

  auto bin_path = stem;
  bin_path += ".bin";
  std::ifstream bin(bin_path, std::ios::binary);
  if (!bin) throw ParseError("cannot open checkpoint blob " + bin_path.string());
  std::string blob((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

  auto refs = net.state_tensors();
  const auto& tensors = manifest.at("tensors");
  if (tensors.size() != refs.size()) throw ParseError("checkpoint tensor count mismatch");
  for (std::size_t k = 0; k < refs.size(); ++k) {
    const auto& t = tensors[k];
    if (t.at("name") != refs[k].name || t.at("shape").get<std::vector<std::size_t>>() != refs[k].shape) {
      throw ParseError("checkpoint tensor '" + refs[k].name + "' does not match the graph");
    }
    const std::size_t offset = t.at("offset");
    const std::size_t bytes = t.at("bytes");
    if (bytes != refs[k].value.size() * 4 || offset + bytes > blob.size()) {
      throw ParseError("checkpoint tensor '" + refs[k].name + "' has a bad byte range");
    }
    for (std::size_t e = 0; e < refs[k].value.size(); ++e) {
      std::uint32_t bits;
      std::memcpy(&bits, blob.data() + offset + 4 * e, 4);
      refs[k].value[e] = static_cast<T>(std::bit_cast<float>(detail::to_le(bits)));
    }
  }
  return net;
}

}  // namespace cmsnet
