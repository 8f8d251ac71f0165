#include <gtest/gtest.h>

#include <fstream>
#include <map>
#include <set>

#include <filesystem>
#include <random>

#include "cmsnet/checkpoint.hpp"
#include "cmsnet/network.hpp"
#include "test_util.hpp"

namespace cmsnet {
namespace {

const Shape kFull{1, 3, 483, 769};

TEST(Arrangements, TableRows) {
  struct Row {
    const char* name;
    int os;
    PyramidKind p;
    bool sc;
  };
  const Row rows[] = {{"CM0", 8, PyramidKind::gpp, false},  {"CM1", 8, PyramidKind::spp, false},
                      {"CM2", 8, PyramidKind::aspp, false}, {"CM3", 16, PyramidKind::gpp, false},
                      {"CM4", 16, PyramidKind::spp, false}, {"CM5", 16, PyramidKind::aspp, false},
                      {"CM6", 16, PyramidKind::gpp, true},  {"CM7", 16, PyramidKind::spp, true},
                      {"CM8", 16, PyramidKind::aspp, true}};
  for (const auto& r : rows) {
    const auto c = arrangement(r.name);
    EXPECT_EQ(c.output_stride, r.os) << r.name;
    EXPECT_EQ(c.pyramid, r.p) << r.name;
    EXPECT_EQ(c.shortcut, r.sc) << r.name;
    EXPECT_EQ(c.width_multiplier, 1.0);
  }
  EXPECT_THROW(arrangement("CM9"), ConfigError);
}

TEST(Arrangements, ShortcutNeedsOs16) {
  auto c = arrangement("CM0");
  c.shortcut = true;
  try {
    build_arrangement<float>(c, {1, 3, 64, 96});
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("arrangement table"), std::string::npos);
  }
  c = arrangement("CM3");
  c.output_stride = 12;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(build_backbone<float>(4, 3, 1.0), ConfigError);
}

TEST(Backbone, FinalFeatureMaps) {
  const auto os16 = build_backbone<float>(16, 3, 1.0, kFull);
  EXPECT_EQ(os16.output_shape(), (Shape{1, 320, 31, 49}));
  const auto os8 = build_backbone<float>(8, 3, 1.0, kFull);
  EXPECT_EQ(os8.output_shape(), (Shape{1, 320, 61, 97}));
}

TEST(Backbone, StageGeometry) {
  // Each declared stride-2 row halves with ceil; OS8 swaps the 64-group
  // stride for dilation.
  const auto os16 = build_backbone<float>(16, 3, 1.0, kFull);
  const std::vector<std::pair<std::size_t, std::size_t>> want16 = {
      {483, 769}, {242, 385}, {242, 385}, {121, 193}, {61, 97}, {31, 49}, {31, 49}, {31, 49}};
  ASSERT_EQ(os16.stages.size(), want16.size());
  for (std::size_t i = 0; i < want16.size(); ++i) {
    EXPECT_EQ(os16.stages[i].in_h, want16[i].first) << i;
    EXPECT_EQ(os16.stages[i].in_w, want16[i].second) << i;
  }
  const auto os8 = build_backbone<float>(8, 3, 1.0, kFull);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(os8.stages[i].in_h, want16[i].first);
  for (std::size_t i = 5; i < 8; ++i) {
    EXPECT_EQ(os8.stages[i].in_h, 61u);
    EXPECT_EQ(os8.stages[i].in_w, 97u);
  }
  EXPECT_EQ(os8.stages[4].realized_stride, 1);
  EXPECT_EQ(os8.stages[4].dilation, 2);
  EXPECT_EQ(os8.stages[5].dilation, 4);
  EXPECT_EQ(os16.stages[5].dilation, 2);
  const int channels[] = {32, 16, 24, 32, 64, 96, 160, 320};
  for (std::size_t i = 0; i < 8; ++i) EXPECT_EQ(os16.stages[i].out_channels, channels[i]);
}

TEST(Backbone, ParameterCountNearReported) {
  const auto bb = build_backbone<float>(16, 3, 1.0, kFull);
  const double p = static_cast<double>(count_parameters(bb));
  EXPECT_NEAR(p, 1.84e6, 0.05 * 1.84e6);
  EXPECT_EQ(count_parameters(build_backbone<float>(8, 3, 1.0, kFull)), count_parameters(bb));
}

TEST(Backbone, ResidualAddsOnlyWhereShapesMatch) {
  auto net = build_backbone<float>(16, 3, 1.0, {1, 3, 64, 64});
  std::size_t adds = 0;
  for (const auto& n : net.nodes()) {
    if (!std::holds_alternative<AddLayer>(n.layer)) continue;
    ++adds;
    const auto& a = net.node(n.inputs[0]).shape;
    const auto& b = net.node(n.inputs[1]).shape;
    EXPECT_EQ(a, b) << n.name;
    EXPECT_NE(n.name.find(".b"), std::string::npos);
    EXPECT_EQ(n.name.find(".b0."), std::string::npos) << "first block of a group: " << n.name;
  }
  // (n - 1) per group, none for the single-block groups: 1+2+3+2+2 = 10.
  EXPECT_EQ(adds, 10u);
}

TEST(Pyramid, Shapes) {
  const Shape f{1, 320, 31, 49};
  auto gpp = build_pyramid<float>(PyramidKind::gpp, f, 16);
  EXPECT_EQ(gpp.output_shape(), (Shape{1, 320 + 256, 31, 49}));
  auto spp = build_pyramid<float>(PyramidKind::spp, f, 16);
  EXPECT_EQ(spp.output_shape(), (Shape{1, 320 + 4 * 80, 31, 49}));
  auto aspp = build_pyramid<float>(PyramidKind::aspp, f, 8);
  EXPECT_EQ(aspp.output_shape(), (Shape{1, 4 * 256, 31, 49}));
  EXPECT_EQ(aspp_rates(8), (std::array<int, 4>{1, 12, 24, 36}));
  EXPECT_EQ(aspp_rates(16), (std::array<int, 4>{1, 6, 12, 18}));
  const auto& r12 = std::get<ConvLayer<float>>(aspp.node(aspp.find("aspp.rate12.conv")).layer);
  EXPECT_EQ(r12.spec.dilation, 12u);
  EXPECT_EQ(r12.weight.shape().kh, 3u);
  EXPECT_EQ(std::get<ConvLayer<float>>(aspp.node(aspp.find("aspp.rate1.conv")).layer).weight.shape().kh,
            1u);
}

TEST(Pyramid, SppBins) {
  const auto bins = spp_bins(31, 49);
  const std::array<std::pair<std::size_t, std::size_t>, 4> want = {
      {{1, 1}, {16, 25}, {11, 17}, {6, 9}}};
  EXPECT_EQ(bins, want);
  const auto tiny = spp_bins(2, 3);
  EXPECT_EQ(tiny[3], (std::pair<std::size_t, std::size_t>{1, 1}));
}

TEST(ParameterCount, SmallLayers) {
  BasicNetwork<float> net({1, 3, 8, 8});
  build::Initializer init(0);
  build::conv(net, init, "c", 0, 32, 3, ConvSpec{}, true);
  EXPECT_EQ(net.parameter_count(), 896u);
  BasicNetwork<float> dw({1, 32, 8, 8});
  build::conv(dw, init, "d", 0, 0, 3, ConvSpec{1, 1, Padding::same_ceil, Groups::depthwise});
  EXPECT_EQ(dw.parameter_count(), 288u);
}

TEST(ParameterCount, ArrangementsNearTable) {
  const std::map<std::string, double> table = {{"CM0", 2144e3}, {"CM1", 2033e3}, {"CM2", 4408e3},
                                               {"CM3", 2144e3}, {"CM4", 2033e3}, {"CM5", 4408e3},
                                               {"CM6", 2150e3}, {"CM7", 2039e3}, {"CM8", 4414e3}};
  std::map<std::string, std::size_t> got;
  for (const auto& [name, want] : table) {
    got[name] = count_parameters(build_arrangement<float>(arrangement(name), kFull));
    EXPECT_NEAR(static_cast<double>(got[name]), want, 0.10 * want) << name;
  }
  EXPECT_EQ(got["CM0"], got["CM3"]);
  EXPECT_EQ(got["CM1"], got["CM4"]);
  EXPECT_EQ(got["CM2"], got["CM5"]);
  const std::size_t delta = got["CM6"] - got["CM3"];
  EXPECT_GT(delta, 0u);
  EXPECT_EQ(got["CM7"] - got["CM4"], delta);
  EXPECT_EQ(got["CM8"] - got["CM5"], delta);
  for (const char* aspp : {"CM2", "CM5", "CM8"})
    for (const char* other : {"CM0", "CM1", "CM3", "CM4", "CM6", "CM7"}) EXPECT_GT(got[aspp], got[other]);
}

TEST(Forward, LogitsMatchInputForAllArrangements) {
  for (auto name : kArrangementNames) {
    auto cfg = arrangement(name);
    cfg.width_multiplier = 0.25;
    const auto net = build_arrangement<float>(cfg, {2, 3, 64, 96});
    EXPECT_EQ(net.output_shape(), (Shape{2, 4, 64, 96})) << name;
    Tensor x({2, 3, 64, 96}, 0.5f);
    EXPECT_EQ(net.infer(x).shape(), (Shape{2, 4, 64, 96})) << name;
  }
}

TEST(Forward, DeterministicAndShapeChecked) {
  auto cfg = arrangement("CM8");
  cfg.width_multiplier = 0.125;
  const auto net = build_arrangement<float>(cfg, {1, 3, 32, 48});
  std::mt19937_64 rng(3);
  const auto x = test::random_array<Tensor>({1, 3, 32, 48}, rng, 0, 1);
  EXPECT_EQ(net.infer(x).values(), net.infer(x).values());
  EXPECT_THROW(net.infer(Tensor({1, 3, 32, 40})), DimensionError);
  EXPECT_THROW(net.infer(Tensor({1, 1, 32, 48})), DimensionError);
}

TEST(Forward, ZeroClassifierPredictsClassZero) {
  auto cfg = arrangement("CM4");
  cfg.width_multiplier = 0.125;
  auto net = build_arrangement<float>(cfg, {1, 3, 32, 32});
  auto& cls = std::get<ConvLayer<float>>(net.node(net.find("classifier")).layer);
  cls.weight.fill(0);
  std::fill(cls.bias.begin(), cls.bias.end(), 0.0f);
  std::mt19937_64 rng(4);
  const auto labels = predict(net, test::random_array<Tensor>({1, 3, 32, 32}, rng, 0, 1));
  for (auto v : labels.labels) EXPECT_EQ(v, 0);
}

TEST(Forward, ArgmaxTieBreak) {
  BasicTensor<double> logits({1, 3, 1, 2}, std::vector<double>{1, 0, 1, 2, 0, 2});
  EXPECT_EQ(argmax_labels(logits).labels, (std::vector<std::int32_t>{0, 1}));
}

TEST(Graph, InferShapesListsEveryNode) {
  auto cfg = arrangement("CM6");
  cfg.width_multiplier = 0.25;
  const auto net = build_arrangement<float>(cfg, {1, 3, 64, 96});
  const auto shapes = infer_shapes(net);
  ASSERT_EQ(shapes.size(), net.size());
  EXPECT_EQ(shapes.front().kind, "input");
  EXPECT_EQ(shapes.back().name, "upsample");
  EXPECT_EQ(shapes[net.find("shortcut.add")].shape.h, 16u);
  EXPECT_EQ(shapes[*net.tap].shape.h, 16u);
}

TEST(Graph, ParametersReachableOnce) {
  auto cfg = arrangement("CM7");
  cfg.width_multiplier = 0.25;
  auto net = build_arrangement<float>(cfg, {1, 3, 32, 32});
  std::set<const float*> seen;
  std::size_t total = 0;
  for (const auto& p : net.parameters()) {
    EXPECT_TRUE(seen.insert(p.value.data()).second) << p.name;
    total += p.value.size();
  }
  EXPECT_EQ(total, net.parameter_count());
}

// Micro arrangement end to end, double precision. BN gammas are randomised so
// residual branches (zero-initialised) carry gradient.
TEST(Gradients, MicroArrangementEndToEnd) {
  for (const char* name : {"CM1", "CM8"}) {
    auto cfg = arrangement(name);
    cfg.width_multiplier = 0.125;
    cfg.num_classes = 3;
    cfg.init_seed = 5;
    auto net = build_arrangement<double>(cfg, {2, 3, 32, 32});
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> u(0.5, 1.5);
    for (std::size_t i = 0; i < net.size(); ++i)
      if (auto* bn = std::get_if<BatchNormLayer<double>>(&net.node(i).layer))
        for (auto& g : bn->state.gamma) g = u(rng);
    const auto x = test::random_tensor({2, 3, 32, 32}, rng);
    LabelMap y(2, 32, 32);
    for (auto& v : y.labels) v = static_cast<std::int32_t>(rng() % 3);

    Trace<double> trace;
    net.zero_grad();
    const auto out = net.forward(x, Mode::train, &trace);
    net.backward(trace, softmax_cross_entropy(out, y).grad);
    auto loss = [&] { return softmax_cross_entropy(net.forward(x, Mode::train), y).loss; };

    double worst = 0;
    for (auto& p : net.parameters()) {
      std::vector<double> analytic(p.grad.begin(), p.grad.end());
      // A handful of entries per tensor keeps the run short.
      for (std::size_t k = 0; k < std::min<std::size_t>(p.value.size(), 4); ++k) {
        const std::size_t i = (k * 7919) % p.value.size();
        const double old = p.value[i];
        // Thousands of ReLU6 inputs sit near a kink; 1e-6 already crosses some.
        // 16x16 leaves 1x1 maps at OS16 where batch-2 BN is too sharp for any usable step.
        const double h = 1e-7;
        p.value[i] = old + h;
        const double lp = loss();
        p.value[i] = old - h;
        const double lm = loss();
        p.value[i] = old;
        worst = std::max(worst, test::rel_error(analytic[i], (lp - lm) / (2 * h), 1e-3));
      }
    }
    EXPECT_LT(worst, 1e-3) << name;
  }
}

TEST(Checkpoint, RoundTripIsBitExact) {
  auto cfg = arrangement("CM8");
  cfg.width_multiplier = 0.125;
  cfg.init_seed = 9;
  auto net = build_arrangement<float>(cfg, {1, 3, 32, 48});
  std::mt19937_64 rng(10);
  // Touch running statistics so buffers are exercised too.
  (void)net.forward(test::random_array<Tensor>({2, 3, 32, 48}, rng, 0, 1).cast<float>(), Mode::train);
  const auto dir = std::filesystem::temp_directory_path() / "cmsnet_ckpt_test";
  std::filesystem::create_directories(dir);
  save_checkpoint(net, dir / "m");
  auto back = load_checkpoint<float>(dir / "m");
  ASSERT_EQ(back.size(), net.size());
  auto a = net.state_tensors();
  auto b = back.state_tensors();
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    ASSERT_EQ(a[i].name, b[i].name);
    ASSERT_TRUE(std::equal(a[i].value.begin(), a[i].value.end(), b[i].value.begin(), b[i].value.end()))
        << a[i].name;
  }
  ASSERT_TRUE(back.config.has_value());
  EXPECT_EQ(back.config->name, "CM8");
  const auto x = test::random_array<Tensor>({1, 3, 32, 48}, rng, 0, 1);
  EXPECT_EQ(net.infer(x).values(), back.infer(x).values());
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, RejectsCorruptFiles) {
  const auto dir = std::filesystem::temp_directory_path() / "cmsnet_ckpt_bad";
  std::filesystem::create_directories(dir);
  EXPECT_THROW(load_checkpoint<float>(dir / "missing"), ParseError);
  std::ofstream(dir / "bad.json") << "{\"format\": \"other\"}";
  EXPECT_THROW(load_checkpoint<float>(dir / "bad"), ParseError);
  auto net = build_backbone<float>(16, 3, 0.125, {1, 3, 16, 16});
  save_checkpoint(net, dir / "short");
  std::filesystem::resize_file(dir / "short.bin", 8);
  EXPECT_THROW(load_checkpoint<float>(dir / "short"), ParseError);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace cmsnet
