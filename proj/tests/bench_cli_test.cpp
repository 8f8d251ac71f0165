#include <gtest/gtest.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "cmsnet/bench.hpp"
#include "cmsnet/cli.hpp"
#include "cmsnet/image_io.hpp"

namespace cmsnet {
namespace {

namespace fs = std::filesystem;

// Sort-based oracle for the linear-interpolation rule, written independently.
double oracle_percentile(std::vector<double> v, double p) {
  std::sort(v.begin(), v.end());
  const double h = (static_cast<double>(v.size()) - 1) * p;
  const double lo = std::floor(h), hi = std::ceil(h);
  return v[static_cast<std::size_t>(lo)] +
         (h - lo) * (v[static_cast<std::size_t>(hi)] - v[static_cast<std::size_t>(lo)]);
}

TEST(Percentile, Examples) {
  const std::vector<double> v{1, 2, 3, 4};
  EXPECT_EQ(percentile(v, 0), 1);
  EXPECT_EQ(percentile(v, 1), 4);
  EXPECT_EQ(percentile(v, 0.5), 2.5);
  EXPECT_EQ(percentile(v, 0.25), 1.75);
  const std::vector<double> one{7};
  EXPECT_EQ(percentile(one, 0.3), 7);
  EXPECT_THROW(percentile(std::vector<double>{}, 0.5), EmptyTensorError);
  EXPECT_THROW(percentile(v, 1.5), DomainError);
}

TEST(Summarize, Examples) {
  const std::vector<double> d{50, 50, 50};
  const auto s = summarize(d);
  EXPECT_EQ(s.fps_mean, 20.0);
  EXPECT_EQ(s.std_pct, 0.0);
  const auto b4 = summarize(d, 0, 4);
  EXPECT_EQ(b4.fps_per_image, 80.0);
  EXPECT_EQ(b4.fps_per_image, 4 * b4.fps_mean);
  EXPECT_THROW(summarize(std::vector<double>{1.0}), ConfigError);
}

TEST(Summarize, MatchesTwoPassOracleAndOrdersQuartiles) {
  std::mt19937_64 rng(17);
  std::lognormal_distribution<double> dist(2.0, 0.6);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = 2 + rng() % 60;
    std::vector<double> v(n);
    for (auto& x : v) x = dist(rng);
    const auto s = summarize(v);
    double mean = 0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(n);
    double var = 0;
    for (double x : v) var += (x - mean) * (x - mean);
    const double pct = std::sqrt(var / static_cast<double>(n - 1)) / mean * 100;
    EXPECT_NEAR(s.mean_ms, mean, 1e-9 * mean);
    EXPECT_NEAR(s.std_pct, pct, 1e-9 * std::max(pct, 1.0));
    EXPECT_NEAR(s.fps_mean, 1000.0 / s.mean_ms, 1e-9);
    const auto& b = s.boxplot;
    EXPECT_LE(b.min, b.q1);
    EXPECT_LE(b.q1, b.median);
    EXPECT_LE(b.median, b.q3);
    EXPECT_LE(b.q3, b.max);
    EXPECT_NEAR(b.q1, oracle_percentile(v, 0.25), 1e-9);
    EXPECT_NEAR(b.median, oracle_percentile(v, 0.5), 1e-9);
    EXPECT_NEAR(b.q3, oracle_percentile(v, 0.75), 1e-9);
    EXPECT_EQ(b.min, *std::min_element(v.begin(), v.end()));
    EXPECT_EQ(b.max, *std::max_element(v.begin(), v.end()));
  }
}

TEST(Benchmark, ConstantStub) {
  // One late scheduler wake-up (20 ms here) in 30 samples is worth ~8% std, so the spread bound
  // gets three attempts; the counts and the mean are checked on every one.
  double best_std = 1e9;
  for (int attempt = 0; attempt < 3 && best_std >= 5.0; ++attempt) {
    std::size_t calls = 0;
    const auto s = benchmark(
        [&](const Tensor&) {
          ++calls;
          std::this_thread::sleep_for(std::chrono::milliseconds(10));
        },
        {1, 3, 8, 8}, 30, 3);
    EXPECT_EQ(calls, 33u);
    EXPECT_EQ(s.iterations, 30u);
    EXPECT_EQ(s.warmup_iterations, 3u);
    EXPECT_NEAR(s.mean_ms, 10.0, 1.5);
    best_std = std::min(best_std, s.std_pct);
  }
  EXPECT_LT(best_std, 5.0);
}

TEST(Benchmark, BatchFpsAndShapeCheck) {
  const auto s = benchmark([](const Tensor&) { std::this_thread::sleep_for(std::chrono::milliseconds(2)); },
                           {4, 3, 8, 8}, 5, 0);
  EXPECT_EQ(s.batch, 4u);
  EXPECT_DOUBLE_EQ(s.fps_per_image, 4 * s.fps_mean);
  EXPECT_THROW(benchmark([](const Tensor&) {}, {1, 3, 8, 8}, 1, 0), ConfigError);

  auto cfg = arrangement("CM0");
  cfg.width_multiplier = 0.125;
  const auto net = build_arrangement<float>(cfg, {1, 3, 32, 32});
  EXPECT_THROW(benchmark(net, {1, 4, 32, 32}, 2, 0), DimensionError);
}

TEST(Distance, Examples) {
  EXPECT_NEAR(distance_response(30, 21.19), 0.3933, 0.001);
  EXPECT_NEAR(distance_response(80, 21.19), 1.0487, 0.0005);
  EXPECT_EQ(distance_response(0, 5), 0.0);
  EXPECT_THROW(distance_response(30, 0), DomainError);
  EXPECT_THROW(distance_response(30, -1), DomainError);
  EXPECT_THROW(distance_response(-1, 10), DomainError);
}

TEST(TimingCsv, Layout) {
  const auto s = summarize(std::vector<double>{10, 20}, 5, 1);
  std::ostringstream os;
  write_timing_csv(os, s);
  EXPECT_EQ(os.str(),
            "iterations,warmup,batch,mean_ms,std_pct,fps,fps_per_image,min,q1,median,q3,max\n"
            "2,5,1,15.0000,47.1405,66.6667,66.6667,10.0000,12.5000,15.0000,17.5000,20.0000\n");
}

// ---------------------------------------------------------------------------
// Command line

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

class CliTest : public ::testing::Test {
 protected:
  void SetUp() override {
    dir_ = fs::temp_directory_path() /
           ("cmsnet_cli_" + std::string(::testing::UnitTest::GetInstance()->current_test_info()->name()));
    fs::remove_all(dir_);
    fs::create_directories(dir_);
    unsetenv(kOutDirEnv);
  }
  void TearDown() override {
    unsetenv(kOutDirEnv);
    fs::remove_all(dir_);
  }
  fs::path dir_;
};

TEST_F(CliTest, DistanceAndExitCodes) {
  auto r = cli({"distance", "--speed", "30", "--fps", "21.19"});
  EXPECT_EQ(r.code, 0);
  EXPECT_EQ(r.out, "0.393 m\n");
  EXPECT_EQ(cli({"distance", "--speed", "30", "--fps", "0"}).code, 1);
  EXPECT_EQ(cli({"frobnicate"}).code, 2);
  EXPECT_EQ(cli({"distance", "--bogus", "1"}).code, 2);
  EXPECT_EQ(cli({"--help"}).code, 0);
  EXPECT_EQ(cli({"--version"}).code, 0);
  EXPECT_EQ(cli({"arch", "show", "CM9"}).code, 1);
  EXPECT_EQ(cli({}).code, 2);
}

TEST_F(CliTest, ArchShow) {
  auto r = cli({"arch", "show", "CM5"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("OS16 / ASPP / no-shortcut"), std::string::npos) << r.out;
  EXPECT_NE(r.out.find("parameters:"), std::string::npos);
  auto j = cli({"arch", "show", "CM8", "--format", "json"});
  ASSERT_EQ(j.code, 0) << j.err;
  const auto doc = nlohmann::json::parse(j.out);
  EXPECT_EQ(doc.at("stages").size(), 8u);
  EXPECT_GT(doc.at("parameters").at("total").get<std::size_t>(), 4'000'000u);
}

TEST_F(CliTest, ConfigMergeFlagsWin) {
  const auto cfg = dir_ / "d.json";
  std::ofstream(cfg) << R"({"speed": 80, "fps": 21.19})";
  auto r = cli({"distance", "--config", cfg.string()});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(r.out, "1.049 m\n");
  r = cli({"distance", "--config", cfg.string(), "--speed", "30"});
  EXPECT_EQ(r.out, "0.393 m\n");

  std::ofstream(dir_ / "bad.json") << R"({"speed": 80, "warp": 9})";
  r = cli({"distance", "--config", (dir_ / "bad.json").string(), "--fps", "2"});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("warp"), std::string::npos) << r.err;
  std::ofstream(dir_ / "broken.json") << "{";
  EXPECT_EQ(cli({"distance", "--config", (dir_ / "broken.json").string()}).code, 2);
}

void write_masks(const fs::path& dir, std::uint64_t seed) {
  fs::create_directories(dir);
  std::mt19937_64 rng(seed);
  for (int i = 0; i < 3; ++i) {
    LabelMap m(1, 6, 8);
    for (auto& v : m.labels) v = static_cast<std::int32_t>(rng() % 3);
    write_png(dir / ("m" + std::to_string(i) + ".png"), labels_to_image(m));
  }
}

TEST_F(CliTest, EvalIdenticalDirsAndManifest) {
  write_masks(dir_ / "truth", 1);
  const auto out = dir_ / "ev";
  auto r = cli({"eval", "--pred", (dir_ / "truth").string(), "--truth", (dir_ / "truth").string(),
                "--out", out.string(), "--per-image"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto csv = slurp(out / "metrics.csv");
  EXPECT_NE(csv.find("summary,1.000000,1.000000,1.000000,1.000000"), std::string::npos) << csv;
  EXPECT_TRUE(fs::exists(out / "per_image.csv"));
  EXPECT_NE(slurp(out / "per_image.csv").find("m2.png,1.000000"), std::string::npos);

  const auto manifest = nlohmann::json::parse(slurp(out / "manifest.json"));
  EXPECT_EQ(manifest.at("command"), "eval");
  EXPECT_EQ(manifest.at("seed"), 0);
  EXPECT_TRUE(manifest.at("config").contains("truth"));
  EXPECT_TRUE(manifest.at("versions").contains("eigen"));
  EXPECT_TRUE(manifest.at("versions").contains("libpng"));
  EXPECT_FALSE(manifest.at("timestamp").get<std::string>().empty());
  EXPECT_EQ(csv.find("T"), std::string::npos);  // no timestamp in CSV

  write_masks(dir_ / "other", 2);
  r = cli({"eval", "--pred", (dir_ / "other").string(), "--truth", (dir_ / "truth").string(),
           "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(slurp(out / "metrics.csv").find("summary,1.000000"), std::string::npos);

  EXPECT_EQ(cli({"eval", "--truth", (dir_ / "truth").string(), "--out", out.string()}).code, 2);
}

TEST_F(CliTest, OutDirEnvironment) {
  setenv(kOutDirEnv, dir_.c_str(), 1);
  auto r = cli({"toy", "generate", "--count", "2", "--seed", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(dir_ / "toy_generate" / "manifest.json"));
  EXPECT_TRUE(fs::exists(dir_ / "toy_generate" / "images" / "toy_0001.png"));
  EXPECT_TRUE(fs::exists(dir_ / "toy_generate" / "classes.json"));
  const auto explicit_out = dir_ / "x";
  r = cli({"toy", "generate", "--count", "1", "--out", explicit_out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_TRUE(fs::exists(explicit_out / "masks" / "toy_0000.png"));
}

TEST_F(CliTest, PipelineIsByteReproducible) {
  const auto data = dir_ / "data";
  ASSERT_EQ(cli({"toy", "generate", "--count", "6", "--height", "32", "--width", "48", "--seed", "2",
                 "--out", data.string()})
                .code,
            0);
  const auto cfg = dir_ / "train.json";
  std::ofstream(cfg) << R"({"arch": "CM6", "width_mult": 0.125, "epochs": 2, "batch": 2,
                           "rotate": 5, "crop": 0.1, "quiet": true})";
  auto once = [&](const std::string& tag) {
    const auto model = dir_ / ("model_" + tag);
    auto r = cli({"train", "--config", cfg.string(), "--data", data.string(), "--seed", "4",
                  "--out", model.string()});
    EXPECT_EQ(r.code, 0) << r.err;
    const auto sweep = dir_ / ("sweep_" + tag);
    r = cli({"sweep", "severity", "--checkpoint", (model / "model").string(), "--data",
             data.string(), "--steps", "3", "--seed", "4", "--out", sweep.string()});
    EXPECT_EQ(r.code, 0) << r.err;
    const auto ev = dir_ / ("eval_" + tag);
    r = cli({"eval", "--checkpoint", (model / "model").string(), "--data", data.string(), "--out",
             ev.string()});
    EXPECT_EQ(r.code, 0) << r.err;
    return slurp(model / "loss.csv") + slurp(sweep / "sweep_noise.csv") + slurp(ev / "metrics.csv") +
           slurp(model / "model.bin");
  };
  const auto a = once("a");
  const auto b = once("b");
  EXPECT_FALSE(a.empty());
  EXPECT_EQ(a, b);
  const auto m = nlohmann::json::parse(slurp(dir_ / "model_a" / "manifest.json"));
  EXPECT_EQ(m.at("config").at("arch"), "CM6");
  EXPECT_EQ(m.at("config").at("epochs"), 2);
  EXPECT_EQ(m.at("seed"), 4);
  EXPECT_EQ(m.at("config_file"), cfg.string());
}

TEST_F(CliTest, BenchStub) {
  const auto out = dir_ / "bench";
  auto r = cli({"bench", "--stub-ms", "5", "--iterations", "10", "--warmup", "1", "--batch", "4",
                "--out", out.string()});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto csv = slurp(out / "timing.csv");
  EXPECT_EQ(csv.substr(0, 10), "iterations");
  EXPECT_NE(csv.find("\n10,1,4,"), std::string::npos) << csv;
  EXPECT_TRUE(fs::exists(out / "samples.dat"));
  EXPECT_EQ(cli({"bench", "--batch", "0", "--stub-ms", "1", "--out", out.string()}).code, 2);
}

TEST_F(CliTest, AnnotateRenderAndStats) {
  const auto ann = dir_ / "ann";
  fs::create_directories(ann);
  std::ofstream(ann / "a.json") << R"({"imagePath": "a.png", "imageHeight": 4, "imageWidth": 4,
    "shapes": [{"points": [[0,0],[2,0],[2,4],[0,4]], "label": "road"}]})";
  const auto out = dir_ / "render";
  auto r = cli({"annotate", "render", "--input", ann.string(), "--out", out.string(), "--color"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto mask = image_to_labels(read_png(out / "masks" / "a.png"));
  EXPECT_EQ(std::count(mask.labels.begin(), mask.labels.end(), 1), 8);
  EXPECT_TRUE(fs::exists(out / "color" / "a.png"));
  r = cli({"annotate", "stats", "--input", ann.string(), "--out", (dir_ / "stats").string()});
  ASSERT_EQ(r.code, 0) << r.err;
  EXPECT_NE(r.out.find("road,50.0000,1"), std::string::npos) << r.out;
}

}  // namespace
}  // namespace cmsnet
