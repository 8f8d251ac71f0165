// Acceptance runner: one PASS/FAIL line per criterion, non-zero exit if any fails.
//
//   acceptance [work-dir]

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "annex_example.hpp"
#include "cmsnet/annotation.hpp"
#include "cmsnet/bench.hpp"
#include "cmsnet/cli.hpp"
#include "cmsnet/metrics.hpp"
#include "cmsnet/network.hpp"
#include "metric_oracle.hpp"

namespace fs = std::filesystem;
using namespace cmsnet;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct CliRun {
  int code;
  std::string out;
  std::string err;
};

CliRun cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

void require_cli(const CliRun& r, const std::string& what) {
  if (r.code != 0) throw std::runtime_error(what + " exited " + std::to_string(r.code) + ": " + r.err);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("missing " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::vector<std::vector<std::string>> rows;
  std::istringstream in(slurp(p));
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(prec);
  os << v;
  return os.str();
}

// ---------------------------------------------------------------------------

Outcome shape_table() {
  // (h, w) per backbone row on a 483x769 input.
  const std::array<std::array<int, 2>, 8> os16{{{483, 769}, {242, 385}, {242, 385}, {121, 192},
                                                {61, 97}, {31, 49}, {31, 49}, {31, 49}}};
  const std::array<std::array<int, 2>, 8> os8{{{483, 769}, {242, 385}, {242, 385}, {121, 192},
                                               {61, 97}, {61, 97}, {61, 97}, {61, 97}}};
  int matched = 0, total = 0;
  std::string misses;
  for (const auto& [name, table] : {std::pair{"CM3", os16}, std::pair{"CM0", os8}}) {
    const auto r = cli({"arch", "show", name, "--format", "json"});
    require_cli(r, "arch show");
    const auto doc = nlohmann::json::parse(r.out);
    const auto& stages = doc.at("stages");
    for (std::size_t i = 0; i < table.size(); ++i) {
      ++total;
      const int h = stages.at(i).at("h"), w = stages.at(i).at("w");
      if (h == table[i][0] && w == table[i][1]) {
        ++matched;
      } else {
        misses += std::string(" ") + (table == os16 ? "OS16" : "OS8") + " row " + std::to_string(i + 1) +
                  " " + std::to_string(h) + "x" + std::to_string(w) + " vs " +
                  std::to_string(table[i][0]) + "x" + std::to_string(table[i][1]) + ";";
      }
    }
  }
  return {matched == total, std::to_string(matched) + "/" + std::to_string(total) + " (h,w) pairs" +
                                (misses.empty() ? "" : ", mismatches:" + misses)};
}

Outcome parameter_counts() {
  const Shape input{1, 3, 483, 769};
  const double backbone =
      static_cast<double>(build_backbone<float>(16, 3, 1.0, input).parameter_count());
  const std::array<double, 9> table{2144e3, 2033e3, 4408e3, 2144e3, 2033e3,
                                    4408e3, 2150e3, 2039e3, 4414e3};
  std::array<double, 9> ours{};
  bool ok = std::abs(backbone - 1.84e6) <= 0.05 * 1.84e6;
  std::string detail = "backbone " + std::to_string(static_cast<long>(backbone));
  for (int i = 0; i < 9; ++i) {
    const std::string name = "CM" + std::to_string(i);
    ours[i] = static_cast<double>(build_arrangement<float>(arrangement(name), input).parameter_count());
    const double rel = (ours[i] - table[i]) / table[i];
    ok = ok && std::abs(rel) <= 0.10;
    detail += "; " + name + " " + std::to_string(static_cast<long>(ours[i])) + " (" +
              fmt(100 * rel, 1) + "%)";
  }
  const double delta = ours[6] - ours[3];
  const bool equalities = ours[0] == ours[3] && ours[1] == ours[4] && ours[2] == ours[5] &&
                          ours[7] - ours[4] == delta && ours[8] - ours[5] == delta && delta > 0;
  const double small_max = *std::max_element(ours.begin(), ours.end(), [&](double a, double b) {
    const bool a_big = a == ours[2] || a == ours[8];
    const bool b_big = b == ours[2] || b == ours[8];
    return (a_big ? 0 : a) < (b_big ? 0 : b);
  });
  const bool largest = std::min(ours[2], ours[8]) > small_max;
  if (!equalities) detail += "; equalities broken";
  if (!largest) detail += "; ASPP arrangements not largest";
  return {ok && equalities && largest, detail};
}

Outcome gradient_suite() {
  int failures = 0;
  for (const char* bin : {CMSNET_TENSOR_TEST, CMSNET_GRAPH_TEST}) {
    const std::string cmd = std::string("\"") + bin + "\" --gtest_filter='Gradients.*' --gtest_brief=1";
    const int rc = std::system(cmd.c_str());
    if (rc != 0) ++failures;
  }
  return {failures == 0, failures == 0 ? "all finite-difference checks under 1e-3 relative"
                                       : std::to_string(failures) + " gradient binaries failed"};
}

Outcome metric_oracle() {
  std::mt19937_64 rng(99);
  int mismatches = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = 1 + static_cast<int>(rng() % 5);
    LabelMap t(1, 8, 8), p(1, 8, 8);
    for (std::size_t i = 0; i < 64; ++i) {
      t.labels[i] = static_cast<std::int32_t>(rng() % k);
      p.labels[i] = static_cast<std::int32_t>(rng() % k);
    }
    auto cm = ConfusionMatrix::with_classes(k);
    cm.accumulate(t, p);
    const auto o = test::oracle_metrics({t}, {p}, k);
    bool same = pixel_accuracy<test::Rational>(cm) == o.pixel_accuracy &&
                mean_accuracy<test::Rational>(cm) == o.mean_accuracy &&
                mean_iou<test::Rational>(cm) == o.mean_iou && fw_iou<test::Rational>(cm) == o.fw_iou;
    for (int c = 0; c < k; ++c)
      same = same && class_pixel_accuracy<test::Rational>(cm, c) == o.class_accuracy[c] &&
             iou<test::Rational>(cm, c) == o.iou[c];
    mismatches += !same;
  }
  auto cm = ConfusionMatrix::with_classes(2);
  LabelMap t(1, 1, 4), p(1, 1, 4);
  t.labels = {0, 0, 1, 1};
  p.labels = {0, 1, 1, 1};
  cm.accumulate(t, p);
  const bool example = mean_iou<test::Rational>(cm) == test::Rational(7, 12);
  return {mismatches == 0 && example, std::to_string(1000 - mismatches) +
                                          "/1000 oracle cases exact; 4-pixel mIoU " +
                                          (example ? "7/12" : "wrong")};
}

Outcome distance() {
  const double d = distance_response(30, 21.19);
  const auto r = cli({"distance", "--speed", "30", "--fps", "21.19"});
  const bool ok = std::abs(d - 0.393) <= 0.001 && r.code == 0 && r.out == "0.393 m\n";
  return {ok, fmt(d) + " m; cli prints '" + r.out.substr(0, r.out.find('\n')) + "'"};
}

// Criteria 6, 7 and 10 share one pipeline run per directory.
struct PipelineResult {
  double eval_miou = 0;
  double first_loss = 0;
  double last_loss = 0;
  std::vector<double> noise_miou;
  std::vector<double> mix_miou;
};

const std::vector<std::string> kCsvFiles{"model/loss.csv", "eval/metrics.csv", "noise/sweep_noise.csv",
                                         "mix/sweep_mix.csv"};

PipelineResult run_pipeline(const fs::path& data, const fs::path& run) {
  const std::string seed = "1";
  require_cli(cli({"train", "--data", data.string(), "--limit", "40", "--arch", "CM3", "--width-mult",
                   "0.25", "--epochs", "60", "--batch", "2", "--lr", "0.007", "--rotate", "5",
                   "--crop", "0.1", "--seed", seed, "--quiet", "--out", (run / "model").string()}),
              "train");
  const std::string ckpt = (run / "model" / "model").string();
  require_cli(cli({"eval", "--checkpoint", ckpt, "--data", data.string(), "--skip", "40", "--out",
                   (run / "eval").string()}),
              "eval");
  require_cli(cli({"sweep", "severity", "--checkpoint", ckpt, "--data", data.string(), "--skip", "40",
                   "--kind", "noise", "--max-severity", "0.25", "--steps", "6", "--seed", seed,
                   "--out", (run / "noise").string()}),
              "sweep severity");
  require_cli(cli({"sweep", "mix", "--checkpoint", ckpt, "--data", data.string(), "--skip", "40",
                   "--adverse-noise", "0.25", "--steps", "6", "--seed", seed, "--out",
                   (run / "mix").string()}),
              "sweep mix");

  PipelineResult r;
  const auto metrics = read_csv(run / "eval" / "metrics.csv");
  r.eval_miou = std::stod(metrics.back().at(3));
  const auto loss = read_csv(run / "model" / "loss.csv");
  r.first_loss = std::stod(loss.at(1).at(1));
  r.last_loss = std::stod(loss.back().at(1));
  for (const auto& [file, into] : {std::pair{"noise/sweep_noise.csv", &r.noise_miou},
                                   std::pair{"mix/sweep_mix.csv", &r.mix_miou}}) {
    const auto rows = read_csv(run / file);
    for (std::size_t i = 1; i < rows.size(); ++i) into->push_back(std::stod(rows[i].at(1)));
  }
  return r;
}

Outcome toy_convergence(const PipelineResult& r) {
  return {r.eval_miou >= 0.85, "held-out mIoU " + fmt(r.eval_miou) + " (target 0.85); loss " +
                                   fmt(r.first_loss) + " -> " + fmt(r.last_loss)};
}

Outcome degradation(const PipelineResult& r) {
  if (r.noise_miou.size() != 6 || r.mix_miou.size() != 6) return {false, "sweeps lack 6 rows"};
  const double drop = 100 * (r.noise_miou.front() - r.noise_miou.back());
  const bool mix_ok = r.mix_miou.back() <= r.mix_miou.front();
  return {drop >= 5.0 && mix_ok, "noise " + fmt(r.noise_miou.front()) + " -> " +
                                     fmt(r.noise_miou.back()) + " (" + fmt(drop, 2) + " pp); mix " +
                                     fmt(r.mix_miou.front()) + " -> " + fmt(r.mix_miou.back())};
}

Outcome determinism(const fs::path& a, const fs::path& b) {
  std::string differing;
  for (const auto& f : kCsvFiles)
    if (slurp(a / f) != slurp(b / f)) differing += " " + f;
  return {differing.empty(), differing.empty() ? std::to_string(kCsvFiles.size()) +
                                                     " CSV files byte-identical across two runs"
                                               : "differ:" + differing};
}

Outcome timing() {
  const auto s = benchmark([](const Tensor&) { std::this_thread::sleep_for(std::chrono::milliseconds(10)); },
                           {1, 3, 8, 8}, 500, 20);
  const auto& b = s.boxplot;
  const bool order = b.min <= b.q1 && b.q1 <= b.median && b.median <= b.q3 && b.q3 <= b.max;
  const bool mean_ok = std::abs(s.mean_ms - 10.0) <= 1.5;

  // Statistics against two-pass and sort-based oracles.
  std::mt19937_64 rng(8);
  std::lognormal_distribution<double> dist(1.0, 0.5);
  double worst = 0;
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> v(2 + rng() % 50);
    for (auto& x : v) x = dist(rng);
    const auto st = summarize(v);
    double mean = 0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0;
    for (double x : v) var += (x - mean) * (x - mean);
    const double pct = std::sqrt(var / static_cast<double>(v.size() - 1)) / mean * 100;
    std::sort(v.begin(), v.end());
    auto q = [&](double p) {
      const double h = p * static_cast<double>(v.size() - 1);
      const auto lo = static_cast<std::size_t>(h);
      const auto hi = std::min(lo + 1, v.size() - 1);
      return v[lo] + (h - static_cast<double>(lo)) * (v[hi] - v[lo]);
    };
    auto rel = [](double a, double e) { return std::abs(a - e) / std::max(std::abs(e), 1e-300); };
    worst = std::max({worst, rel(st.std_pct, pct), rel(st.mean_ms, mean), rel(st.boxplot.q1, q(0.25)),
                      rel(st.boxplot.median, q(0.5)), rel(st.boxplot.q3, q(0.75))});
  }
  const bool math_ok = worst <= 1e-9;
  std::ostringstream worst_s;
  worst_s << worst;
  return {order && mean_ok && math_ok, "mean " + fmt(s.mean_ms, 3) + " ms, std " + fmt(s.std_pct, 2) +
                                           "%, quartiles " + (order ? "ordered" : "NOT ordered") +
                                           ", oracle rel err " + worst_s.str()};
}

Outcome annotation() {
  const auto doc = parse_annotation(test::kAnnexJson);
  std::vector<LabelParts> parts;
  for (const auto& s : doc.shapes) parts.push_back(split_label(s.label));
  const bool annex = parts.size() == 4 && parts[0] == LabelParts{"road", std::nullopt} &&
                     parts[1] == LabelParts{"car", 0} && parts[2] == LabelParts{"person", 0} &&
                     parts[3] == LabelParts{"person", 1};

  const auto table = ClassTable::toy();
  const auto toy = generate_toy(50, 96, 64, table, 1);
  double worst = 1.0;
  for (std::size_t i = 0; i < toy.samples.size(); ++i) {
    const auto r = render_mask(parse_annotation(serialize_annotation(toy.documents[i])), table, 96, 64);
    std::size_t same = 0;
    for (std::size_t p = 0; p < r.classes.labels.size(); ++p)
      same += r.classes.labels[p] == toy.samples[i].mask.labels[p];
    worst = std::min(worst, static_cast<double>(same) / static_cast<double>(r.classes.labels.size()));
  }

  AnnotationDocument layered;
  layered.shapes = {{{{3, 3}, {6, 3}, {6, 6}, {3, 6}}, "person-0", nlohmann::json::object()},
                    {{{0, 0}, {10, 0}, {10, 10}, {0, 10}}, "road", nlohmann::json::object()}};
  const auto full = ClassTable::full();
  const auto m = render_mask(layered, full, 10, 10);
  const bool order = m.classes.at(0, 4, 4) == full.find("person")->id &&
                     m.classes.at(0, 1, 1) == full.find("road")->id;
  return {annex && worst >= 0.99 && order,
          std::string("annex ") + (annex ? "4 shapes split correctly" : "WRONG") +
              "; worst toy round-trip agreement " + fmt(100 * worst, 2) + "%; person over road " +
              (order ? "yes" : "no")};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_work");
  fs::remove_all(work);
  fs::create_directories(work);

  bool all = true;
  auto report = [&](int id, double budget_s, const std::function<Outcome()>& fn) {
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (secs > budget_s) {
      o.pass = false;
      o.detail += "; over the " + fmt(budget_s, 0) + " s budget";
    }
    all = all && o.pass;
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << " ["
              << fmt(secs, 2) << " s]" << std::endl;
  };

  report(1, 1, shape_table);
  report(2, 5, parameter_counts);
  report(3, 120, gradient_suite);
  report(4, 30, metric_oracle);
  report(5, 1, distance);

  const fs::path data = work / "toy";
  PipelineResult first, second;
  bool pipeline_ok = true;
  std::string pipeline_error;
  double first_secs = 0;
  try {
    require_cli(cli({"toy", "generate", "--count", "50", "--height", "64", "--width", "96", "--seed",
                     "1", "--out", data.string()}),
                "toy generate");
    const auto t0 = std::chrono::steady_clock::now();
    first = run_pipeline(data, work / "run1");
    first_secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    second = run_pipeline(data, work / "run2");
  } catch (const std::exception& e) {
    pipeline_ok = false;
    pipeline_error = e.what();
  }
  auto guarded = [&](const std::function<Outcome()>& fn) {
    return [&, fn]() -> Outcome {
      if (!pipeline_ok) return {false, "pipeline failed: " + pipeline_error};
      return fn();
    };
  };
  report(6, 600, guarded([&] {
           auto o = toy_convergence(first);
           o.detail += "; pipeline " + fmt(first_secs, 1) + " s";
           if (first_secs > 600) {
             o.pass = false;
             o.detail += " (over the 600 s budget)";
           }
           return o;
         }));
  report(7, 300, guarded([&] { return degradation(first); }));
  report(8, 10, timing);
  report(9, 10, annotation);
  report(10, 600, guarded([&] { return determinism(work / "run1", work / "run2"); }));
  return all ? 0 : 1;
}
