#include "cmsnet/cli.hpp"

#include <CLI11.hpp>
#include <Eigen/Core>

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <thread>

#include "cmsnet/bench.hpp"
#include "cmsnet/checkpoint.hpp"
#include "cmsnet/error.hpp"
#include "cmsnet/image_io.hpp"
#include "cmsnet/impairment.hpp"
#include "cmsnet/metrics.hpp"
#include "cmsnet/network.hpp"
#include "cmsnet/rng.hpp"
#include "cmsnet/training.hpp"

namespace cmsnet {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Bad flag combinations found after parsing; reported like CLI11 errors.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw Error("cannot write " + path.string());
  return os;
}

std::vector<fs::path> files_with_extension(const fs::path& dir, std::string_view ext) {
  if (!fs::is_directory(dir)) throw Error("not a directory: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ext) files.push_back(e.path());
  std::sort(files.begin(), files.end());
  return files;
}

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream ss;
  ss << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return ss.str();
}

json typed(const std::string& s) {
  auto v = json::parse(s, nullptr, false);
  if (!v.is_discarded() && (v.is_number() || v.is_boolean())) return v;
  return s;
}

json option_snapshot(const CLI::App& app) {
  json snap = json::object();
  for (const CLI::Option* opt : app.get_options()) {
    const std::string key = opt->get_single_name();
    if (key == "help" || key == "config") continue;
    if (opt->count() > 0) {
      const auto& r = opt->results();
      if (r.size() == 1) {
        snap[key] = typed(r.front());
      } else {
        json arr = json::array();
        for (const auto& s : r) arr.push_back(typed(s));
        snap[key] = arr;
      }
    } else {
      snap[key] = typed(opt->get_default_str());
    }
  }
  return snap;
}

// Config keys are flag names without dashes; '_' and '-' are interchangeable.
void apply_config(CLI::App& app, const std::string& path) {
  json cfg;
  try {
    cfg = json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw UsageError("config " + path + ": " + e.what());
  }
  if (!cfg.is_object()) throw UsageError("config " + path + ": top level must be an object");
  for (const auto& [raw_key, value] : cfg.items()) {
    std::string key = raw_key;
    std::replace(key.begin(), key.end(), '_', '-');
    CLI::Option* opt = key == "config" || key == "help" ? nullptr
                                                        : app.get_option_no_throw("--" + key);
    if (!opt) throw UsageError("config " + path + ": unknown key '" + raw_key + "'");
    if (opt->count() > 0) continue;
    std::vector<std::string> results;
    auto push = [&](const json& v) {
      if (v.is_string()) results.push_back(v.get<std::string>());
      else if (v.is_boolean()) results.push_back(v.get<bool>() ? "true" : "false");
      else if (v.is_number()) results.push_back(v.dump());
      else throw UsageError("config " + path + ": key '" + raw_key + "' has an unsupported type");
    };
    if (value.is_array()) {
      for (const auto& v : value) push(v);
    } else {
      push(value);
    }
    opt->add_result(results);
    opt->run_callback();
  }
}

struct Context {
  std::vector<std::string> argv;
  std::string command;
  std::string config_path;
  std::string out_flag;
  std::uint64_t seed = 0;
  std::ostream* out = nullptr;
  std::ostream* err = nullptr;
  const CLI::App* leaf = nullptr;

  // --out, then $CMSNET_OUT_DIR/<command>, then ./cmsnet_out/<command>.
  fs::path out_dir() const {
    std::string slug = command;
    std::replace(slug.begin(), slug.end(), ' ', '_');
    fs::path dir;
    if (!out_flag.empty()) {
      dir = out_flag;
    } else if (const char* env = std::getenv(kOutDirEnv); env && *env) {
      dir = fs::path(env) / slug;
    } else {
      dir = fs::path("cmsnet_out") / slug;
    }
    fs::create_directories(dir);
    return dir;
  }

  void write_manifest(const fs::path& dir) const {
    json m{{"tool", "cmsnet"},
           {"command", command},
           {"argv", argv},
           {"config_file", config_path.empty() ? json(nullptr) : json(config_path)},
           {"config", option_snapshot(*leaf)},
           {"seed", seed},
           {"versions",
            {{"cmsnet", std::string(kToolVersion)},
             {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." +
                           std::to_string(EIGEN_MAJOR_VERSION) + "." +
                           std::to_string(EIGEN_MINOR_VERSION)},
             {"libpng", png_library_version()},
             {"nlohmann_json", std::to_string(NLOHMANN_JSON_VERSION_MAJOR) + "." +
                                   std::to_string(NLOHMANN_JSON_VERSION_MINOR) + "." +
                                   std::to_string(NLOHMANN_JSON_VERSION_PATCH)},
             {"cli11", CLI11_VERSION},
             {"compiler", __VERSION__}}},
           {"timestamp", utc_timestamp()}};
    open_out(dir / "manifest.json") << m.dump(2) << '\n';
  }
};

std::vector<std::string> dataset_class_names(const fs::path& dir, std::size_t fallback) {
  const auto path = dir / "classes.json";
  if (fs::exists(path)) return ClassTable::from_json(read_text(path)).names();
  std::vector<std::string> names;
  for (std::size_t i = 0; i < fallback; ++i) names.push_back("class" + std::to_string(i));
  return names;
}

ClassTable class_table_or(const std::string& path, ClassTable fallback) {
  if (path.empty()) return fallback;
  return ClassTable::from_json(read_text(path));
}

std::string join_dims(std::size_t h, std::size_t w, std::size_t c) {
  return std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c);
}

// ---------------------------------------------------------------------------
// arch show

struct ArchOpts {
  std::string name;
  std::size_t height = 483;
  std::size_t width = 769;
  double width_mult = 1.0;
  std::size_t num_classes = 4;
  std::string format = "text";
};

void run_arch_show(const ArchOpts& o, Context& ctx) {
  ArrangementConfig cfg = arrangement(o.name);
  cfg.width_multiplier = o.width_mult;
  cfg.num_classes = o.num_classes;
  const Shape input{1, cfg.in_channels, o.height, o.width};
  const Network net = build_arrangement<float>(cfg, input);
  const std::size_t backbone_params =
      build_backbone<float>(cfg.output_stride, cfg.in_channels, cfg.width_multiplier, input)
          .parameter_count();
  const std::size_t total = net.parameter_count();
  std::ostream& out = *ctx.out;

  if (o.format == "json") {
    json stages = json::array();
    for (const auto& s : net.stages) {
      stages.push_back({{"op", s.op},
                        {"h", s.in_h},
                        {"w", s.in_w},
                        {"c", s.in_c},
                        {"t", s.expansion},
                        {"out_c", s.out_channels},
                        {"n", s.repeats},
                        {"s", s.stride},
                        {"realized_stride", s.realized_stride},
                        {"dilation", s.dilation}});
    }
    json head = json::array();
    const auto shapes = net.infer_shapes();
    for (const auto& n : shapes) {
      if (n.name.rfind("pyramid", 0) == 0 || n.name.rfind("head", 0) == 0 ||
          n.name.rfind("shortcut", 0) == 0 || n.name == "classifier" || n.name == "upsample") {
        head.push_back({{"name", n.name}, {"kind", n.kind}, {"shape", n.shape.dims()}});
      }
    }
    json j{{"name", cfg.name},
           {"output_stride", cfg.output_stride},
           {"pyramid", to_string(cfg.pyramid)},
           {"shortcut", cfg.shortcut},
           {"width_multiplier", cfg.width_multiplier},
           {"num_classes", cfg.num_classes},
           {"input", input.dims()},
           {"stages", stages},
           {"head", head},
           {"parameters", {{"total", total}, {"backbone", backbone_params}}}};
    out << j.dump(2) << '\n';
    return;
  }

  out << cfg.name << ": OS" << cfg.output_stride << " / " << to_string(cfg.pyramid) << " / "
      << (cfg.shortcut ? "shortcut" : "no-shortcut") << '\n';
  out << "input " << join_dims(o.height, o.width, cfg.in_channels) << ", width multiplier "
      << cfg.width_multiplier << ", " << cfg.num_classes << " classes\n\n";
  out << std::left << std::setw(12) << "op" << std::right << std::setw(14) << "input" << std::setw(4)
      << "t" << std::setw(6) << "c" << std::setw(4) << "n" << std::setw(4) << "s" << std::setw(8)
      << "stride" << std::setw(6) << "dil" << '\n';
  for (const auto& s : net.stages) {
    out << std::left << std::setw(12) << s.op << std::right << std::setw(14)
        << join_dims(s.in_h, s.in_w, s.in_c) << std::setw(4)
        << (s.expansion > 0 ? std::to_string(s.expansion) : "-") << std::setw(6) << s.out_channels
        << std::setw(4) << s.repeats << std::setw(4) << s.stride << std::setw(8)
        << s.realized_stride << std::setw(6) << s.dilation << '\n';
  }
  out << "\nparameters: " << total << " (backbone " << backbone_params << ", head "
      << total - backbone_params << ")\n";
}

// ---------------------------------------------------------------------------
// toy generate

struct ToyOpts {
  std::size_t count = 50;
  std::size_t height = 64;
  std::size_t width = 96;
};

void run_toy(const ToyOpts& o, Context& ctx) {
  const ClassTable classes = ClassTable::toy();
  const ToyDataset data = generate_toy(o.count, o.width, o.height, classes, ctx.seed);
  const fs::path dir = ctx.out_dir();
  save_dataset(dir, data, classes);
  ctx.write_manifest(dir);
  *ctx.out << "wrote " << o.count << " toy samples to " << dir.string() << '\n';
}

// ---------------------------------------------------------------------------
// annotate render / stats

struct AnnotateOpts {
  std::string input;
  std::string classes;
  std::size_t height = 0;
  std::size_t width = 0;
  bool instances = false;
  bool color = false;
};

std::vector<fs::path> annotation_files(const std::string& input) {
  if (input.empty()) throw UsageError("--input is required");
  if (fs::is_regular_file(input)) return {fs::path(input)};
  return files_with_extension(input, ".json");
}

std::pair<std::size_t, std::size_t> canvas_size(const AnnotationDocument& doc,
                                                const AnnotateOpts& o, const fs::path& file) {
  std::size_t w = o.width;
  std::size_t h = o.height;
  if (w == 0) w = doc.extra.value("imageWidth", std::size_t{0});
  if (h == 0) h = doc.extra.value("imageHeight", std::size_t{0});
  if (w == 0 || h == 0) {
    throw ValidationError(file.string() +
                          ": no imageWidth/imageHeight in the document; pass --width and --height");
  }
  return {w, h};
}

void run_annotate_render(const AnnotateOpts& o, Context& ctx) {
  const ClassTable table = class_table_or(o.classes, ClassTable::full());
  const auto files = annotation_files(o.input);
  const fs::path dir = ctx.out_dir();
  fs::create_directories(dir / "masks");
  if (o.instances) fs::create_directories(dir / "instances");
  if (o.color) fs::create_directories(dir / "color");
  for (const auto& file : files) {
    const AnnotationDocument doc = load_annotation(file);
    const auto [w, h] = canvas_size(doc, o, file);
    const RenderResult r = render_mask(doc, table, w, h);
    for (const auto& warning : r.warnings) *ctx.err << file.filename().string() << ": " << warning << '\n';
    const std::string stem = file.stem().string() + ".png";
    write_png(dir / "masks" / stem, labels_to_image(r.classes));
    if (o.instances) write_png16(dir / "instances" / stem, w, h, r.instances);
    if (o.color) write_png(dir / "color" / stem, colorize(r.classes, table));
  }
  ctx.write_manifest(dir);
  *ctx.out << "rendered " << files.size() << " annotation(s) to " << dir.string() << '\n';
}

void run_annotate_stats(const AnnotateOpts& o, Context& ctx) {
  const ClassTable table = class_table_or(o.classes, ClassTable::full());
  const auto files = annotation_files(o.input);
  std::vector<AnnotationDocument> docs;
  std::vector<LabelMap> masks;
  for (const auto& file : files) {
    docs.push_back(load_annotation(file));
    const auto [w, h] = canvas_size(docs.back(), o, file);
    RenderResult r = render_mask(docs.back(), table, w, h);
    for (const auto& warning : r.warnings) *ctx.err << file.filename().string() << ": " << warning << '\n';
    masks.push_back(std::move(r.classes));
  }
  const auto stats = dataset_stats(docs, masks, table);
  const fs::path dir = ctx.out_dir();
  {
    auto os = open_out(dir / "stats.csv");
    write_stats_csv(os, stats);
  }
  write_stats_csv(*ctx.out, stats);
  ctx.write_manifest(dir);
}

// ---------------------------------------------------------------------------
// train

struct TrainOpts {
  std::string data;
  std::size_t skip = 0;
  std::size_t limit = 0;
  std::string arch = "CM3";
  double width_mult = 0.25;
  std::size_t num_classes = 0;
  std::string activation = "relu6";
  std::size_t epochs = 60;
  std::size_t batch = 4;
  double lr = 0.007;
  double poly_power = 1.0;
  double momentum = 0.9;
  double rotate = 0;
  double crop = 0;
  double aug_noise = 0;
  double aug_fog = 0;
  bool quiet = false;
};

void run_train(const TrainOpts& o, Context& ctx) {
  if (o.data.empty()) throw UsageError("--data is required");
  const auto samples = load_dataset(o.data, o.skip, o.limit);
  const auto names = dataset_class_names(o.data, o.num_classes == 0 ? 4 : o.num_classes);
  ArrangementConfig cfg = arrangement(o.arch);
  cfg.width_multiplier = o.width_mult;
  cfg.num_classes = o.num_classes == 0 ? names.size() : o.num_classes;
  cfg.activation = parse_activation(o.activation);
  cfg.init_seed = ctx.seed;
  const Shape& s = samples.front().image.shape();
  Network net = build_arrangement<float>(cfg, {1, s.c, s.h, s.w});

  TrainConfig tc;
  tc.base_lr = o.lr;
  tc.epochs = o.epochs;
  tc.batch_size = o.batch;
  tc.poly_power = o.poly_power;
  tc.momentum = o.momentum;
  tc.seed = ctx.seed;
  tc.augment = {o.rotate, o.crop, o.aug_noise, o.aug_fog};
  TrainCallbacks cb;
  if (!o.quiet) {
    cb.on_epoch = [&](const EpochRecord& r) {
      *ctx.out << "epoch " << r.epoch + 1 << '/' << o.epochs << "  loss " << r.mean_loss
               << "  lr " << r.lr << '\n';
    };
  }
  const TrainResult result = train(net, samples, tc, cb);

  const fs::path dir = ctx.out_dir();
  save_checkpoint(net, dir / "model");
  {
    auto os = open_out(dir / "loss.csv");
    write_loss_csv(os, result.history);
  }
  ctx.write_manifest(dir);
  *ctx.out << "trained " << cfg.name << " for " << result.steps << " steps; checkpoint "
           << (dir / "model").string() << '\n';
}

// ---------------------------------------------------------------------------
// eval

struct EvalOpts {
  std::string pred;
  std::string truth;
  std::string checkpoint;
  std::string data;
  std::string classes;
  std::size_t skip = 0;
  std::size_t limit = 0;
  std::size_t num_classes = 0;
  bool per_image = false;
};

std::vector<std::string> names_for(const EvalOpts& o, std::size_t fallback) {
  if (!o.classes.empty()) return ClassTable::from_json(read_text(o.classes)).names();
  const std::size_t n = o.num_classes ? o.num_classes : fallback;
  if (!o.data.empty()) return dataset_class_names(o.data, n);
  std::vector<std::string> names;
  for (std::size_t i = 0; i < n; ++i) names.push_back("class" + std::to_string(i));
  return names;
}

void run_eval(const EvalOpts& o, Context& ctx) {
  const bool dirs = !o.pred.empty() || !o.truth.empty();
  const bool model = !o.checkpoint.empty() || !o.data.empty();
  if (dirs == model) {
    throw UsageError("eval needs either --pred and --truth, or --checkpoint and --data");
  }
  std::vector<LabelMap> truths;
  std::vector<LabelMap> preds;
  std::vector<std::string> ids;
  std::size_t fallback = 0;
  if (dirs) {
    if (o.pred.empty() || o.truth.empty()) throw UsageError("--pred and --truth go together");
    const auto files = files_with_extension(o.truth, ".png");
    if (files.empty()) throw ValidationError("no PNG masks in " + o.truth);
    std::int32_t max_label = 0;
    for (const auto& f : files) {
      const fs::path p = fs::path(o.pred) / f.filename();
      if (!fs::exists(p)) throw ValidationError("missing prediction " + p.string());
      ids.push_back(f.filename().string());
      truths.push_back(image_to_labels(read_png(f)));
      preds.push_back(image_to_labels(read_png(p)));
      for (auto* m : {&truths.back(), &preds.back()})
        for (auto v : m->labels)
          if (v != kVoidLabel) max_label = std::max(max_label, v);
    }
    fallback = static_cast<std::size_t>(max_label) + 1;
  } else {
    if (o.checkpoint.empty() || o.data.empty()) throw UsageError("--checkpoint and --data go together");
    const Network net = load_checkpoint<float>(o.checkpoint);
    const auto samples = load_dataset(o.data, o.skip, o.limit);
    for (const auto& s : samples) {
      net.check_input(s.image.shape());
      ids.push_back(std::to_string(o.skip + truths.size()));
      truths.push_back(s.mask);
      preds.push_back(predict(net, s.image));
    }
    fallback = net.config ? net.config->num_classes : net.node(net.output()).shape.c;
  }
  const auto names = names_for(o, fallback);
  ConfusionMatrix cm(names);
  for (std::size_t i = 0; i < truths.size(); ++i) cm.accumulate(truths[i], preds[i]);
  const MetricReport report = evaluate(cm);
  const fs::path dir = ctx.out_dir();
  {
    auto os = open_out(dir / "metrics.csv");
    write_metrics_csv(os, report);
  }
  if (o.per_image) {
    auto os = open_out(dir / "per_image.csv");
    write_per_image_csv(os, ids, per_image_reports(names, truths, preds));
  }
  ctx.write_manifest(dir);
  *ctx.out << std::fixed << std::setprecision(6) << "mIoU " << report.mean_iou << "  p_acc "
           << report.pixel_accuracy << "  mcp_acc " << report.mean_accuracy << "  fwIoU "
           << report.fw_iou << '\n'
           << std::defaultfloat;
}

// ---------------------------------------------------------------------------
// sweep mix / severity

struct SweepOpts {
  std::string checkpoint;
  std::string data;
  std::size_t skip = 0;
  std::size_t limit = 0;
  std::size_t steps = 6;
  // mix
  std::string adverse;
  double adverse_noise = kMaxNoiseSeverity;
  std::size_t set_size = 0;
  // severity
  std::string kind = "noise";
  double max_severity = kMaxNoiseSeverity;
};

void write_sweep(const SweepReport& report, const std::string& stem, Context& ctx) {
  const fs::path dir = ctx.out_dir();
  {
    auto os = open_out(dir / (stem + ".csv"));
    write_sweep_csv(os, report);
  }
  {
    auto os = open_out(dir / (stem + ".dat"));
    write_sweep_dat(os, report);
  }
  ctx.write_manifest(dir);
  write_sweep_csv(*ctx.out, report);
}

void require_model_data(const SweepOpts& o) {
  if (o.checkpoint.empty()) throw UsageError("--checkpoint is required");
  if (o.data.empty()) throw UsageError("--data is required");
}

void run_sweep_mix(const SweepOpts& o, Context& ctx) {
  require_model_data(o);
  const Network net = load_checkpoint<float>(o.checkpoint);
  const auto clean = load_dataset(o.data, o.skip, o.limit);
  std::vector<LabeledSample> adverse;
  std::string adverse_id;
  if (!o.adverse.empty()) {
    adverse = load_dataset(o.adverse);
    adverse_id = o.adverse;
  } else {
    // Noise-corrupted copies of the clean set.
    for (std::size_t i = 0; i < clean.size(); ++i) {
      LabeledSample s = clean[i];
      s.image = apply_noise(s.image, o.adverse_noise, derive_seed(ctx.seed, {0xad, i}));
      adverse.push_back(std::move(s));
    }
    std::ostringstream id;
    id << "noise@" << o.adverse_noise;
    adverse_id = id.str();
  }
  const auto names = dataset_class_names(o.data, net.node(net.output()).shape.c);
  const std::size_t set_size = o.set_size ? o.set_size : clean.size();
  SweepReport report = condition_mix_sweep(network_predictor(net), clean, adverse, o.steps,
                                           set_size, names, ctx.seed);
  if (net.config) report.arrangement = net.config->name;
  report.clean_id = o.data;
  report.adverse_id = adverse_id;
  write_sweep(report, "sweep_mix", ctx);
}

void run_sweep_severity(const SweepOpts& o, Context& ctx) {
  require_model_data(o);
  const Network net = load_checkpoint<float>(o.checkpoint);
  const auto samples = load_dataset(o.data, o.skip, o.limit);
  const auto names = dataset_class_names(o.data, net.node(net.output()).shape.c);
  const ImpairmentKind kind = parse_impairment(o.kind);
  SweepReport report = severity_sweep(network_predictor(net), samples, kind, o.steps,
                                      o.max_severity, names, ctx.seed);
  if (net.config) report.arrangement = net.config->name;
  report.clean_id = o.data;
  write_sweep(report, "sweep_" + to_string(kind), ctx);
}

// ---------------------------------------------------------------------------
// bench / distance

struct BenchOpts {
  std::string arch = "CM5";
  std::string checkpoint;
  double width_mult = 1.0;
  std::size_t num_classes = 4;
  std::size_t height = 483;
  std::size_t width = 769;
  std::size_t batch = 1;
  std::size_t iterations = kDefaultIterations;
  std::size_t warmup = kDefaultWarmup;
  double stub_ms = 0;
};

void run_bench(const BenchOpts& o, Context& ctx) {
  TimingStats stats;
  std::string what;
  if (o.stub_ms > 0) {
    const auto delay = std::chrono::duration<double, std::milli>(o.stub_ms);
    const TimedCall stub = [delay](const Tensor&) { std::this_thread::sleep_for(delay); };
    stats = benchmark(stub, {o.batch, 3, 1, 1}, o.iterations, o.warmup, ctx.seed);
    what = "stub";
  } else {
    Network net = [&] {
      if (!o.checkpoint.empty()) return load_checkpoint<float>(o.checkpoint);
      ArrangementConfig cfg = arrangement(o.arch);
      cfg.width_multiplier = o.width_mult;
      cfg.num_classes = o.num_classes;
      cfg.init_seed = ctx.seed;
      return build_arrangement<float>(cfg, {o.batch, cfg.in_channels, o.height, o.width});
    }();
    Shape in = net.input_shape();
    if (!o.checkpoint.empty()) in.n = o.batch;
    what = net.config ? net.config->name : "network";
    stats = benchmark(net, in, o.iterations, o.warmup, ctx.seed);
  }
  const fs::path dir = ctx.out_dir();
  {
    auto os = open_out(dir / "timing.csv");
    write_timing_csv(os, stats);
  }
  {
    auto os = open_out(dir / "samples.dat");
    os << "# iteration ms\n";
    for (std::size_t i = 0; i < stats.samples_ms.size(); ++i) os << i << ' ' << stats.samples_ms[i] << '\n';
  }
  ctx.write_manifest(dir);
  auto& out = *ctx.out;
  out << std::fixed << std::setprecision(3) << what << " batch " << stats.batch << ": mean "
      << stats.mean_ms << " ms, std " << stats.std_pct << " %, " << stats.fps_mean << " FPS ("
      << stats.fps_per_image << " images/s)\n"
      << "boxplot ms: min " << stats.boxplot.min << "  q1 " << stats.boxplot.q1 << "  median "
      << stats.boxplot.median << "  q3 " << stats.boxplot.q3 << "  max " << stats.boxplot.max
      << '\n'
      << std::defaultfloat;
}

struct DistanceOpts {
  double speed = 0;
  double fps = 0;
};

void run_distance(const DistanceOpts& o, Context& ctx) {
  const double d = distance_response(o.speed, o.fps);
  *ctx.out << std::fixed << std::setprecision(3) << d << " m\n" << std::defaultfloat;
}

}  // namespace

// ---------------------------------------------------------------------------

std::vector<LabeledSample> load_dataset(const fs::path& dir, std::size_t skip, std::size_t limit) {
  const auto images = files_with_extension(dir / "images", ".png");
  if (skip >= images.size()) {
    throw ValidationError("dataset " + dir.string() + " has " + std::to_string(images.size()) +
                          " images, cannot skip " + std::to_string(skip));
  }
  const std::size_t end = limit ? std::min(images.size(), skip + limit) : images.size();
  std::vector<LabeledSample> samples;
  for (std::size_t i = skip; i < end; ++i) {
    const fs::path mask_path = dir / "masks" / images[i].filename();
    if (!fs::exists(mask_path)) throw ValidationError("missing mask " + mask_path.string());
    LabeledSample s;
    s.image = image_to_tensor(read_png(images[i]));
    s.mask = image_to_labels(read_png(mask_path));
    if (s.mask.h != s.image.shape().h || s.mask.w != s.image.shape().w) {
      throw ValidationError(images[i].filename().string() + ": mask size differs from image");
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

void save_dataset(const fs::path& dir, const ToyDataset& data, const ClassTable& classes) {
  for (const char* sub : {"images", "masks", "annotations"}) fs::create_directories(dir / sub);
  for (std::size_t i = 0; i < data.samples.size(); ++i) {
    const auto& doc = data.documents.at(i);
    const fs::path name = doc.image_path;
    write_png(dir / "images" / name, tensor_to_image(data.samples[i].image));
    write_png(dir / "masks" / name, labels_to_image(data.samples[i].mask));
    AnnotationDocument copy = doc;
    copy.image_path = "../images/" + name.string();
    save_annotation(copy, dir / "annotations" / fs::path(name).replace_extension(".json"));
  }
  open_out(dir / "classes.json") << classes.to_json() << '\n';
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"cmsnet: context-aware segmentation networks for off-road scenes", "cmsnet"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kToolVersion));

  Context ctx;
  ctx.argv = args;
  ctx.out = &out;
  ctx.err = &err;

  auto common = [&ctx](CLI::App* sub, bool writes_files) {
    sub->add_option("--config", ctx.config_path, "JSON file of flag values (flags win)");
    sub->add_option("--seed", ctx.seed, "Random seed");
    if (writes_files) {
      sub->add_option("--out", ctx.out_flag,
                      std::string("Output directory (default $") + kOutDirEnv + "/<command>)");
    }
  };

  // arch show
  ArchOpts arch_o;
  auto* arch = app.add_subcommand("arch", "Network arrangements");
  arch->require_subcommand(1);
  auto* arch_show = arch->add_subcommand("show", "Print the layer table and parameter count");
  arch_show->add_option("name", arch_o.name, "Arrangement CM0..CM8")->required();
  arch_show->add_option("--height", arch_o.height, "Input height")->check(CLI::PositiveNumber);
  arch_show->add_option("--width", arch_o.width, "Input width")->check(CLI::PositiveNumber);
  arch_show->add_option("--width-mult", arch_o.width_mult, "Channel width multiplier");
  arch_show->add_option("--num-classes", arch_o.num_classes, "Classifier outputs");
  arch_show->add_option("--format", arch_o.format, "text or json")
      ->check(CLI::IsMember({"text", "json"}));
  common(arch_show, false);

  // toy generate
  ToyOpts toy_o;
  auto* toy = app.add_subcommand("toy", "Procedural toy dataset");
  toy->require_subcommand(1);
  auto* toy_gen = toy->add_subcommand("generate", "Write images, masks and annotations");
  toy_gen->add_option("--count", toy_o.count, "Number of samples");
  toy_gen->add_option("--height", toy_o.height, "Image height");
  toy_gen->add_option("--width", toy_o.width, "Image width");
  common(toy_gen, true);

  // annotate render / stats
  AnnotateOpts ann_o;
  auto* ann = app.add_subcommand("annotate", "Polygon annotations");
  ann->require_subcommand(1);
  auto* ann_render = ann->add_subcommand("render", "Rasterise annotations into masks");
  auto* ann_stats = ann->add_subcommand("stats", "Per-class pixel shares and occurrences");
  for (auto* sub : {ann_render, ann_stats}) {
    sub->add_option("--input", ann_o.input, "Annotation file or directory of .json files");
    sub->add_option("--classes", ann_o.classes, "Class table JSON (default: full table)");
    sub->add_option("--height", ann_o.height, "Canvas height (default: from the document)");
    sub->add_option("--width", ann_o.width, "Canvas width (default: from the document)");
    common(sub, true);
  }
  ann_render->add_flag("--instances", ann_o.instances, "Also write 16-bit instance masks");
  ann_render->add_flag("--color", ann_o.color, "Also write colour visualisations");

  // train
  TrainOpts tr_o;
  auto* tr = app.add_subcommand("train", "Train an arrangement on a dataset directory");
  tr->add_option("--data", tr_o.data, "Dataset directory (images/, masks/)");
  tr->add_option("--skip", tr_o.skip, "Skip the first N samples");
  tr->add_option("--limit", tr_o.limit, "Use at most N samples (0 = all)");
  tr->add_option("--arch", tr_o.arch, "Arrangement CM0..CM8");
  tr->add_option("--width-mult", tr_o.width_mult, "Channel width multiplier");
  tr->add_option("--num-classes", tr_o.num_classes, "Classes (0 = from classes.json)");
  tr->add_option("--activation", tr_o.activation, "relu6, relu or none");
  tr->add_option("--epochs", tr_o.epochs, "Epochs");
  tr->add_option("--batch", tr_o.batch, "Batch size");
  tr->add_option("--lr", tr_o.lr, "Base learning rate");
  tr->add_option("--poly-power", tr_o.poly_power, "Polynomial decay power");
  tr->add_option("--momentum", tr_o.momentum, "SGD momentum");
  tr->add_option("--rotate", tr_o.rotate, "Max rotation in degrees");
  tr->add_option("--crop", tr_o.crop, "Random crop side shrink fraction");
  tr->add_option("--aug-noise", tr_o.aug_noise, "Max noise severity for augmentation");
  tr->add_option("--aug-fog", tr_o.aug_fog, "Max fog severity for augmentation");
  tr->add_flag("--quiet", tr_o.quiet, "No per-epoch output");
  common(tr, true);

  // eval
  EvalOpts ev_o;
  auto* ev = app.add_subcommand("eval", "Confusion-matrix metrics to metrics.csv");
  ev->add_option("--pred", ev_o.pred, "Directory of predicted mask PNGs");
  ev->add_option("--truth", ev_o.truth, "Directory of ground-truth mask PNGs");
  ev->add_option("--checkpoint", ev_o.checkpoint, "Checkpoint stem (path without .json)");
  ev->add_option("--data", ev_o.data, "Dataset directory for --checkpoint");
  ev->add_option("--classes", ev_o.classes, "Class table JSON for names");
  ev->add_option("--skip", ev_o.skip, "Skip the first N samples");
  ev->add_option("--limit", ev_o.limit, "Use at most N samples (0 = all)");
  ev->add_option("--num-classes", ev_o.num_classes, "Classes (0 = infer)");
  ev->add_flag("--per-image", ev_o.per_image, "Also write per_image.csv");
  common(ev, true);

  // sweep mix / severity
  SweepOpts sw_o;
  auto* sw = app.add_subcommand("sweep", "Degradation sweeps");
  sw->require_subcommand(1);
  auto* sw_mix = sw->add_subcommand("mix", "Clean-to-adverse condition mix");
  auto* sw_sev = sw->add_subcommand("severity", "Impairment severity sweep");
  for (auto* sub : {sw_mix, sw_sev}) {
    sub->add_option("--checkpoint", sw_o.checkpoint, "Checkpoint stem");
    sub->add_option("--data", sw_o.data, "Clean dataset directory");
    sub->add_option("--skip", sw_o.skip, "Skip the first N samples");
    sub->add_option("--limit", sw_o.limit, "Use at most N samples (0 = all)");
    sub->add_option("--steps", sw_o.steps, "Number of sweep rows");
    common(sub, true);
  }
  sw_mix->add_option("--adverse", sw_o.adverse, "Adverse dataset directory (default: noisy copies)");
  sw_mix->add_option("--adverse-noise", sw_o.adverse_noise, "Noise severity of the copies");
  sw_mix->add_option("--set-size", sw_o.set_size, "Images per row (0 = clean set size)");
  sw_sev->add_option("--kind", sw_o.kind, "noise or fog")->check(CLI::IsMember({"noise", "fog"}));
  sw_sev->add_option("--max-severity", sw_o.max_severity, "Last-row severity");

  // bench
  BenchOpts be_o;
  auto* be = app.add_subcommand("bench", "Inference timing");
  be->add_option("--arch", be_o.arch, "Arrangement CM0..CM8");
  be->add_option("--checkpoint", be_o.checkpoint, "Time a saved model instead");
  be->add_option("--width-mult", be_o.width_mult, "Channel width multiplier");
  be->add_option("--num-classes", be_o.num_classes, "Classifier outputs");
  be->add_option("--height", be_o.height, "Input height");
  be->add_option("--width", be_o.width, "Input width");
  be->add_option("--batch", be_o.batch, "Batch size")->check(CLI::PositiveNumber);
  be->add_option("--iterations", be_o.iterations, "Timed iterations");
  be->add_option("--warmup", be_o.warmup, "Untimed warmup iterations");
  be->add_option("--stub-ms", be_o.stub_ms, "Time a constant-delay stub instead of a network");
  common(be, true);

  // distance
  DistanceOpts di_o;
  auto* di = app.add_subcommand("distance", "Distance travelled while one frame is processed");
  di->add_option("--speed", di_o.speed, "Vehicle speed in km/h");
  di->add_option("--fps", di_o.fps, "Frames per second");
  common(di, false);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
    const CLI::App* leaf = &app;
    std::string command;
    while (!leaf->get_subcommands().empty()) {
      leaf = leaf->get_subcommands().front();
      command += (command.empty() ? "" : " ") + leaf->get_name();
    }
    if (!ctx.config_path.empty()) apply_config(*const_cast<CLI::App*>(leaf), ctx.config_path);
    ctx.command = command;
    ctx.leaf = leaf;

    if (leaf == arch_show) run_arch_show(arch_o, ctx);
    else if (leaf == toy_gen) run_toy(toy_o, ctx);
    else if (leaf == ann_render) run_annotate_render(ann_o, ctx);
    else if (leaf == ann_stats) run_annotate_stats(ann_o, ctx);
    else if (leaf == tr) run_train(tr_o, ctx);
    else if (leaf == ev) run_eval(ev_o, ctx);
    else if (leaf == sw_mix) run_sweep_mix(sw_o, ctx);
    else if (leaf == sw_sev) run_sweep_severity(sw_o, ctx);
    else if (leaf == be) run_bench(be_o, ctx);
    else if (leaf == di) run_distance(di_o, ctx);
    return 0;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == static_cast<int>(CLI::ExitCodes::Success)) {
      app.exit(e, out, err);
      return 0;
    }
    err << "usage error: " << e.what() << "\n\n" << app.help();
    return 2;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace cmsnet
