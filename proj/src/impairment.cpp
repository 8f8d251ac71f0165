#include "cmsnet/impairment.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <random>

#include "cmsnet/error.hpp"
#include "cmsnet/metrics.hpp"
#include "cmsnet/rng.hpp"

namespace cmsnet {

std::string to_string(ImpairmentKind kind) {
  return kind == ImpairmentKind::fog ? "fog" : "noise";
}

ImpairmentKind parse_impairment(std::string_view text) {
  if (text == "fog") return ImpairmentKind::fog;
  if (text == "noise" || text == "gaussian_noise") return ImpairmentKind::noise;
  throw ConfigError("unknown impairment kind '" + std::string(text) + "' (expected fog or noise)");
}

Tensor apply_noise(const Tensor& image, double severity, std::uint64_t seed) {
  if (!(severity >= 0.0 && severity <= kMaxNoiseSeverity)) {
    throw ConfigError("noise severity " + std::to_string(severity) + " outside [0, 0.25]");
  }
  Tensor out(image.shape(), image.values());
  if (severity == 0.0) return out;
  std::mt19937_64 rng(derive_seed(seed, {0x6e6f697365ull}));
  std::normal_distribution<double> noise(0.0, severity);
  for (auto& v : out.values()) v = static_cast<float>(std::clamp(v + noise(rng), 0.0, 1.0));
  return out;
}

namespace {

double smooth(double t) { return t * t * (3.0 - 2.0 * t); }

void add_octave(std::vector<double>& field, std::size_t h, std::size_t w, std::size_t cells,
                double amplitude, std::mt19937_64& rng) {
  const std::size_t gw = cells + 1;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> lattice(gw * gw);
  for (auto& v : lattice) v = u(rng);
  for (std::size_t y = 0; y < h; ++y) {
    const double fy = (static_cast<double>(y) + 0.5) / static_cast<double>(h) * static_cast<double>(cells);
    const auto y0 = std::min(static_cast<std::size_t>(fy), cells - 1);
    const double ty = smooth(fy - static_cast<double>(y0));
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = (static_cast<double>(x) + 0.5) / static_cast<double>(w) * static_cast<double>(cells);
      const auto x0 = std::min(static_cast<std::size_t>(fx), cells - 1);
      const double tx = smooth(fx - static_cast<double>(x0));
      const double a = lattice[y0 * gw + x0] * (1 - tx) + lattice[y0 * gw + x0 + 1] * tx;
      const double b = lattice[(y0 + 1) * gw + x0] * (1 - tx) + lattice[(y0 + 1) * gw + x0 + 1] * tx;
      field[y * w + x] += amplitude * (a * (1 - ty) + b * ty);
    }
  }
}

}  // namespace

std::vector<double> fog_field(std::size_t h, std::size_t w, std::uint64_t seed) {
  std::vector<double> field(h * w, 0.0);
  if (field.empty()) return field;
  std::mt19937_64 rng(derive_seed(seed, {0x666f67ull}));
  add_octave(field, h, w, 2, 1.0, rng);
  add_octave(field, h, w, 4, 0.5, rng);
  add_octave(field, h, w, 8, 0.25, rng);
  const auto [lo, hi] = std::minmax_element(field.begin(), field.end());
  const double min = *lo, span = *hi - *lo;
  for (auto& v : field) v = span > 0 ? (v - min) / span : 1.0;
  return field;
}

Tensor apply_fog(const Tensor& image, double severity, std::uint64_t seed) {
  if (!(severity >= 0.0 && severity <= 1.0)) {
    throw ConfigError("fog severity " + std::to_string(severity) + " outside [0, 1]");
  }
  Tensor out(image.shape(), image.values());
  if (severity == 0.0) return out;
  const Shape& s = image.shape();
  for (std::size_t b = 0; b < s.n; ++b) {
    const auto f = fog_field(s.h, s.w, derive_seed(seed, {b}));
    for (std::size_t c = 0; c < s.c; ++c)
      for (std::size_t p = 0; p < s.h * s.w; ++p) {
        const double t = 1.0 - severity * f[p];
        float& v = out.values()[(b * s.c + c) * s.h * s.w + p];
        v = static_cast<float>(std::clamp(t * v + (1.0 - t) * kFogVeil, 0.0, 1.0));
      }
  }
  return out;
}

Tensor impair(const Tensor& image, const ImpairmentSpec& spec) {
  return spec.kind == ImpairmentKind::fog ? apply_fog(image, spec.severity, spec.seed)
                                          : apply_noise(image, spec.severity, spec.seed);
}

Predictor network_predictor(const Network& net) {
  return [&net](const Tensor& image) { return predict(net, image); };
}

std::vector<std::size_t> draw_indices(std::size_t pool, std::size_t count, std::uint64_t seed) {
  if (count > pool) {
    throw ConfigError("cannot draw " + std::to_string(count) + " samples from a pool of " +
                      std::to_string(pool));
  }
  std::vector<std::size_t> idx(pool);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates with an explicit bounded draw, stable across standard libraries.
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng() % (pool - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(count);
  return idx;
}

SweepRow evaluate_set(const Predictor& predict_fn, std::span<const LabeledSample> set,
                      const std::vector<std::string>& class_names, double x) {
  ConfusionMatrix cm(class_names);
  for (const auto& s : set) cm.accumulate(s.mask, predict_fn(s.image));
  SweepRow row;
  row.x = x;
  row.miou = mean_iou(cm);
  for (std::size_t c = 0; c < class_names.size(); ++c) row.class_iou.push_back(iou(cm, c));
  return row;
}

namespace {

void require_steps(std::size_t steps) {
  if (steps < 2) throw ConfigError("a sweep needs at least 2 steps, got " + std::to_string(steps));
}

}  // namespace

SweepReport condition_mix_sweep(const Predictor& predict_fn, std::span<const LabeledSample> clean,
                                std::span<const LabeledSample> adverse, std::size_t steps,
                                std::size_t set_size, const std::vector<std::string>& class_names,
                                std::uint64_t seed) {
  require_steps(steps);
  if (clean.empty() || adverse.empty()) throw ConfigError("condition mix needs non-empty pools");
  if (set_size == 0) throw ConfigError("condition mix set size must be positive");
  if (set_size > clean.size() || set_size > adverse.size()) {
    throw ConfigError("set size " + std::to_string(set_size) + " exceeds a pool (clean " +
                      std::to_string(clean.size()) + ", adverse " + std::to_string(adverse.size()) +
                      ")");
  }
  SweepReport report;
  report.x_label = "fraction";
  report.seed = seed;
  report.steps = steps;
  report.class_names = class_names;
  const std::size_t last = steps - 1;
  for (std::size_t k = 0; k < steps; ++k) {
    // ceil((1 - k/last) * set_size) in integers.
    const std::size_t n_clean = ((last - k) * set_size + last - 1) / last;
    const std::size_t n_adverse = set_size - n_clean;
    std::vector<LabeledSample> mix;
    for (auto i : draw_indices(clean.size(), n_clean, derive_seed(seed, {k})))
      mix.push_back(clean[i]);
    for (auto i : draw_indices(adverse.size(), n_adverse, derive_seed(seed, {last - k})))
      mix.push_back(adverse[i]);
    report.rows.push_back(evaluate_set(predict_fn, mix, class_names,
                                       static_cast<double>(k) / static_cast<double>(last)));
  }
  return report;
}

SweepReport severity_sweep(const Predictor& predict_fn, std::span<const LabeledSample> eval_set,
                           ImpairmentKind kind, std::size_t steps, double max_severity,
                           const std::vector<std::string>& class_names, std::uint64_t seed) {
  require_steps(steps);
  if (eval_set.empty()) throw ConfigError("severity sweep needs a non-empty evaluation set");
  const double cap = kind == ImpairmentKind::noise ? kMaxNoiseSeverity : 1.0;
  if (!(max_severity >= 0.0 && max_severity <= cap)) {
    throw ConfigError(to_string(kind) + " sweep maximum " + std::to_string(max_severity) +
                      " outside [0, " + std::to_string(cap) + "]");
  }
  SweepReport report;
  report.x_label = kind == ImpairmentKind::noise ? "noise_severity" : "fog_fraction";
  report.adverse_id = to_string(kind);
  report.seed = seed;
  report.steps = steps;
  report.class_names = class_names;
  const auto order = draw_indices(eval_set.size(), eval_set.size(), derive_seed(seed, {0xf09ull}));
  std::vector<Tensor> fogged;
  for (std::size_t k = 0; k < steps; ++k) {
    const double x = max_severity * static_cast<double>(k) / static_cast<double>(steps - 1);
    std::vector<LabeledSample> set(eval_set.begin(), eval_set.end());
    if (kind == ImpairmentKind::noise) {
      for (std::size_t i = 0; i < set.size(); ++i)
        set[i].image = apply_noise(set[i].image, x, derive_seed(seed, {k, i}));
    } else {
      if (fogged.empty())
        for (std::size_t i = 0; i < set.size(); ++i)
          fogged.push_back(apply_fog(eval_set[i].image, 1.0, derive_seed(seed, {i})));
      const auto replaced = static_cast<std::size_t>(std::llround(x * static_cast<double>(set.size())));
      for (std::size_t r = 0; r < replaced; ++r) set[order[r]].image = fogged[order[r]];
    }
    report.rows.push_back(evaluate_set(predict_fn, set, class_names, x));
  }
  return report;
}

void write_sweep_csv(std::ostream& os, const SweepReport& report) {
  const auto flags = os.flags();
  const auto prec = os.precision();
  os.setf(std::ios::fixed);
  os.precision(6);
  os << report.x_label << ",miou";
  for (const auto& n : report.class_names) os << ",iou_" << n;
  os << '\n';
  for (const auto& r : report.rows) {
    os << r.x << ',' << r.miou;
    for (const auto& v : r.class_iou) {
      os << ',';
      if (v) os << *v;
    }
    os << '\n';
  }
  os.flags(flags);
  os.precision(prec);
}

void write_sweep_dat(std::ostream& os, const SweepReport& report) {
  const auto flags = os.flags();
  const auto prec = os.precision();
  os.setf(std::ios::fixed);
  os.precision(6);
  os << "# " << report.x_label << " miou\n";
  for (const auto& r : report.rows) os << r.x << ' ' << r.miou << '\n';
  os.flags(flags);
  os.precision(prec);
}

std::vector<DegradationRow> degradation_table(
    const SweepReport& baseline, const std::vector<std::pair<std::string, SweepReport>>& conditions) {
  auto endpoints = [](const std::string& name, const SweepReport& r) {
    if (r.rows.size() < 2) {
      throw ValidationError("report '" + name + "' lacks its endpoint rows");
    }
    return DegradationRow{name, r.rows.front().miou, r.rows.back().miou,
                          100.0 * (r.rows.front().miou - r.rows.back().miou)};
  };
  std::vector<DegradationRow> out{endpoints("baseline", baseline)};
  for (const auto& [name, report] : conditions) {
    if (report.arrangement != baseline.arrangement) {
      throw ValidationError("report '" + name + "' is for arrangement '" + report.arrangement +
                            "', baseline is '" + baseline.arrangement + "'");
    }
    out.push_back(endpoints(name, report));
  }
  return out;
}

void write_degradation_csv(std::ostream& os, const std::vector<DegradationRow>& rows) {
  const auto flags = os.flags();
  const auto prec = os.precision();
  os.setf(std::ios::fixed);
  os.precision(4);
  os << "condition,start_miou,end_miou,drop_pp\n";
  for (const auto& r : rows)
    os << r.condition << ',' << r.start_miou << ',' << r.end_miou << ',' << std::setprecision(2)
       << r.drop_pp << std::setprecision(4) << '\n';
  os.flags(flags);
  os.precision(prec);
}

}  // namespace cmsnet
