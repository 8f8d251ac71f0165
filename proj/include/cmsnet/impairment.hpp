#pragma once

// Synthetic visibility impairments (Gaussian noise, fog veil) and the two
// degradation protocols built on them: the clean-to-adverse condition mix
// and the per-kind severity sweep.

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cmsnet/network.hpp"
#include "cmsnet/sample.hpp"
#include "cmsnet/tensor.hpp"

namespace cmsnet {

enum class ImpairmentKind { fog, noise };

std::string to_string(ImpairmentKind kind);
ImpairmentKind parse_impairment(std::string_view text);

inline constexpr double kMaxNoiseSeverity = 0.25;
inline constexpr float kFogVeil = 0.95f;

struct ImpairmentSpec {
  ImpairmentKind kind = ImpairmentKind::noise;
  double severity = 0;
  std::uint64_t seed = 0;
};

/// clamp(in + N(0, sigma^2)) with sigma = severity on the [0, 1] range.
Tensor apply_noise(const Tensor& image, double severity, std::uint64_t seed);

/// Smooth field in [0, 1] (three octaves of value noise, min-max
/// normalised), one per batch item, laid out h*w row-major.
std::vector<double> fog_field(std::size_t h, std::size_t w, std::uint64_t seed);

/// t*in + (1-t)*veil with t = 1 - severity*f(x, y).
Tensor apply_fog(const Tensor& image, double severity, std::uint64_t seed);

Tensor impair(const Tensor& image, const ImpairmentSpec& spec);

using Predictor = std::function<LabelMap(const Tensor&)>;

/// Wraps a network's inference pass; the network must outlive the predictor.
Predictor network_predictor(const Network& net);

/// `count` distinct indices from [0, pool), seeded.
std::vector<std::size_t> draw_indices(std::size_t pool, std::size_t count, std::uint64_t seed);

struct SweepRow {
  double x = 0;  // fraction of adverse images, or severity
  double miou = 0;
  std::vector<std::optional<double>> class_iou;
};

struct SweepReport {
  std::string arrangement;
  std::string x_label;
  std::string clean_id;
  std::string adverse_id;
  std::uint64_t seed = 0;
  std::size_t steps = 0;
  std::vector<std::string> class_names;
  std::vector<SweepRow> rows;
};

/// mIoU over a set of samples, plus per-class IoU.
SweepRow evaluate_set(const Predictor& predict, std::span<const LabeledSample> set,
                      const std::vector<std::string>& class_names, double x = 0);

/// Row k mixes ceil((1 - f_k) * set_size) clean samples with the rest drawn
/// from the adverse pool, f_k = k / (steps - 1). Draws are re-made per row.
/// The clean draw of row k and the adverse draw of row steps-1-k share a
/// seed, so identical pools give identical endpoint rows.
SweepReport condition_mix_sweep(const Predictor& predict, std::span<const LabeledSample> clean,
                                std::span<const LabeledSample> adverse, std::size_t steps,
                                std::size_t set_size, const std::vector<std::string>& class_names,
                                std::uint64_t seed);

/// Noise: every image at severity s_k = max_severity * k / (steps - 1).
/// Fog: a growing proportion p_k = max_severity * k / (steps - 1) of the
/// images (nested, seeded order) is replaced by its fully fogged version.
SweepReport severity_sweep(const Predictor& predict, std::span<const LabeledSample> eval_set,
                           ImpairmentKind kind, std::size_t steps, double max_severity,
                           const std::vector<std::string>& class_names, std::uint64_t seed);

/// fraction-or-severity, miou, then one IoU column per class (empty when undefined).
void write_sweep_csv(std::ostream& os, const SweepReport& report);
/// Two whitespace-separated columns (x, miou) with a comment header.
void write_sweep_dat(std::ostream& os, const SweepReport& report);

struct DegradationRow {
  std::string condition;
  double start_miou = 0;
  double end_miou = 0;
  double drop_pp = 0;
};

/// Percentage-point drop between each report's first and last rows.
std::vector<DegradationRow> degradation_table(
    const SweepReport& baseline, const std::vector<std::pair<std::string, SweepReport>>& conditions);

void write_degradation_csv(std::ostream& os, const std::vector<DegradationRow>& rows);

}  // namespace cmsnet
