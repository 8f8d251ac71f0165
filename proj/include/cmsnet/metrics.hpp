#pragma once

// Confusion-matrix accumulation and the segmentation statistics computed
// from it: pixel accuracy, per-class and mean accuracy, IoU, mIoU and
// frequency-weighted IoU.
//
// Metric functions are templated on the number type so they can run on
// exact rationals as well as doubles. Only +, -, *, / and comparisons are
// used on that type.

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cmsnet/error.hpp"
#include "cmsnet/tensor.hpp"

namespace cmsnet {

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::vector<std::string> class_names,
                           std::optional<std::int32_t> ignore_index = kVoidLabel)
      : names_(std::move(class_names)),
        ignore_(ignore_index),
        counts_(names_.size() * names_.size(), 0) {
    if (names_.empty()) throw ConfigError("confusion matrix needs at least one class");
  }

  static ConfusionMatrix with_classes(std::size_t n,
                                      std::optional<std::int32_t> ignore_index = kVoidLabel) {
    std::vector<std::string> names;
    for (std::size_t i = 0; i < n; ++i) names.push_back("class" + std::to_string(i));
    return ConfusionMatrix(std::move(names), ignore_index);
  }

  std::size_t num_classes() const { return names_.size(); }
  const std::vector<std::string>& class_names() const { return names_; }
  std::optional<std::int32_t> ignore_index() const { return ignore_; }

  /// Pixels of true class `truth` predicted as `pred`.
  std::uint64_t count(std::size_t truth, std::size_t pred) const {
    return counts_[truth * names_.size() + pred];
  }
  std::uint64_t& count(std::size_t truth, std::size_t pred) {
    return counts_[truth * names_.size() + pred];
  }

  /// t_i: pixels whose true class is i.
  std::uint64_t row_total(std::size_t i) const {
    std::uint64_t t = 0;
    for (std::size_t j = 0; j < names_.size(); ++j) t += count(i, j);
    return t;
  }

  /// Pixels predicted as class j.
  std::uint64_t column_total(std::size_t j) const {
    std::uint64_t t = 0;
    for (std::size_t i = 0; i < names_.size(); ++i) t += count(i, j);
    return t;
  }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  /// Adds one pixel pair per location. Pixels whose truth equals the ignore
  /// index are skipped.
  void accumulate(const LabelMap& truth, const LabelMap& pred) {
    if (truth.n != pred.n || truth.h != pred.h || truth.w != pred.w) {
      throw ValidationError("accumulate: truth and prediction maps differ in shape");
    }
    const auto n = static_cast<std::int32_t>(names_.size());
    // Validate first so a bad map leaves the matrix untouched.
    for (std::size_t i = 0; i < truth.size(); ++i) {
      const auto t = truth.labels[i];
      if (ignore_ && t == *ignore_) continue;
      const auto p = pred.labels[i];
      if (t < 0 || t >= n) {
        throw ValidationError("accumulate: truth class " + std::to_string(t) + " out of range");
      }
      if (p < 0 || p >= n) {
        throw ValidationError("accumulate: predicted class " + std::to_string(p) + " out of range");
      }
    }
    for (std::size_t i = 0; i < truth.size(); ++i) {
      const auto t = truth.labels[i];
      if (ignore_ && t == *ignore_) continue;
      ++count(static_cast<std::size_t>(t), static_cast<std::size_t>(pred.labels[i]));
    }
  }

  void merge(const ConfusionMatrix& other) {
    if (other.num_classes() != num_classes()) {
      throw ValidationError("merge: class counts differ");
    }
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

  friend bool operator==(const ConfusionMatrix& a, const ConfusionMatrix& b) {
    return a.counts_ == b.counts_;
  }

 private:
  std::vector<std::string> names_;
  std::optional<std::int32_t> ignore_;
  std::vector<std::uint64_t> counts_;
};

namespace detail {

inline void require_counts(const ConfusionMatrix& cm, const char* metric) {
  if (cm.total() == 0) {
    throw UndefinedMetricError(std::string(metric) + " is undefined on an empty confusion matrix");
  }
}

template <class R>
R as_number(std::uint64_t v) {
  return R(static_cast<long long>(v));
}

}  // namespace detail

/// Correctly classified pixels over all counted pixels.
template <class R = double>
R pixel_accuracy(const ConfusionMatrix& cm) {
  detail::require_counts(cm, "pixel accuracy");
  std::uint64_t diag = 0;
  for (std::size_t i = 0; i < cm.num_classes(); ++i) diag += cm.count(i, i);
  return detail::as_number<R>(diag) / detail::as_number<R>(cm.total());
}

/// n_ii / t_i; empty when the class never occurs in the truth.
template <class R = double>
std::optional<R> class_pixel_accuracy(const ConfusionMatrix& cm, std::size_t cls) {
  const auto t = cm.row_total(cls);
  if (t == 0) return std::nullopt;
  return detail::as_number<R>(cm.count(cls, cls)) / detail::as_number<R>(t);
}

/// Mean of class_pixel_accuracy over classes present in the truth.
template <class R = double>
R mean_accuracy(const ConfusionMatrix& cm) {
  detail::require_counts(cm, "mean accuracy");
  R sum(0);
  long long present = 0;
  for (std::size_t i = 0; i < cm.num_classes(); ++i) {
    if (auto v = class_pixel_accuracy<R>(cm, i)) {
      sum = sum + *v;
      ++present;
    }
  }
  return sum / R(present);
}

/// n_ii / (t_i + predicted_i - n_ii); empty when the class is absent from
/// both truth and prediction.
template <class R = double>
std::optional<R> iou(const ConfusionMatrix& cm, std::size_t cls) {
  const auto denom = cm.row_total(cls) + cm.column_total(cls) - cm.count(cls, cls);
  if (denom == 0) return std::nullopt;
  return detail::as_number<R>(cm.count(cls, cls)) / detail::as_number<R>(denom);
}

template <class R = double>
R mean_iou(const ConfusionMatrix& cm) {
  detail::require_counts(cm, "mean IoU");
  R sum(0);
  long long present = 0;
  for (std::size_t i = 0; i < cm.num_classes(); ++i) {
    if (auto v = iou<R>(cm, i)) {
      sum = sum + *v;
      ++present;
    }
  }
  return sum / R(present);
}

/// IoU weighted by true-class pixel frequency.
template <class R = double>
R fw_iou(const ConfusionMatrix& cm) {
  detail::require_counts(cm, "frequency-weighted IoU");
  R sum(0);
  for (std::size_t i = 0; i < cm.num_classes(); ++i) {
    const auto t = cm.row_total(i);
    if (t == 0) continue;
    sum = sum + detail::as_number<R>(t) * *iou<R>(cm, i);
  }
  return sum / detail::as_number<R>(cm.total());
}

struct ClassMetrics {
  std::string name;
  std::uint64_t pixels = 0;  // t_i
  std::optional<double> accuracy;
  std::optional<double> iou;
};

struct MetricReport {
  std::vector<ClassMetrics> classes;
  double pixel_accuracy = 0;
  double mean_accuracy = 0;
  double mean_iou = 0;
  double fw_iou = 0;
};

inline MetricReport evaluate(const ConfusionMatrix& cm) {
  MetricReport r;
  for (std::size_t i = 0; i < cm.num_classes(); ++i) {
    r.classes.push_back({cm.class_names()[i], cm.row_total(i), class_pixel_accuracy(cm, i),
                         iou(cm, i)});
  }
  r.pixel_accuracy = pixel_accuracy(cm);
  r.mean_accuracy = mean_accuracy(cm);
  r.mean_iou = mean_iou(cm);
  r.fw_iou = fw_iou(cm);
  return r;
}

/// One row per class (name, t_i, CP_acc, IoU) then a summary row. Absent
/// metrics are written as empty cells.
inline void write_metrics_csv(std::ostream& os, const MetricReport& r) {
  const auto old_flags = os.flags();
  const auto old_precision = os.precision();
  os.setf(std::ios::fixed);
  os.precision(6);
  os << "class,pixels,cp_acc,iou\n";
  for (const auto& c : r.classes) {
    os << c.name << ',' << c.pixels << ',';
    if (c.accuracy) os << *c.accuracy;
    os << ',';
    if (c.iou) os << *c.iou;
    os << '\n';
  }
  os << "summary,p_acc,mcp_acc,miou,fwiou\n";
  os << "summary," << r.pixel_accuracy << ',' << r.mean_accuracy << ',' << r.mean_iou << ','
     << r.fw_iou << '\n';
  os.flags(old_flags);
  os.precision(old_precision);
}

/// Per-image mode: one report per (truth, pred) pair; images whose pixels
/// are all ignored give no report.
inline std::vector<std::optional<MetricReport>> per_image_reports(
    const std::vector<std::string>& class_names, const std::vector<LabelMap>& truths,
    const std::vector<LabelMap>& preds, std::optional<std::int32_t> ignore_index = kVoidLabel) {
  if (truths.size() != preds.size()) throw ValidationError("per_image_reports: list sizes differ");
  std::vector<std::optional<MetricReport>> out;
  for (std::size_t i = 0; i < truths.size(); ++i) {
    ConfusionMatrix cm(class_names, ignore_index);
    cm.accumulate(truths[i], preds[i]);
    if (cm.total() == 0) {
      out.emplace_back();
    } else {
      out.emplace_back(evaluate(cm));
    }
  }
  return out;
}

/// image,p_acc,mcp_acc,miou,fwiou; empty cells for images without counted pixels.
inline void write_per_image_csv(std::ostream& os, const std::vector<std::string>& image_ids,
                                const std::vector<std::optional<MetricReport>>& reports) {
  const auto old_flags = os.flags();
  const auto old_precision = os.precision();
  os.setf(std::ios::fixed);
  os.precision(6);
  os << "image,p_acc,mcp_acc,miou,fwiou\n";
  for (std::size_t i = 0; i < reports.size(); ++i) {
    os << (i < image_ids.size() ? image_ids[i] : std::to_string(i));
    if (const auto& r = reports[i]) {
      os << ',' << r->pixel_accuracy << ',' << r->mean_accuracy << ',' << r->mean_iou << ','
         << r->fw_iou;
    } else {
      os << ",,,,";
    }
    os << '\n';
  }
  os.flags(old_flags);
  os.precision(old_precision);
}

}  // namespace cmsnet
