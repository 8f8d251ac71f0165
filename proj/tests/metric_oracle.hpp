#pragma once

// Independent metric oracle: explicit per-class pixel sets, intersections and
// unions, in exact rational arithmetic. Never reads a confusion matrix.

#include <boost/rational.hpp>

#include <optional>
#include <set>
#include <vector>

#include "cmsnet/tensor.hpp"

namespace cmsnet::test {

using Rational = boost::rational<long long>;

struct OracleMetrics {
  Rational pixel_accuracy;
  std::vector<std::optional<Rational>> class_accuracy;
  Rational mean_accuracy;
  std::vector<std::optional<Rational>> iou;
  Rational mean_iou;
  Rational fw_iou;
};

inline OracleMetrics oracle_metrics(const std::vector<LabelMap>& truths,
                                    const std::vector<LabelMap>& preds, int num_classes,
                                    std::int32_t ignore = kVoidLabel) {
  // Pixel identity = (image, position).
  using Px = std::pair<std::size_t, std::size_t>;
  std::vector<std::set<Px>> truth_sets(num_classes), pred_sets(num_classes);
  std::set<Px> counted;
  for (std::size_t img = 0; img < truths.size(); ++img)
    for (std::size_t i = 0; i < truths[img].labels.size(); ++i) {
      const auto t = truths[img].labels[i];
      if (t == ignore) continue;
      counted.insert({img, i});
      truth_sets[t].insert({img, i});
      pred_sets[preds[img].labels[i]].insert({img, i});
    }
  auto inter = [](const std::set<Px>& a, const std::set<Px>& b) {
    long long n = 0;
    for (const auto& p : a) n += b.count(p);
    return n;
  };
  auto uni = [&](const std::set<Px>& a, const std::set<Px>& b) {
    std::set<Px> u = a;
    u.insert(b.begin(), b.end());
    return static_cast<long long>(u.size());
  };
  OracleMetrics m;
  long long correct = 0;
  Rational acc_sum = 0, iou_sum = 0, fw_sum = 0;
  long long acc_n = 0, iou_n = 0;
  for (int c = 0; c < num_classes; ++c) {
    const long long hit = inter(truth_sets[c], pred_sets[c]);
    correct += hit;
    const auto tc = static_cast<long long>(truth_sets[c].size());
    if (tc > 0) {
      m.class_accuracy.push_back(Rational(hit, tc));
      acc_sum += Rational(hit, tc);
      ++acc_n;
    } else {
      m.class_accuracy.push_back(std::nullopt);
    }
    const long long u = uni(truth_sets[c], pred_sets[c]);
    if (u > 0) {
      m.iou.push_back(Rational(hit, u));
      iou_sum += Rational(hit, u);
      ++iou_n;
      fw_sum += Rational(tc) * Rational(hit, u);
    } else {
      m.iou.push_back(std::nullopt);
    }
  }
  const auto total = static_cast<long long>(counted.size());
  m.pixel_accuracy = Rational(correct, total);
  m.mean_accuracy = acc_sum / Rational(acc_n);
  m.mean_iou = iou_sum / Rational(iou_n);
  m.fw_iou = fw_sum / Rational(total);
  return m;
}

}  // namespace cmsnet::test
