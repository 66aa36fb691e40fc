// SPDX-License-Identifier: Apache-2.0
//
// Confusion-matrix accumulation and the five class-related scores: overall
// accuracy, user's accuracy (precision), producer's accuracy (recall), mean
// intersection-over-union, and F1.
#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "diversenet/errors.hpp"
#include "diversenet/types.hpp"

namespace diversenet {

/// counts[g][p] = pixels with ground truth g predicted p. Ignored ground
/// truth pixels are never counted. Accumulation is associative, so partial
/// matrices from separate batches may be merged by addition.
class ConfusionMatrix {
public:
  explicit ConfusionMatrix(std::int64_t class_count)
      : class_count_(class_count),
        counts_(static_cast<std::size_t>(class_count * class_count), 0) {
    if (class_count < 2) throw ArgError("ConfusionMatrix: need at least 2 classes");
  }

  std::int64_t class_count() const { return class_count_; }

  std::int64_t at(std::int64_t gt, std::int64_t pred) const {
    return counts_[static_cast<std::size_t>(gt * class_count_ + pred)];
  }
  std::int64_t& at(std::int64_t gt, std::int64_t pred) {
    return counts_[static_cast<std::size_t>(gt * class_count_ + pred)];
  }

  std::int64_t total() const {
    std::int64_t t = 0;
    for (auto v : counts_) t += v;
    return t;
  }

  void accumulate(const ClassMap& pred, const ClassMap& gt) {
    require_same_shape(pred.labels, gt.labels, "ConfusionMatrix::accumulate");
    const std::int64_t n = gt.labels.numel();
    for (std::int64_t i = 0; i < n; ++i) {
      const std::int32_t g = gt.labels[i];
      const std::int32_t p = pred.labels[i];
      if (g == kIgnoreLabel) continue;
      if (p == kIgnoreLabel)
        throw ArgError("ConfusionMatrix::accumulate: prediction contains ignore label");
      if (g < 0 || g >= class_count_ || p < 0 || p >= class_count_)
        throw ArgError("ConfusionMatrix::accumulate: class index out of range");
      ++at(g, p);
    }
  }

  void merge(const ConfusionMatrix& other) {
    if (other.class_count_ != class_count_)
      throw ArgError("ConfusionMatrix::merge: class count mismatch");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

private:
  std::int64_t class_count_;
  std::vector<std::int64_t> counts_;
};

/// Per-class scores; a metric is absent when its denominator is zero
/// (class absent from both prediction and ground truth for that metric).
struct ClassScores {
  std::optional<double> ua;   // TP / (TP + FP)
  std::optional<double> pa;   // TP / (TP + FN)
  std::optional<double> iou;  // TP / (TP + FP + FN)
  std::optional<double> f1;   // 2 TP / (2 TP + FP + FN)
};

struct MetricReport {
  double oa = 0.0;
  std::vector<ClassScores> per_class;
  std::optional<double> macro_ua, macro_pa, miou, macro_f1;
};

/// One-vs-rest scores per class, unweighted macro means over classes where
/// the score is defined, and global overall accuracy = trace / total.
inline MetricReport derive_metrics(const ConfusionMatrix& cm) {
  const std::int64_t c_n = cm.class_count();
  const std::int64_t total = cm.total();
  if (total == 0) throw DegenerateError("derive_metrics: confusion matrix has no counted pixels");

  MetricReport report;
  report.per_class.resize(static_cast<std::size_t>(c_n));

  std::int64_t trace = 0;
  double sum_ua = 0, sum_pa = 0, sum_iou = 0, sum_f1 = 0;
  std::int64_t n_ua = 0, n_pa = 0, n_iou = 0, n_f1 = 0;
  for (std::int64_t c = 0; c < c_n; ++c) {
    const std::int64_t tp = cm.at(c, c);
    std::int64_t fp = 0, fn = 0;
    for (std::int64_t o = 0; o < c_n; ++o) {
      if (o == c) continue;
      fp += cm.at(o, c);
      fn += cm.at(c, o);
    }
    trace += tp;
    auto& sc = report.per_class[static_cast<std::size_t>(c)];
    if (tp + fp > 0) {
      sc.ua = static_cast<double>(tp) / static_cast<double>(tp + fp);
      sum_ua += *sc.ua;
      ++n_ua;
    }
    if (tp + fn > 0) {
      sc.pa = static_cast<double>(tp) / static_cast<double>(tp + fn);
      sum_pa += *sc.pa;
      ++n_pa;
    }
    if (tp + fp + fn > 0) {
      sc.iou = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
      sum_iou += *sc.iou;
      ++n_iou;
      sc.f1 = 2.0 * static_cast<double>(tp) / static_cast<double>(2 * tp + fp + fn);
      sum_f1 += *sc.f1;
      ++n_f1;
    }
  }
  report.oa = static_cast<double>(trace) / static_cast<double>(total);
  if (n_ua) report.macro_ua = sum_ua / static_cast<double>(n_ua);
  if (n_pa) report.macro_pa = sum_pa / static_cast<double>(n_pa);
  if (n_iou) report.miou = sum_iou / static_cast<double>(n_iou);
  if (n_f1) report.macro_f1 = sum_f1 / static_cast<double>(n_f1);
  return report;
}

}  // namespace diversenet
