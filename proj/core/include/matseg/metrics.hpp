#pragma once

// Streaming segmentation metrics: confusion-matrix region metrics
// (per-class IoU, mIoU, mAcc, aAcc) and boundary IoU over a contour band.

#include <cstdint>
#include <vector>

#include "matseg/tensor.hpp"

namespace matseg {

class MetricsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// C x C integer counts, rows = ground truth, cols = prediction. Pixels whose
// ground-truth label equals the ignore label are never counted. Mergeable by
// elementwise addition, so per-worker matrices can be combined in any order.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes,
                           std::int32_t ignore_label = kDefaultIgnoreLabel);

  void accumulate(const LabelMask& pred, const LabelMask& gt);
  void merge(const ConfusionMatrix& other);

  std::uint64_t at(std::size_t gt, std::size_t pred) const {
    return counts_[gt * num_classes_ + pred];
  }
  std::uint64_t& at(std::size_t gt, std::size_t pred) {
    return counts_[gt * num_classes_ + pred];
  }

  std::size_t num_classes() const { return num_classes_; }
  std::int32_t ignore_label() const { return ignore_label_; }
  std::uint64_t total() const;

 private:
  std::size_t num_classes_;
  std::int32_t ignore_label_;
  std::vector<std::uint64_t> counts_;
};

struct MetricSummary {
  // NaN marks a class excluded from the corresponding mean.
  std::vector<double> per_class_iou;
  std::vector<double> per_class_recall;
  double miou = 0.0;
  double macc = 0.0;
  double aacc = 0.0;
  std::uint64_t total_pixels = 0;
};

// IoU_c = TP / (TP + FP + FN). Classes absent from both ground truth and
// prediction are excluded from mIoU; classes with no ground-truth pixels are
// excluded from mAcc. Throws on an empty matrix.
MetricSummary summarize(const ConfusionMatrix& cm);

struct BoundaryIoUResult {
  std::vector<int> classes;  // classes present in gt or pred
  std::vector<std::uint64_t> intersection;
  std::vector<std::uint64_t> union_count;
  std::vector<double> per_class;
  double mean = 0.0;
  int band_radius = 0;  // pixels
};

// Per class: binarize, erode by d = ceil(d_frac * image diagonal) with a 3x3
// structuring element (image border counts as outside), band = mask minus
// eroded mask, then IoU between the pred and gt bands. Ignored ground-truth
// pixels are dropped from both masks before banding.
BoundaryIoUResult boundary_iou(const LabelMask& pred, const LabelMask& gt,
                               double d_frac = 0.02,
                               std::int32_t ignore_label = kDefaultIgnoreLabel);

}  // namespace matseg
