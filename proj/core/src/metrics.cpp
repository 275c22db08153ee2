#include "matseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

namespace matseg {

ConfusionMatrix::ConfusionMatrix(std::size_t num_classes,
                                 std::int32_t ignore_label)
    : num_classes_(num_classes),
      ignore_label_(ignore_label),
      counts_(num_classes * num_classes, 0) {
  if (num_classes == 0) {
    throw MetricsError("ConfusionMatrix needs at least one class");
  }
}

void ConfusionMatrix::accumulate(const LabelMask& pred, const LabelMask& gt) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw MetricsError("accumulate: pred/gt shape mismatch");
  }
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    const std::int32_t g = gt.labels[i];
    if (g == ignore_label_) continue;
    const std::int32_t p = pred.labels[i];
    if (g < 0 || static_cast<std::size_t>(g) >= num_classes_) {
      throw MetricsError("accumulate: ground-truth label out of range");
    }
    if (p < 0 || static_cast<std::size_t>(p) >= num_classes_) {
      throw MetricsError("accumulate: predicted label out of range");
    }
    ++counts_[static_cast<std::size_t>(g) * num_classes_ +
              static_cast<std::size_t>(p)];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.num_classes_ != num_classes_) {
    throw MetricsError("merge: class count mismatch");
  }
  for (std::size_t i = 0; i < counts_.size(); ++i) {
    counts_[i] += other.counts_[i];
  }
}

std::uint64_t ConfusionMatrix::total() const {
  std::uint64_t t = 0;
  for (std::uint64_t c : counts_) t += c;
  return t;
}

MetricSummary summarize(const ConfusionMatrix& cm) {
  const std::size_t C = cm.num_classes();
  MetricSummary s;
  s.total_pixels = cm.total();
  if (s.total_pixels == 0) {
    throw MetricsError("summarize: empty confusion matrix");
  }

  const double nan = std::numeric_limits<double>::quiet_NaN();
  s.per_class_iou.assign(C, nan);
  s.per_class_recall.assign(C, nan);

  std::uint64_t trace = 0;
  double iou_sum = 0.0, recall_sum = 0.0;
  std::size_t iou_n = 0, recall_n = 0;
  for (std::size_t c = 0; c < C; ++c) {
    std::uint64_t gt_total = 0, pred_total = 0;
    for (std::size_t k = 0; k < C; ++k) {
      gt_total += cm.at(c, k);
      pred_total += cm.at(k, c);
    }
    const std::uint64_t tp = cm.at(c, c);
    trace += tp;
    if (gt_total + pred_total > 0) {
      const double iou = static_cast<double>(tp) /
                         static_cast<double>(gt_total + pred_total - tp);
      s.per_class_iou[c] = iou;
      iou_sum += iou;
      ++iou_n;
    }
    if (gt_total > 0) {
      const double recall =
          static_cast<double>(tp) / static_cast<double>(gt_total);
      s.per_class_recall[c] = recall;
      recall_sum += recall;
      ++recall_n;
    }
  }
  s.miou = iou_n > 0 ? iou_sum / static_cast<double>(iou_n) : 0.0;
  s.macc = recall_n > 0 ? recall_sum / static_cast<double>(recall_n) : 0.0;
  s.aacc = static_cast<double>(trace) / static_cast<double>(s.total_pixels);
  return s;
}

namespace {

// Binary erosion with a 3x3 structuring element iterated `radius` times;
// pixels outside the image count as background.
std::vector<std::uint8_t> erode(const std::vector<std::uint8_t>& mask,
                                std::size_t h, std::size_t w, int radius) {
  std::vector<std::uint8_t> cur = mask;
  std::vector<std::uint8_t> next(mask.size());
  for (int it = 0; it < radius; ++it) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        std::uint8_t keep = cur[y * w + x];
        if (keep) {
          for (int dy = -1; dy <= 1 && keep; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
              const std::int64_t ny = static_cast<std::int64_t>(y) + dy;
              const std::int64_t nx = static_cast<std::int64_t>(x) + dx;
              if (ny < 0 || nx < 0 || ny >= static_cast<std::int64_t>(h) ||
                  nx >= static_cast<std::int64_t>(w) ||
                  cur[static_cast<std::size_t>(ny) * w +
                      static_cast<std::size_t>(nx)] == 0) {
                keep = 0;
                break;
              }
            }
          }
        }
        next[y * w + x] = keep;
      }
    }
    std::swap(cur, next);
  }
  return cur;
}

}  // namespace

BoundaryIoUResult boundary_iou(const LabelMask& pred, const LabelMask& gt,
                               double d_frac, std::int32_t ignore_label) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw MetricsError("boundary_iou: pred/gt shape mismatch");
  }
  if (d_frac <= 0.0) {
    throw MetricsError("boundary_iou: d_frac must be > 0");
  }
  const std::size_t h = gt.height, w = gt.width;
  const double diagonal =
      std::sqrt(static_cast<double>(h) * static_cast<double>(h) +
                static_cast<double>(w) * static_cast<double>(w));
  const int radius = static_cast<int>(std::ceil(d_frac * diagonal));

  std::set<std::int32_t> present;
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    if (gt.labels[i] != ignore_label) {
      present.insert(gt.labels[i]);
      present.insert(pred.labels[i]);
    }
  }
  if (present.empty()) {
    throw MetricsError("boundary_iou: no supervised pixels");
  }

  BoundaryIoUResult r;
  r.band_radius = radius;
  double mean_sum = 0.0;
  for (std::int32_t cls : present) {
    std::vector<std::uint8_t> gm(h * w, 0), pm(h * w, 0);
    for (std::size_t i = 0; i < gt.labels.size(); ++i) {
      if (gt.labels[i] == ignore_label) continue;
      if (gt.labels[i] == cls) gm[i] = 1;
      if (pred.labels[i] == cls) pm[i] = 1;
    }
    const auto ge = erode(gm, h, w, radius);
    const auto pe = erode(pm, h, w, radius);
    std::uint64_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < gm.size(); ++i) {
      const bool gb = gm[i] && !ge[i];
      const bool pb = pm[i] && !pe[i];
      inter += (gb && pb) ? 1 : 0;
      uni += (gb || pb) ? 1 : 0;
    }
    const double iou =
        uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
    r.classes.push_back(cls);
    r.intersection.push_back(inter);
    r.union_count.push_back(uni);
    r.per_class.push_back(iou);
    mean_sum += iou;
  }
  r.mean = mean_sum / static_cast<double>(r.classes.size());
  return r;
}

}  // namespace matseg
