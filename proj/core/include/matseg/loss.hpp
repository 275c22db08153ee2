#pragma once

// Stabilizer loss kernels, forward + analytic backward:
//  - hflp_loss: label-smoothed cross-entropy on logits bilinearly upsampled to
//    label resolution (gradient chains through the transposed interpolation).
//  - qer_loss: entropy regularizer pushing per-query class distributions
//    toward uniform.
//  - cross_entropy_downsampled: the nearest-downsampled-label baseline, kept
//    for ablation.
// All arithmetic is 64-bit so finite-difference checks are meaningful.

#include <cstdint>

#include "matseg/tensor.hpp"

namespace matseg {

class LossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when every pixel of the target is the ignore label.
class EmptySupervisionError : public LossError {
 public:
  using LossError::LossError;
};

// Per-pixel class scores at reduced resolution, shape (C, h, w). `stride` is
// the ratio of label resolution to logit resolution.
struct LogitMap {
  Tensor tensor;
  int classes = 0;
  int stride = 4;

  LogitMap() = default;
  explicit LogitMap(Tensor t, int stride_in = 4);

  std::size_t height() const { return tensor.dim(1); }
  std::size_t width() const { return tensor.dim(2); }
};

struct HflpConfig {
  double epsilon = 0.1;
  std::int32_t ignore_label = kDefaultIgnoreLabel;
  bool align_corners = false;
};

enum class QerDirection {
  kEntropyMax,  // KL(P || U) = ln K - H(P)
  kReverse,     // KL(U || P), the literal reading
};

struct QerConfig {
  double lambda = 0.1;
  QerDirection direction = QerDirection::kEntropyMax;
};

struct LossResult {
  double loss = 0.0;
  Tensor grad;  // same shape as the differentiated input
};

// Mean smoothed cross-entropy over supervised pixels, computed on logits
// upsampled to label resolution. The normalizer is the count of non-ignored
// pixels. grad is w.r.t. the stride-resolution logits.
LossResult hflp_loss(const LogitMap& z, const LabelMask& y,
                     const HflpConfig& cfg = {});

// q has shape (N_queries, K). With kEntropyMax the loss is
// lambda * mean_n(ln K - H(softmax(q_n))), zero iff every row is uniform.
LossResult qer_loss(const Tensor& q, const QerConfig& cfg = {});

// Baseline: plain cross-entropy against the target downsampled to logit
// resolution with nearest-neighbor interpolation.
LossResult cross_entropy_downsampled(
    const LogitMap& z, const LabelMask& y,
    std::int32_t ignore_label = kDefaultIgnoreLabel);

}  // namespace matseg
