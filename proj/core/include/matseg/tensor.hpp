#pragma once

// Dense row-major tensor substrate: softmax / log-softmax, bilinear and
// nearest resampling, reductions. All exported operations are dimension
// checked and reject non-finite values instead of propagating them.

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace matseg {

class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Reserved label for unannotated pixels; excluded from losses and metrics.
inline constexpr std::int32_t kDefaultIgnoreLabel = 255;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape, double fill = 0.0);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // (c, y, x) addressing for rank-3 tensors (channel, row, column).
  double& at3(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  double at3(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

struct LabelMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::int32_t> labels;  // row-major

  LabelMask() = default;
  LabelMask(std::size_t h, std::size_t w, std::int32_t fill = 0)
      : height(h), width(w), labels(h * w, fill) {}

  std::int32_t& at(std::size_t y, std::size_t x) {
    return labels[y * width + x];
  }
  std::int32_t at(std::size_t y, std::size_t x) const {
    return labels[y * width + x];
  }
  std::size_t size() const { return labels.size(); }
};

// Throws TensorError mentioning `what` if any element is NaN or infinite.
void require_finite(const Tensor& t, const std::string& what);

// Softmax along `axis`, computed with max-subtraction. Slices along the axis
// sum to 1 within 1e-12.
Tensor softmax(const Tensor& t, std::size_t axis);
Tensor log_softmax(const Tensor& t, std::size_t axis);

// Resamples the two trailing spatial dims of a (C, H, W) or (H, W) tensor.
// Default convention is half-pixel centers; align_corners selects the
// corner-aligned alternative.
Tensor upsample_bilinear(const Tensor& t, std::size_t out_h, std::size_t out_w,
                         bool align_corners = false);

// Nearest-neighbor resampling with src = floor((dst + 0.5) * in / out),
// clamped. Works in both directions; never invents labels.
LabelMask nearest_resize(const LabelMask& mask, std::size_t out_h,
                         std::size_t out_w);

// nearest_resize restricted to out <= in as used by the downsampled-label
// baseline loss path.
LabelMask downsample_nearest(const LabelMask& mask, std::size_t out_h,
                             std::size_t out_w);

// One output pixel's two source taps along a single axis.
struct BilinearTap {
  std::size_t lo = 0;
  std::size_t hi = 0;
  double frac = 0.0;  // weight of `hi`; `lo` gets 1 - frac
};

BilinearTap bilinear_tap(std::size_t out_index, std::size_t in_extent,
                         std::size_t out_extent, bool align_corners);

double sum(const Tensor& t);
double mean(const Tensor& t);
double min_value(const Tensor& t);
double max_value(const Tensor& t);

}  // namespace matseg
