#include "matseg/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace matseg {

namespace {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

}  // namespace

Tensor::Tensor(std::vector<std::size_t> shape, double fill)
    : shape_(std::move(shape)), data_(shape_product(shape_), fill) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_product(shape_) != data_.size()) {
    throw TensorError("tensor data length does not match shape product");
  }
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) {
    throw TensorError("axis " + std::to_string(axis) +
                      " out of range for rank " + std::to_string(rank()));
  }
  return shape_[axis];
}

void require_finite(const Tensor& t, const std::string& what) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) {
      throw TensorError("non-finite value in " + what);
    }
  }
}

namespace {

// Splits the flat layout into (outer, n, inner) around `axis` so axis slices
// can be walked with stride `inner`.
struct AxisView {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisView axis_view(const Tensor& t, std::size_t axis) {
  if (axis >= t.rank()) {
    throw TensorError("softmax axis out of range");
  }
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= t.shape()[i];
  v.n = t.shape()[axis];
  for (std::size_t i = axis + 1; i < t.rank(); ++i) v.inner *= t.shape()[i];
  if (v.n < 1) throw TensorError("softmax axis has zero extent");
  return v;
}

}  // namespace

Tensor softmax(const Tensor& t, std::size_t axis) {
  const AxisView v = axis_view(t, axis);
  require_finite(t, "softmax input");
  Tensor out(t.shape());
  const auto src = t.values();
  auto dst = out.values();
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.n * v.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < v.n; ++k) {
        mx = std::max(mx, src[base + k * v.inner]);
      }
      double denom = 0.0;
      for (std::size_t k = 0; k < v.n; ++k) {
        const double e = std::exp(src[base + k * v.inner] - mx);
        dst[base + k * v.inner] = e;
        denom += e;
      }
      for (std::size_t k = 0; k < v.n; ++k) {
        dst[base + k * v.inner] /= denom;
      }
    }
  }
  return out;
}

Tensor log_softmax(const Tensor& t, std::size_t axis) {
  const AxisView v = axis_view(t, axis);
  require_finite(t, "log_softmax input");
  Tensor out(t.shape());
  const auto src = t.values();
  auto dst = out.values();
  for (std::size_t o = 0; o < v.outer; ++o) {
    for (std::size_t i = 0; i < v.inner; ++i) {
      const std::size_t base = o * v.n * v.inner + i;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < v.n; ++k) {
        mx = std::max(mx, src[base + k * v.inner]);
      }
      double denom = 0.0;
      for (std::size_t k = 0; k < v.n; ++k) {
        denom += std::exp(src[base + k * v.inner] - mx);
      }
      const double log_denom = std::log(denom) + mx;
      for (std::size_t k = 0; k < v.n; ++k) {
        dst[base + k * v.inner] = src[base + k * v.inner] - log_denom;
      }
    }
  }
  return out;
}

BilinearTap bilinear_tap(std::size_t out_index, std::size_t in_extent,
                         std::size_t out_extent, bool align_corners) {
  BilinearTap tap;
  double src;
  if (align_corners) {
    src = out_extent > 1 ? static_cast<double>(out_index) *
                               static_cast<double>(in_extent - 1) /
                               static_cast<double>(out_extent - 1)
                         : 0.0;
  } else {
    src = (static_cast<double>(out_index) + 0.5) *
              static_cast<double>(in_extent) /
              static_cast<double>(out_extent) -
          0.5;
  }
  src = std::clamp(src, 0.0, static_cast<double>(in_extent - 1));
  tap.lo = static_cast<std::size_t>(std::floor(src));
  tap.hi = std::min(tap.lo + 1, in_extent - 1);
  tap.frac = src - static_cast<double>(tap.lo);
  return tap;
}

Tensor upsample_bilinear(const Tensor& t, std::size_t out_h, std::size_t out_w,
                         bool align_corners) {
  if (t.rank() != 2 && t.rank() != 3) {
    throw TensorError("upsample_bilinear expects a (H,W) or (C,H,W) tensor");
  }
  const std::size_t channels = t.rank() == 3 ? t.dim(0) : 1;
  const std::size_t in_h = t.shape()[t.rank() - 2];
  const std::size_t in_w = t.shape()[t.rank() - 1];
  if (in_h == 0 || in_w == 0 || out_h == 0 || out_w == 0) {
    throw TensorError("upsample_bilinear: zero-sized spatial dims");
  }
  require_finite(t, "upsample_bilinear input");

  std::vector<BilinearTap> rows(out_h), cols(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    rows[y] = bilinear_tap(y, in_h, out_h, align_corners);
  }
  for (std::size_t x = 0; x < out_w; ++x) {
    cols[x] = bilinear_tap(x, in_w, out_w, align_corners);
  }

  std::vector<std::size_t> out_shape = t.shape();
  out_shape[t.rank() - 2] = out_h;
  out_shape[t.rank() - 1] = out_w;
  Tensor out(out_shape);

  const auto src = t.values();
  auto dst = out.values();
  for (std::size_t c = 0; c < channels; ++c) {
    const std::size_t src_base = c * in_h * in_w;
    const std::size_t dst_base = c * out_h * out_w;
    for (std::size_t y = 0; y < out_h; ++y) {
      const BilinearTap& ry = rows[y];
      const double fy = ry.frac;
      for (std::size_t x = 0; x < out_w; ++x) {
        const BilinearTap& rx = cols[x];
        const double fx = rx.frac;
        const double v00 = src[src_base + ry.lo * in_w + rx.lo];
        const double v01 = src[src_base + ry.lo * in_w + rx.hi];
        const double v10 = src[src_base + ry.hi * in_w + rx.lo];
        const double v11 = src[src_base + ry.hi * in_w + rx.hi];
        dst[dst_base + y * out_w + x] = (1.0 - fy) * ((1.0 - fx) * v00 + fx * v01) +
                                        fy * ((1.0 - fx) * v10 + fx * v11);
      }
    }
  }
  return out;
}

LabelMask nearest_resize(const LabelMask& mask, std::size_t out_h,
                         std::size_t out_w) {
  if (mask.height == 0 || mask.width == 0) {
    throw TensorError("nearest_resize: empty input mask");
  }
  if (out_h == 0 || out_w == 0) {
    throw TensorError("nearest_resize: zero output size");
  }
  LabelMask out(out_h, out_w);
  const double sy = static_cast<double>(mask.height) / static_cast<double>(out_h);
  const double sx = static_cast<double>(mask.width) / static_cast<double>(out_w);
  for (std::size_t y = 0; y < out_h; ++y) {
    std::size_t src_y = static_cast<std::size_t>(
        std::floor((static_cast<double>(y) + 0.5) * sy));
    src_y = std::min(src_y, mask.height - 1);
    for (std::size_t x = 0; x < out_w; ++x) {
      std::size_t src_x = static_cast<std::size_t>(
          std::floor((static_cast<double>(x) + 0.5) * sx));
      src_x = std::min(src_x, mask.width - 1);
      out.at(y, x) = mask.at(src_y, src_x);
    }
  }
  return out;
}

LabelMask downsample_nearest(const LabelMask& mask, std::size_t out_h,
                             std::size_t out_w) {
  if (out_h > mask.height || out_w > mask.width) {
    throw TensorError("downsample_nearest: output dims exceed input dims");
  }
  return nearest_resize(mask, out_h, out_w);
}

double sum(const Tensor& t) {
  double s = 0.0;
  for (double v : t.values()) s += v;
  return s;
}

double mean(const Tensor& t) {
  if (t.empty()) throw TensorError("mean of empty tensor");
  return sum(t) / static_cast<double>(t.size());
}

double min_value(const Tensor& t) {
  if (t.empty()) throw TensorError("min of empty tensor");
  double m = t[0];
  for (double v : t.values()) m = std::min(m, v);
  return m;
}

double max_value(const Tensor& t) {
  if (t.empty()) throw TensorError("max of empty tensor");
  double m = t[0];
  for (double v : t.values()) m = std::max(m, v);
  return m;
}

}  // namespace matseg
