#pragma once

// Texture-First augmentation pipeline: large scale jittering, crop, flip,
// bounded photometric jitter, specular highlight injection, optional Gaussian
// ISO noise. Geometric ops hit image and mask identically; photometric ops
// never touch the mask. Fully deterministic: the draw stream is a pure
// function of (cfg.seed, sample_id), so batch order does not matter.

#include <array>
#include <cstdint>
#include <vector>

#include "matseg/rng.hpp"
#include "matseg/tensor.hpp"

namespace matseg {

class AugmentError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AugmentConfig {
  std::array<double, 2> scale_range{1.0, 1.0};
  std::size_t crop_h = 512;
  std::size_t crop_w = 512;
  double flip_p = 0.5;
  double hue_delta = 0.02;  // fraction of the full hue circle
  std::array<double, 2> saturation_range{0.8, 1.2};
  std::array<double, 2> contrast_range{0.6, 1.4};
  double specular_p = 0.3;
  double noise_p = 0.0;
  std::uint64_t seed = 0;
  std::int32_t ignore_label = kDefaultIgnoreLabel;

  // The two shipped presets; scale range and noise setting are what differ.
  static AugmentConfig mask2former_preset();
  static AugmentConfig segformer_preset();
  void validate() const;
};

struct Sample {
  Tensor image;    // (3, H, W), values in [0, 1]
  LabelMask mask;  // (H, W)
};

struct SpecularDraw {
  double cx = 0.0, cy = 0.0;
  double sigma_x = 0.0, sigma_y = 0.0;
  double amplitude = 0.0;
};

// Audit record of every draw an apply_augment call made, for replay.
struct DrawRecord {
  double scale = 1.0;
  std::size_t crop_y = 0, crop_x = 0;
  bool flipped = false;
  double hue_shift = 0.0;
  double saturation = 1.0;
  double contrast = 1.0;
  bool specular_applied = false;
  std::vector<SpecularDraw> highlights;
  bool noise_applied = false;
  double noise_sigma = 0.0;
};

Sample apply_augment(const Sample& sample, const AugmentConfig& cfg,
                     std::uint64_t sample_id, DrawRecord* record = nullptr);

// The individual photometric operators, driven by an explicit stream so tests
// can force specific draws.
Tensor photometric_jitter(const Tensor& image, Rng& rng,
                          const AugmentConfig& cfg,
                          DrawRecord* record = nullptr);
Tensor inject_specular(const Tensor& image, Rng& rng,
                       DrawRecord* record = nullptr);
Tensor gaussian_iso_noise(const Tensor& image, Rng& rng,
                          DrawRecord* record = nullptr);

// Deterministic kernels behind the draw-based operators.
Tensor render_specular(const Tensor& image,
                       const std::vector<SpecularDraw>& highlights);
Tensor add_gaussian_noise(const Tensor& image, double sigma, Rng& rng);
Tensor apply_hsv_contrast(const Tensor& image, double hue_shift,
                          double saturation, double contrast);

// Scalar color conversions (h, s, v in [0, 1]); exposed for verification.
std::array<double, 3> rgb_to_hsv(double r, double g, double b);
std::array<double, 3> hsv_to_rgb(double h, double s, double v);

}  // namespace matseg
