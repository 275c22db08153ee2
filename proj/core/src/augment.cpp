#include "matseg/augment.hpp"

#include <algorithm>
#include <cmath>

namespace matseg {

AugmentConfig AugmentConfig::mask2former_preset() {
  AugmentConfig cfg;
  cfg.scale_range = {0.1, 2.0};
  cfg.crop_h = cfg.crop_w = 512;
  cfg.flip_p = 0.5;
  cfg.hue_delta = 0.02;
  cfg.saturation_range = {0.8, 1.2};
  cfg.contrast_range = {0.6, 1.4};
  cfg.specular_p = 0.3;
  cfg.noise_p = 0.0;  // noise disabled for the query-based model
  return cfg;
}

AugmentConfig AugmentConfig::segformer_preset() {
  AugmentConfig cfg;
  cfg.scale_range = {0.5, 2.0};
  cfg.crop_h = cfg.crop_w = 512;
  cfg.flip_p = 0.5;
  cfg.hue_delta = 0.02;
  cfg.saturation_range = {0.8, 1.2};
  cfg.contrast_range = {0.7, 1.3};
  cfg.specular_p = 0.3;
  cfg.noise_p = 0.3;
  return cfg;
}

void AugmentConfig::validate() const {
  auto check_range = [](const std::array<double, 2>& r, const char* name) {
    if (!(r[0] > 0.0) || !(r[0] <= r[1])) {
      throw AugmentError(std::string(name) + " range must satisfy 0 < lo <= hi");
    }
  };
  check_range(scale_range, "scale");
  check_range(saturation_range, "saturation");
  check_range(contrast_range, "contrast");
  auto check_p = [](double p, const char* name) {
    if (p < 0.0 || p > 1.0) {
      throw AugmentError(std::string(name) + " probability outside [0, 1]");
    }
  };
  check_p(flip_p, "flip");
  check_p(specular_p, "specular");
  check_p(noise_p, "noise");
  if (hue_delta < 0.0) throw AugmentError("hue_delta must be >= 0");
  if (crop_h == 0 || crop_w == 0) throw AugmentError("crop size must be positive");
}

std::array<double, 3> rgb_to_hsv(double r, double g, double b) {
  const double v = std::max({r, g, b});
  const double lo = std::min({r, g, b});
  const double d = v - lo;
  double h = 0.0;
  if (d > 0.0) {
    if (v == r) {
      h = (g - b) / d;
    } else if (v == g) {
      h = 2.0 + (b - r) / d;
    } else {
      h = 4.0 + (r - g) / d;
    }
    h /= 6.0;
    if (h < 0.0) h += 1.0;
  }
  const double s = v > 0.0 ? d / v : 0.0;
  return {h, s, v};
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  if (s <= 0.0) return {v, v, v};
  h = h - std::floor(h);  // wrap into [0, 1)
  const double h6 = h * 6.0;
  const int sector = std::min(5, static_cast<int>(h6));
  const double f = h6 - sector;
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

namespace {

void check_image(const Tensor& image, const char* op) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw AugmentError(std::string(op) + ": image must be (3, H, W)");
  }
  require_finite(image, op);
}

Tensor clamp01(Tensor t) {
  for (double& v : t.values()) v = std::clamp(v, 0.0, 1.0);
  return t;
}

}  // namespace

Tensor apply_hsv_contrast(const Tensor& image, double hue_shift,
                          double saturation, double contrast) {
  check_image(image, "apply_hsv_contrast");
  Tensor out = image;
  const std::size_t hw = image.dim(1) * image.dim(2);
  if (hue_shift != 0.0 || saturation != 1.0) {
    for (std::size_t i = 0; i < hw; ++i) {
      auto hsv = rgb_to_hsv(out[i], out[hw + i], out[2 * hw + i]);
      hsv[0] += hue_shift;
      hsv[1] = std::clamp(hsv[1] * saturation, 0.0, 1.0);
      const auto rgb = hsv_to_rgb(hsv[0], hsv[1], hsv[2]);
      out[i] = rgb[0];
      out[hw + i] = rgb[1];
      out[2 * hw + i] = rgb[2];
    }
  }
  if (contrast != 1.0) {
    const double mu = mean(out);
    for (double& v : out.values()) v = (v - mu) * contrast + mu;
  }
  return clamp01(std::move(out));
}

Tensor photometric_jitter(const Tensor& image, Rng& rng,
                          const AugmentConfig& cfg, DrawRecord* record) {
  check_image(image, "photometric_jitter");
  const double hue_shift = rng.uniform(-cfg.hue_delta, cfg.hue_delta);
  const double sat = rng.uniform(cfg.saturation_range[0], cfg.saturation_range[1]);
  const double con = rng.uniform(cfg.contrast_range[0], cfg.contrast_range[1]);
  if (record) {
    record->hue_shift = hue_shift;
    record->saturation = sat;
    record->contrast = con;
  }
  return apply_hsv_contrast(image, hue_shift, sat, con);
}

Tensor render_specular(const Tensor& image,
                       const std::vector<SpecularDraw>& highlights) {
  check_image(image, "render_specular");
  const std::size_t h = image.dim(1), w = image.dim(2);
  Tensor out = image;
  for (const auto& d : highlights) {
    if (d.amplitude == 0.0 || d.sigma_x <= 0.0 || d.sigma_y <= 0.0) continue;
    for (std::size_t y = 0; y < h; ++y) {
      const double dy = (static_cast<double>(y) - d.cy) / d.sigma_y;
      for (std::size_t x = 0; x < w; ++x) {
        const double dx = (static_cast<double>(x) - d.cx) / d.sigma_x;
        const double g = d.amplitude * std::exp(-0.5 * (dx * dx + dy * dy));
        for (std::size_t c = 0; c < 3; ++c) {
          out.at3(c, y, x) += g;
        }
      }
    }
  }
  return clamp01(std::move(out));
}

Tensor inject_specular(const Tensor& image, Rng& rng, DrawRecord* record) {
  check_image(image, "inject_specular");
  const std::size_t h = image.dim(1), w = image.dim(2);
  const double min_dim = static_cast<double>(std::min(h, w));

  const int k = 1 + static_cast<int>(rng.uniform_int(3));
  std::vector<SpecularDraw> draws;
  draws.reserve(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    SpecularDraw d;
    d.cx = rng.uniform(0.0, static_cast<double>(w));
    d.cy = rng.uniform(0.0, static_cast<double>(h));
    d.amplitude = rng.uniform(0.3, 0.8);
    d.sigma_x = rng.uniform(0.01, 0.06) * min_dim;
    d.sigma_y = rng.uniform(0.01, 0.06) * min_dim;
    draws.push_back(d);
  }
  if (record) {
    record->specular_applied = true;
    record->highlights = draws;
  }
  return render_specular(image, draws);
}

Tensor add_gaussian_noise(const Tensor& image, double sigma, Rng& rng) {
  check_image(image, "add_gaussian_noise");
  Tensor out = image;
  if (sigma != 0.0) {
    for (double& v : out.values()) v += sigma * rng.normal();
  }
  return clamp01(std::move(out));
}

Tensor gaussian_iso_noise(const Tensor& image, Rng& rng, DrawRecord* record) {
  const double sigma = rng.uniform(0.01, 0.05);
  if (record) {
    record->noise_applied = true;
    record->noise_sigma = sigma;
  }
  return add_gaussian_noise(image, sigma, rng);
}

namespace {

Tensor flip_horizontal(const Tensor& image) {
  Tensor out(image.shape());
  const std::size_t c_n = image.dim(0), h = image.dim(1), w = image.dim(2);
  for (std::size_t c = 0; c < c_n; ++c) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        out.at3(c, y, x) = image.at3(c, y, w - 1 - x);
      }
    }
  }
  return out;
}

LabelMask flip_horizontal(const LabelMask& mask) {
  LabelMask out(mask.height, mask.width);
  for (std::size_t y = 0; y < mask.height; ++y) {
    for (std::size_t x = 0; x < mask.width; ++x) {
      out.at(y, x) = mask.at(y, mask.width - 1 - x);
    }
  }
  return out;
}

// Crop a (crop_h, crop_w) window at (oy, ox); shortfall past the source is
// padded with zeros in the image and ignore_label in the mask.
Sample crop_or_pad(const Sample& s, std::size_t oy, std::size_t ox,
                   std::size_t crop_h, std::size_t crop_w,
                   std::int32_t ignore_label) {
  Sample out;
  out.image = Tensor({3, crop_h, crop_w});
  out.mask = LabelMask(crop_h, crop_w, ignore_label);
  const std::size_t h = s.mask.height, w = s.mask.width;
  for (std::size_t y = 0; y < crop_h; ++y) {
    const std::size_t sy = oy + y;
    if (sy >= h) continue;
    for (std::size_t x = 0; x < crop_w; ++x) {
      const std::size_t sx = ox + x;
      if (sx >= w) continue;
      for (std::size_t c = 0; c < 3; ++c) {
        out.image.at3(c, y, x) = s.image.at3(c, sy, sx);
      }
      out.mask.at(y, x) = s.mask.at(sy, sx);
    }
  }
  return out;
}

}  // namespace

Sample apply_augment(const Sample& sample, const AugmentConfig& cfg,
                     std::uint64_t sample_id, DrawRecord* record) {
  cfg.validate();
  if (sample.image.rank() != 3 || sample.image.dim(0) != 3) {
    throw AugmentError("sample image must be (3, H, W)");
  }
  if (sample.image.dim(1) != sample.mask.height ||
      sample.image.dim(2) != sample.mask.width) {
    throw AugmentError("sample image/mask spatial dims differ");
  }

  Rng rng(cfg.seed, sample_id);
  Sample cur = sample;

  // 1. Large scale jittering. Scale 1 with matching size is a bit-exact
  //    identity of the half-pixel bilinear map.
  const double scale = rng.uniform(cfg.scale_range[0], cfg.scale_range[1]);
  if (record) record->scale = scale;
  const std::size_t h0 = cur.mask.height, w0 = cur.mask.width;
  const std::size_t sh = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::lround(static_cast<double>(h0) * scale)));
  const std::size_t sw = std::max<std::size_t>(
      1, static_cast<std::size_t>(std::lround(static_cast<double>(w0) * scale)));
  if (sh != h0 || sw != w0) {
    cur.image = clamp01(upsample_bilinear(cur.image, sh, sw));
    cur.mask = nearest_resize(cur.mask, sh, sw);
  }

  // 2. Random crop; pad with ignore_label / zeros when the scaled image is
  //    smaller than the crop. Offsets are always drawn to keep the stream
  //    aligned across configs.
  const std::size_t range_y = sh > cfg.crop_h ? sh - cfg.crop_h + 1 : 1;
  const std::size_t range_x = sw > cfg.crop_w ? sw - cfg.crop_w + 1 : 1;
  const std::size_t oy = static_cast<std::size_t>(rng.uniform_int(range_y));
  const std::size_t ox = static_cast<std::size_t>(rng.uniform_int(range_x));
  if (record) {
    record->crop_y = oy;
    record->crop_x = ox;
  }
  if (sh != cfg.crop_h || sw != cfg.crop_w || oy != 0 || ox != 0) {
    cur = crop_or_pad(cur, oy, ox, cfg.crop_h, cfg.crop_w, cfg.ignore_label);
  }

  // 3. Horizontal flip.
  const bool flip = rng.uniform() < cfg.flip_p;
  if (record) record->flipped = flip;
  if (flip) {
    cur.image = flip_horizontal(cur.image);
    cur.mask = flip_horizontal(cur.mask);
  }

  // 4.-6. Photometric chain; the mask is never touched from here on.
  cur.image = photometric_jitter(cur.image, rng, cfg, record);
  if (rng.uniform() < cfg.specular_p) {
    cur.image = inject_specular(cur.image, rng, record);
  }
  if (rng.uniform() < cfg.noise_p) {
    cur.image = gaussian_iso_noise(cur.image, rng, record);
  }
  return cur;
}

}  // namespace matseg
