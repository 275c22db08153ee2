#include "matseg/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>

#include "matseg/rng.hpp"

namespace matseg {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Schedule and optimizer

double cosine_lr(std::int64_t step, const Schedule& schedule, ParamGroup group) {
  if (schedule.total_steps < 1) {
    throw TrainError("schedule total_steps must be >= 1");
  }
  if (step < 0 || step > schedule.total_steps) {
    throw TrainError("cosine_lr step outside [0, total_steps]");
  }
  const double lr0 =
      group == ParamGroup::kBackbone ? schedule.lr_backbone0 : schedule.lr_head0;
  if (step == 0) return lr0;
  if (step == schedule.total_steps) return schedule.lr_min;
  const double phase = std::numbers::pi * static_cast<double>(step) /
                       static_cast<double>(schedule.total_steps);
  return schedule.lr_min +
         (lr0 - schedule.lr_min) * (1.0 + std::cos(phase)) / 2.0;
}

void adamw_step(std::span<double> params, std::span<const double> grads,
                AdamWState& state, double lr, const AdamWConfig& cfg) {
  if (params.size() != grads.size()) {
    throw TrainError("adamw_step: param/grad size mismatch");
  }
  if (state.m.empty()) {
    state.m.assign(params.size(), 0.0);
    state.v.assign(params.size(), 0.0);
  }
  if (state.m.size() != params.size()) {
    throw TrainError("adamw_step: optimizer state size mismatch");
  }
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!std::isfinite(grads[i])) {
      throw TrainError("adamw_step: non-finite gradient at index " +
                       std::to_string(i) + "; step aborted");
    }
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i] -= lr * cfg.weight_decay * params[i];  // decoupled decay
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
    const double m_hat = state.m[i] / bc1;
    const double v_hat = state.v[i] / bc2;
    params[i] -= lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
  }
}

// ---------------------------------------------------------------------------
// Procedural texture scenes

namespace {

struct ClassPalette {
  std::array<double, 3> base;
  std::array<double, 3> alt;
};

ClassPalette class_palette(int class_id) {
  static constexpr std::array<std::array<double, 6>, 8> kTable = {{
      {0.16, 0.25, 0.70, 0.38, 0.48, 0.94},  // blue
      {0.80, 0.28, 0.10, 0.96, 0.62, 0.22},  // red-orange
      {0.10, 0.58, 0.22, 0.34, 0.82, 0.44},  // green
      {0.50, 0.16, 0.62, 0.74, 0.38, 0.86},  // purple
      {0.84, 0.78, 0.20, 0.96, 0.91, 0.54},  // yellow
      {0.10, 0.68, 0.74, 0.32, 0.90, 0.96},  // cyan
      {0.44, 0.30, 0.14, 0.64, 0.48, 0.30},  // brown
      {0.32, 0.32, 0.32, 0.68, 0.68, 0.68},  // gray
  }};
  if (class_id >= 0 && class_id < 8) {
    const auto& row = kTable[static_cast<std::size_t>(class_id)];
    return {{row[0], row[1], row[2]}, {row[3], row[4], row[5]}};
  }
  Rng rng(0x9a1e77eULL, static_cast<std::uint64_t>(class_id));
  ClassPalette p;
  for (int c = 0; c < 3; ++c) {
    p.base[c] = rng.uniform(0.12, 0.68);
    p.alt[c] = std::min(1.0, p.base[c] + rng.uniform(0.18, 0.32));
  }
  return p;
}

double lattice_value(std::uint64_t salt, std::int64_t ix, std::int64_t iy) {
  const std::uint64_t key =
      static_cast<std::uint64_t>(ix) * 0x100000001b3ULL +
      static_cast<std::uint64_t>(iy) * 0x9E3779B97F4A7C15ULL;
  return static_cast<double>(mix64(salt, key) >> 11) * 0x1.0p-53;
}

double value_noise(std::uint64_t salt, double x, double y, double spacing) {
  const double gx = x / spacing, gy = y / spacing;
  const double fx0 = std::floor(gx), fy0 = std::floor(gy);
  const std::int64_t ix = static_cast<std::int64_t>(fx0);
  const std::int64_t iy = static_cast<std::int64_t>(fy0);
  const double tx = gx - fx0, ty = gy - fy0;
  const double v00 = lattice_value(salt, ix, iy);
  const double v01 = lattice_value(salt, ix, iy + 1);
  const double v10 = lattice_value(salt, ix + 1, iy);
  const double v11 = lattice_value(salt, ix + 1, iy + 1);
  return (1.0 - tx) * ((1.0 - ty) * v00 + ty * v01) +
         tx * ((1.0 - ty) * v10 + ty * v11);
}

struct RegionParams {
  double theta = 0.0;
  double phase = 0.0;
  std::uint64_t salt = 0;
};

// Mixing weight in [0, 1] between a class's base and alt color, by texture
// kind (class_id % 4): checkerboard, oriented stripes, value noise, gradient.
double texture_mix(int class_id, double x, double y, const RegionParams& rp,
                   double size) {
  const double ct = std::cos(rp.theta), st = std::sin(rp.theta);
  const double xr = x * ct + y * st + rp.phase;
  const double yr = -x * st + y * ct + rp.phase;
  const int variant = (class_id / 4) % 3;
  switch (((class_id % 4) + 4) % 4) {
    case 0: {
      const double cell = 3.0 + 2.0 * variant;
      const std::int64_t cx = static_cast<std::int64_t>(std::floor(xr / cell));
      const std::int64_t cy = static_cast<std::int64_t>(std::floor(yr / cell));
      return ((cx + cy) & 1) ? 1.0 : 0.0;
    }
    case 1: {
      const double period = 6.0 + 4.0 * variant;
      return 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * xr / period);
    }
    case 2: {
      const double spacing = 4.0 + 2.0 * variant;
      return value_noise(rp.salt, xr, yr, spacing);
    }
    default: {
      const double span = std::max(size, 1.0);
      const double t = xr / span;
      return std::clamp(t - std::floor(t), 0.0, 1.0);
    }
  }
}

}  // namespace

Sample generate_texture_scene(std::uint64_t seed, const SceneOptions& opts) {
  if (opts.size < 4) throw TrainError("scene size must be >= 4");
  if (opts.n_regions < 1) throw TrainError("scene needs n_regions >= 1");
  if (opts.class_ids.empty()) throw TrainError("scene class set is empty");
  if (!opts.class_weights.empty() &&
      opts.class_weights.size() != opts.class_ids.size()) {
    throw TrainError("class_weights size must match class_ids");
  }
  if (opts.boundary_width > 0 && opts.boundary_class < 0) {
    throw TrainError("boundary_width needs a boundary_class");
  }

  Rng rng(seed, 0x5ce9e5eedULL);
  const double size = static_cast<double>(opts.size);
  const int n = opts.n_regions;

  std::vector<std::array<double, 2>> sites(static_cast<std::size_t>(n));
  for (auto& s : sites) {
    s[0] = rng.uniform(0.0, size);
    s[1] = rng.uniform(0.0, size);
  }

  std::vector<double> cum;
  {
    std::vector<double> w = opts.class_weights;
    if (w.empty()) w.assign(opts.class_ids.size(), 1.0);
    double total = 0.0;
    for (double v : w) {
      if (v < 0.0) throw TrainError("class weights must be >= 0");
      total += v;
    }
    if (total <= 0.0) throw TrainError("class weights sum to zero");
    double acc = 0.0;
    for (double v : w) {
      acc += v / total;
      cum.push_back(acc);
    }
    cum.back() = 1.0;
  }
  std::vector<int> region_class(static_cast<std::size_t>(n));
  for (auto& c : region_class) {
    const double u = rng.uniform();
    std::size_t k = 0;
    while (k + 1 < cum.size() && u >= cum[k]) ++k;
    c = opts.class_ids[k];
  }

  std::vector<RegionParams> params(static_cast<std::size_t>(n));
  for (auto& p : params) {
    p.theta = rng.uniform(0.0, std::numbers::pi);
    p.phase = rng.uniform(0.0, 64.0);
    p.salt = rng.next_u64();
  }
  const RegionParams boundary_params =
      n > 0 ? params[0] : RegionParams{};

  Sample sample;
  sample.image = Tensor({3, opts.size, opts.size});
  sample.mask = LabelMask(opts.size, opts.size);

  for (std::size_t py = 0; py < opts.size; ++py) {
    for (std::size_t px = 0; px < opts.size; ++px) {
      const double x = static_cast<double>(px) + 0.5;
      const double y = static_cast<double>(py) + 0.5;
      int r1 = 0, r2 = -1;
      double d1 = std::numeric_limits<double>::infinity();
      double d2 = std::numeric_limits<double>::infinity();
      for (int r = 0; r < n; ++r) {
        const double dx = x - sites[static_cast<std::size_t>(r)][0];
        const double dy = y - sites[static_cast<std::size_t>(r)][1];
        const double d = dx * dx + dy * dy;
        if (d < d1) {
          d2 = d1;
          r2 = r1;
          d1 = d;
          r1 = r;
        } else if (d < d2) {
          d2 = d;
          r2 = r;
        }
      }

      int label = region_class[static_cast<std::size_t>(r1)];
      const RegionParams* rp = &params[static_cast<std::size_t>(r1)];
      if (opts.boundary_width > 0 && r2 >= 0) {
        const double sdx = sites[static_cast<std::size_t>(r2)][0] -
                           sites[static_cast<std::size_t>(r1)][0];
        const double sdy = sites[static_cast<std::size_t>(r2)][1] -
                           sites[static_cast<std::size_t>(r1)][1];
        const double site_dist = std::sqrt(sdx * sdx + sdy * sdy);
        if (site_dist > 1e-9) {
          // Exact distance to the Voronoi edge (perpendicular bisector).
          const double edge_dist = (d2 - d1) / (2.0 * site_dist);
          if (edge_dist < static_cast<double>(opts.boundary_width) / 2.0) {
            label = opts.boundary_class;
            rp = &boundary_params;
          }
        }
      }

      const ClassPalette palette = class_palette(label);
      const double mix = texture_mix(label, x, y, *rp, size);
      for (std::size_t c = 0; c < 3; ++c) {
        sample.image.at3(c, py, px) =
            palette.base[c] + (palette.alt[c] - palette.base[c]) * mix;
      }
      sample.mask.at(py, px) = label;
    }
  }
  return sample;
}

Sample generate_texture_scene(std::uint64_t seed, std::size_t size,
                              int n_regions, const std::vector<int>& class_set) {
  SceneOptions opts;
  opts.size = size;
  opts.n_regions = n_regions;
  opts.class_ids = class_set;
  return generate_texture_scene(seed, opts);
}

// ---------------------------------------------------------------------------
// Toy model

namespace {

constexpr int kConv1W = 0, kConv1B = 1, kConv2W = 2, kConv2B = 3;
constexpr int kPixelW = 4, kPixelB = 5, kQueries = 6, kClsW = 7, kClsB = 8;

std::size_t conv_out(std::size_t in) { return (in + 1) / 2; }  // stride 2, pad 1

// out[o, y, x] = b[o] + sum_{i,ky,kx} w[o,i,ky,kx] * in[i, 2y+ky-1, 2x+kx-1]
Tensor conv3x3_s2_forward(const Tensor& in, const std::vector<double>& w,
                          const std::vector<double>& b, int c_out) {
  const std::size_t c_in = in.dim(0), h = in.dim(1), wd = in.dim(2);
  const std::size_t ho = conv_out(h), wo = conv_out(wd);
  Tensor out({static_cast<std::size_t>(c_out), ho, wo});
  for (int o = 0; o < c_out; ++o) {
    for (std::size_t y = 0; y < ho; ++y) {
      for (std::size_t x = 0; x < wo; ++x) {
        double acc = b[static_cast<std::size_t>(o)];
        for (std::size_t i = 0; i < c_in; ++i) {
          for (int ky = 0; ky < 3; ++ky) {
            const std::int64_t sy = static_cast<std::int64_t>(2 * y) + ky - 1;
            if (sy < 0 || sy >= static_cast<std::int64_t>(h)) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const std::int64_t sx = static_cast<std::int64_t>(2 * x) + kx - 1;
              if (sx < 0 || sx >= static_cast<std::int64_t>(wd)) continue;
              acc += w[((static_cast<std::size_t>(o) * c_in + i) * 3 +
                        static_cast<std::size_t>(ky)) *
                           3 +
                       static_cast<std::size_t>(kx)] *
                     in.at3(i, static_cast<std::size_t>(sy),
                            static_cast<std::size_t>(sx));
            }
          }
        }
        out.at3(static_cast<std::size_t>(o), y, x) = acc;
      }
    }
  }
  return out;
}

void conv3x3_s2_backward(const Tensor& in, const std::vector<double>& w,
                         int c_out, const Tensor& grad_out, Tensor* grad_in,
                         std::vector<double>& grad_w,
                         std::vector<double>& grad_b) {
  const std::size_t c_in = in.dim(0), h = in.dim(1), wd = in.dim(2);
  const std::size_t ho = grad_out.dim(1), wo = grad_out.dim(2);
  for (int o = 0; o < c_out; ++o) {
    for (std::size_t y = 0; y < ho; ++y) {
      for (std::size_t x = 0; x < wo; ++x) {
        const double g = grad_out.at3(static_cast<std::size_t>(o), y, x);
        if (g == 0.0) continue;
        grad_b[static_cast<std::size_t>(o)] += g;
        for (std::size_t i = 0; i < c_in; ++i) {
          for (int ky = 0; ky < 3; ++ky) {
            const std::int64_t sy = static_cast<std::int64_t>(2 * y) + ky - 1;
            if (sy < 0 || sy >= static_cast<std::int64_t>(h)) continue;
            for (int kx = 0; kx < 3; ++kx) {
              const std::int64_t sx = static_cast<std::int64_t>(2 * x) + kx - 1;
              if (sx < 0 || sx >= static_cast<std::int64_t>(wd)) continue;
              const std::size_t wi =
                  ((static_cast<std::size_t>(o) * c_in + i) * 3 +
                   static_cast<std::size_t>(ky)) *
                      3 +
                  static_cast<std::size_t>(kx);
              const double in_v = in.at3(i, static_cast<std::size_t>(sy),
                                         static_cast<std::size_t>(sx));
              grad_w[wi] += g * in_v;
              if (grad_in) {
                grad_in->at3(i, static_cast<std::size_t>(sy),
                             static_cast<std::size_t>(sx)) += g * w[wi];
              }
            }
          }
        }
      }
    }
  }
}

void relu_inplace(Tensor& t) {
  for (double& v : t.values()) v = v > 0.0 ? v : 0.0;
}

void relu_backward_inplace(const Tensor& pre, Tensor& grad) {
  for (std::size_t i = 0; i < grad.size(); ++i) {
    if (pre[i] <= 0.0) grad[i] = 0.0;
  }
}

struct Trace {
  Tensor x1_pre, x1, x2_pre, x2;
};

}  // namespace

const char* to_string(LossMode mode) {
  switch (mode) {
    case LossMode::kHflp: return "hflp";
    case LossMode::kDownsampledCe: return "downsampled-ce";
    case LossMode::kHflpQer: return "hflp+qer";
  }
  return "?";
}

std::optional<LossMode> loss_mode_from_string(const std::string& name) {
  if (name == "hflp") return LossMode::kHflp;
  if (name == "downsampled-ce") return LossMode::kDownsampledCe;
  if (name == "hflp+qer") return LossMode::kHflpQer;
  return std::nullopt;
}

ToyModel::ToyModel(const ToyModelConfig& cfg) : cfg_(cfg) {
  if (cfg.f1 < 1 || cfg.f2 < 1) throw TrainError("feature widths must be >= 1");
  if (cfg.classes < 2) throw TrainError("toy model needs >= 2 classes");
  if (cfg.n_queries < 1) throw TrainError("toy model needs >= 1 query");

  const std::size_t f1 = static_cast<std::size_t>(cfg.f1);
  const std::size_t f2 = static_cast<std::size_t>(cfg.f2);
  const std::size_t c = static_cast<std::size_t>(cfg.classes);
  const std::size_t nq = static_cast<std::size_t>(cfg.n_queries);
  const std::size_t k = static_cast<std::size_t>(cfg.query_classes());

  blocks_.resize(9);
  auto init_block = [](ParamBlock& b, std::string name, ParamGroup group,
                       std::size_t count) {
    b.name = std::move(name);
    b.group = group;
    b.value.assign(count, 0.0);
    b.grad.assign(count, 0.0);
  };
  init_block(blocks_[kConv1W], "conv1.weight", ParamGroup::kBackbone, f1 * 3 * 9);
  init_block(blocks_[kConv1B], "conv1.bias", ParamGroup::kBackbone, f1);
  init_block(blocks_[kConv2W], "conv2.weight", ParamGroup::kBackbone, f2 * f1 * 9);
  init_block(blocks_[kConv2B], "conv2.bias", ParamGroup::kBackbone, f2);
  init_block(blocks_[kPixelW], "pixel_head.weight", ParamGroup::kHead, c * f2);
  init_block(blocks_[kPixelB], "pixel_head.bias", ParamGroup::kHead, c);
  init_block(blocks_[kQueries], "queries", ParamGroup::kHead, nq * f2);
  init_block(blocks_[kClsW], "cls_head.weight", ParamGroup::kHead, k * f2);
  init_block(blocks_[kClsB], "cls_head.bias", ParamGroup::kHead, k);

  Rng rng(cfg.init_seed, 0x10de1ULL);
  auto fill_normal = [&rng](std::vector<double>& v, double stddev) {
    for (double& x : v) x = stddev * rng.normal();
  };
  fill_normal(blocks_[kConv1W].value, std::sqrt(2.0 / (3.0 * 9.0)));
  fill_normal(blocks_[kConv2W].value, std::sqrt(2.0 / (static_cast<double>(f1) * 9.0)));
  fill_normal(blocks_[kPixelW].value, std::sqrt(2.0 / static_cast<double>(f2)));
  fill_normal(blocks_[kQueries].value, 1.0 / std::sqrt(static_cast<double>(f2)));
  fill_normal(blocks_[kClsW].value, std::sqrt(2.0 / static_cast<double>(f2)));
}

std::size_t ToyModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& b : blocks_) n += b.value.size();
  return n;
}

void ToyModel::zero_grad() {
  for (auto& b : blocks_) {
    std::fill(b.grad.begin(), b.grad.end(), 0.0);
  }
}

void ToyModel::scale_grad(double factor) {
  for (auto& b : blocks_) {
    for (double& g : b.grad) g *= factor;
  }
}

double ToyModel::grad_norm() const {
  double sq = 0.0;
  for (const auto& b : blocks_) {
    for (double g : b.grad) sq += g * g;
  }
  return std::sqrt(sq);
}

namespace {

Trace run_backbone(const ToyModel& model, const std::vector<ParamBlock>& blocks,
                   const Tensor& image) {
  Trace t;
  t.x1_pre = conv3x3_s2_forward(image, blocks[kConv1W].value,
                                blocks[kConv1B].value, model.config().f1);
  t.x1 = t.x1_pre;
  relu_inplace(t.x1);
  t.x2_pre = conv3x3_s2_forward(t.x1, blocks[kConv2W].value,
                                blocks[kConv2B].value, model.config().f2);
  t.x2 = t.x2_pre;
  relu_inplace(t.x2);
  return t;
}

Tensor pixel_logits(const ToyModelConfig& cfg, const std::vector<ParamBlock>& blocks,
                    const Tensor& x2) {
  const std::size_t c = static_cast<std::size_t>(cfg.classes);
  const std::size_t f2 = static_cast<std::size_t>(cfg.f2);
  const std::size_t h = x2.dim(1), w = x2.dim(2);
  Tensor z({c, h, w});
  for (std::size_t cc = 0; cc < c; ++cc) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        double acc = blocks[kPixelB].value[cc];
        for (std::size_t f = 0; f < f2; ++f) {
          acc += blocks[kPixelW].value[cc * f2 + f] * x2.at3(f, y, x);
        }
        z.at3(cc, y, x) = acc;
      }
    }
  }
  return z;
}

}  // namespace

LogitMap ToyModel::forward_pixel(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw TrainError("toy model expects a (3, H, W) image");
  }
  const Trace t = run_backbone(*this, blocks_, image);
  return LogitMap(pixel_logits(cfg_, blocks_, t.x2), 4);
}

double ToyModel::min_abs_preactivation(const Tensor& image) const {
  const Trace t = run_backbone(*this, blocks_, image);
  double m = std::numeric_limits<double>::infinity();
  for (double v : t.x1_pre.values()) m = std::min(m, std::abs(v));
  for (double v : t.x2_pre.values()) m = std::min(m, std::abs(v));
  return m;
}

LabelMask ToyModel::predict(const Tensor& image) const {
  const LogitMap z = forward_pixel(image);
  const Tensor up = upsample_bilinear(z.tensor, image.dim(1), image.dim(2));
  LabelMask out(image.dim(1), image.dim(2));
  const std::size_t c_n = up.dim(0);
  for (std::size_t y = 0; y < out.height; ++y) {
    for (std::size_t x = 0; x < out.width; ++x) {
      int best = 0;
      double best_v = up.at3(0, y, x);
      for (std::size_t c = 1; c < c_n; ++c) {
        const double v = up.at3(c, y, x);
        if (v > best_v) {
          best_v = v;
          best = static_cast<int>(c);
        }
      }
      out.at(y, x) = best;
    }
  }
  return out;
}

StepResult ToyModel::compute(const Sample& sample, LossMode mode,
                             const HflpConfig& hflp_cfg, const QerConfig& qer_cfg,
                             bool accumulate_grads,
                             const Assignment* fixed_assignment) {
  if (sample.image.rank() != 3 || sample.image.dim(0) != 3) {
    throw TrainError("toy model expects a (3, H, W) image");
  }
  const std::size_t f2 = static_cast<std::size_t>(cfg_.f2);
  const std::size_t nq = static_cast<std::size_t>(cfg_.n_queries);
  const std::size_t K = static_cast<std::size_t>(cfg_.query_classes());

  const Trace trace = run_backbone(*this, blocks_, sample.image);
  const std::size_t h = trace.x2.dim(1), w = trace.x2.dim(2);

  Tensor z = pixel_logits(cfg_, blocks_, trace.x2);
  StepResult result;

  // Pixel branch.
  LossResult pixel_res;
  const LogitMap logits(std::move(z), 4);
  if (mode == LossMode::kDownsampledCe) {
    pixel_res = cross_entropy_downsampled(logits, sample.mask, hflp_cfg.ignore_label);
  } else {
    pixel_res = hflp_loss(logits, sample.mask, hflp_cfg);
  }
  result.pixel = pixel_res.loss;
  result.total = pixel_res.loss;

  // Gradient w.r.t. x2 accumulates from the pixel head (and below, the query
  // mask head).
  Tensor grad_x2({f2, h, w});
  std::vector<double> grad_queries;
  Tensor grad_cls;

  if (accumulate_grads) {
    auto& gw = blocks_[kPixelW].grad;
    auto& gb = blocks_[kPixelB].grad;
    const std::size_t c_n = static_cast<std::size_t>(cfg_.classes);
    for (std::size_t cc = 0; cc < c_n; ++cc) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const double g = pixel_res.grad.at3(cc, y, x);
          if (g == 0.0) continue;
          gb[cc] += g;
          for (std::size_t f = 0; f < f2; ++f) {
            gw[cc * f2 + f] += g * trace.x2.at3(f, y, x);
            grad_x2.at3(f, y, x) += g * blocks_[kPixelW].value[cc * f2 + f];
          }
        }
      }
    }
  }

  if (mode == LossMode::kHflpQer) {
    // Query class logits: linear layer over the learned query embeddings.
    Tensor cls({nq, K});
    for (std::size_t n = 0; n < nq; ++n) {
      for (std::size_t k = 0; k < K; ++k) {
        double acc = blocks_[kClsB].value[k];
        for (std::size_t f = 0; f < f2; ++f) {
          acc += blocks_[kClsW].value[k * f2 + f] *
                 blocks_[kQueries].value[n * f2 + f];
        }
        cls[n * K + k] = acc;
      }
    }
    // Mask logits via scaled feature dot-product.
    const double scale = 1.0 / std::sqrt(static_cast<double>(f2));
    Tensor mask_logits({nq, h, w});
    for (std::size_t n = 0; n < nq; ++n) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          double acc = 0.0;
          for (std::size_t f = 0; f < f2; ++f) {
            acc += blocks_[kQueries].value[n * f2 + f] * trace.x2.at3(f, y, x);
          }
          mask_logits.at3(n, y, x) = scale * acc;
        }
      }
    }

    const Tensor logp = log_softmax(cls, 1);
    Tensor mask_prob(mask_logits.shape());
    for (std::size_t i = 0; i < mask_logits.size(); ++i) {
      mask_prob[i] = 1.0 / (1.0 + std::exp(-mask_logits[i]));
    }

    const LabelMask y_small =
        downsample_nearest(sample.mask, h, w);
    const std::vector<GtSegment> segments =
        segments_from_mask(y_small, hflp_cfg.ignore_label);
    result.matched_class.reserve(segments.size());
    for (const auto& seg : segments) result.matched_class.push_back(seg.class_id);

    // Matching consumes the forward probabilities only; the regularizer is
    // applied to the logits afterwards and never feeds back into the cost.
    if (fixed_assignment) {
      result.assignment = *fixed_assignment;
      result.has_assignment = true;
    } else if (!segments.empty()) {
      Tensor probs(cls.shape());
      for (std::size_t i = 0; i < cls.size(); ++i) probs[i] = 0.0;
      {
        const Tensor sm = softmax(cls, 1);
        for (std::size_t i = 0; i < cls.size(); ++i) probs[i] = sm[i];
      }
      const CostMatrix cost = matching_cost(probs, mask_prob, segments);
      result.assignment = hungarian(cost);
      result.has_assignment = true;
    }

    // CE target per query: matched segment's class, otherwise no-object.
    std::vector<int> target(nq, static_cast<int>(K - 1));
    std::vector<int> matched_segment(nq, -1);
    if (result.has_assignment) {
      for (const auto& [q, t] : result.assignment.pairs) {
        target[q] = segments[t].class_id;
        matched_segment[q] = static_cast<int>(t);
      }
    }

    const double inv_nq = 1.0 / static_cast<double>(nq);
    double match_loss = 0.0;
    grad_cls = Tensor(cls.shape());
    Tensor grad_mask_logits(mask_logits.shape());
    for (std::size_t n = 0; n < nq; ++n) {
      match_loss -= logp[n * K + static_cast<std::size_t>(target[n])] * inv_nq;
      for (std::size_t k = 0; k < K; ++k) {
        const double p = std::exp(logp[n * K + k]);
        const double onehot =
            k == static_cast<std::size_t>(target[n]) ? 1.0 : 0.0;
        grad_cls[n * K + k] = (p - onehot) * inv_nq;
      }
      if (matched_segment[n] >= 0) {
        const Tensor& region =
            segments[static_cast<std::size_t>(matched_segment[n])].mask;
        double inter = 0.0, total = 0.0;
        for (std::size_t i = 0; i < region.size(); ++i) {
          inter += mask_prob[n * h * w + i] * region[i];
          total += mask_prob[n * h * w + i] + region[i];
        }
        const double dice = total > 0.0 ? 2.0 * inter / total : 1.0;
        match_loss += (1.0 - dice) * inv_nq;
        if (total > 0.0) {
          for (std::size_t i = 0; i < region.size(); ++i) {
            const double m = mask_prob[n * h * w + i];
            const double d_dice_dm =
                2.0 * (region[i] * total - inter) / (total * total);
            grad_mask_logits[n * h * w + i] =
                -d_dice_dm * m * (1.0 - m) * inv_nq;
          }
        }
      }
    }
    result.match = match_loss;
    result.total += match_loss;

    const LossResult qer = qer_loss(cls, qer_cfg);
    result.qer = qer.loss;
    result.total += qer.loss;
    for (std::size_t i = 0; i < grad_cls.size(); ++i) {
      grad_cls[i] += qer.grad[i];
    }

    result.query_argmax.resize(nq);
    for (std::size_t n = 0; n < nq; ++n) {
      int best = 0;
      double best_v = cls[n * K];
      for (std::size_t k = 1; k < K; ++k) {
        if (cls[n * K + k] > best_v) {
          best_v = cls[n * K + k];
          best = static_cast<int>(k);
        }
      }
      result.query_argmax[n] = best;
    }

    if (accumulate_grads) {
      grad_queries.assign(nq * f2, 0.0);
      auto& g_cls_w = blocks_[kClsW].grad;
      auto& g_cls_b = blocks_[kClsB].grad;
      for (std::size_t n = 0; n < nq; ++n) {
        for (std::size_t k = 0; k < K; ++k) {
          const double g = grad_cls[n * K + k];
          if (g == 0.0) continue;
          g_cls_b[k] += g;
          for (std::size_t f = 0; f < f2; ++f) {
            g_cls_w[k * f2 + f] += g * blocks_[kQueries].value[n * f2 + f];
            grad_queries[n * f2 + f] += g * blocks_[kClsW].value[k * f2 + f];
          }
        }
      }
      for (std::size_t n = 0; n < nq; ++n) {
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) {
            const double g = grad_mask_logits.at3(n, y, x);
            if (g == 0.0) continue;
            for (std::size_t f = 0; f < f2; ++f) {
              grad_queries[n * f2 + f] += g * scale * trace.x2.at3(f, y, x);
              grad_x2.at3(f, y, x) +=
                  g * scale * blocks_[kQueries].value[n * f2 + f];
            }
          }
        }
      }
      auto& gq = blocks_[kQueries].grad;
      for (std::size_t i = 0; i < grad_queries.size(); ++i) {
        gq[i] += grad_queries[i];
      }
    }
  }

  if (accumulate_grads) {
    // Backbone chain: x2 -> conv2 -> x1 -> conv1.
    Tensor grad_x2_pre = grad_x2;
    relu_backward_inplace(trace.x2_pre, grad_x2_pre);
    Tensor grad_x1(trace.x1.shape());
    conv3x3_s2_backward(trace.x1, blocks_[kConv2W].value, cfg_.f2, grad_x2_pre,
                        &grad_x1, blocks_[kConv2W].grad, blocks_[kConv2B].grad);
    relu_backward_inplace(trace.x1_pre, grad_x1);
    conv3x3_s2_backward(sample.image, blocks_[kConv1W].value, cfg_.f1, grad_x1,
                        nullptr, blocks_[kConv1W].grad, blocks_[kConv1B].grad);
  }
  return result;
}

double ToyModel::loss_only(const Sample& sample, LossMode mode,
                           const HflpConfig& hflp_cfg, const QerConfig& qer_cfg,
                           const Assignment* fixed_assignment) {
  return compute(sample, mode, hflp_cfg, qer_cfg, /*accumulate_grads=*/false,
                 fixed_assignment)
      .total;
}

// ---------------------------------------------------------------------------
// Checkpoint blobs. Layout (little-endian):
//   magic "MSEGCKP1" | u32 block count | per block:
//   u32 name length | name bytes | u8 group | u64 value count |
//   f64 values | f64 adam m | f64 adam v | i64 adam step

namespace {

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::ifstream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
}

}  // namespace

void ToyModel::save_checkpoint(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw TrainError("cannot write checkpoint " + path.string());
  out.write("MSEGCKP1", 8);
  write_pod(out, static_cast<std::uint32_t>(blocks_.size()));
  for (const auto& b : blocks_) {
    write_pod(out, static_cast<std::uint32_t>(b.name.size()));
    out.write(b.name.data(), static_cast<std::streamsize>(b.name.size()));
    write_pod(out, static_cast<std::uint8_t>(b.group == ParamGroup::kBackbone ? 0 : 1));
    write_pod(out, static_cast<std::uint64_t>(b.value.size()));
    auto write_vec = [&out](const std::vector<double>& v, std::size_t n) {
      static const double zero = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        write_pod(out, i < v.size() ? v[i] : zero);
      }
    };
    write_vec(b.value, b.value.size());
    write_vec(b.opt.m, b.value.size());
    write_vec(b.opt.v, b.value.size());
    write_pod(out, static_cast<std::int64_t>(b.opt.step));
  }
  if (!out) throw TrainError("short write to checkpoint " + path.string());
}

void ToyModel::load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw TrainError("cannot read checkpoint " + path.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "MSEGCKP1", 8) != 0) {
    throw TrainError("bad checkpoint magic");
  }
  std::uint32_t n_blocks = 0;
  read_pod(in, n_blocks);
  if (n_blocks != blocks_.size()) {
    throw TrainError("checkpoint block count mismatch");
  }
  for (auto& b : blocks_) {
    std::uint32_t name_len = 0;
    read_pod(in, name_len);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (name != b.name) throw TrainError("checkpoint block name mismatch: " + name);
    std::uint8_t group = 0;
    read_pod(in, group);
    std::uint64_t count = 0;
    read_pod(in, count);
    if (count != b.value.size()) {
      throw TrainError("checkpoint block size mismatch: " + name);
    }
    b.opt.m.resize(count);
    b.opt.v.resize(count);
    for (auto* vec : {&b.value, &b.opt.m, &b.opt.v}) {
      for (auto& v : *vec) read_pod(in, v);
    }
    std::int64_t step = 0;
    read_pod(in, step);
    b.opt.step = step;
  }
  if (!in) throw TrainError("truncated checkpoint " + path.string());
}

// ---------------------------------------------------------------------------
// Config (de)serialization

std::string train_config_to_json(const TrainConfig& cfg) {
  ordered_json j;
  j["seed"] = cfg.seed;
  j["mode"] = to_string(cfg.mode);
  j["steps"] = cfg.steps;
  j["batch_size"] = cfg.batch_size;
  j["model"] = {{"f1", cfg.model.f1},
                {"f2", cfg.model.f2},
                {"classes", cfg.model.classes},
                {"n_queries", cfg.model.n_queries},
                {"init_seed", cfg.model.init_seed}};
  j["optimizer"] = {{"beta1", cfg.optimizer.beta1},
                    {"beta2", cfg.optimizer.beta2},
                    {"eps", cfg.optimizer.eps},
                    {"weight_decay", cfg.optimizer.weight_decay}};
  j["schedule"] = {{"lr_backbone", cfg.schedule.lr_backbone0},
                   {"lr_head", cfg.schedule.lr_head0},
                   {"lr_min", cfg.schedule.lr_min},
                   {"total_steps", cfg.schedule.total_steps}};
  j["loss"] = {{"epsilon", cfg.hflp.epsilon},
               {"ignore_label", cfg.hflp.ignore_label},
               {"align_corners", cfg.hflp.align_corners},
               {"lambda", cfg.qer.lambda},
               {"qer_direction", cfg.qer.direction == QerDirection::kEntropyMax
                                     ? "entropy-max"
                                     : "reverse"}};
  j["scene"] = {{"size", cfg.scene.size},
                {"n_regions", cfg.scene.n_regions},
                {"class_ids", cfg.scene.class_ids},
                {"class_weights", cfg.scene.class_weights},
                {"boundary_width", cfg.scene.boundary_width},
                {"boundary_class", cfg.scene.boundary_class}};
  j["augment_preset"] = cfg.augment_preset;
  j["eval_scenes"] = cfg.eval_scenes;
  j["boundary_frac"] = cfg.boundary_frac;
  return j.dump(2) + "\n";
}

TrainConfig train_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw TrainError(std::string("train config parse error: ") + e.what());
  }
  TrainConfig cfg;
  try {
    cfg.seed = j.value("seed", cfg.seed);
    if (j.contains("mode")) {
      const auto mode = loss_mode_from_string(j.at("mode").get<std::string>());
      if (!mode) throw TrainError("unknown loss mode in config");
      cfg.mode = *mode;
    }
    cfg.steps = j.value("steps", cfg.steps);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    if (j.contains("model")) {
      const auto& m = j.at("model");
      cfg.model.f1 = m.value("f1", cfg.model.f1);
      cfg.model.f2 = m.value("f2", cfg.model.f2);
      cfg.model.classes = m.value("classes", cfg.model.classes);
      cfg.model.n_queries = m.value("n_queries", cfg.model.n_queries);
      cfg.model.init_seed = m.value("init_seed", cfg.model.init_seed);
    }
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      cfg.optimizer.beta1 = o.value("beta1", cfg.optimizer.beta1);
      cfg.optimizer.beta2 = o.value("beta2", cfg.optimizer.beta2);
      cfg.optimizer.eps = o.value("eps", cfg.optimizer.eps);
      cfg.optimizer.weight_decay = o.value("weight_decay", cfg.optimizer.weight_decay);
    }
    if (j.contains("schedule")) {
      const auto& s = j.at("schedule");
      cfg.schedule.lr_backbone0 = s.value("lr_backbone", cfg.schedule.lr_backbone0);
      cfg.schedule.lr_head0 = s.value("lr_head", cfg.schedule.lr_head0);
      cfg.schedule.lr_min = s.value("lr_min", cfg.schedule.lr_min);
      cfg.schedule.total_steps = s.value("total_steps", cfg.schedule.total_steps);
    }
    if (j.contains("loss")) {
      const auto& l = j.at("loss");
      cfg.hflp.epsilon = l.value("epsilon", cfg.hflp.epsilon);
      cfg.hflp.ignore_label = l.value("ignore_label", cfg.hflp.ignore_label);
      cfg.hflp.align_corners = l.value("align_corners", cfg.hflp.align_corners);
      cfg.qer.lambda = l.value("lambda", cfg.qer.lambda);
      const std::string dir = l.value("qer_direction", std::string("entropy-max"));
      if (dir == "entropy-max") {
        cfg.qer.direction = QerDirection::kEntropyMax;
      } else if (dir == "reverse") {
        cfg.qer.direction = QerDirection::kReverse;
      } else {
        throw TrainError("unknown qer_direction: " + dir);
      }
    }
    if (j.contains("scene")) {
      const auto& s = j.at("scene");
      cfg.scene.size = s.value("size", cfg.scene.size);
      cfg.scene.n_regions = s.value("n_regions", cfg.scene.n_regions);
      if (s.contains("class_ids")) {
        cfg.scene.class_ids = s.at("class_ids").get<std::vector<int>>();
      }
      if (s.contains("class_weights")) {
        cfg.scene.class_weights = s.at("class_weights").get<std::vector<double>>();
      }
      cfg.scene.boundary_width = s.value("boundary_width", cfg.scene.boundary_width);
      cfg.scene.boundary_class = s.value("boundary_class", cfg.scene.boundary_class);
    }
    cfg.augment_preset = j.value("augment_preset", cfg.augment_preset);
    cfg.eval_scenes = j.value("eval_scenes", cfg.eval_scenes);
    cfg.boundary_frac = j.value("boundary_frac", cfg.boundary_frac);
  } catch (const json::exception& e) {
    throw TrainError(std::string("train config field error: ") + e.what());
  }
  return cfg;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

void write_csv(const std::filesystem::path& path, const char* header,
               const std::vector<double>& values) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw TrainError("cannot write " + path.string());
  out << header << "\n";
  for (std::size_t i = 0; i < values.size(); ++i) {
    out << i << "," << format_double(values[i]) << "\n";
  }
}

}  // namespace

TrainResult train(const TrainConfig& cfg, const std::filesystem::path& out_dir) {
  if (cfg.steps < 1) throw TrainError("steps must be >= 1");
  if (cfg.batch_size < 1) throw TrainError("batch_size must be >= 1");
  if (cfg.eval_scenes < 1) throw TrainError("eval_scenes must be >= 1");
  int max_class = 0;
  for (int c : cfg.scene.class_ids) max_class = std::max(max_class, c);
  if (cfg.scene.boundary_width > 0) {
    max_class = std::max(max_class, cfg.scene.boundary_class);
  }
  if (max_class >= cfg.model.classes) {
    throw TrainError("model classes must cover every scene class id");
  }

  Schedule schedule = cfg.schedule;
  if (schedule.total_steps == 0) schedule.total_steps = cfg.steps;

  AugmentConfig aug;
  bool use_augment = false;
  if (cfg.augment_preset == "segformer") {
    aug = AugmentConfig::segformer_preset();
    use_augment = true;
  } else if (cfg.augment_preset == "mask2former") {
    aug = AugmentConfig::mask2former_preset();
    use_augment = true;
  } else if (cfg.augment_preset != "none") {
    throw TrainError("unknown augment preset: " + cfg.augment_preset);
  }
  if (use_augment) {
    aug.seed = cfg.seed;
    aug.crop_h = aug.crop_w = cfg.scene.size;  // keep toy scenes at native size
    aug.ignore_label = cfg.hflp.ignore_label;
  }

  ToyModel model(cfg.model);
  TrainResult result;
  result.query_usage.assign(static_cast<std::size_t>(cfg.model.classes), 0);

  // Last healthy parameter snapshot for the divergence path.
  std::vector<std::vector<double>> last_good;
  auto snapshot = [&model, &last_good]() {
    last_good.clear();
    for (const auto& b : model.blocks()) last_good.push_back(b.value);
  };
  auto restore = [&model, &last_good]() {
    if (last_good.empty()) return;
    for (std::size_t i = 0; i < last_good.size(); ++i) {
      model.blocks()[i].value = last_good[i];
    }
  };
  snapshot();

  for (int step = 0; step < cfg.steps; ++step) {
    model.zero_grad();
    double batch_loss = 0.0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const std::uint64_t scene_seed =
          mix64(cfg.seed, static_cast<std::uint64_t>(step) *
                                  static_cast<std::uint64_t>(cfg.batch_size) +
                              static_cast<std::uint64_t>(b));
      Sample sample = generate_texture_scene(scene_seed, cfg.scene);
      if (use_augment) {
        sample = apply_augment(sample, aug,
                               static_cast<std::uint64_t>(step) *
                                       static_cast<std::uint64_t>(cfg.batch_size) +
                                   static_cast<std::uint64_t>(b));
      }
      const StepResult sr =
          model.compute(sample, cfg.mode, cfg.hflp, cfg.qer, true);
      batch_loss += sr.total;
      // Query usage: how often each material class won a query in the
      // matching. With fewer queries than segments the assignment is
      // probability-driven, so collapsed class distributions starve rare
      // classes of matches.
      if (sr.has_assignment) {
        for (const auto& [q, t] : sr.assignment.pairs) {
          const int cls = sr.matched_class[t];
          if (cls >= 0 && cls < cfg.model.classes) {
            ++result.query_usage[static_cast<std::size_t>(cls)];
          }
        }
      }
    }
    model.scale_grad(1.0 / static_cast<double>(cfg.batch_size));
    const double loss = batch_loss / static_cast<double>(cfg.batch_size);
    const double gnorm = model.grad_norm();

    if (!std::isfinite(loss) || !std::isfinite(gnorm)) {
      result.diverged = true;
      restore();
      break;
    }
    result.loss_curve.push_back(loss);
    result.grad_norms.push_back(gnorm);

    const double lr_backbone = cosine_lr(step, schedule, ParamGroup::kBackbone);
    const double lr_head = cosine_lr(step, schedule, ParamGroup::kHead);
    try {
      for (auto& blk : model.blocks()) {
        const double lr =
            blk.group == ParamGroup::kBackbone ? lr_backbone : lr_head;
        adamw_step(blk.value, blk.grad, blk.opt, lr, cfg.optimizer);
      }
    } catch (const TrainError&) {
      result.diverged = true;
      restore();
      break;
    }
    snapshot();
    result.steps_completed = step + 1;
  }

  // Held-out evaluation on a disjoint seed stream.
  ConfusionMatrix cm(static_cast<std::size_t>(cfg.model.classes),
                     cfg.hflp.ignore_label);
  std::vector<std::uint64_t> b_inter, b_union;
  for (int e = 0; e < cfg.eval_scenes; ++e) {
    const std::uint64_t eval_seed =
        mix64(cfg.seed ^ 0xE7A1C0DEULL, 0x100000ULL + static_cast<std::uint64_t>(e));
    const Sample sample = generate_texture_scene(eval_seed, cfg.scene);
    const LabelMask pred = model.predict(sample.image);
    cm.accumulate(pred, sample.mask);
    const BoundaryIoUResult br =
        boundary_iou(pred, sample.mask, cfg.boundary_frac, cfg.hflp.ignore_label);
    for (std::size_t i = 0; i < br.classes.size(); ++i) {
      const std::size_t cls = static_cast<std::size_t>(br.classes[i]);
      if (cls >= b_inter.size()) {
        b_inter.resize(cls + 1, 0);
        b_union.resize(cls + 1, 0);
      }
      b_inter[cls] += br.intersection[i];
      b_union[cls] += br.union_count[i];
    }
  }
  result.held_out = summarize(cm);
  result.held_out_miou = result.held_out.miou;
  {
    double s = 0.0;
    std::size_t n = 0;
    for (std::size_t c = 0; c < b_union.size(); ++c) {
      if (b_union[c] == 0) continue;
      s += static_cast<double>(b_inter[c]) / static_cast<double>(b_union[c]);
      ++n;
    }
    result.held_out_boundary_iou = n > 0 ? s / static_cast<double>(n) : 0.0;
  }

  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    write_csv(out_dir / "loss_curve.csv", "step,loss", result.loss_curve);
    write_csv(out_dir / "gradnorm.csv", "step,grad_norm", result.grad_norms);
    model.save_checkpoint(out_dir / "checkpoint.bin");

    ordered_json j;
    j["diverged"] = result.diverged;
    j["steps_completed"] = result.steps_completed;
    j["held_out_miou"] = result.held_out_miou;
    j["held_out_macc"] = result.held_out.macc;
    j["held_out_aacc"] = result.held_out.aacc;
    j["held_out_boundary_iou"] = result.held_out_boundary_iou;
    j["query_usage"] = result.query_usage;
    j["final_loss"] =
        result.loss_curve.empty() ? 0.0 : result.loss_curve.back();
    std::ofstream out(out_dir / "metrics.json", std::ios::trunc);
    if (!out) throw TrainError("cannot write metrics.json");
    out << j.dump(2) << "\n";
  }
  return result;
}

}  // namespace matseg
