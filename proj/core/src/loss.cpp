#include "matseg/loss.hpp"

#include <cmath>
#include <vector>

namespace matseg {

LogitMap::LogitMap(Tensor t, int stride_in) : tensor(std::move(t)), stride(stride_in) {
  if (tensor.rank() != 3) {
    throw LossError("LogitMap expects a (C, h, w) tensor");
  }
  classes = static_cast<int>(tensor.dim(0));
  if (classes < 2) {
    throw LossError("LogitMap needs at least 2 classes");
  }
  if (stride < 1) {
    throw LossError("LogitMap stride must be >= 1");
  }
}

namespace {

std::size_t ceil_div(std::size_t a, std::size_t b) { return (a + b - 1) / b; }

void check_spatial_compat(const LogitMap& z, const LabelMask& y) {
  if (y.height == 0 || y.width == 0) {
    throw LossError("empty label mask");
  }
  const std::size_t stride = static_cast<std::size_t>(z.stride);
  if (z.height() != ceil_div(y.height, stride) ||
      z.width() != ceil_div(y.width, stride)) {
    throw LossError("logit/label spatial dims incompatible with stride");
  }
}

void check_labels(const LabelMask& y, int classes, std::int32_t ignore_label) {
  for (std::int32_t v : y.labels) {
    if (v == ignore_label) continue;
    if (v < 0 || v >= classes) {
      throw LossError("label value " + std::to_string(v) +
                      " outside [0, C) and not the ignore label");
    }
  }
}

}  // namespace

LossResult hflp_loss(const LogitMap& z, const LabelMask& y,
                     const HflpConfig& cfg) {
  if (cfg.epsilon < 0.0 || cfg.epsilon >= 1.0) {
    throw LossError("hflp epsilon must lie in [0, 1)");
  }
  check_spatial_compat(z, y);
  const int C = z.classes;
  check_labels(y, C, cfg.ignore_label);

  const std::size_t H = y.height, W = y.width;
  const std::size_t h = z.height(), w = z.width();

  const Tensor up = upsample_bilinear(z.tensor, H, W, cfg.align_corners);
  const Tensor logp = log_softmax(up, 0);

  std::size_t supervised = 0;
  for (std::int32_t v : y.labels) {
    if (v != cfg.ignore_label) ++supervised;
  }
  if (supervised == 0) {
    throw EmptySupervisionError("hflp_loss: every pixel carries the ignore label");
  }
  const double inv_n = 1.0 / static_cast<double>(supervised);
  const double off_target = cfg.epsilon / static_cast<double>(C);
  const double on_target = 1.0 - cfg.epsilon + off_target;

  // Gradient w.r.t. the upsampled logits: (softmax - smoothed target) / N on
  // supervised pixels, zero elsewhere.
  Tensor grad_up(up.shape());
  double loss = 0.0;
  for (std::size_t yy = 0; yy < H; ++yy) {
    for (std::size_t xx = 0; xx < W; ++xx) {
      const std::int32_t label = y.at(yy, xx);
      if (label == cfg.ignore_label) continue;
      for (int c = 0; c < C; ++c) {
        const double lp = logp.at3(static_cast<std::size_t>(c), yy, xx);
        const double target = (c == label) ? on_target : off_target;
        loss -= target * lp;
        grad_up.at3(static_cast<std::size_t>(c), yy, xx) =
            (std::exp(lp) - target) * inv_n;
      }
    }
  }
  loss *= inv_n;

  // Chain through the upsampling by the transposed interpolation weights.
  std::vector<BilinearTap> rows(H), cols(W);
  for (std::size_t yy = 0; yy < H; ++yy) {
    rows[yy] = bilinear_tap(yy, h, H, cfg.align_corners);
  }
  for (std::size_t xx = 0; xx < W; ++xx) {
    cols[xx] = bilinear_tap(xx, w, W, cfg.align_corners);
  }
  Tensor grad_z(z.tensor.shape());
  for (int c = 0; c < C; ++c) {
    const std::size_t ci = static_cast<std::size_t>(c);
    for (std::size_t yy = 0; yy < H; ++yy) {
      const BilinearTap& ry = rows[yy];
      for (std::size_t xx = 0; xx < W; ++xx) {
        const BilinearTap& rx = cols[xx];
        const double g = grad_up.at3(ci, yy, xx);
        if (g == 0.0) continue;
        grad_z.at3(ci, ry.lo, rx.lo) += (1.0 - ry.frac) * (1.0 - rx.frac) * g;
        grad_z.at3(ci, ry.lo, rx.hi) += (1.0 - ry.frac) * rx.frac * g;
        grad_z.at3(ci, ry.hi, rx.lo) += ry.frac * (1.0 - rx.frac) * g;
        grad_z.at3(ci, ry.hi, rx.hi) += ry.frac * rx.frac * g;
      }
    }
  }

  require_finite(grad_z, "hflp_loss gradient");
  if (!std::isfinite(loss)) throw LossError("hflp_loss: non-finite loss");
  return {loss, std::move(grad_z)};
}

LossResult qer_loss(const Tensor& q, const QerConfig& cfg) {
  if (q.rank() != 2) {
    throw LossError("qer_loss expects a (N_queries, K) tensor");
  }
  const std::size_t N = q.dim(0);
  const std::size_t K = q.dim(1);
  if (K < 2) {
    throw LossError("qer_loss needs K >= 2 classes");
  }
  if (N == 0) {
    throw LossError("qer_loss: no queries");
  }
  if (cfg.lambda < 0.0) {
    throw LossError("qer lambda must be >= 0");
  }
  if (cfg.lambda == 0.0) {
    return {0.0, Tensor(q.shape())};  // disabled regularizer
  }
  require_finite(q, "qer_loss input");

  const Tensor logp = log_softmax(q, 1);
  const double log_k = std::log(static_cast<double>(K));
  const double scale = cfg.lambda / static_cast<double>(N);

  Tensor grad(q.shape());
  double loss = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    if (cfg.direction == QerDirection::kEntropyMax) {
      // KL(P || U) = ln K - H(P); dKL/dq_k = p_k (ln p_k + H(P))
      double entropy = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        const double lp = logp[n * K + k];
        entropy -= std::exp(lp) * lp;
      }
      loss += std::max(0.0, log_k - entropy);
      for (std::size_t k = 0; k < K; ++k) {
        const double lp = logp[n * K + k];
        grad[n * K + k] = scale * std::exp(lp) * (lp + entropy);
      }
    } else {
      // KL(U || P) = -ln K - (1/K) sum ln p_k; dKL/dq_k = p_k - 1/K
      double mean_logp = 0.0;
      for (std::size_t k = 0; k < K; ++k) {
        mean_logp += logp[n * K + k];
      }
      mean_logp /= static_cast<double>(K);
      loss += std::max(0.0, -log_k - mean_logp);
      for (std::size_t k = 0; k < K; ++k) {
        grad[n * K + k] =
            scale * (std::exp(logp[n * K + k]) - 1.0 / static_cast<double>(K));
      }
    }
  }
  loss *= scale;
  return {loss, std::move(grad)};
}

LossResult cross_entropy_downsampled(const LogitMap& z, const LabelMask& y,
                                     std::int32_t ignore_label) {
  check_spatial_compat(z, y);
  const int C = z.classes;
  check_labels(y, C, ignore_label);

  const std::size_t h = z.height(), w = z.width();
  const LabelMask y_small = downsample_nearest(y, h, w);

  std::size_t supervised = 0;
  for (std::int32_t v : y_small.labels) {
    if (v != ignore_label) ++supervised;
  }
  if (supervised == 0) {
    throw EmptySupervisionError(
        "cross_entropy_downsampled: every downsampled pixel is ignored");
  }
  const double inv_n = 1.0 / static_cast<double>(supervised);

  const Tensor logp = log_softmax(z.tensor, 0);
  Tensor grad(z.tensor.shape());
  double loss = 0.0;
  for (std::size_t yy = 0; yy < h; ++yy) {
    for (std::size_t xx = 0; xx < w; ++xx) {
      const std::int32_t label = y_small.at(yy, xx);
      if (label == ignore_label) continue;
      for (int c = 0; c < C; ++c) {
        const std::size_t ci = static_cast<std::size_t>(c);
        const double lp = logp.at3(ci, yy, xx);
        const double target = (c == label) ? 1.0 : 0.0;
        loss -= target * lp;
        grad.at3(ci, yy, xx) = (std::exp(lp) - target) * inv_n;
      }
    }
  }
  loss *= inv_n;
  if (!std::isfinite(loss)) {
    throw LossError("cross_entropy_downsampled: non-finite loss");
  }
  return {loss, std::move(grad)};
}

}  // namespace matseg
