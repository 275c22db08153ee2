#include <doctest.h>

#include <cmath>

#include "matseg/loss.hpp"
#include "matseg/rng.hpp"
#include "oracles.hpp"

using namespace matseg;

namespace {

// Independent scalar reference: upsample with the oracle sampler, per-pixel
// scalar softmax, smoothed cross-entropy averaged over supervised pixels.
double hflp_reference(const Tensor& z, const LabelMask& y, double eps,
                      std::int32_t ignore, bool align_corners = false) {
  const int C = int(z.dim(0));
  double loss = 0.0;
  std::size_t supervised = 0;
  for (std::size_t yy = 0; yy < y.height; ++yy) {
    for (std::size_t xx = 0; xx < y.width; ++xx) {
      const std::int32_t label = y.at(yy, xx);
      if (label == ignore) continue;
      ++supervised;
      std::vector<double> logits(static_cast<std::size_t>(C), 0.0);
      for (int c = 0; c < C; ++c) {
        logits[std::size_t(c)] = oracles::bilinear_sample(
            z, std::size_t(c), yy, xx, y.height, y.width, align_corners);
      }
      const auto probs = oracles::softmax_scalar(logits);
      for (int c = 0; c < C; ++c) {
        const double target = (c == label ? 1.0 - eps : 0.0) + eps / C;
        loss -= target * std::log(probs[std::size_t(c)]);
      }
    }
  }
  return loss / double(supervised);
}

LabelMask fixed_pattern_4x4() {
  LabelMask y(4, 4);
  const int pattern[16] = {0, 1, 1, 0, 0, 0, 1, 1, 1, 0, 0, 1, 0, 1, 0, 1};
  for (std::size_t i = 0; i < 16; ++i) y.labels[i] = pattern[i];
  return y;
}

}  // namespace

TEST_CASE("hflp on uniform logits equals ln C") {
  for (int C : {2, 5, 46}) {
    Tensor z({std::size_t(C), 2, 2}, 0.0);
    LabelMask y(8, 8);
    Rng rng(3);
    for (auto& v : y.labels) v = std::int32_t(rng.uniform_int(std::uint64_t(C)));
    const auto res = hflp_loss(LogitMap(z, 4), y, {.epsilon = 0.1});
    CHECK(res.loss == doctest::Approx(std::log(double(C))).epsilon(1e-12));
  }
}

TEST_CASE("hflp with a confident correct prediction is ~0 at epsilon 0") {
  const int C = 3;
  LabelMask y(4, 4);
  Rng rng(4);
  for (auto& v : y.labels) v = std::int32_t(rng.uniform_int(C));
  Tensor z({C, 4, 4}, 0.0);
  for (std::size_t yy = 0; yy < 4; ++yy) {
    for (std::size_t xx = 0; xx < 4; ++xx) {
      z.at3(std::size_t(y.at(yy, xx)), yy, xx) = 30.0;
    }
  }
  const auto res = hflp_loss(LogitMap(z, 1), y, {.epsilon = 0.0});
  CHECK(res.loss >= 0.0);
  CHECK(res.loss < 1e-9);
}

TEST_CASE("hflp 2x2 -> 4x4 case matches the scalar oracle and finite differences") {
  Tensor z({2, 2, 2}, std::vector<double>{1, 0, -2, 3, -1, 0, 2, 0});
  const LabelMask y = fixed_pattern_4x4();
  const HflpConfig cfg{.epsilon = 0.1};

  const auto res = hflp_loss(LogitMap(z, 2), y, cfg);
  const double ref = hflp_reference(z, y, 0.1, cfg.ignore_label);
  CHECK(res.loss == doctest::Approx(ref).epsilon(1e-12));

  const Tensor fd = oracles::finite_difference_grad(z, [&](const Tensor& probe) {
    return hflp_loss(LogitMap(probe, 2), y, cfg).loss;
  });
  CHECK(oracles::max_rel_error(res.grad.values(), fd.values()) < 1e-6);
}

TEST_CASE("hflp ignores ignore-label pixels and renormalizes") {
  Tensor z({2, 2, 2}, std::vector<double>{0.5, -1, 2, 0.25, 1, 0.5, -0.5, 0});
  LabelMask y = fixed_pattern_4x4();
  y.at(0, 0) = kDefaultIgnoreLabel;
  y.at(3, 3) = kDefaultIgnoreLabel;
  const auto res = hflp_loss(LogitMap(z, 2), y, {.epsilon = 0.1});
  const double ref = hflp_reference(z, y, 0.1, kDefaultIgnoreLabel);
  CHECK(res.loss == doctest::Approx(ref).epsilon(1e-12));

  LabelMask all_ignored(4, 4, kDefaultIgnoreLabel);
  CHECK_THROWS_AS(hflp_loss(LogitMap(z, 2), all_ignored, {}),
                  EmptySupervisionError);
}

TEST_CASE("hflp loss never goes below the smoothed-target entropy") {
  Rng rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const int C = 2 + int(rng.uniform_int(5));
    Tensor z({std::size_t(C), 2, 2});
    for (double& v : z.values()) v = rng.uniform(-8.0, 8.0);
    LabelMask y(4, 4);
    for (auto& v : y.labels) v = std::int32_t(rng.uniform_int(std::uint64_t(C)));
    const double eps = 0.1;
    const double on = 1.0 - eps + eps / C;
    const double off = eps / C;
    const double entropy_floor =
        -(on * std::log(on) + (C - 1) * off * std::log(off));
    const auto res = hflp_loss(LogitMap(z, 2), y, {.epsilon = eps});
    CHECK(res.loss >= entropy_floor - 1e-9);
  }
}

TEST_CASE("hflp is invariant to per-pixel logit shifts") {
  Rng rng(6);
  Tensor z({3, 2, 2});
  for (double& v : z.values()) v = rng.uniform(-3.0, 3.0);
  LabelMask y(4, 4);
  for (auto& v : y.labels) v = std::int32_t(rng.uniform_int(3));

  Tensor shifted = z;
  for (std::size_t p = 0; p < 4; ++p) {
    const double shift = rng.uniform(-5.0, 5.0);
    for (std::size_t c = 0; c < 3; ++c) shifted[c * 4 + p] += shift;
  }
  const double a = hflp_loss(LogitMap(z, 2), y, {}).loss;
  const double b = hflp_loss(LogitMap(shifted, 2), y, {}).loss;
  CHECK(a == doctest::Approx(b).epsilon(1e-9));
}

TEST_CASE("hflp validates shapes and labels") {
  Tensor z({2, 2, 2}, 0.0);
  LabelMask wrong(5, 5, 0);
  CHECK_THROWS_AS(hflp_loss(LogitMap(z, 2), wrong, {}), LossError);
  LabelMask bad(4, 4, 9);  // label 9 outside [0, 2)
  CHECK_THROWS_AS(hflp_loss(LogitMap(z, 2), bad, {}), LossError);
  CHECK_THROWS_AS(LogitMap(Tensor({1, 2, 2}, 0.0), 2), LossError);
}

TEST_CASE("qer is zero on uniform logits for any K") {
  for (int K : {2, 3, 7, 46}) {
    Tensor q({3, std::size_t(K)}, 1.25);
    const auto res = qer_loss(q, {.lambda = 0.1});
    CHECK(res.loss == doctest::Approx(0.0).epsilon(1e-12));
  }
}

TEST_CASE("qer on (0.7, 0.1, 0.1, 0.1) matches the direct-summation oracle") {
  const std::vector<double> probs{0.7, 0.1, 0.1, 0.1};
  Tensor q({1, 4});
  for (std::size_t k = 0; k < 4; ++k) q[k] = std::log(probs[k]);
  const auto res = qer_loss(q, {.lambda = 1.0});
  double expected = std::log(4.0);
  for (double p : probs) expected += p * std::log(p);
  CHECK(res.loss == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("qer with lambda 0 is disabled") {
  Rng rng(7);
  Tensor q({4, 5});
  for (double& v : q.values()) v = rng.uniform(-9.0, 9.0);
  const auto res = qer_loss(q, {.lambda = 0.0});
  CHECK(res.loss == 0.0);
  for (double g : res.grad.values()) CHECK(g == 0.0);
}

TEST_CASE("qer gradient matches finite differences in both directions") {
  Rng rng(8);
  Tensor q({3, 4});
  for (double& v : q.values()) v = rng.uniform(-2.0, 2.0);
  for (QerDirection dir : {QerDirection::kEntropyMax, QerDirection::kReverse}) {
    const QerConfig cfg{.lambda = 0.37, .direction = dir};
    const auto res = qer_loss(q, cfg);
    const Tensor fd = oracles::finite_difference_grad(
        q, [&](const Tensor& probe) { return qer_loss(probe, cfg).loss; });
    CHECK(oracles::max_rel_error(res.grad.values(), fd.values()) < 1e-6);
  }
}

TEST_CASE("qer stays within [0, lambda ln K] and rises toward one-hot") {
  const double lambda = 0.1;
  Tensor q({1, 4}, 0.0);
  double prev = qer_loss(q, {.lambda = lambda}).loss;
  for (double margin : {1.0, 3.0, 8.0, 20.0}) {
    q[0] = margin;
    const double loss = qer_loss(q, {.lambda = lambda}).loss;
    CHECK(loss >= prev);
    CHECK(loss <= lambda * std::log(4.0) + 1e-12);
    prev = loss;
  }
  CHECK(prev == doctest::Approx(lambda * std::log(4.0)).epsilon(1e-6));
  CHECK_THROWS_AS(qer_loss(Tensor({2, 1}, 0.0), {}), LossError);
}

TEST_CASE("qer is invariant to per-query shifts") {
  Rng rng(9);
  Tensor q({2, 5});
  for (double& v : q.values()) v = rng.uniform(-2.0, 2.0);
  Tensor shifted = q;
  for (std::size_t n = 0; n < 2; ++n) {
    const double s = rng.uniform(-10.0, 10.0);
    for (std::size_t k = 0; k < 5; ++k) shifted[n * 5 + k] += s;
  }
  CHECK(qer_loss(q, {}).loss ==
        doctest::Approx(qer_loss(shifted, {}).loss).epsilon(1e-9));
}

TEST_CASE("downsampled cross-entropy basics") {
  Tensor z({46, 2, 2}, 0.0);
  LabelMask y(8, 8, 12);
  const auto res = cross_entropy_downsampled(LogitMap(z, 4), y);
  CHECK(res.loss == doctest::Approx(std::log(46.0)).epsilon(1e-12));

  // Confident correct prediction.
  Tensor z2({3, 2, 2}, 0.0);
  LabelMask y2(2, 2);
  y2.labels = {0, 1, 2, 1};
  for (std::size_t yy = 0; yy < 2; ++yy) {
    for (std::size_t xx = 0; xx < 2; ++xx) {
      z2.at3(std::size_t(y2.at(yy, xx)), yy, xx) = 40.0;
    }
  }
  CHECK(cross_entropy_downsampled(LogitMap(z2, 1), y2).loss < 1e-9);
}

TEST_CASE("downsampled ce matches a scalar oracle and diverges from hflp on thin structures") {
  Rng rng(10);
  Tensor z({2, 2, 2});
  for (double& v : z.values()) v = rng.uniform(-2.0, 2.0);

  // Row 0 carries a thin band of class 1 that nearest downsampling to 2x2
  // drops entirely (sampled rows are 1 and 3).
  LabelMask y(4, 4, 0);
  for (std::size_t x = 0; x < 4; ++x) y.at(0, x) = 1;

  const auto down = cross_entropy_downsampled(LogitMap(z, 2), y);
  // Scalar oracle: plain CE over the 2x2 nearest-downsampled target.
  const LabelMask y_small = downsample_nearest(y, 2, 2);
  double ref = 0.0;
  for (std::size_t yy = 0; yy < 2; ++yy) {
    for (std::size_t xx = 0; xx < 2; ++xx) {
      const auto probs = oracles::softmax_scalar(
          {z.at3(0, yy, xx), z.at3(1, yy, xx)});
      ref -= std::log(probs[std::size_t(y_small.at(yy, xx))]);
    }
  }
  ref /= 4.0;
  CHECK(down.loss == doctest::Approx(ref).epsilon(1e-12));
  for (auto v : y_small.labels) CHECK(v == 0);  // the band is gone

  const auto full = hflp_loss(LogitMap(z, 2), y, {.epsilon = 0.0});
  CHECK(full.loss != doctest::Approx(down.loss).epsilon(1e-6));

  const Tensor fd = oracles::finite_difference_grad(z, [&](const Tensor& probe) {
    return cross_entropy_downsampled(LogitMap(probe, 2), y).loss;
  });
  CHECK(oracles::max_rel_error(down.grad.values(), fd.values()) < 1e-6);
}
