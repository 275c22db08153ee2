#include <doctest.h>

#include <cmath>

#include "matseg/rng.hpp"
#include "matseg/tensor.hpp"
#include "oracles.hpp"

using namespace matseg;

TEST_CASE("softmax of equal logits is uniform") {
  Tensor t({2}, std::vector<double>{0.0, 0.0});
  const Tensor s = softmax(t, 0);
  CHECK(s[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(s[1] == doctest::Approx(0.5).epsilon(1e-15));

  Tensor t3({3}, std::vector<double>{7.25, 7.25, 7.25});
  const Tensor s3 = softmax(t3, 0);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(s3[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
  }
}

TEST_CASE("softmax (1,2,3) matches the scalar exp/sum oracle") {
  Tensor t({3}, std::vector<double>{1.0, 2.0, 3.0});
  const Tensor s = softmax(t, 0);
  const auto ref = oracles::softmax_scalar({1.0, 2.0, 3.0});
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(s[i] == doctest::Approx(ref[i]).epsilon(1e-14));
  }
  CHECK(s[0] == doctest::Approx(0.09003057).epsilon(1e-7));
  CHECK(s[1] == doctest::Approx(0.24472847).epsilon(1e-7));
  CHECK(s[2] == doctest::Approx(0.66524096).epsilon(1e-7));
}

TEST_CASE("softmax slices sum to one and shift invariance holds") {
  Rng rng(11);
  Tensor t({4, 5, 3});
  for (double& v : t.values()) v = rng.uniform(-6.0, 6.0);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    const Tensor s = softmax(t, axis);
    // Sum along the axis everywhere.
    Tensor shifted = t;
    for (double& v : shifted.values()) v += 123.456;
    const Tensor s2 = softmax(shifted, axis);
    double max_diff = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      CHECK(s[i] >= 0.0);
      CHECK(s[i] <= 1.0);
      max_diff = std::max(max_diff, std::abs(s[i] - s2[i]));
    }
    CHECK(max_diff < 1e-12);
  }
  const Tensor s = softmax(t, 0);
  for (std::size_t inner = 0; inner < 15; ++inner) {
    double total = 0.0;
    for (std::size_t c = 0; c < 4; ++c) total += s[c * 15 + inner];
    CHECK(std::abs(total - 1.0) < 1e-12);
  }
}

TEST_CASE("softmax rejects bad input") {
  Tensor t({2, 2}, std::vector<double>{1, 2, 3, 4});
  CHECK_THROWS_AS(softmax(t, 5), TensorError);
  Tensor bad({2}, std::vector<double>{1.0, std::nan("")});
  CHECK_THROWS_AS(softmax(bad, 0), TensorError);
}

TEST_CASE("log_softmax agrees with log of softmax") {
  Rng rng(12);
  Tensor t({3, 4});
  for (double& v : t.values()) v = rng.uniform(-4.0, 4.0);
  const Tensor ls = log_softmax(t, 1);
  const Tensor s = softmax(t, 1);
  for (std::size_t i = 0; i < t.size(); ++i) {
    CHECK(ls[i] == doctest::Approx(std::log(s[i])).epsilon(1e-12));
  }
}

TEST_CASE("bilinear resize to the same size is the identity") {
  Tensor t({1, 2, 2}, std::vector<double>{0, 1, 2, 3});
  const Tensor same = upsample_bilinear(t, 2, 2);
  for (std::size_t i = 0; i < t.size(); ++i) {
    CHECK(same[i] == t[i]);  // bit-exact
  }
}

TEST_CASE("bilinear resize of a constant field stays constant") {
  Tensor t({2, 3, 3}, 0.731);
  const Tensor up = upsample_bilinear(t, 9, 7);
  for (double v : up.values()) {
    CHECK(v == doctest::Approx(0.731).epsilon(1e-15));
  }
}

TEST_CASE("bilinear 2x2 -> 4x4 matches the per-pixel weight oracle") {
  Tensor t({1, 2, 2}, std::vector<double>{0, 1, 2, 3});
  const Tensor up = upsample_bilinear(t, 4, 4, false);
  for (std::size_t y = 0; y < 4; ++y) {
    for (std::size_t x = 0; x < 4; ++x) {
      const double ref = oracles::bilinear_sample(t, 0, y, x, 4, 4, false);
      CHECK(up.at3(0, y, x) == doctest::Approx(ref).epsilon(1e-14));
    }
  }
  // Output extrema stay within the input extrema.
  CHECK(min_value(up) >= 0.0);
  CHECK(max_value(up) <= 3.0);
}

TEST_CASE("bilinear align_corners reproduces corners exactly") {
  Tensor t({1, 2, 2}, std::vector<double>{0, 1, 2, 3});
  const Tensor up = upsample_bilinear(t, 5, 5, true);
  CHECK(up.at3(0, 0, 0) == doctest::Approx(0.0));
  CHECK(up.at3(0, 0, 4) == doctest::Approx(1.0));
  CHECK(up.at3(0, 4, 0) == doctest::Approx(2.0));
  CHECK(up.at3(0, 4, 4) == doctest::Approx(3.0));
  for (std::size_t y = 0; y < 5; ++y) {
    for (std::size_t x = 0; x < 5; ++x) {
      const double ref = oracles::bilinear_sample(t, 0, y, x, 5, 5, true);
      CHECK(up.at3(0, y, x) == doctest::Approx(ref).epsilon(1e-14));
    }
  }
}

TEST_CASE("bilinear rejects zero-sized output") {
  Tensor t({1, 2, 2}, std::vector<double>{0, 1, 2, 3});
  CHECK_THROWS_AS(upsample_bilinear(t, 0, 4), TensorError);
}

TEST_CASE("nearest downsample identity and constant cases") {
  LabelMask m(3, 3);
  for (std::size_t i = 0; i < 9; ++i) m.labels[i] = std::int32_t(i);
  const LabelMask same = downsample_nearest(m, 3, 3);
  CHECK(same.labels == m.labels);

  LabelMask c(4, 6, 7);
  const LabelMask small = downsample_nearest(c, 2, 3);
  for (auto v : small.labels) CHECK(v == 7);
}

TEST_CASE("nearest downsample checkerboard matches the index oracle") {
  LabelMask m(4, 4);
  for (std::size_t y = 0; y < 4; ++y) {
    for (std::size_t x = 0; x < 4; ++x) {
      m.at(y, x) = std::int32_t((x + y) % 2);
    }
  }
  const LabelMask d = downsample_nearest(m, 2, 2);
  for (std::size_t y = 0; y < 2; ++y) {
    for (std::size_t x = 0; x < 2; ++x) {
      const auto sy = std::size_t(std::floor((y + 0.5) * 2.0));
      const auto sx = std::size_t(std::floor((x + 0.5) * 2.0));
      CHECK(d.at(y, x) == m.at(sy, sx));
    }
  }
}

TEST_CASE("nearest downsample never invents labels") {
  Rng rng(77);
  for (int trial = 0; trial < 20; ++trial) {
    LabelMask m(7, 9);
    for (auto& v : m.labels) v = std::int32_t(rng.uniform_int(5));
    const LabelMask d = downsample_nearest(m, 1 + rng.uniform_int(7),
                                           1 + rng.uniform_int(9));
    for (auto v : d.labels) {
      CHECK(std::find(m.labels.begin(), m.labels.end(), v) != m.labels.end());
    }
  }
  LabelMask m(2, 2, 0);
  CHECK_THROWS_AS(downsample_nearest(m, 0, 1), TensorError);
  CHECK_THROWS_AS(downsample_nearest(m, 4, 4), TensorError);
}

TEST_CASE("rng streams are deterministic and distinct") {
  Rng a(42, 7), b(42, 7), c(42, 8);
  bool all_equal = true, any_diff = false;
  for (int i = 0; i < 64; ++i) {
    const auto va = a.next_u64();
    all_equal = all_equal && (va == b.next_u64());
    any_diff = any_diff || (va != c.next_u64());
  }
  CHECK(all_equal);
  CHECK(any_diff);
}

TEST_CASE("rng uniform stays in range and hits both halves") {
  Rng r(5);
  int low = 0, high = 0;
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    (u < 0.5 ? low : high)++;
  }
  CHECK(low > 300);
  CHECK(high > 300);
  CHECK(r.uniform(3.0, 3.0) == 3.0);
  for (int i = 0; i < 100; ++i) {
    CHECK(r.uniform_int(7) < 7);
  }
}

TEST_CASE("rng normal has sane moments") {
  Rng r(99);
  double sum = 0.0, sq = 0.0;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    sum += x;
    sq += x * x;
  }
  const double mean = sum / n;
  const double var = sq / n - mean * mean;
  CHECK(std::abs(mean) < 0.05);
  CHECK(var == doctest::Approx(1.0).epsilon(0.05));
}
