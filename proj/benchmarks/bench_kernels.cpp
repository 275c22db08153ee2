#include <benchmark/benchmark.h>

#include "matseg/loss.hpp"
#include "matseg/matching.hpp"
#include "matseg/metrics.hpp"
#include "matseg/png_io.hpp"
#include "matseg/rng.hpp"
#include "matseg/sha256.hpp"
#include "matseg/split.hpp"
#include "matseg/tensor.hpp"
#include "matseg/train.hpp"

using namespace matseg;

namespace {

Tensor random_tensor(std::vector<std::size_t> shape, std::uint64_t seed,
                     double lo = -2.0, double hi = 2.0) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

LabelMask random_mask(std::size_t h, std::size_t w, int classes,
                      std::uint64_t seed) {
  LabelMask m(h, w);
  Rng rng(seed);
  for (auto& v : m.labels) v = std::int32_t(rng.uniform_int(std::uint64_t(classes)));
  return m;
}

void BM_Softmax46(benchmark::State& state) {
  const Tensor t = random_tensor({46, 64, 64}, 1);
  for (auto _ : state) {
    benchmark::DoNotOptimize(softmax(t, 0));
  }
}
BENCHMARK(BM_Softmax46);

void BM_UpsampleBilinear(benchmark::State& state) {
  const Tensor t = random_tensor({8, 32, 32}, 2);
  for (auto _ : state) {
    benchmark::DoNotOptimize(upsample_bilinear(t, 128, 128));
  }
}
BENCHMARK(BM_UpsampleBilinear);

void BM_HflpLoss(benchmark::State& state) {
  const LogitMap z(random_tensor({8, 16, 16}, 3), 4);
  const LabelMask y = random_mask(64, 64, 8, 4);
  for (auto _ : state) {
    benchmark::DoNotOptimize(hflp_loss(z, y, {}));
  }
}
BENCHMARK(BM_HflpLoss);

void BM_QerLoss(benchmark::State& state) {
  const Tensor q = random_tensor({100, 47}, 5);
  for (auto _ : state) {
    benchmark::DoNotOptimize(qer_loss(q, {}));
  }
}
BENCHMARK(BM_QerLoss);

void BM_Hungarian(benchmark::State& state) {
  const auto n = std::size_t(state.range(0));
  const Tensor c = random_tensor({n, n}, 6, 0.0, 10.0);
  const CostMatrix cm(c);
  for (auto _ : state) {
    benchmark::DoNotOptimize(hungarian(cm));
  }
}
BENCHMARK(BM_Hungarian)->Arg(8)->Arg(16)->Arg(32);

void BM_ConfusionAccumulate(benchmark::State& state) {
  const LabelMask gt = random_mask(512, 512, 46, 7);
  const LabelMask pred = random_mask(512, 512, 46, 8);
  ConfusionMatrix cm(46);
  for (auto _ : state) {
    cm.accumulate(pred, gt);
  }
}
BENCHMARK(BM_ConfusionAccumulate);

void BM_BoundaryIoU(benchmark::State& state) {
  const LabelMask gt = random_mask(128, 128, 4, 9);
  const LabelMask pred = random_mask(128, 128, 4, 10);
  for (auto _ : state) {
    benchmark::DoNotOptimize(boundary_iou(pred, gt, 0.02));
  }
}
BENCHMARK(BM_BoundaryIoU);

void BM_Jsd(benchmark::State& state) {
  ClassHistogram p(46), q(46);
  Rng rng(11);
  for (std::size_t c = 0; c < 46; ++c) {
    p.counts[c] = rng.uniform_int(100000) + 1;
    q.counts[c] = rng.uniform_int(100000) + 1;
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(jsd(p, q));
  }
}
BENCHMARK(BM_Jsd);

void BM_StratifiedSplit1k(benchmark::State& state) {
  Rng rng(12);
  std::vector<SampleHistogram> samples;
  for (int i = 0; i < 1000; ++i) {
    ClassHistogram h(10);
    for (std::size_t c = 0; c < 10; ++c) h.counts[c] = rng.uniform_int(500);
    if (h.total() == 0) h.counts[0] = 1;
    samples.push_back({"s" + std::to_string(i), h});
  }
  for (auto _ : state) {
    benchmark::DoNotOptimize(stratified_split(samples, {0.8, 0.1, 0.1}, 3));
  }
}
BENCHMARK(BM_StratifiedSplit1k);

void BM_AugmentPipeline(benchmark::State& state) {
  SceneOptions opts;
  opts.size = 128;
  opts.n_regions = 5;
  opts.class_ids = {0, 1, 2, 3};
  const Sample sample = generate_texture_scene(13, opts);
  AugmentConfig cfg = AugmentConfig::segformer_preset();
  cfg.crop_h = cfg.crop_w = 128;
  std::uint64_t id = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(apply_augment(sample, cfg, id++));
  }
}
BENCHMARK(BM_AugmentPipeline);

void BM_SceneGeneration(benchmark::State& state) {
  SceneOptions opts;
  opts.size = 128;
  opts.n_regions = 6;
  opts.class_ids = {0, 1, 2, 3};
  std::uint64_t seed = 0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(generate_texture_scene(seed++, opts));
  }
}
BENCHMARK(BM_SceneGeneration);

void BM_Sha256_1MiB(benchmark::State& state) {
  std::vector<std::uint8_t> data(1 << 20);
  Rng rng(14);
  for (auto& b : data) b = std::uint8_t(rng.uniform_int(256));
  for (auto _ : state) {
    benchmark::DoNotOptimize(sha256_hex(data));
  }
  state.SetBytesProcessed(std::int64_t(state.iterations()) * std::int64_t(data.size()));
}
BENCHMARK(BM_Sha256_1MiB);

void BM_PngRoundTrip(benchmark::State& state) {
  ImageU8 img;
  img.width = img.height = 256;
  img.channels = 3;
  img.pixels.resize(256 * 256 * 3);
  Rng rng(15);
  for (auto& p : img.pixels) p = std::uint8_t(rng.uniform_int(256));
  for (auto _ : state) {
    benchmark::DoNotOptimize(decode_png(encode_png(img)));
  }
}
BENCHMARK(BM_PngRoundTrip);

void BM_ToyTrainStep(benchmark::State& state) {
  ToyModelConfig mc;
  mc.f1 = 8;
  mc.f2 = 16;
  mc.classes = 3;
  mc.n_queries = 4;
  ToyModel model(mc);
  SceneOptions opts;
  opts.size = 48;
  opts.n_regions = 4;
  opts.class_ids = {0, 1, 2};
  const Sample sample = generate_texture_scene(16, opts);
  for (auto _ : state) {
    model.zero_grad();
    benchmark::DoNotOptimize(
        model.compute(sample, LossMode::kHflpQer, {}, {}, true));
  }
}
BENCHMARK(BM_ToyTrainStep);

}  // namespace

BENCHMARK_MAIN();
