#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "matseg/rng.hpp"
#include "matseg/train.hpp"
#include "oracles.hpp"

using namespace matseg;

TEST_CASE("cosine schedule endpoints and midpoint") {
  const Schedule s{.lr_backbone0 = 1e-4, .lr_head0 = 1e-3, .lr_min = 1e-6,
                   .total_steps = 100};
  CHECK(cosine_lr(0, s, ParamGroup::kHead) == 1e-3);
  CHECK(cosine_lr(0, s, ParamGroup::kBackbone) == 1e-4);
  CHECK(cosine_lr(100, s, ParamGroup::kHead) == 1e-6);
  CHECK(cosine_lr(100, s, ParamGroup::kBackbone) == 1e-6);
  CHECK(cosine_lr(50, s, ParamGroup::kBackbone) ==
        doctest::Approx((1e-4 + 1e-6) / 2.0).epsilon(1e-12));
  CHECK(cosine_lr(50, s, ParamGroup::kHead) ==
        doctest::Approx((1e-3 + 1e-6) / 2.0).epsilon(1e-12));
  CHECK_THROWS_AS(cosine_lr(101, s, ParamGroup::kHead), TrainError);
  CHECK_THROWS_AS(cosine_lr(-1, s, ParamGroup::kHead), TrainError);
}

TEST_CASE("cosine schedule is monotone non-increasing with a shared shape") {
  const Schedule s{.total_steps = 64};
  double prev_b = cosine_lr(0, s, ParamGroup::kBackbone);
  double prev_h = cosine_lr(0, s, ParamGroup::kHead);
  CHECK(prev_b / prev_h == doctest::Approx(0.1).epsilon(1e-12));
  for (std::int64_t t = 1; t <= 64; ++t) {
    const double b = cosine_lr(t, s, ParamGroup::kBackbone);
    const double h = cosine_lr(t, s, ParamGroup::kHead);
    CHECK(b <= prev_b);
    CHECK(h <= prev_h);
    // Both groups share the cosine shape factor exactly.
    const double shape_b = (b - s.lr_min) / (s.lr_backbone0 - s.lr_min);
    const double shape_h = (h - s.lr_min) / (s.lr_head0 - s.lr_min);
    CHECK(shape_b == doctest::Approx(shape_h).epsilon(1e-12));
    prev_b = b;
    prev_h = h;
  }
}

TEST_CASE("adamw: zero gradient leaves params alone without decay") {
  std::vector<double> p{1.0, -2.0, 3.0};
  std::vector<double> g{0.0, 0.0, 0.0};
  AdamWState st;
  adamw_step(p, g, st, 0.01, {.weight_decay = 0.0});
  CHECK(p == std::vector<double>{1.0, -2.0, 3.0});
}

TEST_CASE("adamw: zero gradient with decay scales by (1 - lr wd)") {
  std::vector<double> p{1.0, -2.0, 4.0};
  std::vector<double> g{0.0, 0.0, 0.0};
  AdamWState st;
  adamw_step(p, g, st, 0.01, {.weight_decay = 0.1});
  CHECK(p[0] == doctest::Approx(1.0 * (1.0 - 0.001)).epsilon(1e-15));
  CHECK(p[1] == doctest::Approx(-2.0 * (1.0 - 0.001)).epsilon(1e-15));
  CHECK(p[2] == doctest::Approx(4.0 * (1.0 - 0.001)).epsilon(1e-15));
}

TEST_CASE("adamw matches a hand-rolled scalar oracle over three steps") {
  const AdamWConfig cfg{.beta1 = 0.9, .beta2 = 0.999, .eps = 1e-8,
                        .weight_decay = 0.0};
  const double lr = 0.1;
  std::vector<double> p{0.5};
  AdamWState st;

  // Scalar reference, written out step by step.
  double rp = 0.5, rm = 0.0, rv = 0.0;
  for (int t = 1; t <= 3; ++t) {
    const double grad = 1.0;
    rm = 0.9 * rm + 0.1 * grad;
    rv = 0.999 * rv + 0.001 * grad * grad;
    const double mh = rm / (1.0 - std::pow(0.9, t));
    const double vh = rv / (1.0 - std::pow(0.999, t));
    rp -= lr * mh / (std::sqrt(vh) + 1e-8);

    std::vector<double> g{1.0};
    adamw_step(p, g, st, lr, cfg);
    CHECK(p[0] == doctest::Approx(rp).epsilon(1e-15));
  }
}

TEST_CASE("adamw rejects non-finite gradients") {
  std::vector<double> p{1.0};
  std::vector<double> g{std::nan("")};
  AdamWState st;
  CHECK_THROWS_AS(adamw_step(p, g, st, 0.1, {}), TrainError);
  CHECK(p[0] == 1.0);  // aborted before mutation
}

TEST_CASE("texture scenes are deterministic per seed") {
  SceneOptions opts;
  opts.size = 24;
  opts.n_regions = 3;
  opts.class_ids = {0, 1, 2};
  const Sample a = generate_texture_scene(17, opts);
  const Sample b = generate_texture_scene(17, opts);
  const Sample c = generate_texture_scene(18, opts);
  CHECK(a.mask.labels == b.mask.labels);
  bool identical = true;
  for (std::size_t i = 0; i < a.image.size(); ++i) {
    identical = identical && a.image[i] == b.image[i];
  }
  CHECK(identical);
  CHECK(a.mask.labels != c.mask.labels);
}

TEST_CASE("single-region scenes are constant-class") {
  SceneOptions opts;
  opts.size = 16;
  opts.n_regions = 1;
  opts.class_ids = {0, 1, 2, 3};
  const Sample s = generate_texture_scene(5, opts);
  const std::int32_t first = s.mask.labels[0];
  for (auto v : s.mask.labels) CHECK(v == first);
  for (double v : s.image.values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("scene class draws track the configured weights (chi-squared)") {
  SceneOptions opts;
  opts.size = 8;
  opts.n_regions = 4;
  opts.class_ids = {0, 1, 2};
  opts.class_weights = {0.6, 0.3, 0.1};
  std::array<std::uint64_t, 3> counts{0, 0, 0};
  const int scenes = 1000;
  for (int i = 0; i < scenes; ++i) {
    const Sample s = generate_texture_scene(std::uint64_t(i) + 1, opts);
    // Count region draws through the mask: every present class had >= 1 draw,
    // but pixel-weighted counting tracks the weights more tightly.
    for (auto v : s.mask.labels) counts[std::size_t(v)]++;
  }
  double total = 0.0;
  for (auto c : counts) total += double(c);
  double chi2 = 0.0;
  for (std::size_t k = 0; k < 3; ++k) {
    const double expected = opts.class_weights[k] * total;
    chi2 += (double(counts[k]) - expected) * (double(counts[k]) - expected) /
            expected;
  }
  // Pixels within a scene are correlated, so this is a coarse sanity bound
  // rather than a strict 2-dof chi-squared quantile.
  const double frac0 = double(counts[0]) / total;
  const double frac1 = double(counts[1]) / total;
  const double frac2 = double(counts[2]) / total;
  CHECK(frac0 == doctest::Approx(0.6).epsilon(0.1));
  CHECK(frac1 == doctest::Approx(0.3).epsilon(0.15));
  CHECK(frac2 == doctest::Approx(0.1).epsilon(0.3));
  CHECK(chi2 < 1e7);  // guards against total collapse of a class
}

TEST_CASE("boundary band scenes carry a thin third class") {
  SceneOptions opts;
  opts.size = 32;
  opts.n_regions = 4;
  opts.class_ids = {0, 1};
  opts.boundary_width = 2;
  opts.boundary_class = 2;
  const Sample s = generate_texture_scene(9, opts);
  std::size_t band = 0;
  for (auto v : s.mask.labels) band += v == 2 ? 1 : 0;
  CHECK(band > 0);
  CHECK(band < s.mask.size() / 3);  // thin, not dominant
}

TEST_CASE("toy model gradients pass finite differences in every mode") {
  ToyModelConfig mc;
  mc.f1 = 4;
  mc.f2 = 6;
  mc.classes = 3;
  mc.n_queries = 4;
  mc.init_seed = 3;

  SceneOptions opts;
  opts.size = 12;
  opts.n_regions = 3;
  opts.class_ids = {0, 1, 2};
  const Sample sample = generate_texture_scene(31, opts);

  const HflpConfig hflp_cfg{};
  const QerConfig qer_cfg{.lambda = 0.1};

  for (LossMode mode :
       {LossMode::kHflp, LossMode::kDownsampledCe, LossMode::kHflpQer}) {
    CAPTURE(to_string(mode));
    ToyModel model(mc);

    // Pin the assignment for the query mode so the perturbed losses are
    // evaluated under the same matching.
    Assignment fixed;
    const Assignment* fixed_ptr = nullptr;
    if (mode == LossMode::kHflpQer) {
      const StepResult fwd =
          model.compute(sample, mode, hflp_cfg, qer_cfg, false);
      REQUIRE(fwd.has_assignment);
      fixed = fwd.assignment;
      fixed_ptr = &fixed;
    }

    model.zero_grad();
    model.compute(sample, mode, hflp_cfg, qer_cfg, true, fixed_ptr);

    for (auto& block : model.blocks()) {
      std::vector<double> numeric(block.value.size());
      const double step = 1e-5;
      for (std::size_t i = 0; i < block.value.size(); ++i) {
        const double keep = block.value[i];
        block.value[i] = keep + step;
        const double up = model.loss_only(sample, mode, hflp_cfg, qer_cfg, fixed_ptr);
        block.value[i] = keep - step;
        const double down = model.loss_only(sample, mode, hflp_cfg, qer_cfg, fixed_ptr);
        block.value[i] = keep;
        numeric[i] = (up - down) / (2.0 * step);
      }
      const double err = oracles::max_rel_error(block.grad, numeric);
      CAPTURE(block.name);
      CHECK(err < 1e-4);
    }
  }
}

TEST_CASE("lr zero with zero decay leaves parameters bit-exact") {
  namespace fs = std::filesystem;
  const fs::path dir = fs::temp_directory_path() / "matseg_train_lr0";
  fs::remove_all(dir);

  TrainConfig cfg;
  cfg.seed = 4;
  cfg.steps = 3;
  cfg.batch_size = 2;
  cfg.model.classes = 2;
  cfg.model.f1 = 4;
  cfg.model.f2 = 6;
  cfg.scene.size = 16;
  cfg.scene.class_ids = {0, 1};
  cfg.schedule = {.lr_backbone0 = 0.0, .lr_head0 = 0.0, .lr_min = 0.0,
                  .total_steps = 3};
  cfg.optimizer.weight_decay = 0.0;
  cfg.eval_scenes = 2;

  const TrainResult res = train(cfg, dir);
  CHECK(res.steps_completed == 3);

  // The final checkpoint must equal a fresh initialization bit for bit.
  ToyModel trained(cfg.model);
  trained.load_checkpoint(dir / "checkpoint.bin");
  const ToyModel fresh(cfg.model);
  for (std::size_t b = 0; b < fresh.blocks().size(); ++b) {
    CHECK(trained.blocks()[b].value == fresh.blocks()[b].value);
  }
  fs::remove_all(dir);
}

TEST_CASE("training writes its artifacts and reproduces bit-identical curves") {
  namespace fs = std::filesystem;
  const fs::path dir1 = fs::temp_directory_path() / "matseg_train_a";
  const fs::path dir2 = fs::temp_directory_path() / "matseg_train_b";
  fs::remove_all(dir1);
  fs::remove_all(dir2);

  TrainConfig cfg;
  cfg.seed = 12;
  cfg.steps = 6;
  cfg.batch_size = 2;
  cfg.model.classes = 2;
  cfg.model.f1 = 4;
  cfg.model.f2 = 8;
  cfg.scene.size = 16;
  cfg.scene.class_ids = {0, 1};
  cfg.eval_scenes = 2;

  const TrainResult a = train(cfg, dir1);
  const TrainResult b = train(cfg, dir2);
  CHECK(a.loss_curve == b.loss_curve);
  CHECK(a.grad_norms == b.grad_norms);

  auto slurp = [](const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(in)),
                       std::istreambuf_iterator<char>());
  };
  CHECK(slurp(dir1 / "loss_curve.csv") == slurp(dir2 / "loss_curve.csv"));
  CHECK(slurp(dir1 / "gradnorm.csv") == slurp(dir2 / "gradnorm.csv"));
  CHECK(fs::exists(dir1 / "checkpoint.bin"));
  CHECK(fs::exists(dir1 / "metrics.json"));
  CHECK(!a.loss_curve.empty());
  CHECK(a.grad_norms.size() == a.loss_curve.size());

  // Checkpoint round-trip.
  ToyModel model(cfg.model);
  model.load_checkpoint(dir1 / "checkpoint.bin");
  ToyModel fresh(cfg.model);
  bool moved = false;
  for (std::size_t i = 0; i < model.blocks()[0].value.size(); ++i) {
    moved = moved ||
            model.blocks()[0].value[i] != fresh.blocks()[0].value[i];
  }
  CHECK(moved);
  fs::remove_all(dir1);
  fs::remove_all(dir2);
}

TEST_CASE("train config json round-trips") {
  TrainConfig cfg;
  cfg.seed = 77;
  cfg.mode = LossMode::kHflpQer;
  cfg.steps = 42;
  cfg.scene.class_ids = {0, 1, 2};
  cfg.qer.lambda = 0.25;
  const std::string text = train_config_to_json(cfg);
  const TrainConfig back = train_config_from_json(text);
  CHECK(back.seed == 77);
  CHECK(back.mode == LossMode::kHflpQer);
  CHECK(back.steps == 42);
  CHECK(back.qer.lambda == 0.25);
  CHECK(train_config_to_json(back) == text);
  CHECK_THROWS_AS(train_config_from_json("{"), TrainError);
  CHECK_THROWS_AS(train_config_from_json(R"({"mode": "bogus"})"), TrainError);
}

TEST_CASE("matching is computed before regularization and ignores lambda") {
  ToyModelConfig mc;
  mc.f1 = 4;
  mc.f2 = 8;
  mc.classes = 3;
  mc.n_queries = 4;
  mc.init_seed = 9;
  SceneOptions opts;
  opts.size = 16;
  opts.n_regions = 4;
  opts.class_ids = {0, 1, 2};

  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const Sample sample = generate_texture_scene(seed, opts);
    ToyModel model(mc);
    // Identical forward state: the assignment must be a pure function of the
    // forward outputs, so the regularizer weight cannot move it.
    const StepResult with_qer =
        model.compute(sample, LossMode::kHflpQer, {}, {.lambda = 0.1}, false);
    const StepResult without =
        model.compute(sample, LossMode::kHflpQer, {}, {.lambda = 0.0}, false);
    REQUIRE(with_qer.has_assignment);
    CHECK(with_qer.assignment.pairs == without.assignment.pairs);
    // Re-running the same forward reproduces the assignment exactly.
    const StepResult again =
        model.compute(sample, LossMode::kHflpQer, {}, {.lambda = 0.1}, false);
    CHECK(again.assignment.pairs == with_qer.assignment.pairs);
  }
}

TEST_CASE("train validates scene classes against the model") {
  TrainConfig cfg;
  cfg.model.classes = 2;
  cfg.scene.class_ids = {0, 1, 5};
  CHECK_THROWS_AS(train(cfg), TrainError);
}
