#pragma once

// Desk-scale end-to-end exercise of the training recipe: AdamW with
// backbone/head parameter groups, cosine annealing to a hard floor, a tiny
// segmentation model with hand-written backprop (pixel head for the upsampled
// loss, query head for matching + entropy regularization), and a procedural
// texture-scene generator as the dataset. Everything is 64-bit and seeded, so
// runs are bit-reproducible.

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "matseg/augment.hpp"
#include "matseg/loss.hpp"
#include "matseg/matching.hpp"
#include "matseg/metrics.hpp"
#include "matseg/tensor.hpp"

namespace matseg {

class TrainError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Schedule and optimizer

struct Schedule {
  double lr_backbone0 = 1e-4;
  double lr_head0 = 1e-3;
  double lr_min = 1e-6;
  std::int64_t total_steps = 0;
};

enum class ParamGroup { kBackbone, kHead };

// lr(t) = lr_min + (lr0 - lr_min) * (1 + cos(pi t / T)) / 2; lr(T) == lr_min.
double cosine_lr(std::int64_t step, const Schedule& schedule, ParamGroup group);

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.1;
};

struct AdamWState {
  std::vector<double> m, v;
  std::int64_t step = 0;
};

// One decoupled-weight-decay step: decay is applied to the parameters
// separately from the bias-corrected moment update. Throws on a non-finite
// gradient instead of corrupting the state.
void adamw_step(std::span<double> params, std::span<const double> grads,
                AdamWState& state, double lr, const AdamWConfig& cfg);

// ---------------------------------------------------------------------------
// Procedural texture scenes

struct SceneOptions {
  std::size_t size = 48;
  int n_regions = 4;
  std::vector<int> class_ids{0, 1};
  std::vector<double> class_weights;  // uniform when empty
  // Optional thin band of boundary_class along every region border; width in
  // pixels. Produces the aliasing-prone structures the upsampled loss is for.
  int boundary_width = 0;
  int boundary_class = -1;
};

// Voronoi partition; each region is filled with a procedural texture keyed to
// its class (checkerboard, oriented stripes, value noise, smooth gradient).
Sample generate_texture_scene(std::uint64_t seed, const SceneOptions& opts);
Sample generate_texture_scene(std::uint64_t seed, std::size_t size,
                              int n_regions, const std::vector<int>& class_set);

// ---------------------------------------------------------------------------
// Toy model

struct ToyModelConfig {
  int f1 = 8;
  int f2 = 16;
  int classes = 2;    // material classes C; query head adds a no-object slot
  int n_queries = 8;
  std::uint64_t init_seed = 1;

  int query_classes() const { return classes + 1; }
};

struct ParamBlock {
  std::string name;
  ParamGroup group = ParamGroup::kHead;
  std::vector<double> value;
  std::vector<double> grad;
  AdamWState opt;
};

enum class LossMode { kHflp, kDownsampledCe, kHflpQer };
const char* to_string(LossMode mode);
std::optional<LossMode> loss_mode_from_string(const std::string& name);

struct StepResult {
  double total = 0.0;
  double pixel = 0.0;
  double match = 0.0;
  double qer = 0.0;
  bool has_assignment = false;
  Assignment assignment;            // query -> segment index
  std::vector<int> matched_class;   // per segment, its class id
  std::vector<int> query_argmax;    // per query, argmax over K classes
};

// Two convolutions at stride 2 (backbone group) feeding a 1x1 pixel
// classifier plus a query head (head group): learned query vectors produce
// class logits through a linear layer and mask logits by feature dot-product.
class ToyModel {
 public:
  explicit ToyModel(const ToyModelConfig& cfg);

  const ToyModelConfig& config() const { return cfg_; }
  std::vector<ParamBlock>& blocks() { return blocks_; }
  const std::vector<ParamBlock>& blocks() const { return blocks_; }
  std::size_t parameter_count() const;

  void zero_grad();
  void scale_grad(double factor);
  double grad_norm() const;

  // Forward plus loss; accumulates parameter gradients when requested. The
  // Hungarian assignment is recomputed from the forward outputs unless
  // `fixed_assignment` pins it (required for finite-difference checks, where
  // the perturbed loss must be evaluated under the same matching).
  StepResult compute(const Sample& sample, LossMode mode,
                     const HflpConfig& hflp_cfg, const QerConfig& qer_cfg,
                     bool accumulate_grads,
                     const Assignment* fixed_assignment = nullptr);
  double loss_only(const Sample& sample, LossMode mode,
                   const HflpConfig& hflp_cfg, const QerConfig& qer_cfg,
                   const Assignment* fixed_assignment = nullptr);

  LogitMap forward_pixel(const Tensor& image) const;
  LabelMask predict(const Tensor& image) const;

  // Smallest |pre-activation| in the backbone for this input. Finite
  // difference checks need this to stay well above the probe step, or the
  // secant straddles a ReLU kink.
  double min_abs_preactivation(const Tensor& image) const;

  void save_checkpoint(const std::filesystem::path& path) const;
  void load_checkpoint(const std::filesystem::path& path);

 private:
  ToyModelConfig cfg_;
  std::vector<ParamBlock> blocks_;
};

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
  std::uint64_t seed = 0;
  LossMode mode = LossMode::kHflp;
  int steps = 300;
  int batch_size = 8;
  ToyModelConfig model;
  AdamWConfig optimizer;
  Schedule schedule;  // total_steps defaults to `steps` when 0
  HflpConfig hflp;
  QerConfig qer;
  SceneOptions scene;
  std::string augment_preset = "none";  // none | segformer | mask2former
  int eval_scenes = 8;
  double boundary_frac = 0.02;
};

std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);

struct TrainResult {
  std::vector<double> loss_curve;
  std::vector<double> grad_norms;
  bool diverged = false;
  int steps_completed = 0;
  MetricSummary held_out;
  double held_out_miou = 0.0;
  double held_out_boundary_iou = 0.0;
  // Per material class: #(step, query) events whose argmax picked the class.
  std::vector<std::uint64_t> query_usage;
};

// Runs the loop; when out_dir is non-empty writes loss_curve.csv,
// gradnorm.csv, metrics.json and checkpoint.bin there. On divergence the
// last healthy checkpoint is written instead and `diverged` is set.
TrainResult train(const TrainConfig& cfg, const std::filesystem::path& out_dir = {});

}  // namespace matseg
