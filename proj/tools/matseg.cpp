// matseg: dense material segmentation toolkit CLI.
//
// Subcommands: fetch, split, augment, eval, train-toy, gradcheck.
// JSON configs in, JSON reports out. Exit codes: 0 success, 1 validation
// error (bad config or paths), 2 runtime failure, 3 verification failure
// (split JSD above threshold, gradcheck above tolerance).

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "matseg/augment.hpp"
#include "matseg/ingest.hpp"
#include "matseg/loss.hpp"
#include "matseg/matching.hpp"
#include "matseg/metrics.hpp"
#include "matseg/png_io.hpp"
#include "matseg/rng.hpp"
#include "matseg/split.hpp"
#include "matseg/train.hpp"
#include "matseg/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;
constexpr int kExitVerification = 3;

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

// Machine-readable failure record alongside the stderr message.
int fail(const fs::path& out_dir, int code, const std::string& message) {
  std::cerr << "error: " << message << "\n";
  if (!out_dir.empty()) {
    ordered_json j;
    j["error"] = message;
    j["exit_code"] = code;
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    std::ofstream out(out_dir / "error.json", std::ios::trunc);
    if (out) out << j.dump(2) << "\n";
  }
  return code;
}

void write_resolved_config(const fs::path& out_dir, const ordered_json& cfg) {
  ordered_json j;
  j["toolkit_version"] = matseg::kVersion;
  j["config_schema_version"] = matseg::kConfigSchemaVersion;
  j["config"] = cfg;
  write_text(out_dir / "resolved_config.json", j.dump(2) + "\n");
}

struct PairEntry {
  std::string id;
  fs::path image;
  fs::path mask;
};

// JSONL of {"id", "image", "mask"} rows used by split and augment.
std::vector<PairEntry> load_pairs_jsonl(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open manifest " + path.string());
  std::vector<PairEntry> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
      PairEntry e;
      e.id = j.at("id").get<std::string>();
      if (j.contains("image")) e.image = j.at("image").get<std::string>();
      e.mask = j.at("mask").get<std::string>();
      out.push_back(std::move(e));
    } catch (const json::exception& ex) {
      throw std::runtime_error("manifest line " + std::to_string(line_no) +
                               ": " + ex.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// fetch

struct FetchArgs {
  std::string manifest;
  std::string out;
  int max_parallel = 8;
  int max_attempts = 4;
  long base_backoff_ms = 1000;
  long connect_timeout_ms = 5000;
  long read_timeout_ms = 15000;
  bool no_jitter = false;
  bool offline = false;
};

int run_fetch(const FetchArgs& args) {
  const fs::path out_dir(args.out);
  std::vector<matseg::ManifestEntry> manifest;
  try {
    manifest = matseg::load_manifest_jsonl(args.manifest);
  } catch (const std::exception& e) {
    return fail(out_dir, kExitValidation, e.what());
  }
  if (args.max_attempts < 1 || args.max_parallel < 1) {
    return fail(out_dir, kExitValidation,
                "max-attempts and max-parallel must be >= 1");
  }

  ordered_json cfg;
  cfg["subcommand"] = "fetch";
  cfg["manifest"] = args.manifest;
  cfg["out"] = args.out;
  cfg["offline"] = args.offline;
  cfg["max_parallel"] = args.max_parallel;
  cfg["max_attempts"] = args.max_attempts;
  cfg["base_backoff_ms"] = args.base_backoff_ms;
  cfg["connect_timeout_ms"] = args.connect_timeout_ms;
  cfg["read_timeout_ms"] = args.read_timeout_ms;
  cfg["jitter"] = !args.no_jitter;

  try {
    fs::create_directories(out_dir);
    write_resolved_config(out_dir, cfg);
    if (args.offline) {
      const auto report = matseg::verify_local(manifest, out_dir / "data");
      write_text(out_dir / "report.json", report.to_json());
      std::cout << "verified " << report.total << " entries: " << report.ok
                << " ok, " << report.corrupt << " corrupt, " << report.missing
                << " missing\n";
    } else {
      matseg::FetchPolicy policy;
      policy.max_parallel = args.max_parallel;
      policy.max_attempts = args.max_attempts;
      policy.base_backoff = std::chrono::milliseconds(args.base_backoff_ms);
      policy.connect_timeout = std::chrono::milliseconds(args.connect_timeout_ms);
      policy.read_timeout = std::chrono::milliseconds(args.read_timeout_ms);
      policy.jitter = !args.no_jitter;
      const auto result = matseg::fetch_all(manifest, out_dir / "data", policy);
      write_text(out_dir / "report.json", result.report.to_json());
      std::cout << "fetched " << result.report.ok << "/" << result.report.total;
      if (result.report.recovery_rate) {
        std::cout << " ("
                  << matseg::format_recovery_rate(result.report.ok,
                                                  result.report.total)
                  << ")";
      }
      std::cout << "\n";
    }
  } catch (const std::exception& e) {
    return fail(out_dir, kExitRuntime, e.what());
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// split

struct SplitArgs {
  std::string manifest;
  std::string out;
  std::string ratios = "0.8,0.1,0.1";
  std::string verify_manifest;
  std::uint64_t seed = 0;
  double threshold = 0.02;
  int classes = 0;  // 0 = infer from masks
  int ignore_label = matseg::kDefaultIgnoreLabel;
};

std::optional<std::array<double, 3>> parse_ratios(const std::string& text) {
  std::array<double, 3> r{};
  std::stringstream ss(text);
  std::string item;
  int i = 0;
  while (std::getline(ss, item, ',')) {
    if (i >= 3) return std::nullopt;
    try {
      r[std::size_t(i)] = std::stod(item);
    } catch (...) {
      return std::nullopt;
    }
    ++i;
  }
  if (i != 3) return std::nullopt;
  return r;
}

int run_split(const SplitArgs& args) {
  const fs::path out_dir(args.out);
  const auto ratios = parse_ratios(args.ratios);
  if (!ratios) {
    return fail(out_dir, kExitValidation,
                "ratios must be three comma-separated numbers");
  }
  if (std::abs((*ratios)[0] + (*ratios)[1] + (*ratios)[2] - 1.0) > 1e-9) {
    return fail(out_dir, kExitValidation, "ratios must sum to 1");
  }

  std::vector<PairEntry> pairs;
  try {
    pairs = load_pairs_jsonl(args.manifest);
  } catch (const std::exception& e) {
    return fail(out_dir, kExitValidation, e.what());
  }

  ordered_json cfg;
  cfg["subcommand"] = "split";
  cfg["manifest"] = args.manifest;
  cfg["out"] = args.out;
  cfg["ratios"] = *ratios;
  cfg["seed"] = args.seed;
  cfg["threshold"] = args.threshold;
  cfg["classes"] = args.classes;
  cfg["ignore_label"] = args.ignore_label;
  cfg["verify_manifest"] = args.verify_manifest;

  try {
    fs::create_directories(out_dir);
    write_resolved_config(out_dir, cfg);

    // Histograms from the masks. Class count is inferred unless pinned.
    std::size_t num_classes = std::size_t(std::max(args.classes, 0));
    std::vector<matseg::SampleHistogram> samples;
    std::map<std::string, fs::path> mask_paths;
    for (const auto& p : pairs) {
      const matseg::ImageU8 img = matseg::load_png(p.mask);
      const matseg::LabelMask mask = matseg::mask_from_image(img);
      mask_paths[p.id] = p.mask;
      if (args.classes == 0) {
        for (auto v : mask.labels) {
          if (v != args.ignore_label) {
            num_classes = std::max(num_classes, std::size_t(v) + 1);
          }
        }
      }
      samples.push_back({p.id, {}});
    }
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      const matseg::ImageU8 img = matseg::load_png(pairs[i].mask);
      samples[i].histogram = matseg::ClassHistogram::from_mask(
          matseg::mask_from_image(img), num_classes,
          std::int32_t(args.ignore_label));
    }

    auto loader = [&](const std::string& id)
        -> std::optional<matseg::ClassHistogram> {
      const auto it = mask_paths.find(id);
      if (it == mask_paths.end() || !fs::exists(it->second)) return std::nullopt;
      return matseg::ClassHistogram::from_mask(
          matseg::mask_from_image(matseg::load_png(it->second)), num_classes,
          std::int32_t(args.ignore_label));
    };

    if (!args.verify_manifest.empty()) {
      std::ifstream in(args.verify_manifest);
      if (!in) {
        return fail(out_dir, kExitValidation,
                    "cannot open " + args.verify_manifest);
      }
      std::stringstream buf;
      buf << in.rdbuf();
      const auto manifest = matseg::SplitManifest::from_json(buf.str());
      const auto report = matseg::verify_split(manifest, loader, args.threshold);
      write_text(out_dir / "verify_report.json", report.to_json());
      if (!report.pass) {
        return fail(out_dir, kExitVerification,
                    "split verification failed (see verify_report.json)");
      }
      std::cout << "split verified: jsd_train_val=" << report.jsd_train_val
                << " jsd_train_test=" << report.jsd_train_test << "\n";
      return kExitOk;
    }

    const auto manifest = matseg::stratified_split(samples, *ratios, args.seed);
    write_text(out_dir / "split.json", manifest.to_json());
    std::cout << "split written: jsd_train_val=" << manifest.jsd_train_val
              << " jsd_train_test=" << manifest.jsd_train_test << "\n";
    if (manifest.jsd_train_val > args.threshold ||
        manifest.jsd_train_test > args.threshold) {
      return fail(out_dir, kExitVerification,
                  "split JSD above threshold " + std::to_string(args.threshold));
    }
  } catch (const matseg::PngError& e) {
    return fail(out_dir, kExitValidation, e.what());
  } catch (const matseg::SplitError& e) {
    return fail(out_dir, kExitValidation, e.what());
  } catch (const std::exception& e) {
    return fail(out_dir, kExitRuntime, e.what());
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// augment

struct AugmentArgs {
  std::string manifest;
  std::string out;
  std::string preset = "segformer";
  std::uint64_t seed = 0;
  std::size_t crop = 0;  // 0 = preset default
};

ordered_json draw_record_json(const std::string& id,
                              const matseg::DrawRecord& rec) {
  ordered_json j;
  j["id"] = id;
  j["scale"] = rec.scale;
  j["crop_y"] = rec.crop_y;
  j["crop_x"] = rec.crop_x;
  j["flipped"] = rec.flipped;
  j["hue_shift"] = rec.hue_shift;
  j["saturation"] = rec.saturation;
  j["contrast"] = rec.contrast;
  j["specular_applied"] = rec.specular_applied;
  ordered_json highlights = ordered_json::array();
  for (const auto& h : rec.highlights) {
    highlights.push_back({{"cx", h.cx},
                          {"cy", h.cy},
                          {"sigma_x", h.sigma_x},
                          {"sigma_y", h.sigma_y},
                          {"amplitude", h.amplitude}});
  }
  j["highlights"] = highlights;
  j["noise_applied"] = rec.noise_applied;
  j["noise_sigma"] = rec.noise_sigma;
  return j;
}

int run_augment(const AugmentArgs& args) {
  const fs::path out_dir(args.out);
  matseg::AugmentConfig cfg;
  if (args.preset == "segformer") {
    cfg = matseg::AugmentConfig::segformer_preset();
  } else if (args.preset == "mask2former") {
    cfg = matseg::AugmentConfig::mask2former_preset();
  } else {
    return fail(out_dir, kExitValidation,
                "unknown preset (expected segformer or mask2former): " +
                    args.preset);
  }
  cfg.seed = args.seed;
  if (args.crop > 0) cfg.crop_h = cfg.crop_w = args.crop;

  std::vector<PairEntry> pairs;
  try {
    pairs = load_pairs_jsonl(args.manifest);
  } catch (const std::exception& e) {
    return fail(out_dir, kExitValidation, e.what());
  }
  for (const auto& p : pairs) {
    if (p.image.empty()) {
      return fail(out_dir, kExitValidation,
                  "augment manifest rows need an \"image\" field (id " +
                      p.id + ")");
    }
  }

  ordered_json cfg_json;
  cfg_json["subcommand"] = "augment";
  cfg_json["manifest"] = args.manifest;
  cfg_json["out"] = args.out;
  cfg_json["preset"] = args.preset;
  cfg_json["seed"] = args.seed;
  cfg_json["scale_range"] = cfg.scale_range;
  cfg_json["crop"] = {cfg.crop_h, cfg.crop_w};
  cfg_json["flip_p"] = cfg.flip_p;
  cfg_json["hue_delta"] = cfg.hue_delta;
  cfg_json["saturation_range"] = cfg.saturation_range;
  cfg_json["contrast_range"] = cfg.contrast_range;
  cfg_json["specular_p"] = cfg.specular_p;
  cfg_json["noise_p"] = cfg.noise_p;
  cfg_json["ignore_label"] = cfg.ignore_label;

  try {
    fs::create_directories(out_dir / "images");
    fs::create_directories(out_dir / "masks");
    write_resolved_config(out_dir, cfg_json);

    ordered_json draws = ordered_json::array();
    std::uint64_t index = 0;
    for (const auto& p : pairs) {
      matseg::Sample sample;
      sample.image = matseg::tensor_from_image(matseg::load_png(p.image));
      sample.mask = matseg::mask_from_image(matseg::load_png(p.mask));
      if (sample.image.dim(0) != 3) {
        return fail(out_dir, kExitValidation,
                    "image must be RGB: " + p.image.string());
      }
      matseg::DrawRecord rec;
      const matseg::Sample out = matseg::apply_augment(sample, cfg, index, &rec);
      matseg::save_png(out_dir / "images" / (p.id + ".png"),
                       matseg::image_from_tensor(out.image));
      matseg::save_png(out_dir / "masks" / (p.id + ".png"),
                       matseg::image_from_mask(out.mask));
      draws.push_back(draw_record_json(p.id, rec));
      ++index;
    }
    write_text(out_dir / "draws.json", draws.dump(2) + "\n");
    std::cout << "augmented " << pairs.size() << " samples\n";
  } catch (const matseg::PngError& e) {
    return fail(out_dir, kExitValidation, e.what());
  } catch (const matseg::AugmentError& e) {
    return fail(out_dir, kExitValidation, e.what());
  } catch (const std::exception& e) {
    return fail(out_dir, kExitRuntime, e.what());
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  std::string pred_dir;
  std::string gt_dir;
  std::string out;
  int classes = 0;
  int ignore_label = matseg::kDefaultIgnoreLabel;
  double boundary_frac = 0.02;
};

int run_eval(const EvalArgs& args) {
  const fs::path out_dir(args.out);
  const fs::path pred_dir(args.pred_dir), gt_dir(args.gt_dir);
  if (!fs::is_directory(pred_dir) || !fs::is_directory(gt_dir)) {
    return fail(out_dir, kExitValidation, "pred-dir and gt-dir must exist");
  }

  auto list_pngs = [](const fs::path& dir) {
    std::set<std::string> names;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file() && entry.path().extension() == ".png") {
        names.insert(entry.path().filename().string());
      }
    }
    return names;
  };
  const auto pred_names = list_pngs(pred_dir);
  const auto gt_names = list_pngs(gt_dir);
  if (pred_names != gt_names) {
    std::string offenders;
    for (const auto& n : pred_names) {
      if (!gt_names.count(n)) offenders += " pred-only:" + n;
    }
    for (const auto& n : gt_names) {
      if (!pred_names.count(n)) offenders += " gt-only:" + n;
    }
    return fail(out_dir, kExitValidation,
                "pred/gt file sets differ:" + offenders);
  }
  if (pred_names.empty()) {
    return fail(out_dir, kExitValidation, "no .png files to evaluate");
  }

  ordered_json cfg;
  cfg["subcommand"] = "eval";
  cfg["pred_dir"] = args.pred_dir;
  cfg["gt_dir"] = args.gt_dir;
  cfg["out"] = args.out;
  cfg["classes"] = args.classes;
  cfg["ignore_label"] = args.ignore_label;
  cfg["boundary_frac"] = args.boundary_frac;

  try {
    fs::create_directories(out_dir);
    write_resolved_config(out_dir, cfg);

    // Two passes: infer the class count, then accumulate.
    std::size_t num_classes = std::size_t(std::max(args.classes, 0));
    if (args.classes == 0) {
      for (const auto& name : pred_names) {
        for (const auto& dir : {pred_dir, gt_dir}) {
          const auto mask = matseg::mask_from_image(matseg::load_png(dir / name));
          for (auto v : mask.labels) {
            if (v != args.ignore_label) {
              num_classes = std::max(num_classes, std::size_t(v) + 1);
            }
          }
        }
      }
      if (num_classes == 0) {
        return fail(out_dir, kExitValidation, "every ground-truth pixel is ignored");
      }
    }

    matseg::ConfusionMatrix cm(num_classes, std::int32_t(args.ignore_label));
    std::vector<std::uint64_t> b_inter(num_classes, 0), b_union(num_classes, 0);
    std::uint64_t ignored_pixels = 0;
    for (const auto& name : pred_names) {
      const auto pred =
          matseg::mask_from_image(matseg::load_png(pred_dir / name));
      const auto gt = matseg::mask_from_image(matseg::load_png(gt_dir / name));
      cm.accumulate(pred, gt);
      for (auto v : gt.labels) ignored_pixels += v == args.ignore_label ? 1 : 0;
      const auto br = matseg::boundary_iou(pred, gt, args.boundary_frac,
                                           std::int32_t(args.ignore_label));
      for (std::size_t i = 0; i < br.classes.size(); ++i) {
        b_inter[std::size_t(br.classes[i])] += br.intersection[i];
        b_union[std::size_t(br.classes[i])] += br.union_count[i];
      }
    }
    const matseg::MetricSummary s = matseg::summarize(cm);

    ordered_json per_class_biou = ordered_json::array();
    double biou_sum = 0.0;
    std::size_t biou_n = 0;
    for (std::size_t c = 0; c < num_classes; ++c) {
      if (b_union[c] == 0) {
        per_class_biou.push_back(nullptr);
      } else {
        const double v = double(b_inter[c]) / double(b_union[c]);
        per_class_biou.push_back(v);
        biou_sum += v;
        ++biou_n;
      }
    }

    ordered_json rep;
    rep["version"] = matseg::kVersion;
    rep["images"] = pred_names.size();
    rep["classes"] = num_classes;
    ordered_json iou = ordered_json::array(), recall = ordered_json::array();
    for (std::size_t c = 0; c < num_classes; ++c) {
      if (std::isnan(s.per_class_iou[c])) {
        iou.push_back(nullptr);
      } else {
        iou.push_back(s.per_class_iou[c]);
      }
      if (std::isnan(s.per_class_recall[c])) {
        recall.push_back(nullptr);
      } else {
        recall.push_back(s.per_class_recall[c]);
      }
    }
    rep["per_class_iou"] = iou;
    rep["per_class_recall"] = recall;
    rep["miou"] = s.miou;
    rep["macc"] = s.macc;
    rep["aacc"] = s.aacc;
    rep["mbiou"] = biou_n > 0 ? biou_sum / double(biou_n) : 0.0;
    rep["per_class_boundary_iou"] = per_class_biou;
    rep["pixel_counts"] = {{"counted", s.total_pixels},
                           {"ignored", ignored_pixels}};
    rep["config"] = cfg;
    write_text(out_dir / "report.json", rep.dump(2) + "\n");
    std::cout << "miou=" << s.miou << " macc=" << s.macc << " aacc=" << s.aacc
              << " mbiou=" << rep["mbiou"].get<double>() << "\n";
  } catch (const matseg::PngError& e) {
    return fail(out_dir, kExitValidation, e.what());
  } catch (const matseg::MetricsError& e) {
    return fail(out_dir, kExitValidation, e.what());
  } catch (const std::exception& e) {
    return fail(out_dir, kExitRuntime, e.what());
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train-toy

int run_train(const std::string& config_path, const std::string& out) {
  const fs::path out_dir(out);
  matseg::TrainConfig cfg;
  try {
    std::ifstream in(config_path);
    if (!in) throw std::runtime_error("cannot open config " + config_path);
    std::stringstream buf;
    buf << in.rdbuf();
    cfg = matseg::train_config_from_json(buf.str());
  } catch (const std::exception& e) {
    return fail(out_dir, kExitValidation, e.what());
  }

  try {
    fs::create_directories(out_dir);
    // The resolved snapshot materializes every default.
    ordered_json resolved = ordered_json::parse(matseg::train_config_to_json(cfg));
    write_resolved_config(out_dir, resolved);
    const matseg::TrainResult result = matseg::train(cfg, out_dir);
    if (result.diverged) {
      return fail(out_dir, kExitRuntime,
                  "training diverged; last healthy checkpoint written");
    }
    std::cout << "trained " << result.steps_completed
              << " steps; held-out miou=" << result.held_out_miou
              << " boundary_iou=" << result.held_out_boundary_iou << "\n";
  } catch (const matseg::TrainError& e) {
    return fail(out_dir, kExitValidation, e.what());
  } catch (const std::exception& e) {
    return fail(out_dir, kExitRuntime, e.what());
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradcheckArgs {
  std::string out;
  double tolerance = 1e-4;
  std::uint64_t seed = 1;
  int instances = 5;
};

int run_gradcheck(const GradcheckArgs& args) {
  const fs::path out_dir(args.out);
  if (args.instances < 1 || args.tolerance <= 0.0) {
    return fail(out_dir, kExitValidation,
                "instances must be >= 1 and tolerance positive");
  }
  ordered_json cfg;
  cfg["subcommand"] = "gradcheck";
  cfg["out"] = args.out;
  cfg["tolerance"] = args.tolerance;
  cfg["seed"] = args.seed;
  cfg["instances"] = args.instances;

  try {
    if (!out_dir.empty()) {
      fs::create_directories(out_dir);
      write_resolved_config(out_dir, cfg);
    }

    const double step = 1e-5;
    auto rel_err = [](std::span<const double> a, std::span<const double> n) {
      double worst = 0.0;
      for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom =
            std::max({1e-6, std::abs(a[i]), std::abs(n[i])});
        worst = std::max(worst, std::abs(a[i] - n[i]) / denom);
      }
      return worst;
    };

    ordered_json blocks = ordered_json::array();
    double worst_overall = 0.0;
    auto note = [&](const std::string& name, double err) {
      std::cout << name << " max_rel_err=" << err << "\n";
      blocks.push_back({{"name", name}, {"max_rel_err", err}});
      worst_overall = std::max(worst_overall, err);
    };

    matseg::Rng rng(args.seed, 0x96adc4ecULL);
    for (int inst = 0; inst < args.instances; ++inst) {
      // hflp on a random instance.
      {
        const int C = 2 + int(rng.uniform_int(4));
        matseg::Tensor z({std::size_t(C), 3, 3});
        for (double& v : z.values()) v = rng.uniform(-2.0, 2.0);
        matseg::LabelMask y(6, 6);
        for (auto& v : y.labels) {
          v = std::int32_t(rng.uniform_int(std::uint64_t(C)));
        }
        const auto res = matseg::hflp_loss(matseg::LogitMap(z, 2), y, {});
        matseg::Tensor fd(z.shape());
        matseg::Tensor probe = z;
        for (std::size_t i = 0; i < z.size(); ++i) {
          const double keep = probe[i];
          probe[i] = keep + step;
          const double up =
              matseg::hflp_loss(matseg::LogitMap(probe, 2), y, {}).loss;
          probe[i] = keep - step;
          const double down =
              matseg::hflp_loss(matseg::LogitMap(probe, 2), y, {}).loss;
          probe[i] = keep;
          fd[i] = (up - down) / (2.0 * step);
        }
        note("hflp_loss[" + std::to_string(inst) + "]",
             rel_err(res.grad.values(), fd.values()));
      }
      // qer on a random instance.
      {
        matseg::Tensor q({2 + rng.uniform_int(3), 2 + rng.uniform_int(5)});
        for (double& v : q.values()) v = rng.uniform(-3.0, 3.0);
        const matseg::QerConfig qcfg{.lambda = 0.1};
        const auto res = matseg::qer_loss(q, qcfg);
        matseg::Tensor fd(q.shape());
        matseg::Tensor probe = q;
        for (std::size_t i = 0; i < q.size(); ++i) {
          const double keep = probe[i];
          probe[i] = keep + step;
          const double up = matseg::qer_loss(probe, qcfg).loss;
          probe[i] = keep - step;
          const double down = matseg::qer_loss(probe, qcfg).loss;
          probe[i] = keep;
          fd[i] = (up - down) / (2.0 * step);
        }
        note("qer_loss[" + std::to_string(inst) + "]",
             rel_err(res.grad.values(), fd.values()));
      }
    }

    // Full toy model, every parameter block. Instances with a pre-activation
    // inside the probe step of a ReLU kink are re-drawn; the secant is not a
    // derivative estimate across a kink.
    matseg::ToyModelConfig mc;
    mc.f1 = 4;
    mc.f2 = 6;
    mc.classes = 3;
    mc.n_queries = 4;
    mc.init_seed = args.seed;
    matseg::SceneOptions scene;
    scene.size = 12;
    scene.n_regions = 3;
    scene.class_ids = {0, 1, 2};
    matseg::Sample sample =
        matseg::generate_texture_scene(matseg::mix64(args.seed, 0xf00d), scene);
    for (std::uint64_t salt = 0; salt < 64; ++salt) {
      const matseg::ToyModel probe(mc);
      if (probe.min_abs_preactivation(sample.image) > 1e-3) break;
      mc.init_seed = args.seed + 100000 * (salt + 1);
      sample = matseg::generate_texture_scene(
          matseg::mix64(args.seed, 0xf00d + 977 * (salt + 1)), scene);
    }

    matseg::ToyModel model(mc);
    const matseg::HflpConfig hc{};
    const matseg::QerConfig qc{.lambda = 0.1};
    const auto fwd =
        model.compute(sample, matseg::LossMode::kHflpQer, hc, qc, false);
    const matseg::Assignment fixed = fwd.assignment;
    model.zero_grad();
    model.compute(sample, matseg::LossMode::kHflpQer, hc, qc, true, &fixed);
    for (auto& block : model.blocks()) {
      std::vector<double> numeric(block.value.size());
      for (std::size_t i = 0; i < block.value.size(); ++i) {
        const double keep = block.value[i];
        block.value[i] = keep + step;
        const double up = model.loss_only(sample, matseg::LossMode::kHflpQer,
                                          hc, qc, &fixed);
        block.value[i] = keep - step;
        const double down = model.loss_only(sample, matseg::LossMode::kHflpQer,
                                            hc, qc, &fixed);
        block.value[i] = keep;
        numeric[i] = (up - down) / (2.0 * step);
      }
      note("toy_model." + block.name, rel_err(block.grad, numeric));
    }

    std::cout << "overall max_rel_err=" << worst_overall
              << " tolerance=" << args.tolerance << "\n";
    if (!out_dir.empty()) {
      ordered_json rep;
      rep["blocks"] = blocks;
      rep["max_rel_err"] = worst_overall;
      rep["tolerance"] = args.tolerance;
      rep["pass"] = worst_overall < args.tolerance;
      write_text(out_dir / "gradcheck.json", rep.dump(2) + "\n");
    }
    if (worst_overall >= args.tolerance) {
      return fail(out_dir, kExitVerification,
                  "gradient check above tolerance");
    }
  } catch (const std::exception& e) {
    return fail(out_dir, kExitRuntime, e.what());
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dense material segmentation toolkit"};
  app.set_version_flag("--version",
                       std::string("matseg ") + matseg::kVersion +
                           " (config schema v" +
                           std::to_string(matseg::kConfigSchemaVersion) + ")");
  app.require_subcommand(1);

  FetchArgs fetch_args;
  auto* fetch = app.add_subcommand("fetch", "recover a dataset from a manifest");
  fetch->add_option("--manifest", fetch_args.manifest, "JSONL manifest")->required();
  fetch->add_option("--out", fetch_args.out, "output directory")->required();
  fetch->add_option("--max-parallel", fetch_args.max_parallel, "worker pool size");
  fetch->add_option("--max-attempts", fetch_args.max_attempts, "attempts per entry");
  fetch->add_option("--base-backoff-ms", fetch_args.base_backoff_ms,
                    "first retry delay");
  fetch->add_option("--connect-timeout-ms", fetch_args.connect_timeout_ms,
                    "connection timeout");
  fetch->add_option("--read-timeout-ms", fetch_args.read_timeout_ms,
                    "read timeout");
  fetch->add_flag("--no-jitter", fetch_args.no_jitter, "disable backoff jitter");
  fetch->add_flag("--offline", fetch_args.offline,
                  "verify local files instead of downloading");

  SplitArgs split_args;
  auto* split = app.add_subcommand("split", "build or verify a stratified split");
  split->add_option("--manifest", split_args.manifest,
                    "JSONL of {id, image, mask}")->required();
  split->add_option("--out", split_args.out, "output directory")->required();
  split->add_option("--ratios", split_args.ratios, "train,val,test fractions");
  split->add_option("--seed", split_args.seed, "tie-break seed");
  split->add_option("--threshold", split_args.threshold, "max allowed JSD");
  split->add_option("--classes", split_args.classes,
                    "class count (0 = infer from masks)");
  split->add_option("--ignore-label", split_args.ignore_label, "ignore label");
  split->add_option("--verify", split_args.verify_manifest,
                    "verify an existing split.json instead of building one");

  AugmentArgs augment_args;
  auto* augment = app.add_subcommand("augment", "apply the augmentation pipeline");
  augment->add_option("--manifest", augment_args.manifest,
                      "JSONL of {id, image, mask}")->required();
  augment->add_option("--out", augment_args.out, "output directory")->required();
  augment->add_option("--preset", augment_args.preset,
                      "segformer | mask2former");
  augment->add_option("--seed", augment_args.seed, "pipeline seed");
  augment->add_option("--crop", augment_args.crop,
                      "square crop override (0 = preset default)");

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "score predictions against ground truth");
  eval->add_option("--pred-dir", eval_args.pred_dir, "predicted label maps")->required();
  eval->add_option("--gt-dir", eval_args.gt_dir, "ground-truth label maps")->required();
  eval->add_option("--out", eval_args.out, "output directory")->required();
  eval->add_option("--classes", eval_args.classes, "class count (0 = infer)");
  eval->add_option("--ignore-label", eval_args.ignore_label, "ignore label");
  eval->add_option("--boundary-frac", eval_args.boundary_frac,
                   "boundary band, fraction of the image diagonal");

  std::string train_config, train_out;
  auto* train_cmd = app.add_subcommand("train-toy", "run the toy training loop");
  train_cmd->add_option("--config", train_config, "JSON config")->required();
  train_cmd->add_option("--out", train_out, "run directory")->required();

  GradcheckArgs grad_args;
  auto* gradcheck = app.add_subcommand("gradcheck",
                                       "finite-difference gradient check");
  gradcheck->add_option("--out", grad_args.out, "output directory (optional)");
  gradcheck->add_option("--tolerance", grad_args.tolerance, "max relative error");
  gradcheck->add_option("--seed", grad_args.seed, "instance seed");
  gradcheck->add_option("--instances", grad_args.instances,
                        "random instances per loss");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitValidation;
  }

  if (fetch->parsed()) return run_fetch(fetch_args);
  if (split->parsed()) return run_split(split_args);
  if (augment->parsed()) return run_augment(augment_args);
  if (eval->parsed()) return run_eval(eval_args);
  if (train_cmd->parsed()) return run_train(train_config, train_out);
  if (gradcheck->parsed()) return run_gradcheck(grad_args);
  return kExitValidation;
}
