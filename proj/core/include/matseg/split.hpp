#pragma once

// Deterministic split construction and verification: Jensen-Shannon
// divergence between pixel-level class histograms, greedy rarity-first
// stratified assignment, and manifest round-trip checking.

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "matseg/tensor.hpp"

namespace matseg {

class SplitError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ClassHistogram {
  std::vector<std::uint64_t> counts;

  ClassHistogram() = default;
  explicit ClassHistogram(std::size_t num_classes) : counts(num_classes, 0) {}

  void add(std::size_t class_id, std::uint64_t n = 1);
  void merge(const ClassHistogram& other);
  std::uint64_t total() const;
  // Probability vector; throws when the histogram is empty.
  std::vector<double> normalize() const;

  static ClassHistogram from_mask(const LabelMask& mask,
                                  std::size_t num_classes,
                                  std::int32_t ignore_label = kDefaultIgnoreLabel);
};

// JSD(P, Q) = 0.5 KL(P||M) + 0.5 KL(Q||M), M = (P + Q) / 2, natural log.
// Symmetric, in [0, ln 2]; zero-count classes contribute nothing.
double jsd(const ClassHistogram& p, const ClassHistogram& q);

enum class Split : int { kTrain = 0, kVal = 1, kTest = 2 };
const char* split_name(Split s);
std::optional<Split> split_from_name(const std::string& name);

struct SplitManifest {
  int version = 1;
  std::uint64_t seed = 0;
  std::array<double, 3> ratios{0.8, 0.1, 0.1};
  // Sorted by sample id; each sample appears exactly once.
  std::vector<std::pair<std::string, Split>> assignments;
  std::array<ClassHistogram, 3> histograms;
  double jsd_train_val = 0.0;
  double jsd_train_test = 0.0;

  std::array<std::size_t, 3> split_counts() const;
  std::string to_json() const;  // deterministic byte-for-byte
  static SplitManifest from_json(const std::string& text);
};

struct SampleHistogram {
  std::string id;
  ClassHistogram histogram;
};

// Greedy rarity-first stratification: samples are sorted by how
// over-represented their rarest class is relative to the corpus, then each is
// assigned to the split with the largest remaining deficit for that class,
// subject to per-split capacity. The seed only breaks exact ties.
SplitManifest stratified_split(const std::vector<SampleHistogram>& samples,
                               std::array<double, 3> ratios,
                               std::uint64_t seed);

struct SplitVerifyReport {
  bool pass = false;
  double threshold = 0.02;
  double jsd_train_val = 0.0;
  double jsd_train_test = 0.0;
  bool histograms_match = false;
  bool jsd_values_match = false;
  std::vector<std::string> missing;  // sample ids whose masks could not load
  std::string to_json() const;
};

// Recomputes histograms through `load` and compares against the stored
// manifest; passes iff everything matches and both JSDs are <= threshold.
// Missing samples are enumerated rather than fatal.
SplitVerifyReport verify_split(
    const SplitManifest& manifest,
    const std::function<std::optional<ClassHistogram>(const std::string&)>& load,
    double threshold = 0.02);

}  // namespace matseg
