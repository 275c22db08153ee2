#pragma once

// Optimal bipartite assignment between predicted queries and ground-truth
// segments (Kuhn-Munkres), plus the class-probability + Dice matching cost.

#include <cstdint>
#include <utility>
#include <vector>

#include "matseg/tensor.hpp"

namespace matseg {

class MatchingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CostMatrix {
  Tensor costs;  // rank 2: (n_queries, n_targets), finite

  CostMatrix() = default;
  explicit CostMatrix(Tensor c);
  std::size_t rows() const { return costs.dim(0); }
  std::size_t cols() const { return costs.dim(1); }
  double at(std::size_t q, std::size_t t) const {
    return costs[q * cols() + t];
  }
};

struct Assignment {
  // (query_index, target_index), sorted by query index; |pairs| = min(n, m).
  std::vector<std::pair<std::size_t, std::size_t>> pairs;
  double total_cost = 0.0;
};

// Globally optimal one-to-one assignment. Rectangular matrices are padded
// internally with max_entry + 1. Among cost-optimal assignments the
// lexicographically smallest pair list is returned, so results are fully
// deterministic.
Assignment hungarian(const CostMatrix& c);

// A ground-truth segment: its class and a (H, W) region indicator in [0, 1].
struct GtSegment {
  int class_id = 0;
  Tensor mask;
};

// cost(q, t) = -p_q(class_t) + w_dice * (1 - Dice(m_q, r_t)).
// query_probs: (N, K) rows on the simplex; query_masks: (N, H, W) in [0, 1].
CostMatrix matching_cost(const Tensor& query_probs, const Tensor& query_masks,
                         const std::vector<GtSegment>& targets,
                         double w_dice = 1.0);

// One segment per distinct non-ignored class present in the mask.
std::vector<GtSegment> segments_from_mask(
    const LabelMask& mask, std::int32_t ignore_label = kDefaultIgnoreLabel);

// Soft Dice overlap; returns 1 when both masks are empty.
double dice_overlap(const Tensor& a, const Tensor& b);

}  // namespace matseg
