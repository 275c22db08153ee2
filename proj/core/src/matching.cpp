#include "matseg/matching.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>

namespace matseg {

CostMatrix::CostMatrix(Tensor c) : costs(std::move(c)) {
  if (costs.rank() != 2) {
    throw MatchingError("CostMatrix expects a rank-2 tensor");
  }
  require_finite(costs, "cost matrix");
}

namespace {

// Classic O(n^3) potentials formulation on a square matrix. Returns the
// optimal total cost; rowsol[i] = assigned column of row i.
double km_square(const std::vector<double>& cost, std::size_t n,
                 std::vector<int>& rowsol) {
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      std::size_t j1 = 0;
      double delta = inf;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  rowsol.assign(n, -1);
  double total = 0.0;
  for (std::size_t j = 1; j <= n; ++j) {
    if (p[j] != 0) {
      rowsol[p[j] - 1] = static_cast<int>(j - 1);
      total += cost[(p[j] - 1) * n + (j - 1)];
    }
  }
  return total;
}

// Minimum total real-pair cost with some (query, target) pairs fixed and some
// queries forced to stay unmatched. Returns nullopt when min(n, m) - |fixed|
// pairs can no longer be formed. Padding with a constant keeps the count of
// real pairs structural, so the padded square solve minimizes the real cost.
std::optional<double> constrained_min_cost(
    const CostMatrix& c,
    const std::vector<std::pair<std::size_t, std::size_t>>& fixed,
    const std::vector<char>& forbidden_query) {
  const std::size_t nq = c.rows(), nt = c.cols();
  const std::size_t want = std::min(nq, nt);

  std::vector<char> q_taken(nq, 0), t_taken(nt, 0);
  double fixed_cost = 0.0;
  for (const auto& [q, t] : fixed) {
    q_taken[q] = 1;
    t_taken[t] = 1;
    fixed_cost += c.at(q, t);
  }

  std::vector<std::size_t> qs, ts;
  for (std::size_t q = 0; q < nq; ++q) {
    if (!q_taken[q] && !forbidden_query[q]) qs.push_back(q);
  }
  for (std::size_t t = 0; t < nt; ++t) {
    if (!t_taken[t]) ts.push_back(t);
  }

  const std::size_t need = want - fixed.size();
  if (need == 0) return fixed_cost;
  if (qs.size() < need || ts.size() < need) return std::nullopt;

  double max_entry = 0.0;
  for (double v : c.costs.values()) max_entry = std::max(max_entry, v);
  const double pad = max_entry + 1.0;

  const std::size_t n = std::max(qs.size(), ts.size());
  std::vector<double> sq(n * n, pad);
  for (std::size_t i = 0; i < qs.size(); ++i) {
    for (std::size_t j = 0; j < ts.size(); ++j) {
      sq[i * n + j] = c.at(qs[i], ts[j]);
    }
  }
  std::vector<int> rowsol;
  km_square(sq, n, rowsol);

  double real = fixed_cost;
  std::size_t matched = 0;
  for (std::size_t i = 0; i < qs.size(); ++i) {
    const std::size_t j = static_cast<std::size_t>(rowsol[i]);
    if (j < ts.size()) {
      real += c.at(qs[i], ts[j]);
      ++matched;
    }
  }
  if (matched != need) return std::nullopt;
  return real;
}

bool close_enough(double a, double b) {
  return std::abs(a - b) <= 1e-9 * std::max(1.0, std::max(std::abs(a), std::abs(b)));
}

}  // namespace

Assignment hungarian(const CostMatrix& c) {
  const std::size_t nq = c.rows(), nt = c.cols();
  if (nq == 0 || nt == 0) {
    throw MatchingError("hungarian: empty cost matrix");
  }
  require_finite(c.costs, "hungarian costs");

  const std::size_t want = std::min(nq, nt);
  std::vector<char> forbidden(nq, 0);
  const auto global = constrained_min_cost(c, {}, forbidden);
  if (!global) {
    throw MatchingError("hungarian: infeasible assignment");
  }

  // Fix pairs position by position: for each spot take the smallest
  // (query, target) that still admits a cost-optimal completion. Queries
  // skipped along the way must then stay unmatched.
  Assignment out;
  std::vector<std::pair<std::size_t, std::size_t>> fixed;
  std::vector<char> t_used(nt, 0);
  std::size_t q_start = 0;
  for (std::size_t pos = 0; pos < want; ++pos) {
    bool placed = false;
    for (std::size_t q = q_start; q < nq && !placed; ++q) {
      for (std::size_t t = 0; t < nt; ++t) {
        if (t_used[t]) continue;
        fixed.emplace_back(q, t);
        const auto cost = constrained_min_cost(c, fixed, forbidden);
        if (cost && close_enough(*cost, *global)) {
          t_used[t] = 1;
          q_start = q + 1;
          placed = true;
          break;
        }
        fixed.pop_back();
      }
      if (!placed) forbidden[q] = 1;
    }
    if (!placed) {
      throw MatchingError("hungarian: internal search failure");
    }
  }

  out.pairs = std::move(fixed);
  out.total_cost = 0.0;
  for (const auto& [q, t] : out.pairs) out.total_cost += c.at(q, t);
  return out;
}

double dice_overlap(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) {
    throw MatchingError("dice_overlap: shape mismatch");
  }
  double inter = 0.0, total = 0.0;
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t i = 0; i < av.size(); ++i) {
    inter += av[i] * bv[i];
    total += av[i] + bv[i];
  }
  if (total == 0.0) return 1.0;  // two empty masks agree
  return 2.0 * inter / total;
}

CostMatrix matching_cost(const Tensor& query_probs, const Tensor& query_masks,
                         const std::vector<GtSegment>& targets, double w_dice) {
  if (query_probs.rank() != 2) {
    throw MatchingError("matching_cost: query_probs must be (N, K)");
  }
  if (query_masks.rank() != 3) {
    throw MatchingError("matching_cost: query_masks must be (N, H, W)");
  }
  const std::size_t N = query_probs.dim(0);
  const std::size_t K = query_probs.dim(1);
  if (query_masks.dim(0) != N) {
    throw MatchingError("matching_cost: query count mismatch");
  }
  if (targets.empty()) {
    throw MatchingError("matching_cost: no targets");
  }
  for (std::size_t n = 0; n < N; ++n) {
    double row_sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double p = query_probs[n * K + k];
      if (p < -1e-12 || p > 1.0 + 1e-12) {
        throw MatchingError("matching_cost: probability outside [0, 1]");
      }
      row_sum += p;
    }
    if (std::abs(row_sum - 1.0) > 1e-6) {
      throw MatchingError("matching_cost: query_probs row is not a simplex point");
    }
  }
  const std::size_t H = query_masks.dim(1), W = query_masks.dim(2);
  for (const auto& t : targets) {
    if (t.mask.rank() != 2 || t.mask.dim(0) != H || t.mask.dim(1) != W) {
      throw MatchingError("matching_cost: target region dims mismatch");
    }
    if (t.class_id < 0 || static_cast<std::size_t>(t.class_id) >= K) {
      throw MatchingError("matching_cost: target class outside [0, K)");
    }
  }

  Tensor costs({N, targets.size()});
  for (std::size_t n = 0; n < N; ++n) {
    Tensor qmask({H, W});
    for (std::size_t i = 0; i < H * W; ++i) {
      qmask[i] = query_masks[n * H * W + i];
    }
    for (std::size_t t = 0; t < targets.size(); ++t) {
      const double p_class =
          query_probs[n * K + static_cast<std::size_t>(targets[t].class_id)];
      const double dice = dice_overlap(qmask, targets[t].mask);
      costs[n * targets.size() + t] = -p_class + w_dice * (1.0 - dice);
    }
  }
  return CostMatrix(std::move(costs));
}

std::vector<GtSegment> segments_from_mask(const LabelMask& mask,
                                          std::int32_t ignore_label) {
  std::map<std::int32_t, Tensor> regions;
  for (std::size_t y = 0; y < mask.height; ++y) {
    for (std::size_t x = 0; x < mask.width; ++x) {
      const std::int32_t label = mask.at(y, x);
      if (label == ignore_label) continue;
      auto it = regions.find(label);
      if (it == regions.end()) {
        it = regions.emplace(label, Tensor({mask.height, mask.width})).first;
      }
      it->second[y * mask.width + x] = 1.0;
    }
  }
  std::vector<GtSegment> out;
  out.reserve(regions.size());
  for (auto& [label, region] : regions) {
    out.push_back({label, std::move(region)});
  }
  return out;
}

}  // namespace matseg
