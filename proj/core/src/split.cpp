#include "matseg/split.hpp"

#include <algorithm>
#include <cmath>
#include <map>

#include <nlohmann/json.hpp>

#include "matseg/rng.hpp"

namespace matseg {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

void ClassHistogram::add(std::size_t class_id, std::uint64_t n) {
  if (class_id >= counts.size()) {
    counts.resize(class_id + 1, 0);
  }
  counts[class_id] += n;
}

void ClassHistogram::merge(const ClassHistogram& other) {
  if (other.counts.size() > counts.size()) {
    counts.resize(other.counts.size(), 0);
  }
  for (std::size_t i = 0; i < other.counts.size(); ++i) {
    counts[i] += other.counts[i];
  }
}

std::uint64_t ClassHistogram::total() const {
  std::uint64_t t = 0;
  for (std::uint64_t c : counts) t += c;
  return t;
}

std::vector<double> ClassHistogram::normalize() const {
  const std::uint64_t t = total();
  if (t == 0) throw SplitError("cannot normalize an empty histogram");
  std::vector<double> p(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) {
    p[i] = static_cast<double>(counts[i]) / static_cast<double>(t);
  }
  return p;
}

ClassHistogram ClassHistogram::from_mask(const LabelMask& mask,
                                         std::size_t num_classes,
                                         std::int32_t ignore_label) {
  ClassHistogram h(num_classes);
  for (std::int32_t v : mask.labels) {
    if (v == ignore_label) continue;
    if (v < 0 || static_cast<std::size_t>(v) >= num_classes) {
      throw SplitError("mask label " + std::to_string(v) + " out of range");
    }
    ++h.counts[static_cast<std::size_t>(v)];
  }
  return h;
}

double jsd(const ClassHistogram& p, const ClassHistogram& q) {
  if (p.total() == 0 || q.total() == 0) {
    throw SplitError("jsd: empty histogram");
  }
  const std::size_t n = std::max(p.counts.size(), q.counts.size());
  const auto pn = p.normalize();
  const auto qn = q.normalize();
  auto at = [](const std::vector<double>& v, std::size_t i) {
    return i < v.size() ? v[i] : 0.0;
  };
  // Per-class terms are combined before accumulating so jsd(p, q) and
  // jsd(q, p) execute the same additions (IEEE addition commutes).
  double d = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double pi = at(pn, i), qi = at(qn, i);
    const double mi = 0.5 * (pi + qi);
    const double tp = pi > 0.0 ? pi * std::log(pi / mi) : 0.0;
    const double tq = qi > 0.0 ? qi * std::log(qi / mi) : 0.0;
    d += 0.5 * (tp + tq);
  }
  return d;
}

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

std::optional<Split> split_from_name(const std::string& name) {
  if (name == "train") return Split::kTrain;
  if (name == "val") return Split::kVal;
  if (name == "test") return Split::kTest;
  return std::nullopt;
}

std::array<std::size_t, 3> SplitManifest::split_counts() const {
  std::array<std::size_t, 3> c{0, 0, 0};
  for (const auto& [id, s] : assignments) {
    ++c[static_cast<std::size_t>(s)];
  }
  return c;
}

namespace {

ordered_json histogram_to_json(const ClassHistogram& h) {
  return ordered_json(h.counts);
}

ClassHistogram histogram_from_json(const json& j) {
  ClassHistogram h;
  h.counts = j.get<std::vector<std::uint64_t>>();
  return h;
}

}  // namespace

std::string SplitManifest::to_json() const {
  ordered_json j;
  j["version"] = version;
  j["seed"] = seed;
  j["ratios"] = ratios;
  ordered_json assign = ordered_json::object();
  for (const auto& [id, s] : assignments) {
    assign[id] = split_name(s);
  }
  j["assignments"] = assign;
  j["histograms"]["train"] = histogram_to_json(histograms[0]);
  j["histograms"]["val"] = histogram_to_json(histograms[1]);
  j["histograms"]["test"] = histogram_to_json(histograms[2]);
  j["jsd_train_val"] = jsd_train_val;
  j["jsd_train_test"] = jsd_train_test;
  const auto counts = split_counts();
  j["counts"]["train"] = counts[0];
  j["counts"]["val"] = counts[1];
  j["counts"]["test"] = counts[2];
  return j.dump(2) + "\n";
}

SplitManifest SplitManifest::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw SplitError(std::string("manifest parse error: ") + e.what());
  }
  SplitManifest m;
  try {
    m.version = j.at("version").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.ratios = j.at("ratios").get<std::array<double, 3>>();
    for (const auto& [id, name] : j.at("assignments").items()) {
      const auto s = split_from_name(name.get<std::string>());
      if (!s) throw SplitError("unknown split name in manifest");
      m.assignments.emplace_back(id, *s);
    }
    std::sort(m.assignments.begin(), m.assignments.end());
    m.histograms[0] = histogram_from_json(j.at("histograms").at("train"));
    m.histograms[1] = histogram_from_json(j.at("histograms").at("val"));
    m.histograms[2] = histogram_from_json(j.at("histograms").at("test"));
    m.jsd_train_val = j.at("jsd_train_val").get<double>();
    m.jsd_train_test = j.at("jsd_train_test").get<double>();
  } catch (const json::exception& e) {
    throw SplitError(std::string("manifest field error: ") + e.what());
  }
  return m;
}

SplitManifest stratified_split(const std::vector<SampleHistogram>& samples,
                               std::array<double, 3> ratios,
                               std::uint64_t seed) {
  if (samples.size() < 10) {
    throw SplitError("stratified_split needs at least 10 samples");
  }
  const double ratio_sum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(ratio_sum - 1.0) > 1e-9) {
    throw SplitError("ratios must sum to 1");
  }
  for (double r : ratios) {
    if (r < 0.0) throw SplitError("ratios must be non-negative");
  }
  {
    std::map<std::string, int> seen;
    for (const auto& s : samples) {
      if (++seen[s.id] > 1) {
        throw SplitError("duplicate sample id: " + s.id);
      }
      if (s.histogram.total() == 0) {
        throw SplitError("sample " + s.id + " has an empty histogram");
      }
    }
  }

  const std::size_t n = samples.size();
  std::size_t num_classes = 0;
  for (const auto& s : samples) {
    num_classes = std::max(num_classes, s.histogram.counts.size());
  }

  // Corpus-level class mass.
  std::vector<double> global(num_classes, 0.0);
  double global_total = 0.0;
  for (const auto& s : samples) {
    for (std::size_t c = 0; c < s.histogram.counts.size(); ++c) {
      global[c] += static_cast<double>(s.histogram.counts[c]);
      global_total += static_cast<double>(s.histogram.counts[c]);
    }
  }

  // Rarity score: how over-represented the sample's rarest class is compared
  // to the corpus. The class realizing the max is the sample's dominant rare
  // class.
  struct Ranked {
    std::size_t index;
    double rarity;
    std::size_t dominant_class;
    std::uint64_t tiebreak;
  };
  std::vector<Ranked> ranked(n);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& h = samples[i].histogram;
    const double tot = static_cast<double>(h.total());
    double best = -1.0;
    std::size_t best_class = 0;
    for (std::size_t c = 0; c < h.counts.size(); ++c) {
      if (h.counts[c] == 0 || global[c] <= 0.0) continue;
      const double frac = static_cast<double>(h.counts[c]) / tot;
      const double global_frac = global[c] / global_total;
      const double score = frac / global_frac;
      if (score > best) {
        best = score;
        best_class = c;
      }
    }
    std::uint64_t id_hash = 0xcbf29ce484222325ULL;  // FNV-1a over the id
    for (unsigned char ch : samples[i].id) {
      id_hash = (id_hash ^ ch) * 0x100000001b3ULL;
    }
    ranked[i] = {i, best, best_class, mix64(seed, id_hash)};
  }
  std::sort(ranked.begin(), ranked.end(), [&](const Ranked& a, const Ranked& b) {
    if (a.rarity != b.rarity) return a.rarity > b.rarity;
    if (a.tiebreak != b.tiebreak) return a.tiebreak < b.tiebreak;
    return samples[a.index].id < samples[b.index].id;
  });

  // Largest-remainder capacities; realized ratios end within one sample of
  // the targets.
  std::array<std::size_t, 3> cap{};
  {
    std::array<double, 3> exact{};
    std::size_t assigned = 0;
    for (int k = 0; k < 3; ++k) {
      exact[k] = ratios[k] * static_cast<double>(n);
      cap[k] = static_cast<std::size_t>(std::floor(exact[k]));
      assigned += cap[k];
    }
    std::array<int, 3> order{0, 1, 2};
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      const double ra = exact[a] - std::floor(exact[a]);
      const double rb = exact[b] - std::floor(exact[b]);
      if (ra != rb) return ra > rb;
      return a < b;
    });
    for (std::size_t k = 0; assigned < n; ++k) {
      ++cap[order[k % 3]];
      ++assigned;
    }
  }

  SplitManifest manifest;
  manifest.seed = seed;
  manifest.ratios = ratios;
  for (auto& h : manifest.histograms) h = ClassHistogram(num_classes);

  std::array<std::size_t, 3> count{0, 0, 0};
  std::vector<std::pair<std::string, Split>> assignments;
  assignments.reserve(n);
  for (const auto& r : ranked) {
    const auto& sample = samples[r.index];
    const double tot = static_cast<double>(sample.histogram.total());
    int best_split = -1;
    double best_score = 0.0;
    for (int k = 0; k < 3; ++k) {
      if (count[k] >= cap[k]) continue;
      // How under-filled this split is for the sample's class mixture: each
      // class deficit is measured against the split's proportional share of
      // the corpus and weighted by the sample's own composition. The
      // dominant rare class carries the largest weight among the classes
      // that distinguish the sample.
      double score = 0.0;
      for (std::size_t c = 0; c < sample.histogram.counts.size(); ++c) {
        if (sample.histogram.counts[c] == 0) continue;
        const double target = ratios[k] * global[c];
        if (target <= 0.0) continue;
        const double have =
            c < manifest.histograms[k].counts.size()
                ? static_cast<double>(manifest.histograms[k].counts[c])
                : 0.0;
        const double weight =
            static_cast<double>(sample.histogram.counts[c]) / tot;
        score += weight * (target - have) / target;
      }
      const bool better =
          best_split < 0 || score > best_score ||
          (score == best_score &&
           (cap[k] - count[k]) > (cap[best_split] - count[best_split]));
      if (better) {
        best_split = k;
        best_score = score;
      }
    }
    if (best_split < 0) throw SplitError("internal: capacities exhausted");
    count[best_split] += 1;
    manifest.histograms[best_split].merge(sample.histogram);
    assignments.emplace_back(sample.id,
                             static_cast<Split>(best_split));
  }

  std::sort(assignments.begin(), assignments.end());
  manifest.assignments = std::move(assignments);
  manifest.jsd_train_val = jsd(manifest.histograms[0], manifest.histograms[1]);
  manifest.jsd_train_test = jsd(manifest.histograms[0], manifest.histograms[2]);
  return manifest;
}

std::string SplitVerifyReport::to_json() const {
  ordered_json j;
  j["pass"] = pass;
  j["threshold"] = threshold;
  j["jsd_train_val"] = jsd_train_val;
  j["jsd_train_test"] = jsd_train_test;
  j["histograms_match"] = histograms_match;
  j["jsd_values_match"] = jsd_values_match;
  j["missing"] = missing;
  return j.dump(2) + "\n";
}

SplitVerifyReport verify_split(
    const SplitManifest& manifest,
    const std::function<std::optional<ClassHistogram>(const std::string&)>& load,
    double threshold) {
  if (manifest.assignments.empty()) {
    throw SplitError("verify_split: empty manifest");
  }
  SplitVerifyReport report;
  report.threshold = threshold;

  std::size_t num_classes = 0;
  for (const auto& h : manifest.histograms) {
    num_classes = std::max(num_classes, h.counts.size());
  }
  std::array<ClassHistogram, 3> recomputed;
  for (auto& h : recomputed) h = ClassHistogram(num_classes);

  for (const auto& [id, split] : manifest.assignments) {
    const auto h = load(id);
    if (!h) {
      report.missing.push_back(id);
      continue;
    }
    recomputed[static_cast<std::size_t>(split)].merge(*h);
  }

  auto hist_equal = [](const ClassHistogram& a, const ClassHistogram& b) {
    const std::size_t n = std::max(a.counts.size(), b.counts.size());
    for (std::size_t i = 0; i < n; ++i) {
      const std::uint64_t av = i < a.counts.size() ? a.counts[i] : 0;
      const std::uint64_t bv = i < b.counts.size() ? b.counts[i] : 0;
      if (av != bv) return false;
    }
    return true;
  };
  report.histograms_match = hist_equal(recomputed[0], manifest.histograms[0]) &&
                            hist_equal(recomputed[1], manifest.histograms[1]) &&
                            hist_equal(recomputed[2], manifest.histograms[2]);

  const bool can_measure = recomputed[0].total() > 0 &&
                           recomputed[1].total() > 0 &&
                           recomputed[2].total() > 0;
  if (can_measure) {
    report.jsd_train_val = jsd(recomputed[0], recomputed[1]);
    report.jsd_train_test = jsd(recomputed[0], recomputed[2]);
    report.jsd_values_match = report.jsd_train_val == manifest.jsd_train_val &&
                              report.jsd_train_test == manifest.jsd_train_test;
  } else {
    report.jsd_train_val = manifest.jsd_train_val;
    report.jsd_train_test = manifest.jsd_train_test;
    report.jsd_values_match = false;
  }
  report.pass = report.missing.empty() && report.histograms_match &&
                report.jsd_values_match &&
                report.jsd_train_val <= threshold &&
                report.jsd_train_test <= threshold;
  return report;
}

}  // namespace matseg
