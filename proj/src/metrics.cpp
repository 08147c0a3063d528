#include "dood/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "dood/errors.hpp"
#include "dood/rng.hpp"

namespace dood {

namespace {

struct Counts {
  std::size_t pos = 0;
  std::size_t neg = 0;
};

Counts check_inputs(std::span<const float> scores, std::span<const std::uint8_t> labels) {
  if (scores.size() != labels.size()) throw DataError("scores and labels differ in length");
  Counts c;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] > 1) throw DataError("labels must be binary");
    if (!std::isfinite(scores[i])) throw DataError("scores must be finite");
    (labels[i] ? c.pos : c.neg)++;
  }
  if (c.pos == 0) throw DataError("no positive (OoD) pixels to evaluate");
  if (c.neg == 0) throw DataError("no negative (inlier) pixels to evaluate");
  return c;
}

// Threshold sweep from the highest score down; `visit(tp, fp)` is called once per tie group.
template <typename Visit>
void sweep(std::span<const float> scores, std::span<const std::uint8_t> labels, Visit&& visit) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const float s = scores[order[i]];
    while (i < order.size() && scores[order[i]] == s) {
      (labels[order[i]] ? tp : fp)++;
      ++i;
    }
    if (!visit(tp, fp)) return;
  }
}

bool meets_target(std::size_t tp, std::size_t pos) {
  return static_cast<double>(tp) / static_cast<double>(pos) >= kTargetTpr;
}

}  // namespace

double average_precision(std::span<const float> scores, std::span<const std::uint8_t> labels) {
  const auto counts = check_inputs(scores, labels);
  const auto pos = static_cast<double>(counts.pos);
  double ap = 0.0, prev_recall = 0.0;
  sweep(scores, labels, [&](std::size_t tp, std::size_t fp) {
    const double recall = static_cast<double>(tp) / pos;
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    return true;
  });
  return ap;
}

double fpr_at_95_tpr(std::span<const float> scores, std::span<const std::uint8_t> labels) {
  const auto counts = check_inputs(scores, labels);
  double fpr = 1.0;
  sweep(scores, labels, [&](std::size_t tp, std::size_t fp) {
    if (meets_target(tp, counts.pos)) {
      fpr = static_cast<double>(fp) / static_cast<double>(counts.neg);
      return false;
    }
    return true;
  });
  return fpr;
}

BruteForceMetrics brute_force_metrics(std::span<const float> scores, std::span<const std::uint8_t> labels) {
  const auto counts = check_inputs(scores, labels);
  std::vector<float> thresholds(scores.begin(), scores.end());
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  BruteForceMetrics out{0.0, 1.0};
  double prev_recall = 0.0;
  bool found = false;
  double best_fpr = 1.0;
  for (float tau : thresholds) {
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      if (scores[i] >= tau) (labels[i] ? tp : fp)++;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(counts.pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    out.ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    if (meets_target(tp, counts.pos)) {
      const double fpr = static_cast<double>(fp) / static_cast<double>(counts.neg);
      if (!found || fpr < best_fpr) best_fpr = fpr;
      found = true;
    }
  }
  out.fpr95 = best_fpr;
  return out;
}

void PixelPool::add(const ScoreMap& scores, const OoDMask& mask) {
  if (scores.height != mask.height || scores.width != mask.width) {
    throw DataError("score map is " + std::to_string(scores.height) + "x" + std::to_string(scores.width) +
                    " but mask is " + std::to_string(mask.height) + "x" + std::to_string(mask.width));
  }
  for (std::size_t p = 0; p < mask.labels.size(); ++p) {
    const auto l = mask.labels[p];
    if (l == kMaskIgnore) {
      ++ignored_;
      continue;
    }
    if (l != kMaskInlier && l != kMaskOoD) throw DataError("mask label outside {0, 1, 255}");
    scores_.push_back(scores.values[p]);
    labels_.push_back(l);
  }
}

void PixelPool::add(const PixelPool& other) {
  scores_.insert(scores_.end(), other.scores_.begin(), other.scores_.end());
  labels_.insert(labels_.end(), other.labels_.begin(), other.labels_.end());
  ignored_ += other.ignored_;
}

EvalResult PixelPool::evaluate() const {
  EvalResult r;
  r.ap = average_precision(scores_, labels_);
  r.fpr95 = fpr_at_95_tpr(scores_, labels_);
  r.n_pos = static_cast<std::size_t>(std::count(labels_.begin(), labels_.end(), kMaskOoD));
  r.n_neg = labels_.size() - r.n_pos;
  r.n_ignored = ignored_;
  return r;
}

EvalResult evaluate(const ScoreMap& scores, const OoDMask& mask) {
  PixelPool pool;
  pool.add(scores, mask);
  return pool.evaluate();
}

EvalResult evaluate_pooled(std::span<const ScoreMap> scores, std::span<const OoDMask> masks) {
  if (scores.size() != masks.size()) throw DataError("need one mask per score map");
  PixelPool pool;
  for (std::size_t i = 0; i < scores.size(); ++i) pool.add(scores[i], masks[i]);
  return pool.evaluate();
}

BootstrapSummary bootstrap(std::span<const PixelPool> per_image, std::size_t folds, double fraction,
                           std::uint64_t seed) {
  if (folds < 2) throw DataError("bootstrap needs at least two folds");
  if (!(fraction > 0.0) || fraction > 1.0) throw DataError("bootstrap fraction must be in (0, 1]");
  const std::size_t n = per_image.size();
  const auto take = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
  if (n == 0 || take == 0) throw DataError("too few images for bootstrap evaluation");
  BootstrapSummary out;
  Rng rng(seed);
  for (std::size_t f = 0; f < folds; ++f) {
    auto idx = sample_without_replacement(n, take, rng);
    std::sort(idx.begin(), idx.end());
    PixelPool pool;
    for (auto i : idx) pool.add(per_image[i]);
    out.folds.push_back(pool.evaluate());
  }
  auto mean_std = [&](auto field) {
    double m = 0.0;
    for (const auto& r : out.folds) m += field(r);
    m /= static_cast<double>(folds);
    double v = 0.0;
    for (const auto& r : out.folds) v += (field(r) - m) * (field(r) - m);
    return std::pair{m, std::sqrt(v / static_cast<double>(folds - 1))};
  };
  std::tie(out.ap_mean, out.ap_std) = mean_std([](const EvalResult& r) { return r.ap; });
  std::tie(out.fpr95_mean, out.fpr95_std) = mean_std([](const EvalResult& r) { return r.fpr95; });
  return out;
}

}  // namespace dood
