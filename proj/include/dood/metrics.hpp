#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "dood/scorer.hpp"
#include "dood/tensor_store.hpp"

namespace dood {

/// Pixel-level detection quality with OoD pixels as the positive class.
struct EvalResult {
  double ap = 0.0;
  double fpr95 = 0.0;
  std::size_t n_pos = 0;
  std::size_t n_neg = 0;
  std::size_t n_ignored = 0;
};

inline constexpr double kTargetTpr = 0.95;

/// Sum over descending distinct thresholds of (R_n - R_{n-1}) * P_n; tied scores form one threshold.
double average_precision(std::span<const float> scores, std::span<const std::uint8_t> labels);

/// Lowest FPR among thresholds with TPR >= 0.95, predicting positive iff score >= threshold.
double fpr_at_95_tpr(std::span<const float> scores, std::span<const std::uint8_t> labels);

struct BruteForceMetrics {
  double ap = 0.0;
  double fpr95 = 0.0;
};

/// O(n^2) reference: counts TP/FP directly at every distinct score. Test oracle only.
BruteForceMetrics brute_force_metrics(std::span<const float> scores, std::span<const std::uint8_t> labels);

/// Accumulates scored pixels across images (ignore-labelled pixels dropped) for pooled evaluation.
class PixelPool {
 public:
  void add(const ScoreMap& scores, const OoDMask& mask);
  void add(const PixelPool& other);

  std::span<const float> scores() const { return scores_; }
  std::span<const std::uint8_t> labels() const { return labels_; }
  std::size_t n_ignored() const { return ignored_; }

  EvalResult evaluate() const;

 private:
  std::vector<float> scores_;
  std::vector<std::uint8_t> labels_;
  std::size_t ignored_ = 0;
};

EvalResult evaluate(const ScoreMap& scores, const OoDMask& mask);
EvalResult evaluate_pooled(std::span<const ScoreMap> scores, std::span<const OoDMask> masks);

struct BootstrapSummary {
  double ap_mean = 0.0, ap_std = 0.0;
  double fpr95_mean = 0.0, fpr95_std = 0.0;
  std::vector<EvalResult> folds;
};

/// Pooled metrics over `folds` random subsets of ceil(fraction * N) images each, drawn
/// without replacement. Standard deviations are sample (n - 1) deviations across folds.
BootstrapSummary bootstrap(std::span<const PixelPool> per_image, std::size_t folds, double fraction,
                           std::uint64_t seed);

}  // namespace dood
