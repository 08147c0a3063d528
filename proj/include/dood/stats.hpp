#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "dood/predictor.hpp"
#include "dood/tensor_store.hpp"

namespace dood {

enum class NormMode { MinMax, Standard };

const char* to_string(NormMode mode);
NormMode parse_norm_mode(const std::string& s);

/// Per-channel normalization constants plus the training-set standardization of
/// the diffusion and uncertainty scores used for compounding.
struct DatasetStats {
  NormMode mode = NormMode::MinMax;
  std::vector<float> per_channel_min;
  std::vector<float> per_channel_max;
  std::vector<float> per_channel_mean;
  std::vector<float> per_channel_std;

  double score_mean_diff = 0.0;
  double score_std_diff = 1.0;
  double score_mean_unc = 0.0;
  double score_std_unc = 1.0;
  bool has_diff_standardization = false;
  bool has_unc_standardization = false;

  std::size_t channels() const { return per_channel_min.size(); }

  /// Channel c maps as x' = scale * x + offset.
  double channel_scale(std::size_t c) const;
  double channel_offset(std::size_t c) const;

  void validate() const;
};

/// Streaming channelwise min/max/mean/std over feature vectors.
class ChannelStatsAccumulator {
 public:
  void add(std::span<const float> vec);
  void add(const FeatureMap& map);
  void merge(const ChannelStatsAccumulator& other);

  std::size_t count() const { return count_; }
  std::size_t channels() const { return min_.size(); }

  /// Degenerate channels (max == min) are widened by +-0.5 around the constant;
  /// zero standard deviations become 1.
  DatasetStats finalize(NormMode mode = NormMode::MinMax) const;

 private:
  std::size_t count_ = 0;
  std::vector<float> min_, max_;
  std::vector<double> sum_, sum_sq_;
};

DatasetStats compute_stats(std::span<const FeatureMap> maps, NormMode mode = NormMode::MinMax);

std::vector<float> normalize(std::span<const float> x, const DatasetStats& stats);
std::vector<float> denormalize(std::span<const float> x, const DatasetStats& stats);
/// Normalizes every vector of `map`; returns a [H*W, C] matrix.
FloatMatrix normalize_map(const FeatureMap& map, const DatasetStats& stats);

}  // namespace dood
