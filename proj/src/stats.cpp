#include "dood/stats.hpp"

#include <algorithm>
#include <cmath>

#include "dood/errors.hpp"

namespace dood {

const char* to_string(NormMode mode) { return mode == NormMode::MinMax ? "minmax" : "standard"; }

NormMode parse_norm_mode(const std::string& s) {
  if (s == "minmax") return NormMode::MinMax;
  if (s == "standard") return NormMode::Standard;
  throw DataError("unknown normalization '" + s + "' (expected minmax|standard)");
}

double DatasetStats::channel_scale(std::size_t c) const {
  if (mode == NormMode::MinMax) {
    return 2.0 / (static_cast<double>(per_channel_max[c]) - static_cast<double>(per_channel_min[c]));
  }
  return 1.0 / static_cast<double>(per_channel_std[c]);
}

double DatasetStats::channel_offset(std::size_t c) const {
  if (mode == NormMode::MinMax) return -static_cast<double>(per_channel_min[c]) * channel_scale(c) - 1.0;
  return -static_cast<double>(per_channel_mean[c]) * channel_scale(c);
}

void DatasetStats::validate() const {
  const auto c = per_channel_min.size();
  if (c == 0) throw DataError("dataset stats are empty");
  if (per_channel_max.size() != c || per_channel_mean.size() != c || per_channel_std.size() != c) {
    throw DataError("dataset stats have inconsistent channel counts");
  }
  for (std::size_t i = 0; i < c; ++i) {
    if (!(per_channel_max[i] > per_channel_min[i])) throw DataError("per-channel max must exceed min");
    if (!(per_channel_std[i] > 0.0f)) throw DataError("per-channel std must be positive");
  }
  if (!(score_std_diff > 0.0) || !(score_std_unc > 0.0)) throw DataError("score standard deviations must be positive");
}

void ChannelStatsAccumulator::add(std::span<const float> vec) {
  if (count_ == 0 && min_.empty()) {
    min_.assign(vec.begin(), vec.end());
    max_.assign(vec.begin(), vec.end());
    sum_.assign(vec.size(), 0.0);
    sum_sq_.assign(vec.size(), 0.0);
  } else if (vec.size() != min_.size()) {
    throw DataError("channel count changed from " + std::to_string(min_.size()) + " to " + std::to_string(vec.size()));
  }
  for (std::size_t c = 0; c < vec.size(); ++c) {
    const float v = vec[c];
    if (!std::isfinite(v)) throw DataError("non-finite feature value encountered");
    min_[c] = std::min(min_[c], v);
    max_[c] = std::max(max_[c], v);
    sum_[c] += v;
    sum_sq_[c] += static_cast<double>(v) * v;
  }
  ++count_;
}

void ChannelStatsAccumulator::add(const FeatureMap& map) {
  for (std::size_t i = 0; i < map.num_vectors(); ++i) add(map.vector_at(i));
}

void ChannelStatsAccumulator::merge(const ChannelStatsAccumulator& other) {
  if (other.count_ == 0) return;
  if (count_ == 0) {
    *this = other;
    return;
  }
  if (other.channels() != channels()) throw DataError("cannot merge stats with different channel counts");
  for (std::size_t c = 0; c < channels(); ++c) {
    min_[c] = std::min(min_[c], other.min_[c]);
    max_[c] = std::max(max_[c], other.max_[c]);
    sum_[c] += other.sum_[c];
    sum_sq_[c] += other.sum_sq_[c];
  }
  count_ += other.count_;
}

DatasetStats ChannelStatsAccumulator::finalize(NormMode mode) const {
  if (count_ == 0) throw DataError("cannot compute statistics of an empty feature stream");
  DatasetStats s;
  s.mode = mode;
  s.per_channel_min = min_;
  s.per_channel_max = max_;
  const auto n = static_cast<double>(count_);
  for (std::size_t c = 0; c < channels(); ++c) {
    if (!(s.per_channel_max[c] > s.per_channel_min[c])) {
      s.per_channel_min[c] -= 0.5f;
      s.per_channel_max[c] += 0.5f;
    }
    const double mean = sum_[c] / n;
    const double var = std::max(0.0, sum_sq_[c] / n - mean * mean);
    s.per_channel_mean.push_back(static_cast<float>(mean));
    const auto sd = static_cast<float>(std::sqrt(var));
    s.per_channel_std.push_back(sd > 0.0f ? sd : 1.0f);
  }
  return s;
}

DatasetStats compute_stats(std::span<const FeatureMap> maps, NormMode mode) {
  ChannelStatsAccumulator acc;
  for (const auto& m : maps) acc.add(m);
  return acc.finalize(mode);
}

std::vector<float> normalize(std::span<const float> x, const DatasetStats& stats) {
  if (x.size() != stats.channels()) throw DataError("normalize: channel mismatch");
  std::vector<float> out(x.size());
  for (std::size_t c = 0; c < x.size(); ++c) {
    out[c] = static_cast<float>(stats.channel_scale(c) * x[c] + stats.channel_offset(c));
  }
  return out;
}

std::vector<float> denormalize(std::span<const float> x, const DatasetStats& stats) {
  if (x.size() != stats.channels()) throw DataError("denormalize: channel mismatch");
  std::vector<float> out(x.size());
  for (std::size_t c = 0; c < x.size(); ++c) {
    out[c] = static_cast<float>((x[c] - stats.channel_offset(c)) / stats.channel_scale(c));
  }
  return out;
}

FloatMatrix normalize_map(const FeatureMap& map, const DatasetStats& stats) {
  if (map.channels != stats.channels()) {
    throw DataError("feature map has " + std::to_string(map.channels) + " channels, expected " +
                    std::to_string(stats.channels()));
  }
  const auto rows = static_cast<Eigen::Index>(map.num_vectors());
  const auto cols = static_cast<Eigen::Index>(map.channels);
  FloatMatrix out(rows, cols);
  std::vector<double> scale(map.channels), offset(map.channels);
  for (std::size_t c = 0; c < map.channels; ++c) {
    scale[c] = stats.channel_scale(c);
    offset[c] = stats.channel_offset(c);
  }
  for (Eigen::Index r = 0; r < rows; ++r) {
    const float* src = map.values.data() + r * cols;
    for (Eigen::Index c = 0; c < cols; ++c) {
      out(r, c) = static_cast<float>(scale[static_cast<std::size_t>(c)] * src[c] + offset[static_cast<std::size_t>(c)]);
    }
  }
  return out;
}

}  // namespace dood
