#pragma once

#include <filesystem>
#include <memory>
#include <string>

#include "dood/denoiser.hpp"
#include "dood/manifest.hpp"
#include "dood/schedule.hpp"
#include "dood/stats.hpp"
#include "dood/synth.hpp"

namespace dood {

inline constexpr const char* kModelMlp = "mlp";
inline constexpr const char* kModelGmmOracle = "gmm_oracle";

/// Everything needed to score: the noise predictor, its schedule and the dataset statistics.
///
/// `model` is "mlp" (config + params) or "gmm_oracle" (a mixture in raw feature coordinates,
/// mapped into normalized space through `stats` when the predictor is built).
struct Checkpoint {
  std::string model = kModelMlp;
  DenoiserConfig config;
  DenoiserParams params;
  GmmSpec gmm;
  DatasetStats stats;
  NoiseSchedule schedule = NoiseSchedule::linear();
  /// Free-form provenance (training flags etc.), written under "extra." keys.
  KeyValueFile extra;

  std::size_t dim() const;
  std::unique_ptr<NoisePredictor> make_predictor() const;
};

/// Directory of "p{index}_{role}.dtf" parameter tensors plus manifest.txt. Values round-trip bit-exactly.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
/// Throws DataError on a missing tensor or any manifest/shape mismatch.
Checkpoint load_checkpoint(const std::filesystem::path& dir);

void write_gmm(KeyValueFile& kv, const GmmSpec& spec, const std::string& prefix = "gmm.");
GmmSpec read_gmm(const KeyValueFile& kv, const std::string& prefix = "gmm.");

void write_stats(KeyValueFile& kv, const DatasetStats& stats, const std::string& prefix = "stats.");
DatasetStats read_stats(const KeyValueFile& kv, const std::string& prefix = "stats.");

std::string join_exact(std::span<const double> values);
std::vector<double> split_doubles(const std::string& text);

}  // namespace dood
