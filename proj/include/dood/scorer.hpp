#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dood/predictor.hpp"
#include "dood/rng.hpp"
#include "dood/schedule.hpp"
#include "dood/stats.hpp"
#include "dood/tensor_store.hpp"

namespace dood {

enum class ScoreKind { Directional, MseScore, MseRecon };

const char* to_string(ScoreKind kind);
ScoreKind parse_score_kind(const std::string& s);

struct ScoreConfig {
  std::vector<int> timesteps = default_timesteps();
  ScoreKind kind = ScoreKind::Directional;
  std::uint64_t noise_seed = 0;
  int samples_per_timestep = 1;

  static std::vector<int> default_timesteps();
  void validate(const NoiseSchedule& sched) const;
};

/// Parses "a..b" (inclusive range) or a comma list such as "1,5,10".
std::vector<int> parse_timesteps(const std::string& text);

enum class Resolution { Patch, Pixel };

struct ScoreMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> values;
  Resolution resolution = Resolution::Patch;
  /// Number of directional scores that hit a zero-norm vector and were set to 0.
  std::size_t degenerate = 0;

  static ScoreMap constant(std::size_t h, std::size_t w, float value, Resolution res = Resolution::Patch);
  static ScoreMap from_tensor(const DenseTensor& t, Resolution res = Resolution::Pixel);
  DenseTensor to_tensor() const;
};

struct DirectionalScore {
  float value = 0.0f;
  bool degenerate = false;
};

inline constexpr double kDegenerateNorm = 1e-12;

/// -<eps_hat, eps> / (|eps_hat| |eps|), or 0 flagged degenerate when either norm is below 1e-12.
DirectionalScore directional_score(std::span<const float> eps_hat, std::span<const float> eps);

/// Mean over channels of (eps_hat - eps)^2.
float mse_score(std::span<const float> eps_hat, std::span<const float> eps);

/// Perturbs x0 to x_t with noise from `rng`, runs t ancestral reverse steps (noiseless final
/// step) and returns MSE(x0, x0_hat).
float recon_score(const NoisePredictor& model, std::span<const float> x0, int t, const NoiseSchedule& sched, Rng& rng);

/// Per-timestep score maps of `kind`, one per entry of cfg.timesteps, unweighted.
/// `image_key` selects the noise stream, so the same (seed, image, t) always sees the same noise.
std::vector<ScoreMap> per_timestep_maps(const FeatureMap& fmap, const NoisePredictor& model,
                                        const NoiseSchedule& sched, const ScoreConfig& cfg,
                                        const DatasetStats& stats, std::uint64_t image_key);

/// Sum over t of sqrt(1 - abar_t) * maps[t].
ScoreMap aggregate_timesteps(std::span<const ScoreMap> maps, std::span<const int> timesteps,
                             const NoiseSchedule& sched);

/// Patch-resolution OoD score map. Directional scores are aggregated across cfg.timesteps;
/// the baseline kinds require exactly one timestep and are returned unweighted.
ScoreMap score_feature_map(const FeatureMap& fmap, const NoisePredictor& model, const NoiseSchedule& sched,
                           const ScoreConfig& cfg, const DatasetStats& stats, std::uint64_t image_key = 0);

/// Bilinear resize (half-pixel centers, no corner alignment) to pixel resolution.
ScoreMap upsample_scores(const ScoreMap& map, std::size_t target_h, std::size_t target_w);

/// Per-pixel -log(sum_k exp(logit_k)) of a [H, W, K] logits tensor.
ScoreMap logsumexp_uncertainty(const DenseTensor& logits);

/// 0.5 * ((diff - mu_diff) / sd_diff + (unc - mu_unc) / sd_unc).
ScoreMap compound(const ScoreMap& diff, const ScoreMap& unc, const DatasetStats& stats);

/// Affine min-max mapping to an 8-bit [H, W] tensor.
DenseTensor heatmap(const ScoreMap& map);

}  // namespace dood
