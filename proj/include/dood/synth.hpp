#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dood/predictor.hpp"
#include "dood/rng.hpp"
#include "dood/schedule.hpp"
#include "dood/stats.hpp"
#include "dood/tensor_store.hpp"

namespace dood {

struct GmmComponent {
  double weight = 0.0;
  std::vector<double> mean;
  std::vector<double> cov_diag;
};

/// Diagonal-covariance Gaussian mixture.
struct GmmSpec {
  std::size_t dim = 0;
  std::vector<GmmComponent> components;

  void validate() const;
  /// The mixture seen through a per-channel affine map x' = scale * x + offset.
  GmmSpec affine(std::span<const double> scale, std::span<const double> offset) const;
  /// The mixture in the normalized coordinates defined by `stats`.
  GmmSpec normalized(const DatasetStats& stats) const;
};

/// n draws, one per row.
FloatMatrix sample_gmm(const GmmSpec& spec, std::size_t n, Rng& rng);

/// log q_t(x_t) of the forward-diffused mixture, where component k becomes
/// N(sqrt(abar_t) mu_k, abar_t Sigma_k + (1 - abar_t) I).
double smoothed_gmm_log_density(const GmmSpec& spec, std::span<const double> x_t, int t, const NoiseSchedule& sched);

/// Exact gradient of `smoothed_gmm_log_density` with respect to x_t.
std::vector<double> smoothed_gmm_score(const GmmSpec& spec, std::span<const double> x_t, int t,
                                       const NoiseSchedule& sched);

/// Bayes-optimal noise prediction -sigma_t * score.
std::vector<double> oracle_eps(const GmmSpec& spec, std::span<const double> x_t, int t, const NoiseSchedule& sched);

/// Closed-form denoiser for a mixture; `spec` must already be in the coordinates the
/// predictor is queried in (normally the normalized feature space).
class GmmOracle final : public NoisePredictor {
 public:
  GmmOracle(GmmSpec spec, NoiseSchedule sched);

  std::size_t dim() const override { return spec_.dim; }
  FloatMatrix predict(const FloatMatrix& x_t, std::span<const int> timesteps) const override;

  const GmmSpec& spec() const { return spec_; }

 private:
  GmmSpec spec_;
  NoiseSchedule sched_;
};

struct SyntheticBenchmark {
  std::vector<FeatureMap> maps;
  std::vector<OoDMask> masks;
};

/// Maps whose patches come from `spec_in`, except one rectangle per map (about
/// `ood_fraction` of the area) drawn from N(ood_mean, I) and marked 1 in the mask.
SyntheticBenchmark make_synthetic_benchmark(const GmmSpec& spec_in, std::span<const double> ood_mean,
                                            std::size_t n_maps, std::size_t height, std::size_t width,
                                            double ood_fraction, Rng& rng);

/// Inlier-only maps, for building a training set.
std::vector<FeatureMap> make_inlier_maps(const GmmSpec& spec, std::size_t n_maps, std::size_t height,
                                         std::size_t width, Rng& rng);

/// The fixed synthetic task used for acceptance: three equally weighted components whose
/// means form an equilateral triangle of side 6 in a plane that touches every channel,
/// C = 16, isotropic component standard deviation `component_std`, and an OoD cluster
/// mean at distance 8 from every component.
struct StandardBenchmarkSpec {
  static constexpr std::size_t kDim = 16;
  static constexpr double kSide = 6.0;
  static constexpr double kOodDistance = 8.0;
  static constexpr double kComponentStd = 0.002;
  static constexpr std::size_t kMaps = 200;
  static constexpr std::size_t kHeight = 32;
  static constexpr std::size_t kWidth = 32;
  static constexpr double kOodFraction = 0.10;

  GmmSpec inliers;
  std::vector<double> ood_mean;
};

StandardBenchmarkSpec standard_benchmark_spec(double component_std = StandardBenchmarkSpec::kComponentStd);

}  // namespace dood
