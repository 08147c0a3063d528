#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dood/rng.hpp"

namespace dood {

/// Linear DDPM noise schedule.
///
/// Arrays are indexed by timestep t in 1..T (`beta(t)` etc.); storage is
/// zero-based. Everything is kept in double precision.
class NoiseSchedule {
 public:
  static constexpr int kDefaultSteps = 1000;
  static constexpr double kDefaultBetaStart = 1e-4;
  static constexpr double kDefaultBetaEnd = 0.02;

  static NoiseSchedule linear(int steps = kDefaultSteps, double beta_start = kDefaultBetaStart,
                              double beta_end = kDefaultBetaEnd);

  int steps() const { return static_cast<int>(beta_.size()); }
  double beta_start() const { return beta_start_; }
  double beta_end() const { return beta_end_; }

  double beta(int t) const { return beta_[index(t)]; }
  double alpha(int t) const { return alpha_[index(t)]; }
  double alpha_bar(int t) const { return alpha_bar_[index(t)]; }
  /// sqrt(1 - alpha_bar(t)), the noise scale of x_t given x_0.
  double sigma(int t) const { return sigma_[index(t)]; }
  /// alpha_bar(t - 1), with alpha_bar(0) = 1.
  double alpha_bar_prev(int t) const { return t == 1 ? 1.0 : alpha_bar(t - 1); }
  /// Variance of q(x_{t-1} | x_t, x_0).
  double posterior_variance(int t) const;

  bool contains(int t) const { return t >= 1 && t <= steps(); }

 private:
  std::size_t index(int t) const;

  double beta_start_ = 0.0;
  double beta_end_ = 0.0;
  std::vector<double> beta_, alpha_, alpha_bar_, sigma_;
};

/// x_t = sqrt(alpha_bar_t) x0 + sigma_t eps, elementwise in single precision.
std::vector<float> forward_diffuse(std::span<const float> x0, int t, std::span<const float> eps,
                                   const NoiseSchedule& sched);
void forward_diffuse_into(std::span<const float> x0, int t, std::span<const float> eps,
                          const NoiseSchedule& sched, std::span<float> out);

std::vector<float> sample_noise(std::size_t dim, Rng& rng);

}  // namespace dood
