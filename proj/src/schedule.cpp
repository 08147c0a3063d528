#include "dood/schedule.hpp"

#include <cmath>
#include <string>

#include "dood/errors.hpp"

namespace dood {

NoiseSchedule NoiseSchedule::linear(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw DataError("schedule needs at least one timestep");
  if (!(beta_start > 0.0) || !(beta_start <= beta_end) || !(beta_end < 1.0)) {
    throw DataError("schedule requires 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.beta_start_ = beta_start;
  s.beta_end_ = beta_end;
  const auto n = static_cast<std::size_t>(steps);
  s.beta_.resize(n);
  s.alpha_.resize(n);
  s.alpha_bar_.resize(n);
  s.sigma_.resize(n);
  double running = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double frac = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    s.beta_[i] = beta_start + (beta_end - beta_start) * frac;
    s.alpha_[i] = 1.0 - s.beta_[i];
    running *= s.alpha_[i];
    s.alpha_bar_[i] = running;
    s.sigma_[i] = std::sqrt(1.0 - running);
  }
  return s;
}

std::size_t NoiseSchedule::index(int t) const {
  if (!contains(t)) {
    throw DataError("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps()) + "]");
  }
  return static_cast<std::size_t>(t - 1);
}

double NoiseSchedule::posterior_variance(int t) const {
  return beta(t) * (1.0 - alpha_bar_prev(t)) / (1.0 - alpha_bar(t));
}

void forward_diffuse_into(std::span<const float> x0, int t, std::span<const float> eps,
                          const NoiseSchedule& sched, std::span<float> out) {
  if (x0.size() != eps.size() || out.size() != x0.size()) {
    throw DataError("forward_diffuse: length mismatch");
  }
  const auto signal = static_cast<float>(std::sqrt(sched.alpha_bar(t)));
  const auto noise = static_cast<float>(sched.sigma(t));
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = signal * x0[i] + noise * eps[i];
}

std::vector<float> forward_diffuse(std::span<const float> x0, int t, std::span<const float> eps,
                                   const NoiseSchedule& sched) {
  std::vector<float> out(x0.size());
  forward_diffuse_into(x0, t, eps, sched, out);
  return out;
}

std::vector<float> sample_noise(std::size_t dim, Rng& rng) {
  std::vector<float> v(dim);
  rng.fill_normal(v);
  return v;
}

}  // namespace dood
