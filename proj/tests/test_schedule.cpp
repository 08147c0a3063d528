#include "doctest.h"

#include <cmath>

#include "dood/errors.hpp"
#include "dood/schedule.hpp"

using namespace dood;

TEST_CASE("alpha_bar matches an explicit product") {
  const auto s = NoiseSchedule::linear();
  // beta_1 = 1e-4, beta_2 = 1e-4 + (0.02 - 1e-4) / 999
  const double b1 = 1e-4;
  const double b2 = 1e-4 + (0.02 - 1e-4) / 999.0;
  CHECK(s.beta(1) == doctest::Approx(b1).epsilon(1e-15));
  CHECK(s.beta(2) == doctest::Approx(b2).epsilon(1e-15));
  CHECK(s.alpha_bar(2) == doctest::Approx((1 - b1) * (1 - b2)).epsilon(1e-14));
  CHECK(s.alpha_bar(2) == doctest::Approx(0.99978009).epsilon(1e-8));
  CHECK(s.beta(1000) == doctest::Approx(0.02).epsilon(1e-14));

  double prod = 1.0;
  for (int t = 1; t <= 1000; ++t) {
    prod *= 1.0 - (1e-4 + (0.02 - 1e-4) * (t - 1) / 999.0);
    CHECK(std::abs(s.alpha_bar(t) - prod) <= 1e-12 * prod);
    CHECK(std::abs(s.sigma(t) * s.sigma(t) + s.alpha_bar(t) - 1.0) <= 1e-12);
  }
}

TEST_CASE("posterior variance") {
  const auto s = NoiseSchedule::linear();
  CHECK(s.posterior_variance(1) == 0.0);
  const double expect = (1 - s.alpha_bar(3)) / (1 - s.alpha_bar(4)) * s.beta(4);
  CHECK(s.posterior_variance(4) == doctest::Approx(expect).epsilon(1e-14));
}

TEST_CASE("invalid schedules and timesteps are rejected") {
  CHECK_THROWS_AS(NoiseSchedule::linear(0), DataError);
  CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.0, 0.1), DataError);
  CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.2, 0.1), DataError);
  CHECK_THROWS_AS(NoiseSchedule::linear(10, 0.1, 1.0), DataError);
  const auto s = NoiseSchedule::linear(10, 0.01, 0.1);
  CHECK_THROWS_AS(s.beta(0), DataError);
  CHECK_THROWS_AS(s.beta(11), DataError);
}

TEST_CASE("forward diffusion") {
  const auto s = NoiseSchedule::linear();
  const std::vector<float> x0 = {1.0f, -2.0f, 0.5f};
  const std::vector<float> eps = {0.3f, 0.0f, -1.0f};
  const auto xt = forward_diffuse(x0, 10, eps, s);
  for (std::size_t i = 0; i < 3; ++i) {
    const double ref = std::sqrt(s.alpha_bar(10)) * x0[i] + s.sigma(10) * eps[i];
    CHECK(xt[i] == doctest::Approx(ref).epsilon(1e-6));
  }
  const std::vector<float> zeros(3, 0.0f);
  CHECK(forward_diffuse(zeros, 500, eps, s)[2] == doctest::Approx(-s.sigma(500)).epsilon(1e-6));
  CHECK_THROWS_AS(forward_diffuse(x0, 1, std::span<const float>(zeros.data(), 2), s), DataError);
}
