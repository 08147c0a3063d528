#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "dood/errors.hpp"
#include "dood/scorer.hpp"
#include "dood/synth.hpp"

using namespace dood;

namespace {

GmmSpec single(std::vector<double> mean, double var) {
  const auto d = mean.size();
  return GmmSpec{d, {GmmComponent{1.0, std::move(mean), std::vector<double>(d, var)}}};
}

GmmSpec two_components() {
  return GmmSpec{3,
                 {GmmComponent{0.3, {1.0, -2.0, 0.5}, {0.2, 0.5, 1.5}},
                  GmmComponent{0.7, {-1.0, 0.0, 2.0}, {1.0, 0.1, 0.3}}}};
}

}  // namespace

TEST_CASE("spec validation") {
  auto s = two_components();
  CHECK_NOTHROW(s.validate());
  s.components[0].weight = 0.31;
  CHECK_THROWS_AS(s.validate(), DataError);
  s = two_components();
  s.components[1].cov_diag[2] = 0.0;
  CHECK_THROWS_AS(s.validate(), DataError);
  s = two_components();
  s.components[1].mean.pop_back();
  CHECK_THROWS_AS(s.validate(), DataError);
}

TEST_CASE("sampling statistics") {
  Rng r(10);
  const auto tight = sample_gmm(single({1.5, -2.0}, 1e-12), 100, r);
  CHECK((tight.rowwise() - Eigen::RowVector2f(1.5f, -2.0f)).cwiseAbs().maxCoeff() < 1e-5f);

  const auto spec = two_components();
  const std::size_t n = 100000;
  const auto x = sample_gmm(spec, n, r);
  // component frequency via the first coordinate's side of 0 is ambiguous; use the
  // mean of coordinate 1, which is -2 * 0.3 + 0 * 0.7 = -0.6
  const double m1 = x.col(1).cast<double>().mean();
  const double var1 = 0.3 * (0.5 + 4.0) + 0.7 * (0.1 + 0.0) - 0.36;
  CHECK(std::abs(m1 + 0.6) < 3 * std::sqrt(var1 / n));

  // frequencies: well-separated components on coordinate 0 with tiny variance
  GmmSpec sep{1, {GmmComponent{0.25, {-10.0}, {1e-4}}, GmmComponent{0.75, {10.0}, {1e-4}}}};
  const auto y = sample_gmm(sep, n, r);
  const double frac = static_cast<double>((y.col(0).array() < 0).count()) / n;
  CHECK(std::abs(frac - 0.25) < 3 * std::sqrt(0.25 * 0.75 / n));

  Rng a(3), b(3);
  CHECK(sample_gmm(spec, 10, a) == sample_gmm(spec, 10, b));
}

TEST_CASE("closed-form scores of single Gaussians") {
  const auto sched = NoiseSchedule::linear();
  const std::vector<double> x = {0.3, -1.2, 2.0};
  for (int t : {1, 50, 999}) {
    const auto s = smoothed_gmm_score(single({0, 0, 0}, 1.0), x, t, sched);
    for (std::size_t i = 0; i < 3; ++i) CHECK(s[i] == doctest::Approx(-x[i]).epsilon(1e-12));
    const auto e = oracle_eps(single({0, 0, 0}, 1.0), x, t, sched);
    for (std::size_t i = 0; i < 3; ++i) CHECK(e[i] == doctest::Approx(sched.sigma(t) * x[i]).epsilon(1e-12));

    const std::vector<double> mu = {1.0, 2.0, -3.0};
    const auto s2 = smoothed_gmm_score(single(mu, 1.0), x, t, sched);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(s2[i] == doctest::Approx(-(x[i] - std::sqrt(sched.alpha_bar(t)) * mu[i])).epsilon(1e-12));
    }
  }
}

TEST_CASE("mixture score matches central differences of the log-density") {
  const auto sched = NoiseSchedule::linear();
  const auto spec = two_components();
  const double h = 1e-5;
  for (int t : {1, 10, 300}) {
    for (const auto& probe : {std::vector<double>{0.1, -0.4, 1.0}, std::vector<double>{-1.3, 0.2, 2.5}}) {
      const auto s = smoothed_gmm_score(spec, probe, t, sched);
      for (std::size_t i = 0; i < 3; ++i) {
        auto up = probe, down = probe;
        up[i] += h;
        down[i] -= h;
        const double fd =
            (smoothed_gmm_log_density(spec, up, t, sched) - smoothed_gmm_log_density(spec, down, t, sched)) / (2 * h);
        CHECK(std::abs(s[i] - fd) <= 1e-6 * std::max(1.0, std::abs(fd)));
      }
      const auto e = oracle_eps(spec, probe, t, sched);
      for (std::size_t i = 0; i < 3; ++i) CHECK(e[i] == doctest::Approx(-sched.sigma(t) * s[i]).epsilon(1e-14));
    }
  }
}

TEST_CASE("far-away points do not underflow") {
  const auto sched = NoiseSchedule::linear();
  const std::vector<double> far = {1e4, -1e4, 1e4};
  for (double v : smoothed_gmm_score(two_components(), far, 1, sched)) CHECK(std::isfinite(v));
}

TEST_CASE("oracle directional score separates inliers from a distant point") {
  const auto sched = NoiseSchedule::linear();
  const std::size_t c = 16;
  const auto spec = single(std::vector<double>(c, 0.0), 0.01);
  const GmmOracle oracle(spec, sched);
  Rng r(17);
  const auto inlier = sample_gmm(spec, 1, r);
  FloatMatrix outlier = FloatMatrix::Zero(1, c);
  outlier(0, 0) = 10.0f * 0.1f;  // 10 sigma along one axis
  auto mean_score = [&](const FloatMatrix& x0, int t) {
    double acc = 0;
    for (int k = 0; k < 400; ++k) {
      std::vector<float> eps(c);
      r.fill_normal(eps);
      const auto xt = forward_diffuse(std::span<const float>(x0.data(), c), t, eps, sched);
      const FloatMatrix xm = Eigen::Map<const FloatMatrix>(xt.data(), 1, static_cast<Eigen::Index>(c));
      const int ts[1] = {t};
      const FloatMatrix e_hat = oracle.predict(xm, ts);
      acc += directional_score(std::span<const float>(e_hat.data(), c), eps).value;
    }
    return acc / 400;
  };
  for (int t : {1, 5, 25}) CHECK(mean_score(inlier, t) < mean_score(outlier, t));
}

TEST_CASE("benchmark masks mark the planted rectangle") {
  const auto spec = two_components();
  const std::vector<double> ood = {5, 5, 5};
  Rng r(2);
  const auto b = make_synthetic_benchmark(spec, ood, 5, 8, 10, 0.2, r);
  REQUIRE(b.maps.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(b.maps[i].channels == 3);
    // area 16 -> 4x4 rectangle
    CHECK(std::count(b.masks[i].labels.begin(), b.masks[i].labels.end(), kMaskOoD) == 16);
    std::size_t min_y = 99, max_y = 0, min_x = 99, max_x = 0;
    for (std::size_t p = 0; p < 80; ++p) {
      if (b.masks[i].labels[p] != kMaskOoD) continue;
      min_y = std::min(min_y, p / 10);
      max_y = std::max(max_y, p / 10);
      min_x = std::min(min_x, p % 10);
      max_x = std::max(max_x, p % 10);
    }
    CHECK((max_y - min_y + 1) * (max_x - min_x + 1) == 16);
  }

  Rng r1(2);
  const auto one = make_synthetic_benchmark(spec, ood, 3, 10, 10, 0.01, r1);
  for (const auto& m : one.masks) CHECK(std::count(m.labels.begin(), m.labels.end(), kMaskOoD) == 1);

  Rng r2(2);
  const auto thin = make_synthetic_benchmark(spec, ood, 1, 10, 2, 0.9, r2);
  CHECK(std::count(thin.masks[0].labels.begin(), thin.masks[0].labels.end(), kMaskOoD) == 18);
  CHECK_THROWS_AS(make_synthetic_benchmark(spec, ood, 1, 4, 4, 1.0, r2), DataError);
}

TEST_CASE("standard benchmark geometry") {
  const auto s = standard_benchmark_spec();
  REQUIRE(s.inliers.components.size() == 3);
  auto dist = [](const std::vector<double>& a, const std::vector<double>& b) {
    double d = 0;
    for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(d);
  };
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(dist(s.inliers.components[i].mean, s.inliers.components[(i + 1) % 3].mean) == doctest::Approx(6.0));
    CHECK(dist(s.inliers.components[i].mean, s.ood_mean) == doctest::Approx(8.0));
  }
}

TEST_CASE("normalized oracle equals the raw mixture seen through the affine map") {
  DatasetStats st;
  st.per_channel_min = {-1.0f, 0.0f, 2.0f};
  st.per_channel_max = {3.0f, 1.0f, 6.0f};
  st.per_channel_mean = {0, 0, 0};
  st.per_channel_std = {1, 1, 1};
  const auto n = two_components().normalized(st);
  // x' = 2 (x - min) / (max - min) - 1; variances scale by the squared slope
  CHECK(n.components[0].mean[0] == doctest::Approx(2 * (1.0 + 1.0) / 4 - 1));
  CHECK(n.components[0].cov_diag[2] == doctest::Approx(1.5 * 0.25));
}

TEST_CASE("indistinguishable OoD cluster gives AP near prevalence") {
  // OoD patches drawn from the same law as the inliers cannot be ranked above them.
  const auto sched = NoiseSchedule::linear();
  const auto spec = single(std::vector<double>(4, 0.0), 1.0);
  Rng r(99);
  const auto b = make_synthetic_benchmark(spec, std::vector<double>(4, 0.0), 40, 10, 10, 0.1, r);
  DatasetStats st;
  st.per_channel_min.assign(4, -1.0f);
  st.per_channel_max.assign(4, 1.0f);
  st.per_channel_mean.assign(4, 0.0f);
  st.per_channel_std.assign(4, 1.0f);
  const GmmOracle oracle(spec, sched);
  ScoreConfig cfg;
  cfg.timesteps = {1, 5};
  double pos = 0, total = 0;
  std::vector<float> scores;
  std::vector<std::uint8_t> labels;
  for (std::size_t i = 0; i < b.maps.size(); ++i) {
    const auto m = score_feature_map(b.maps[i], oracle, sched, cfg, st, i);
    scores.insert(scores.end(), m.values.begin(), m.values.end());
    labels.insert(labels.end(), b.masks[i].labels.begin(), b.masks[i].labels.end());
  }
  for (auto l : labels) pos += l, total += 1;
  // AP of a random ranking concentrates around the prevalence
  double ap = 0;
  {
    std::vector<std::size_t> idx(scores.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto c) { return scores[a] > scores[c]; });
    double tp = 0;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (labels[idx[k]]) {
        tp += 1;
        ap += tp / static_cast<double>(k + 1) / pos;
      }
    }
  }
  CHECK(std::abs(ap - pos / total) < 0.05);
}
