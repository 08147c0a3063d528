#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "dood/errors.hpp"
#include "dood/metrics.hpp"
#include "dood/rng.hpp"

using namespace dood;

namespace {

using Labels = std::vector<std::uint8_t>;

struct Instance {
  std::vector<float> scores;
  Labels labels;
};

// Random instance with both classes present and plenty of ties.
Instance random_instance(Rng& r) {
  const std::size_t n = 2 + r.below(1999);
  Instance inst;
  const auto levels = 1 + r.below(n);  // few levels -> many ties
  for (std::size_t i = 0; i < n; ++i) {
    inst.scores.push_back(static_cast<float>(r.below(levels)) * 0.125f);
    inst.labels.push_back(static_cast<std::uint8_t>(r.uniform() < 0.3 ? 1 : 0));
  }
  inst.labels[0] = 1;
  inst.labels[1] = 0;
  return inst;
}

}  // namespace

TEST_CASE("hand examples") {
  CHECK(average_precision(std::vector<float>{0.9f, 0.8f, 0.1f}, Labels{1, 0, 1}) == doctest::Approx(5.0 / 6.0).epsilon(1e-15));
  CHECK(fpr_at_95_tpr(std::vector<float>{0.9f, 0.8f, 0.7f}, Labels{1, 1, 0}) == 0.0);
  CHECK(fpr_at_95_tpr(std::vector<float>{0.9f, 0.3f, 0.5f}, Labels{1, 1, 0}) == 1.0);

  const auto b = brute_force_metrics(std::vector<float>{0.9f, 0.8f, 0.1f}, Labels{1, 0, 1});
  CHECK(b.ap == doctest::Approx(5.0 / 6.0).epsilon(1e-15));
  CHECK(brute_force_metrics(std::vector<float>{0.9f, 0.8f, 0.7f}, Labels{1, 1, 0}).fpr95 == 0.0);
  CHECK(brute_force_metrics(std::vector<float>{0.9f, 0.3f, 0.5f}, Labels{1, 1, 0}).fpr95 == 1.0);
}

TEST_CASE("perfect separation and a single tie group") {
  const std::vector<float> s = {5, 4, 3, 1, 0};
  const Labels l = {1, 1, 1, 0, 0};
  CHECK(average_precision(s, l) == 1.0);
  CHECK(fpr_at_95_tpr(s, l) == 0.0);

  const std::vector<float> flat(10, 0.5f);
  const Labels l3 = {1, 0, 0, 1, 0, 0, 0, 1, 0, 0};
  CHECK(average_precision(flat, l3) == doctest::Approx(0.3).epsilon(1e-15));
  CHECK(fpr_at_95_tpr(flat, l3) == 1.0);
}

TEST_CASE("fast metrics agree with the brute-force sweep") {
  Rng r(123);
  for (int k = 0; k < 1000; ++k) {
    const auto inst = random_instance(r);
    const auto b = brute_force_metrics(inst.scores, inst.labels);
    CHECK(std::abs(average_precision(inst.scores, inst.labels) - b.ap) <= 1e-12);
    CHECK(std::abs(fpr_at_95_tpr(inst.scores, inst.labels) - b.fpr95) <= 1e-12);
  }
}

TEST_CASE("single positive is handled identically by both paths") {
  const std::vector<float> s = {0.2f, 0.9f, 0.4f, 0.4f};
  const Labels l = {0, 0, 1, 0};
  const auto b = brute_force_metrics(s, l);
  CHECK(average_precision(s, l) == doctest::Approx(b.ap).epsilon(1e-15));
  CHECK(fpr_at_95_tpr(s, l) == b.fpr95);
  CHECK(b.ap == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("invariance under increasing transforms and tie permutations") {
  Rng r(5);
  for (int k = 0; k < 50; ++k) {
    auto inst = random_instance(r);
    const double ap = average_precision(inst.scores, inst.labels);
    const double fpr = fpr_at_95_tpr(inst.scores, inst.labels);
    std::vector<float> t = inst.scores;
    for (auto& v : t) v = 2 * v + 7;
    CHECK(average_precision(t, inst.labels) == doctest::Approx(ap).epsilon(1e-12));
    CHECK(fpr_at_95_tpr(t, inst.labels) == doctest::Approx(fpr).epsilon(1e-12));

    // shuffle all entries jointly, which permutes within every tie group
    std::vector<std::size_t> perm(inst.scores.size());
    for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
    for (std::size_t i = perm.size(); i > 1; --i) std::swap(perm[i - 1], perm[r.below(i)]);
    Instance p;
    for (auto i : perm) {
      p.scores.push_back(inst.scores[i]);
      p.labels.push_back(inst.labels[i]);
    }
    CHECK(average_precision(p.scores, p.labels) == doctest::Approx(ap).epsilon(1e-12));
    CHECK(fpr_at_95_tpr(p.scores, p.labels) == fpr);

    CHECK(ap > 0.0);
    CHECK(ap <= 1.0);
  }
}

TEST_CASE("label complement duality against brute force") {
  Rng r(8);
  for (int k = 0; k < 50; ++k) {
    auto inst = random_instance(r);
    for (auto& s : inst.scores) s = -s;
    for (auto& l : inst.labels) l = static_cast<std::uint8_t>(1 - l);
    CHECK(average_precision(inst.scores, inst.labels) == doctest::Approx(brute_force_metrics(inst.scores, inst.labels).ap).epsilon(1e-12));
  }
}

TEST_CASE("metric input errors") {
  CHECK_THROWS_AS(average_precision(std::vector<float>{1, 2}, Labels{1, 1}), DataError);
  CHECK_THROWS_AS(average_precision(std::vector<float>{1, 2}, Labels{0, 0}), DataError);
  CHECK_THROWS_AS(average_precision(std::vector<float>{1}, Labels{1, 0}), DataError);
  CHECK_THROWS_AS(fpr_at_95_tpr(std::vector<float>{1, NAN}, Labels{1, 0}), DataError);
}

TEST_CASE("evaluate drops ignored pixels and pools across images") {
  ScoreMap a{1, 4, {0.9f, 0.1f, 0.8f, 0.5f}};
  OoDMask ma{1, 4, {1, 0, 255, 0}};
  const auto r = evaluate(a, ma);
  CHECK(r.n_pos == 1);
  CHECK(r.n_neg == 2);
  CHECK(r.n_ignored == 1);
  CHECK(r.ap == 1.0);

  ScoreMap b{2, 1, {0.2f, 0.7f}};
  OoDMask mb{2, 1, {1, 0}};
  std::vector<ScoreMap> maps = {a, b};
  std::vector<OoDMask> masks = {ma, mb};
  const auto pooled = evaluate_pooled(maps, masks);
  const std::vector<float> cat = {0.9f, 0.1f, 0.5f, 0.2f, 0.7f};
  const Labels lab = {1, 0, 0, 1, 0};
  CHECK(pooled.ap == average_precision(cat, lab));
  CHECK(pooled.fpr95 == fpr_at_95_tpr(cat, lab));

  std::vector<ScoreMap> one = {a};
  std::vector<OoDMask> one_mask = {ma};
  CHECK(evaluate_pooled(one, one_mask).ap == r.ap);

  CHECK_THROWS_AS(evaluate(a, OoDMask{1, 4, {255, 255, 255, 255}}), DataError);
  CHECK_THROWS_AS(evaluate(a, OoDMask{2, 2, {1, 0, 0, 0}}), DataError);
}

TEST_CASE("bootstrap") {
  Rng r(4);
  std::vector<PixelPool> pools(12);
  for (auto& p : pools) {
    ScoreMap m = ScoreMap::constant(4, 4, 0.0f);
    OoDMask k{4, 4, std::vector<std::uint8_t>(16, 0)};
    for (std::size_t i = 0; i < 16; ++i) {
      k.labels[i] = static_cast<std::uint8_t>(i < 3 ? 1 : 0);
      m.values[i] = static_cast<float>(r.normal() + (i < 3 ? 1.0 : 0.0));
    }
    p.add(m, k);
  }
  const auto full = bootstrap(pools, 5, 1.0, 1);
  CHECK(full.ap_std == 0.0);
  CHECK(full.fpr95_std == 0.0);
  CHECK(full.folds.size() == 5);

  const auto a = bootstrap(pools, 10, 0.9, 7), b = bootstrap(pools, 10, 0.9, 7);
  CHECK(a.ap_mean == b.ap_mean);
  CHECK(a.ap_std > 0.0);
  // ceil(0.9 * 12) = 11 images of 16 pixels each
  CHECK(a.folds[0].n_pos + a.folds[0].n_neg == 11 * 16);

  CHECK_THROWS_AS(bootstrap(pools, 1, 0.9, 1), DataError);
  CHECK_THROWS_AS(bootstrap(pools, 10, 0.0, 1), DataError);
  CHECK_THROWS_AS(bootstrap(std::vector<PixelPool>{}, 10, 0.9, 1), DataError);
}
