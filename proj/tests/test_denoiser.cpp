#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dood/denoiser.hpp"
#include "dood/errors.hpp"

using namespace dood;

namespace {

using Vec = std::vector<double>;

DenoiserConfig tiny(SkipMode skip = SkipMode::Concat) {
  DenoiserConfig c;
  c.input_dim = 4;
  c.hidden_dim = 4;
  c.n_input_blocks = 1;
  c.n_output_blocks = 1;
  c.skip = skip;
  return c.resolved();
}

BasicDenoiserParams<double> random_params(const DenoiserConfig& cfg, std::uint64_t seed, double scale = 0.5) {
  auto p = BasicDenoiserParams<double>::zeros(cfg);
  Rng r(seed);
  p.for_each_tensor([&](const std::string& role, std::span<double> v, std::vector<std::size_t>) {
    const bool is_scale = role.find("_scale") != std::string::npos;
    for (auto& x : v) x = (is_scale ? 1.0 : 0.0) + scale * r.normal();
  });
  return p;
}

// Straight-line scalar reference, written without Eigen.
Vec ref_linear(const LinearLayer<double>& l, const Vec& x) {
  Vec y(static_cast<std::size_t>(l.weight.rows()));
  for (std::size_t o = 0; o < y.size(); ++o) {
    double acc = l.bias(static_cast<Eigen::Index>(o));
    for (std::size_t i = 0; i < x.size(); ++i) acc += l.weight(static_cast<Eigen::Index>(o), static_cast<Eigen::Index>(i)) * x[i];
    y[o] = acc;
  }
  return y;
}

Vec ref_group_norm(const NormLayer<double>& n, const Vec& x, std::size_t groups) {
  const std::size_t gs = x.size() / groups;
  Vec y(x.size());
  for (std::size_t g = 0; g < groups; ++g) {
    double mean = 0, var = 0;
    for (std::size_t i = 0; i < gs; ++i) mean += x[g * gs + i];
    mean /= static_cast<double>(gs);
    for (std::size_t i = 0; i < gs; ++i) var += (x[g * gs + i] - mean) * (x[g * gs + i] - mean);
    var /= static_cast<double>(gs);
    for (std::size_t i = 0; i < gs; ++i) {
      const auto c = static_cast<Eigen::Index>(g * gs + i);
      y[g * gs + i] = (x[g * gs + i] - mean) / std::sqrt(var + 1e-5) * n.scale(c) + n.shift(c);
    }
  }
  return y;
}

Vec ref_silu(Vec x) {
  for (auto& v : x) v = v / (1 + std::exp(-v));
  return x;
}

Vec ref_block(const ResidualBlock<double>& b, const Vec& u, const Vec& residual, double t, std::size_t groups) {
  auto z = ref_linear(b.linear1, ref_silu(ref_group_norm(b.norm1, u, groups)));
  for (auto& v : z) v += t;
  auto out = ref_linear(b.linear2, ref_silu(ref_group_norm(b.norm2, z, groups)));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += residual[i];
  return out;
}

Vec ref_forward(const DenoiserConfig& cfg, const BasicDenoiserParams<double>& p, const Vec& x, double t) {
  auto h = ref_linear(p.input_proj, x);
  std::vector<Vec> skips;
  for (const auto& b : p.input_blocks) {
    h = ref_block(b, h, h, t, cfg.groupnorm_groups);
    skips.push_back(h);
  }
  for (std::size_t i = 0; i < p.output_blocks.size(); ++i) {
    const auto& s = skips[skips.size() - 1 - i];
    if (cfg.skip == SkipMode::Concat) {
      Vec u = h;
      u.insert(u.end(), s.begin(), s.end());
      h = ref_block(p.output_blocks[i], u, h, t, cfg.groupnorm_groups);
    } else {
      Vec u(h.size());
      for (std::size_t j = 0; j < h.size(); ++j) u[j] = h[j] + s[j];
      h = ref_block(p.output_blocks[i], u, u, t, cfg.groupnorm_groups);
    }
  }
  return ref_linear(p.output_proj, h);
}

RowMatrix<double> row(const Vec& v) {
  RowMatrix<double> m(1, static_cast<Eigen::Index>(v.size()));
  for (std::size_t i = 0; i < v.size(); ++i) m(0, static_cast<Eigen::Index>(i)) = v[i];
  return m;
}

double dot_output(const DenoiserConfig& cfg, const BasicDenoiserParams<double>& p, const RowMatrix<double>& x,
                  const std::vector<int>& ts, const RowMatrix<double>& g) {
  return (denoiser_forward<double>(cfg, p, x, ts).array() * g.array()).sum();
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

}  // namespace

TEST_CASE("default groupnorm groups keep several channels per group") {
  CHECK(default_groupnorm_groups(4) == 1);
  CHECK(default_groupnorm_groups(16) == 4);
  CHECK(default_groupnorm_groups(32) == 8);
  CHECK(default_groupnorm_groups(768) == 32);
  CHECK(default_groupnorm_groups(12) == 3);
}

TEST_CASE("config validation") {
  DenoiserConfig c;
  CHECK_THROWS_AS(c.resolved().validate(), DataError);
  c.input_dim = 16;
  CHECK_NOTHROW(c.resolved().validate());
  c.groupnorm_groups = 3;
  CHECK_THROWS_AS(c.resolved().validate(), DataError);
  c.groupnorm_groups = 0;
  c.n_output_blocks = 2;
  CHECK_THROWS_AS(c.resolved().validate(), DataError);
}

TEST_CASE("fresh network predicts exactly zero") {
  DenoiserConfig c;
  c.input_dim = 16;
  Rng r(1);
  MlpDenoiser net(c, init_params(c, r));
  CHECK(net.is_zero_output());
  const std::vector<float> x = {3, -1, 2, 0, 5, 5, 5, 5, 1, 1, 1, 1, -9, 0, 0, 7};
  for (int t : {1, 17, 1000}) {
    for (float v : net.forward(x, t)) CHECK(v == 0.0f);
  }
}

TEST_CASE("forward matches a scalar reference evaluation") {
  for (auto skip : {SkipMode::Concat, SkipMode::Add}) {
    const auto cfg = tiny(skip);
    const auto p = random_params(cfg, 9);
    const Vec x = {0.3, -1.2, 0.7, 2.0};
    const auto out = denoiser_forward<double>(cfg, p, row(x), std::vector<int>{7});
    const auto ref = ref_forward(cfg, p, x, 7.0);
    for (std::size_t i = 0; i < 4; ++i) CHECK(out(0, static_cast<Eigen::Index>(i)) == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("every gradient matches central finite differences") {
  for (auto skip : {SkipMode::Concat, SkipMode::Add}) {
    CAPTURE(to_string(skip));
    const auto cfg = tiny(skip);
    auto p = random_params(cfg, 21);
    Rng r(5);
    RowMatrix<double> x(3, 4), g(3, 4);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      x.data()[i] = r.normal();
      g.data()[i] = r.normal();
    }
    const std::vector<int> ts = {1, 4, 25};
    ForwardCache<double> cache;
    denoiser_forward<double>(cfg, p, x, ts, &cache);
    auto grads = BasicDenoiserParams<double>::zeros(cfg);
    const RowMatrix<double> dx = denoiser_backward<double>(cfg, p, cache, g, grads);

    const double h = 1e-5;
    std::vector<std::span<const double>> analytic;
    grads.for_each_tensor([&](const std::string&, std::span<const double> v, std::vector<std::size_t>) { analytic.push_back(v); });
    std::size_t k = 0;
    p.for_each_tensor([&](const std::string& role, std::span<double> v, std::vector<std::size_t>) {
      for (std::size_t i = 0; i < v.size(); ++i) {
        const double saved = v[i];
        v[i] = saved + h;
        const double up = dot_output(cfg, p, x, ts, g);
        v[i] = saved - h;
        const double down = dot_output(cfg, p, x, ts, g);
        v[i] = saved;
        const double fd = (up - down) / (2 * h);
        CAPTURE(role);
        CAPTURE(i);
        CHECK(rel_err(analytic[k][i], fd) < 1e-6);
      }
      ++k;
    });
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double saved = x.data()[i];
      x.data()[i] = saved + h;
      const double up = dot_output(cfg, p, x, ts, g);
      x.data()[i] = saved - h;
      const double down = dot_output(cfg, p, x, ts, g);
      x.data()[i] = saved;
      CHECK(rel_err(dx.data()[i], (up - down) / (2 * h)) < 1e-6);
    }
  }
}

TEST_CASE("backward is linear in the upstream gradient") {
  const auto cfg = tiny();
  const auto p = random_params(cfg, 3);
  RowMatrix<double> x = RowMatrix<double>::Random(5, 4);
  RowMatrix<double> g1 = RowMatrix<double>::Random(5, 4), g2 = RowMatrix<double>::Random(5, 4);
  const std::vector<int> ts = {2};
  ForwardCache<double> cache;
  denoiser_forward<double>(cfg, p, x, ts, &cache);

  auto a = BasicDenoiserParams<double>::zeros(cfg), b = a, sum = a, zero = a;
  const auto dxa = denoiser_backward<double>(cfg, p, cache, g1, a);
  const auto dxb = denoiser_backward<double>(cfg, p, cache, g2, b);
  const auto dxs = denoiser_backward<double>(cfg, p, cache, g1 + g2, sum);
  CHECK((dxa + dxb - dxs).cwiseAbs().maxCoeff() < 1e-12);

  std::vector<double> va, vb, vs;
  a.for_each_tensor([&](const std::string&, std::span<const double> v, std::vector<std::size_t>) { va.insert(va.end(), v.begin(), v.end()); });
  b.for_each_tensor([&](const std::string&, std::span<const double> v, std::vector<std::size_t>) { vb.insert(vb.end(), v.begin(), v.end()); });
  sum.for_each_tensor([&](const std::string&, std::span<const double> v, std::vector<std::size_t>) { vs.insert(vs.end(), v.begin(), v.end()); });
  for (std::size_t i = 0; i < vs.size(); ++i) CHECK(va[i] + vb[i] == doctest::Approx(vs[i]).epsilon(1e-10));

  const auto dx0 = denoiser_backward<double>(cfg, p, cache, RowMatrix<double>::Zero(5, 4), zero);
  CHECK(dx0.cwiseAbs().maxCoeff() == 0.0);
  zero.for_each_tensor([&](const std::string&, std::span<const double> v, std::vector<std::size_t>) {
    for (double d : v) CHECK(d == 0.0);
  });
}

TEST_CASE("batched forward equals per-row forwards and respects permutation") {
  DenoiserConfig c;
  c.input_dim = 8;
  c = c.resolved();
  const auto p = random_params(c, 4, 0.3).cast<float>();
  MlpDenoiser net(c, p);
  Rng r(2);
  FloatMatrix x(6, 8);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = static_cast<float>(r.normal());
  const std::vector<int> ts = {1, 2, 3, 4, 5, 6};
  const FloatMatrix batched = net.predict(x, ts);
  for (Eigen::Index i = 0; i < 6; ++i) {
    const auto single = net.forward(std::span<const float>(x.row(i).data(), 8), ts[static_cast<std::size_t>(i)]);
    for (Eigen::Index j = 0; j < 8; ++j) CHECK(single[static_cast<std::size_t>(j)] == doctest::Approx(batched(i, j)).epsilon(1e-5));
  }
  std::vector<Eigen::Index> perm = {3, 0, 5, 1, 4, 2};
  FloatMatrix xp(6, 8);
  std::vector<int> tp(6);
  for (std::size_t i = 0; i < 6; ++i) {
    xp.row(static_cast<Eigen::Index>(i)) = x.row(perm[i]);
    tp[i] = ts[static_cast<std::size_t>(perm[i])];
  }
  const FloatMatrix permuted = net.predict(xp, tp);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK((permuted.row(static_cast<Eigen::Index>(i)) - batched.row(perm[i])).cwiseAbs().maxCoeff() < 1e-5f);
  }
  CHECK((net.predict(x, ts) - batched).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("group norm is invariant to positive input scaling") {
  NormLayer<double> layer{ColVector<double>::Ones(8), ColVector<double>::Zero(8)};
  RowMatrix<double> x = RowMatrix<double>::Random(3, 8) * 10.0;
  const auto a = group_norm<double>(x, layer, 2);
  const auto b = group_norm<double>(x * 7.5, layer, 2);
  // eps makes the invariance approximate
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-6);
  // each group has zero mean
  CHECK(std::abs(a.row(0).head(4).sum()) < 1e-9);
}

TEST_CASE("shape errors") {
  DenoiserConfig c;
  c.input_dim = 4;
  Rng r(1);
  MlpDenoiser net(c, init_params(c, r));
  CHECK_THROWS_AS(net.forward(std::vector<float>(3), 1), DataError);
  CHECK_THROWS_AS(net.forward(std::vector<float>(4), 0), DataError);
  FloatMatrix x(3, 4);
  x.setZero();
  CHECK_THROWS_AS(net.predict(x, std::vector<int>{1, 2}), DataError);
  DenoiserConfig other = c;
  other.hidden_dim = 8;
  CHECK_THROWS_AS(MlpDenoiser(other, init_params(c, r)), DataError);
}
