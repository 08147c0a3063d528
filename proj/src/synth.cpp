#include "dood/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

#include "dood/errors.hpp"

namespace dood {

void GmmSpec::validate() const {
  if (dim == 0) throw DataError("mixture dimension must be >= 1");
  if (components.empty()) throw DataError("mixture needs at least one component");
  double total = 0.0;
  for (const auto& c : components) {
    if (!(c.weight > 0.0)) throw DataError("mixture weights must be positive");
    if (c.mean.size() != dim || c.cov_diag.size() != dim) throw DataError("mixture component has wrong dimension");
    for (double v : c.cov_diag) {
      if (!(v > 0.0)) throw DataError("mixture covariances must be positive");
    }
    total += c.weight;
  }
  if (std::abs(total - 1.0) > 1e-12) throw DataError("mixture weights must sum to 1");
}

GmmSpec GmmSpec::affine(std::span<const double> scale, std::span<const double> offset) const {
  if (scale.size() != dim || offset.size() != dim) throw DataError("affine map has wrong dimension");
  GmmSpec out = *this;
  for (auto& comp : out.components) {
    for (std::size_t c = 0; c < dim; ++c) {
      comp.mean[c] = scale[c] * comp.mean[c] + offset[c];
      comp.cov_diag[c] *= scale[c] * scale[c];
    }
  }
  return out;
}

GmmSpec GmmSpec::normalized(const DatasetStats& stats) const {
  if (stats.channels() != dim) throw DataError("stats and mixture disagree on channel count");
  std::vector<double> scale(dim), offset(dim);
  for (std::size_t c = 0; c < dim; ++c) {
    scale[c] = stats.channel_scale(c);
    offset[c] = stats.channel_offset(c);
  }
  return affine(scale, offset);
}

FloatMatrix sample_gmm(const GmmSpec& spec, std::size_t n, Rng& rng) {
  spec.validate();
  FloatMatrix out(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(spec.dim));
  for (std::size_t i = 0; i < n; ++i) {
    const double u = rng.uniform();
    std::size_t k = 0;
    double acc = spec.components[0].weight;
    while (u >= acc && k + 1 < spec.components.size()) acc += spec.components[++k].weight;
    const auto& comp = spec.components[k];
    for (std::size_t c = 0; c < spec.dim; ++c) {
      out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) =
          static_cast<float>(comp.mean[c] + std::sqrt(comp.cov_diag[c]) * rng.normal());
    }
  }
  return out;
}

namespace {

struct DiffusedComponent {
  double log_weight;
  std::vector<double> mean;
  std::vector<double> var;
};

std::vector<DiffusedComponent> diffuse(const GmmSpec& spec, int t, const NoiseSchedule& sched) {
  const double abar = sched.alpha_bar(t);
  const double root = std::sqrt(abar);
  std::vector<DiffusedComponent> out;
  out.reserve(spec.components.size());
  for (const auto& comp : spec.components) {
    DiffusedComponent d{std::log(comp.weight), std::vector<double>(spec.dim), std::vector<double>(spec.dim)};
    for (std::size_t c = 0; c < spec.dim; ++c) {
      d.mean[c] = root * comp.mean[c];
      d.var[c] = abar * comp.cov_diag[c] + (1.0 - abar);
    }
    out.push_back(std::move(d));
  }
  return out;
}

// log w_k + log N_k(x) for every component
std::vector<double> joint_log_terms(const std::vector<DiffusedComponent>& comps, std::span<const double> x) {
  std::vector<double> terms;
  terms.reserve(comps.size());
  for (const auto& d : comps) {
    double acc = d.log_weight;
    for (std::size_t c = 0; c < x.size(); ++c) {
      const double diff = x[c] - d.mean[c];
      acc -= 0.5 * (diff * diff / d.var[c] + std::log(2.0 * std::numbers::pi * d.var[c]));
    }
    terms.push_back(acc);
  }
  return terms;
}

double log_sum_exp(const std::vector<double>& v) {
  const double m = *std::max_element(v.begin(), v.end());
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

std::vector<double> score_from(const std::vector<DiffusedComponent>& comps, std::span<const double> x) {
  const auto terms = joint_log_terms(comps, x);
  const double lse = log_sum_exp(terms);
  std::vector<double> score(x.size(), 0.0);
  for (std::size_t k = 0; k < comps.size(); ++k) {
    const double r = std::exp(terms[k] - lse);
    for (std::size_t c = 0; c < x.size(); ++c) score[c] -= r * (x[c] - comps[k].mean[c]) / comps[k].var[c];
  }
  return score;
}

void check_point(const GmmSpec& spec, std::span<const double> x_t) {
  if (x_t.size() != spec.dim) throw DataError("probe point has wrong dimension");
}

}  // namespace

double smoothed_gmm_log_density(const GmmSpec& spec, std::span<const double> x_t, int t, const NoiseSchedule& sched) {
  check_point(spec, x_t);
  return log_sum_exp(joint_log_terms(diffuse(spec, t, sched), x_t));
}

std::vector<double> smoothed_gmm_score(const GmmSpec& spec, std::span<const double> x_t, int t,
                                       const NoiseSchedule& sched) {
  check_point(spec, x_t);
  return score_from(diffuse(spec, t, sched), x_t);
}

std::vector<double> oracle_eps(const GmmSpec& spec, std::span<const double> x_t, int t, const NoiseSchedule& sched) {
  auto s = smoothed_gmm_score(spec, x_t, t, sched);
  const double sigma = sched.sigma(t);
  for (auto& v : s) v *= -sigma;
  return s;
}

GmmOracle::GmmOracle(GmmSpec spec, NoiseSchedule sched) : spec_(std::move(spec)), sched_(std::move(sched)) {
  spec_.validate();
}

FloatMatrix GmmOracle::predict(const FloatMatrix& x_t, std::span<const int> timesteps) const {
  if (static_cast<std::size_t>(x_t.cols()) != spec_.dim) throw DataError("oracle input has wrong dimension");
  if (timesteps.size() != 1 && static_cast<Eigen::Index>(timesteps.size()) != x_t.rows()) {
    throw DataError("timesteps must have one entry or one per row");
  }
  FloatMatrix out(x_t.rows(), x_t.cols());
  std::vector<double> x(spec_.dim);
  int cached_t = -1;
  std::vector<DiffusedComponent> comps;
  for (Eigen::Index r = 0; r < x_t.rows(); ++r) {
    const int t = timesteps.size() == 1 ? timesteps[0] : timesteps[static_cast<std::size_t>(r)];
    if (t != cached_t) {
      comps = diffuse(spec_, t, sched_);
      cached_t = t;
    }
    for (std::size_t c = 0; c < spec_.dim; ++c) x[c] = x_t(r, static_cast<Eigen::Index>(c));
    const auto s = score_from(comps, x);
    const double sigma = sched_.sigma(t);
    for (std::size_t c = 0; c < spec_.dim; ++c) out(r, static_cast<Eigen::Index>(c)) = static_cast<float>(-sigma * s[c]);
  }
  return out;
}

namespace {

FeatureMap map_from_rows(const FloatMatrix& rows, std::size_t height, std::size_t width) {
  FeatureMap m;
  m.height = height;
  m.width = width;
  m.channels = static_cast<std::size_t>(rows.cols());
  m.values.assign(rows.data(), rows.data() + rows.size());
  return m;
}

}  // namespace

std::vector<FeatureMap> make_inlier_maps(const GmmSpec& spec, std::size_t n_maps, std::size_t height,
                                         std::size_t width, Rng& rng) {
  if (height == 0 || width == 0) throw DataError("map dimensions must be >= 1");
  const std::uint64_t base = rng.next_u64();
  std::vector<FeatureMap> maps;
  maps.reserve(n_maps);
  for (std::size_t i = 0; i < n_maps; ++i) {
    Rng local = Rng::stream(base, i);
    maps.push_back(map_from_rows(sample_gmm(spec, height * width, local), height, width));
  }
  return maps;
}

SyntheticBenchmark make_synthetic_benchmark(const GmmSpec& spec_in, std::span<const double> ood_mean,
                                            std::size_t n_maps, std::size_t height, std::size_t width,
                                            double ood_fraction, Rng& rng) {
  spec_in.validate();
  if (ood_mean.size() != spec_in.dim) throw DataError("OoD mean has wrong dimension");
  if (height == 0 || width == 0) throw DataError("map dimensions must be >= 1");
  if (!(ood_fraction > 0.0) || !(ood_fraction < 1.0)) throw DataError("ood_fraction must be in (0, 1)");
  const double target = ood_fraction * static_cast<double>(height * width);
  const auto area = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(target)));
  // near-square rectangle, flattened against the border of narrow maps
  auto rect_h =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(area)))), 1, height);
  auto rect_w = (area + rect_h - 1) / rect_h;
  if (rect_w > width) {
    rect_w = width;
    rect_h = std::min(height, (area + width - 1) / width);
  }

  const std::uint64_t base = rng.next_u64();
  SyntheticBenchmark out;
  for (std::size_t i = 0; i < n_maps; ++i) {
    Rng local = Rng::stream(base, i);
    FloatMatrix rows = sample_gmm(spec_in, height * width, local);
    const auto top = static_cast<std::size_t>(local.below(height - rect_h + 1));
    const auto left = static_cast<std::size_t>(local.below(width - rect_w + 1));
    OoDMask mask;
    mask.height = height;
    mask.width = width;
    mask.labels.assign(height * width, kMaskInlier);
    for (std::size_t y = top; y < top + rect_h; ++y) {
      for (std::size_t x = left; x < left + rect_w; ++x) {
        const std::size_t idx = y * width + x;
        mask.labels[idx] = kMaskOoD;
        for (std::size_t c = 0; c < spec_in.dim; ++c) {
          rows(static_cast<Eigen::Index>(idx), static_cast<Eigen::Index>(c)) =
              static_cast<float>(ood_mean[c] + local.normal());
        }
      }
    }
    out.maps.push_back(map_from_rows(rows, height, width));
    out.masks.push_back(std::move(mask));
  }
  return out;
}

StandardBenchmarkSpec standard_benchmark_spec(double component_std) {
  constexpr std::size_t dim = StandardBenchmarkSpec::kDim;
  // Orthonormal u, v with u_c^2 + v_c^2 equal for every channel, so every channel
  // sees the same spread of component means.
  std::vector<double> u(dim), v(dim);
  for (std::size_t c = 0; c < dim; ++c) {
    const double phi = std::numbers::pi * static_cast<double>(c) / static_cast<double>(dim);
    u[c] = std::cos(phi) / std::sqrt(dim / 2.0);
    v[c] = std::sin(phi) / std::sqrt(dim / 2.0);
  }
  const double radius = StandardBenchmarkSpec::kSide / std::sqrt(3.0);
  StandardBenchmarkSpec s;
  s.inliers.dim = dim;
  for (int k = 0; k < 3; ++k) {
    const double theta = 2.0 * std::numbers::pi * k / 3.0;
    GmmComponent comp;
    comp.weight = 1.0 / 3.0;
    comp.mean.resize(dim);
    comp.cov_diag.assign(dim, component_std * component_std);
    for (std::size_t c = 0; c < dim; ++c) comp.mean[c] = radius * (std::cos(theta) * u[c] + std::sin(theta) * v[c]);
    s.inliers.components.push_back(std::move(comp));
  }
  // renormalize weights so they sum to exactly 1 in double
  s.inliers.components[2].weight = 1.0 - s.inliers.components[0].weight - s.inliers.components[1].weight;

  // OoD direction: the all-ones vector with its in-plane part removed.
  std::vector<double> w(dim, 1.0);
  double dot_u = 0.0, dot_v = 0.0;
  for (std::size_t c = 0; c < dim; ++c) {
    dot_u += w[c] * u[c];
    dot_v += w[c] * v[c];
  }
  double norm = 0.0;
  for (std::size_t c = 0; c < dim; ++c) {
    w[c] -= dot_u * u[c] + dot_v * v[c];
    norm += w[c] * w[c];
  }
  norm = std::sqrt(norm);
  const double height = std::sqrt(StandardBenchmarkSpec::kOodDistance * StandardBenchmarkSpec::kOodDistance -
                                  radius * radius);
  s.ood_mean.resize(dim);
  for (std::size_t c = 0; c < dim; ++c) s.ood_mean[c] = height * w[c] / norm;
  return s;
}

}  // namespace dood
