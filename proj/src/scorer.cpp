#include "dood/scorer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dood/errors.hpp"

namespace dood {

const char* to_string(ScoreKind kind) {
  switch (kind) {
    case ScoreKind::Directional: return "directional";
    case ScoreKind::MseScore: return "mse-score";
    case ScoreKind::MseRecon: return "mse-recon";
  }
  return "?";
}

ScoreKind parse_score_kind(const std::string& s) {
  if (s == "directional") return ScoreKind::Directional;
  if (s == "mse-score" || s == "mse_score") return ScoreKind::MseScore;
  if (s == "mse-recon" || s == "mse_recon") return ScoreKind::MseRecon;
  throw DataError("unknown score kind '" + s + "' (expected directional|mse-score|mse-recon)");
}

std::vector<int> ScoreConfig::default_timesteps() {
  std::vector<int> ts(25);
  for (int i = 0; i < 25; ++i) ts[static_cast<std::size_t>(i)] = i + 1;
  return ts;
}

void ScoreConfig::validate(const NoiseSchedule& sched) const {
  if (timesteps.empty()) throw DataError("at least one scoring timestep is required");
  for (int t : timesteps) {
    if (!sched.contains(t)) {
      throw DataError("scoring timestep " + std::to_string(t) + " outside [1, " + std::to_string(sched.steps()) + "]");
    }
  }
  if (samples_per_timestep < 1) throw DataError("samples_per_timestep must be >= 1");
  if (kind != ScoreKind::Directional && timesteps.size() != 1) {
    throw DataError(std::string(to_string(kind)) + " scores are defined for a single timestep only");
  }
}

std::vector<int> parse_timesteps(const std::string& text) {
  auto parse_int = [&](const std::string& s) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(s, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used != s.size() || s.empty()) throw DataError("bad timestep list '" + text + "'");
    return v;
  };
  std::vector<int> out;
  if (const auto dots = text.find(".."); dots != std::string::npos) {
    const int lo = parse_int(text.substr(0, dots));
    const int hi = parse_int(text.substr(dots + 2));
    if (lo > hi) throw DataError("empty timestep range '" + text + "'");
    for (int t = lo; t <= hi; ++t) out.push_back(t);
    return out;
  }
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto comma = text.find(',', start);
    out.push_back(parse_int(text.substr(start, comma == std::string::npos ? std::string::npos : comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

ScoreMap ScoreMap::constant(std::size_t h, std::size_t w, float value, Resolution res) {
  ScoreMap m;
  m.height = h;
  m.width = w;
  m.values.assign(h * w, value);
  m.resolution = res;
  return m;
}

ScoreMap ScoreMap::from_tensor(const DenseTensor& t, Resolution res) {
  if (t.dtype() != DType::Float32 || t.rank() != 2) throw DataError("score map must be a rank-2 float32 tensor");
  ScoreMap m;
  m.height = t.dim(0);
  m.width = t.dim(1);
  auto v = t.floats();
  m.values.assign(v.begin(), v.end());
  for (float x : m.values) {
    if (!std::isfinite(x)) throw DataError("score map contains non-finite values");
  }
  m.resolution = res;
  return m;
}

DenseTensor ScoreMap::to_tensor() const { return DenseTensor::from_floats({height, width}, values); }

DirectionalScore directional_score(std::span<const float> eps_hat, std::span<const float> eps) {
  if (eps_hat.size() != eps.size()) throw DataError("directional_score: length mismatch");
  double dot = 0.0, nh = 0.0, ne = 0.0;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    dot += static_cast<double>(eps_hat[i]) * eps[i];
    nh += static_cast<double>(eps_hat[i]) * eps_hat[i];
    ne += static_cast<double>(eps[i]) * eps[i];
  }
  nh = std::sqrt(nh);
  ne = std::sqrt(ne);
  if (nh < kDegenerateNorm || ne < kDegenerateNorm) return {0.0f, true};
  const double cos = std::clamp(dot / (nh * ne), -1.0, 1.0);
  return {static_cast<float>(-cos), false};
}

float mse_score(std::span<const float> eps_hat, std::span<const float> eps) {
  if (eps_hat.size() != eps.size()) throw DataError("mse_score: length mismatch");
  if (eps.empty()) throw DataError("mse_score: empty vectors");
  double acc = 0.0;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const double d = static_cast<double>(eps_hat[i]) - eps[i];
    acc += d * d;
  }
  return static_cast<float>(acc / static_cast<double>(eps.size()));
}

namespace {

using DoubleMatrix = RowMatrix<double>;

constexpr std::uint64_t kReverseNoiseTag = 1ull << 32;
constexpr Eigen::Index kMaxBatchRows = 1 << 16;

// Runs the ancestral reverse chain from x_t down to x0_hat. `draw` fills a matrix with
// standard normals for the stochastic steps s > 1.
template <typename DrawFn>
DoubleMatrix reverse_chain(const NoisePredictor& model, DoubleMatrix x, int t, const NoiseSchedule& sched,
                           DrawFn&& draw) {
  DoubleMatrix z(x.rows(), x.cols());
  for (int s = t; s >= 1; --s) {
    const int ts[1] = {s};
    const FloatMatrix eps_hat = model.predict(x.cast<float>(), ts);
    const double coef = sched.beta(s) / sched.sigma(s);
    x = (x - coef * eps_hat.cast<double>()) / std::sqrt(sched.alpha(s));
    if (s > 1) {
      draw(z);
      x += std::sqrt(sched.posterior_variance(s)) * z;
    }
    if (!x.allFinite()) throw NumericalError("non-finite state in reverse diffusion at step " + std::to_string(s));
  }
  return x;
}

void fill_normal(DoubleMatrix& m, Rng& rng) {
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
}

}  // namespace

float recon_score(const NoisePredictor& model, std::span<const float> x0, int t, const NoiseSchedule& sched, Rng& rng) {
  if (!sched.contains(t)) throw DataError("recon_score: timestep " + std::to_string(t) + " out of range");
  if (x0.size() != model.dim()) throw DataError("recon_score: dimension mismatch");
  const auto eps = sample_noise(x0.size(), rng);
  const auto xt = forward_diffuse(x0, t, eps, sched);
  DoubleMatrix x(1, static_cast<Eigen::Index>(x0.size()));
  for (std::size_t c = 0; c < x0.size(); ++c) x(0, static_cast<Eigen::Index>(c)) = xt[c];
  const DoubleMatrix x0_hat = reverse_chain(model, std::move(x), t, sched, [&](DoubleMatrix& z) { fill_normal(z, rng); });
  double acc = 0.0;
  for (std::size_t c = 0; c < x0.size(); ++c) {
    const double d = x0_hat(0, static_cast<Eigen::Index>(c)) - x0[c];
    acc += d * d;
  }
  return static_cast<float>(acc / static_cast<double>(x0.size()));
}

std::vector<ScoreMap> per_timestep_maps(const FeatureMap& fmap, const NoisePredictor& model,
                                        const NoiseSchedule& sched, const ScoreConfig& cfg,
                                        const DatasetStats& stats, std::uint64_t image_key) {
  if (cfg.timesteps.empty()) throw DataError("at least one scoring timestep is required");
  for (int t : cfg.timesteps) {
    if (!sched.contains(t)) throw DataError("scoring timestep " + std::to_string(t) + " out of range");
  }
  if (cfg.samples_per_timestep < 1) throw DataError("samples_per_timestep must be >= 1");
  if (fmap.channels != model.dim()) {
    throw DataError("feature map has " + std::to_string(fmap.channels) + " channels but the model expects " +
                    std::to_string(model.dim()));
  }
  const FloatMatrix x0 = normalize_map(fmap, stats);
  const Eigen::Index n = x0.rows();
  const Eigen::Index dim = x0.cols();
  const std::size_t n_t = cfg.timesteps.size();
  const auto samples = static_cast<std::size_t>(cfg.samples_per_timestep);

  std::vector<ScoreMap> maps(n_t, ScoreMap::constant(fmap.height, fmap.width, 0.0f));
  std::vector<std::vector<double>> acc(n_t, std::vector<double>(static_cast<std::size_t>(n), 0.0));

  auto draw_eps = [&](int t, std::size_t s) {
    FloatMatrix eps(n, dim);
    Rng rng = Rng::stream(cfg.noise_seed, image_key, static_cast<std::uint64_t>(t), s);
    rng.fill_normal(std::span<float>(eps.data(), static_cast<std::size_t>(eps.size())));
    return eps;
  };
  auto perturb = [&](const FloatMatrix& eps, int t) {
    const auto signal = static_cast<float>(std::sqrt(sched.alpha_bar(t)));
    const auto noise = static_cast<float>(sched.sigma(t));
    return FloatMatrix(signal * x0 + noise * eps);
  };

  if (cfg.kind == ScoreKind::MseRecon) {
    for (std::size_t ti = 0; ti < n_t; ++ti) {
      const int t = cfg.timesteps[ti];
      for (std::size_t s = 0; s < samples; ++s) {
        const FloatMatrix xt = perturb(draw_eps(t, s), t);
        Rng reverse_rng = Rng::stream(cfg.noise_seed, image_key, static_cast<std::uint64_t>(t), kReverseNoiseTag + s);
        const DoubleMatrix x0_hat = reverse_chain(model, xt.cast<double>(), t, sched,
                                                  [&](DoubleMatrix& z) { fill_normal(z, reverse_rng); });
        const DoubleMatrix diff = x0_hat - x0.cast<double>();
        for (Eigen::Index r = 0; r < n; ++r) {
          acc[ti][static_cast<std::size_t>(r)] += diff.row(r).squaredNorm() / static_cast<double>(dim);
        }
      }
    }
  } else {
    // All (timestep, vector) pairs go through the model in as few batches as the row cap allows.
    const auto per_chunk = std::max<std::size_t>(1, static_cast<std::size_t>(kMaxBatchRows / std::max<Eigen::Index>(n, 1)));
    for (std::size_t s = 0; s < samples; ++s) {
      for (std::size_t first = 0; first < n_t; first += per_chunk) {
        const std::size_t last = std::min(n_t, first + per_chunk);
        const auto rows = static_cast<Eigen::Index>(last - first) * n;
        FloatMatrix xt(rows, dim), eps(rows, dim);
        std::vector<int> ts(static_cast<std::size_t>(rows));
        for (std::size_t ti = first; ti < last; ++ti) {
          const int t = cfg.timesteps[ti];
          const auto off = static_cast<Eigen::Index>(ti - first) * n;
          eps.middleRows(off, n) = draw_eps(t, s);
          xt.middleRows(off, n) = perturb(eps.middleRows(off, n), t);
          std::fill(ts.begin() + off, ts.begin() + off + n, t);
        }
        const FloatMatrix eps_hat = model.predict(xt, ts);
        for (std::size_t ti = first; ti < last; ++ti) {
          const auto off = static_cast<Eigen::Index>(ti - first) * n;
          for (Eigen::Index r = 0; r < n; ++r) {
            const std::span<const float> a(eps_hat.row(off + r).data(), static_cast<std::size_t>(dim));
            const std::span<const float> b(eps.row(off + r).data(), static_cast<std::size_t>(dim));
            if (cfg.kind == ScoreKind::Directional) {
              const auto d = directional_score(a, b);
              if (d.degenerate) ++maps[ti].degenerate;
              acc[ti][static_cast<std::size_t>(r)] += d.value;
            } else {
              acc[ti][static_cast<std::size_t>(r)] += mse_score(a, b);
            }
          }
        }
      }
    }
  }
  for (std::size_t ti = 0; ti < n_t; ++ti) {
    for (Eigen::Index r = 0; r < n; ++r) {
      const double v = acc[ti][static_cast<std::size_t>(r)] / static_cast<double>(samples);
      if (!std::isfinite(v)) throw NumericalError("non-finite OoD score");
      maps[ti].values[static_cast<std::size_t>(r)] = static_cast<float>(v);
    }
  }
  return maps;
}

ScoreMap aggregate_timesteps(std::span<const ScoreMap> maps, std::span<const int> timesteps,
                             const NoiseSchedule& sched) {
  if (maps.empty() || maps.size() != timesteps.size()) throw DataError("one score map per timestep is required");
  ScoreMap out = ScoreMap::constant(maps[0].height, maps[0].width, 0.0f, maps[0].resolution);
  std::vector<double> acc(out.values.size(), 0.0);
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (maps[i].height != out.height || maps[i].width != out.width) throw DataError("score map shapes differ");
    const double w = sched.sigma(timesteps[i]);
    for (std::size_t p = 0; p < acc.size(); ++p) acc[p] += w * maps[i].values[p];
    out.degenerate += maps[i].degenerate;
  }
  for (std::size_t p = 0; p < acc.size(); ++p) out.values[p] = static_cast<float>(acc[p]);
  return out;
}

ScoreMap score_feature_map(const FeatureMap& fmap, const NoisePredictor& model, const NoiseSchedule& sched,
                           const ScoreConfig& cfg, const DatasetStats& stats, std::uint64_t image_key) {
  cfg.validate(sched);
  auto maps = per_timestep_maps(fmap, model, sched, cfg, stats, image_key);
  if (cfg.kind != ScoreKind::Directional) return std::move(maps.front());
  return aggregate_timesteps(maps, cfg.timesteps, sched);
}

ScoreMap upsample_scores(const ScoreMap& map, std::size_t target_h, std::size_t target_w) {
  if (map.height == 0 || map.width == 0) throw DataError("cannot upsample an empty score map");
  if (target_h < map.height || target_w < map.width) {
    throw DataError("upsample target " + std::to_string(target_h) + "x" + std::to_string(target_w) +
                    " is smaller than the score map");
  }
  auto coords = [](std::size_t out_size, std::size_t in_size) {
    struct Tap {
      std::size_t lo, hi;
      double frac;
    };
    std::vector<Tap> taps(out_size);
    const double ratio = static_cast<double>(in_size) / static_cast<double>(out_size);
    for (std::size_t o = 0; o < out_size; ++o) {
      const double src = std::max(0.0, (static_cast<double>(o) + 0.5) * ratio - 0.5);
      const auto lo = std::min(static_cast<std::size_t>(src), in_size - 1);
      taps[o] = {lo, std::min(lo + 1, in_size - 1), src - static_cast<double>(lo)};
    }
    return taps;
  };
  const auto ty = coords(target_h, map.height);
  const auto tx = coords(target_w, map.width);
  ScoreMap out = ScoreMap::constant(target_h, target_w, 0.0f, Resolution::Pixel);
  out.degenerate = map.degenerate;
  auto at = [&](std::size_t y, std::size_t x) { return static_cast<double>(map.values[y * map.width + x]); };
  for (std::size_t y = 0; y < target_h; ++y) {
    for (std::size_t x = 0; x < target_w; ++x) {
      const auto& a = ty[y];
      const auto& b = tx[x];
      const double top = (1.0 - b.frac) * at(a.lo, b.lo) + b.frac * at(a.lo, b.hi);
      const double bottom = (1.0 - b.frac) * at(a.hi, b.lo) + b.frac * at(a.hi, b.hi);
      out.values[y * target_w + x] = static_cast<float>((1.0 - a.frac) * top + a.frac * bottom);
    }
  }
  return out;
}

ScoreMap logsumexp_uncertainty(const DenseTensor& logits) {
  if (logits.dtype() != DType::Float32 || logits.rank() != 3) {
    throw DataError("logits must be a rank-3 float32 tensor [H, W, K]");
  }
  const std::size_t h = logits.dim(0), w = logits.dim(1), k = logits.dim(2);
  if (k < 2) throw DataError("logits need at least two classes");
  const auto v = logits.floats();
  ScoreMap out = ScoreMap::constant(h, w, 0.0f);
  for (std::size_t p = 0; p < h * w; ++p) {
    const auto row = v.subspan(p * k, k);
    double m = -std::numeric_limits<double>::infinity();
    for (float x : row) {
      if (!std::isfinite(x)) throw DataError("logits contain non-finite values");
      m = std::max(m, static_cast<double>(x));
    }
    double s = 0.0;
    for (float x : row) s += std::exp(static_cast<double>(x) - m);
    out.values[p] = static_cast<float>(-(m + std::log(s)));
  }
  return out;
}

ScoreMap compound(const ScoreMap& diff, const ScoreMap& unc, const DatasetStats& stats) {
  if (diff.height != unc.height || diff.width != unc.width) {
    throw DataError("compound: diffusion map is " + std::to_string(diff.height) + "x" + std::to_string(diff.width) +
                    " but uncertainty map is " + std::to_string(unc.height) + "x" + std::to_string(unc.width));
  }
  if (!(stats.score_std_diff > 0.0) || !(stats.score_std_unc > 0.0)) {
    throw DataError("compound: score standard deviations must be positive");
  }
  ScoreMap out = diff;
  for (std::size_t p = 0; p < out.values.size(); ++p) {
    const double zd = (diff.values[p] - stats.score_mean_diff) / stats.score_std_diff;
    const double zu = (unc.values[p] - stats.score_mean_unc) / stats.score_std_unc;
    out.values[p] = static_cast<float>(0.5 * (zd + zu));
  }
  return out;
}

DenseTensor heatmap(const ScoreMap& map) {
  const auto [lo_it, hi_it] = std::minmax_element(map.values.begin(), map.values.end());
  const double lo = *lo_it, hi = *hi_it;
  std::vector<std::uint8_t> bytes(map.values.size(), 0);
  if (hi > lo) {
    for (std::size_t p = 0; p < bytes.size(); ++p) {
      bytes[p] = static_cast<std::uint8_t>(std::lround(255.0 * (map.values[p] - lo) / (hi - lo)));
    }
  }
  return DenseTensor::from_bytes({map.height, map.width}, std::move(bytes));
}

}  // namespace dood
