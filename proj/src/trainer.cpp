#include "dood/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <string>
#include <thread>

#include "dood/errors.hpp"
#include "dood/rng.hpp"

namespace dood {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw DataError("learning rate must be > 0");
  if (batch_size == 0) throw DataError("batch size must be >= 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw DataError("Adam decay rates must lie in [0, 1)");
  }
  if (!(epsilon > 0.0)) throw DataError("Adam epsilon must be > 0");
  if (threads == 0) throw DataError("threads must be >= 1");
}

AdamOptimizer::AdamOptimizer(const TrainConfig& cfg, std::size_t num_values)
    : lr_(cfg.learning_rate), beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.epsilon), m_(num_values), v_(num_values) {}

void AdamOptimizer::step(DenoiserParams& params, const ParamGrads& grads) {
  ++step_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));

  std::vector<std::span<const float>> g;
  grads.for_each_tensor([&](const std::string&, std::span<const float> vals, std::vector<std::size_t>) { g.push_back(vals); });

  std::size_t k = 0, offset = 0;
  params.for_each_tensor([&](const std::string&, std::span<float> vals, std::vector<std::size_t>) {
    const auto& gk = g.at(k++);
    for (std::size_t i = 0; i < vals.size(); ++i) {
      const double gi = gk[i];
      double& m = m_[offset + i];
      double& v = v_[offset + i];
      m = beta1_ * m + (1.0 - beta1_) * gi;
      v = beta2_ * v + (1.0 - beta2_) * gi * gi;
      const double update = lr_ * (m / c1) / (std::sqrt(v / c2) + eps_);
      vals[i] = static_cast<float>(static_cast<double>(vals[i]) - update);
    }
    offset += vals.size();
  });
}

namespace {

void zero_grads(ParamGrads& grads) {
  grads.for_each_tensor([](const std::string&, std::span<float> vals, std::vector<std::size_t>) {
    std::fill(vals.begin(), vals.end(), 0.0f);
  });
}

void add_grads(ParamGrads& into, const ParamGrads& from) {
  std::vector<std::span<const float>> src;
  from.for_each_tensor([&](const std::string&, std::span<const float> vals, std::vector<std::size_t>) { src.push_back(vals); });
  std::size_t k = 0;
  into.for_each_tensor([&](const std::string&, std::span<float> vals, std::vector<std::size_t>) {
    const auto& s = src[k++];
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] += s[i];
  });
}

struct ShardOutput {
  double sq_sum = 0.0;
  ParamGrads grads;
};

// Rows per forward/backward pass; small enough that a pass stays in cache.
constexpr Eigen::Index kChunkRows = 256;

void run_shard(const DenoiserConfig& net, const DenoiserParams& params, const FloatMatrix& x_t,
               std::span<const int> timesteps, const FloatMatrix& eps, Eigen::Index begin, Eigen::Index rows,
               float grad_scale, ShardOutput& out) {
  ForwardCache<float> cache;
  for (Eigen::Index off = begin; off < begin + rows; off += kChunkRows) {
    const Eigen::Index n = std::min(kChunkRows, begin + rows - off);
    const FloatMatrix xs = x_t.middleRows(off, n);
    const auto ts = timesteps.size() == 1
                        ? timesteps
                        : timesteps.subspan(static_cast<std::size_t>(off), static_cast<std::size_t>(n));
    FloatMatrix diff = denoiser_forward<float>(net, params, xs, ts, &cache);
    diff -= eps.middleRows(off, n);
    out.sq_sum += diff.cast<double>().squaredNorm();
    diff *= grad_scale;
    denoiser_backward<float>(net, params, cache, diff, out.grads);
  }
}

}  // namespace

float batch_loss_and_grad(const DenoiserConfig& raw, const DenoiserParams& params, const FloatMatrix& x_t,
                          std::span<const int> timesteps, const FloatMatrix& eps, ParamGrads& grads,
                          std::size_t threads) {
  const auto net = raw.resolved();
  if (x_t.rows() != eps.rows() || x_t.cols() != eps.cols()) throw DataError("x_t and eps shapes differ");
  const auto rows = x_t.rows();
  const double count = static_cast<double>(rows) * static_cast<double>(x_t.cols());
  // d/d(pred) of mean((pred - eps)^2) over batch and channels.
  const auto grad_scale = static_cast<float>(2.0 / count);

  const auto shards = static_cast<Eigen::Index>(std::clamp<std::size_t>(threads, 1, static_cast<std::size_t>(rows)));
  std::vector<ShardOutput> outs(static_cast<std::size_t>(shards));
  for (auto& o : outs) o.grads = ParamGrads::zeros(net);

  auto shard_range = [&](Eigen::Index s) {
    const Eigen::Index begin = rows * s / shards;
    return std::pair{begin, rows * (s + 1) / shards - begin};
  };
  if (shards == 1) {
    run_shard(net, params, x_t, timesteps, eps, 0, rows, grad_scale, outs[0]);
  } else {
    std::vector<std::thread> workers;
    for (Eigen::Index s = 0; s < shards; ++s) {
      const auto [begin, n] = shard_range(s);
      workers.emplace_back([&, s, begin, n] {
        run_shard(net, params, x_t, timesteps, eps, begin, n, grad_scale, outs[static_cast<std::size_t>(s)]);
      });
    }
    for (auto& w : workers) w.join();
  }

  // Fixed-order reduction keeps results independent of thread scheduling.
  double sq_sum = 0.0;
  for (const auto& o : outs) {
    sq_sum += o.sq_sum;
    add_grads(grads, o.grads);
  }
  return static_cast<float>(sq_sum / count);
}

TrainResult train(const FloatMatrix& data, const TrainConfig& cfg, const NoiseSchedule& sched,
                  const DenoiserConfig& raw_net, const TrainProgress& progress) {
  cfg.validate();
  const auto net = raw_net.resolved();
  net.validate();
  if (data.rows() == 0) throw DataError("training set is empty");
  if (static_cast<std::size_t>(data.cols()) != net.input_dim) {
    throw DataError("training vectors have C=" + std::to_string(data.cols()) + " but the denoiser expects C=" +
                    std::to_string(net.input_dim));
  }

  Rng init_rng = Rng::stream(cfg.seed, 0x1417);
  TrainResult result{init_params(net, init_rng), {}};
  result.loss_trace.reserve(cfg.iterations);
  AdamOptimizer adam(cfg, result.params.num_values());
  ParamGrads grads = ParamGrads::zeros(net);

  Rng rng = Rng::stream(cfg.seed, 0x7a41);
  const auto b = static_cast<Eigen::Index>(cfg.batch_size);
  const auto c = data.cols();
  const auto n = static_cast<std::uint64_t>(data.rows());
  FloatMatrix x_t(b, c), eps(b, c);
  std::vector<int> ts(cfg.batch_size);

  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    for (Eigen::Index r = 0; r < b; ++r) {
      const auto idx = static_cast<Eigen::Index>(rng.below(n));
      const int t = 1 + static_cast<int>(rng.below(static_cast<std::uint64_t>(sched.steps())));
      ts[static_cast<std::size_t>(r)] = t;
      std::span<float> e(eps.row(r).data(), static_cast<std::size_t>(c));
      rng.fill_normal(e);
      forward_diffuse_into(std::span<const float>(data.row(idx).data(), static_cast<std::size_t>(c)), t, e, sched,
                           std::span<float>(x_t.row(r).data(), static_cast<std::size_t>(c)));
    }
    zero_grads(grads);
    const float loss = batch_loss_and_grad(net, result.params, x_t, ts, eps, grads, cfg.threads);
    if (!std::isfinite(loss)) {
      throw NumericalError("training loss became non-finite at iteration " + std::to_string(it + 1) +
                           " (lr " + std::to_string(cfg.learning_rate) + "); lower the learning rate or check the data");
    }
    adam.step(result.params, grads);
    result.loss_trace.push_back(loss);
    if (progress) progress(it, loss);
  }
  return result;
}

FloatMatrix assemble_dataset(std::span<const FeatureMap> maps, const DatasetStats& stats) {
  if (maps.empty()) throw DataError("no feature maps to train on");
  std::size_t rows = 0;
  for (const auto& m : maps) {
    if (m.channels != stats.channels()) {
      throw DataError("feature map has C=" + std::to_string(m.channels) + ", expected C=" +
                      std::to_string(stats.channels()));
    }
    rows += m.num_vectors();
  }
  FloatMatrix out(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(stats.channels()));
  Eigen::Index r = 0;
  for (const auto& m : maps) {
    const FloatMatrix block = normalize_map(m, stats);
    out.middleRows(r, block.rows()) = block;
    r += block.rows();
  }
  return out;
}

MapTrainResult train_on_maps(std::span<const FeatureMap> maps, NormMode mode, const TrainConfig& cfg,
                             const NoiseSchedule& sched, const DenoiserConfig& net, const TrainProgress& progress) {
  DatasetStats stats = compute_stats(maps, mode);
  const FloatMatrix data = assemble_dataset(maps, stats);
  auto r = train(data, cfg, sched, net, progress);
  return {std::move(r.params), std::move(stats), std::move(r.loss_trace)};
}

MeanStd score_moments(std::span<const ScoreMap> maps) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& m : maps) {
    for (float v : m.values) sum += v;
    n += m.values.size();
  }
  if (n == 0) throw DataError("no scores to standardize");
  const double mean = sum / static_cast<double>(n);
  double var = 0.0;
  for (const auto& m : maps) {
    for (float v : m.values) var += (v - mean) * (v - mean);
  }
  var /= static_cast<double>(n);
  if (!(var > 0.0)) throw DataError("training scores have zero variance; cannot standardize");
  return {mean, std::sqrt(var)};
}

void compute_score_standardization(std::span<const FeatureMap> maps, const NoisePredictor& model,
                                   const NoiseSchedule& sched, const ScoreConfig& score_cfg, DatasetStats& stats,
                                   std::span<const DenseTensor> logits) {
  std::vector<ScoreMap> diff;
  diff.reserve(maps.size());
  for (std::size_t i = 0; i < maps.size(); ++i) {
    diff.push_back(score_feature_map(maps[i], model, sched, score_cfg, stats, i));
  }
  const auto d = score_moments(diff);
  stats.score_mean_diff = d.mean;
  stats.score_std_diff = d.std;
  stats.has_diff_standardization = true;

  if (!logits.empty()) {
    std::vector<ScoreMap> unc;
    unc.reserve(logits.size());
    for (const auto& l : logits) unc.push_back(logsumexp_uncertainty(l));
    const auto u = score_moments(unc);
    stats.score_mean_unc = u.mean;
    stats.score_std_unc = u.std;
    stats.has_unc_standardization = true;
  }
}

}  // namespace dood
