#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "dood/denoiser.hpp"
#include "dood/schedule.hpp"
#include "dood/scorer.hpp"
#include "dood/stats.hpp"
#include "dood/tensor_store.hpp"

namespace dood {

struct TrainConfig {
  double learning_rate = 5e-5;
  std::size_t batch_size = 4096;
  std::size_t iterations = 70000;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  /// Batch shards evaluated concurrently. Results are bitwise reproducible for a fixed count.
  std::size_t threads = 1;

  void validate() const;
};

/// Adam with bias correction, no weight decay.
class AdamOptimizer {
 public:
  AdamOptimizer(const TrainConfig& cfg, std::size_t num_values);

  void step(DenoiserParams& params, const ParamGrads& grads);
  std::size_t steps_taken() const { return step_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t step_ = 0;
  std::vector<double> m_, v_;
};

struct TrainResult {
  DenoiserParams params;
  std::vector<float> loss_trace;
};

/// Called after every iteration with (iteration index, loss).
using TrainProgress = std::function<void(std::size_t, float)>;

/// DDPM training on already-normalized vectors (one per row of `data`).
/// Throws NumericalError as soon as a batch loss is non-finite.
TrainResult train(const FloatMatrix& data, const TrainConfig& cfg, const NoiseSchedule& sched,
                  const DenoiserConfig& net, const TrainProgress& progress = {});

/// One batch loss and its gradient; exposed so tests can check the loss bookkeeping.
float batch_loss_and_grad(const DenoiserConfig& net, const DenoiserParams& params, const FloatMatrix& x_t,
                          std::span<const int> timesteps, const FloatMatrix& eps, ParamGrads& grads,
                          std::size_t threads = 1);

/// Stacks every normalized feature vector of every map into one [N, C] matrix.
FloatMatrix assemble_dataset(std::span<const FeatureMap> maps, const DatasetStats& stats);

struct MapTrainResult {
  DenoiserParams params;
  DatasetStats stats;
  std::vector<float> loss_trace;
};

MapTrainResult train_on_maps(std::span<const FeatureMap> maps, NormMode mode, const TrainConfig& cfg,
                             const NoiseSchedule& sched, const DenoiserConfig& net,
                             const TrainProgress& progress = {});

struct MeanStd {
  double mean = 0.0;
  double std = 1.0;
};

/// Population mean and standard deviation over every value of every map; rejects zero variance.
MeanStd score_moments(std::span<const ScoreMap> maps);

/// Scores the training maps (and, if given, their logits) and stores the resulting
/// standardization constants in `stats`.
void compute_score_standardization(std::span<const FeatureMap> maps, const NoisePredictor& model,
                                   const NoiseSchedule& sched, const ScoreConfig& score_cfg, DatasetStats& stats,
                                   std::span<const DenseTensor> logits = {});

}  // namespace dood
