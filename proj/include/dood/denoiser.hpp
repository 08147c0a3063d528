#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "dood/predictor.hpp"
#include "dood/rng.hpp"

namespace dood {

enum class SkipMode { Concat, Add };

const char* to_string(SkipMode mode);
SkipMode parse_skip_mode(const std::string& s);

/// Architecture of the per-vector MLP denoiser.
///
/// A zero `hidden_dim` or `groupnorm_groups` means "use the default", resolved by `resolved()`.
struct DenoiserConfig {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 0;
  std::size_t n_input_blocks = 6;
  std::size_t n_output_blocks = 6;
  std::size_t groupnorm_groups = 0;
  SkipMode skip = SkipMode::Concat;

  DenoiserConfig resolved() const;
  /// Throws DataError if the (resolved) configuration is inconsistent.
  void validate() const;

  friend bool operator==(const DenoiserConfig&, const DenoiserConfig&) = default;
};

/// Largest divisor of `hidden` that is at most 32 while keeping at least four channels per
/// group (or one group when `hidden` < 8).
std::size_t default_groupnorm_groups(std::size_t hidden);

inline constexpr double kGroupNormEps = 1e-5;

template <typename S>
struct LinearLayer {
  RowMatrix<S> weight;  // [out, in]
  ColVector<S> bias;    // [out]
};

template <typename S>
struct NormLayer {
  ColVector<S> scale;
  ColVector<S> shift;
};

template <typename S>
struct ResidualBlock {
  NormLayer<S> norm1;
  LinearLayer<S> linear1;
  NormLayer<S> norm2;
  LinearLayer<S> linear2;
};

/// Every weight of the denoiser. The same type holds parameter gradients.
template <typename S>
struct BasicDenoiserParams {
  LinearLayer<S> input_proj;
  std::vector<ResidualBlock<S>> input_blocks;
  std::vector<ResidualBlock<S>> output_blocks;
  LinearLayer<S> output_proj;

  /// Correctly shaped, all-zero parameters (norm scales included).
  static BasicDenoiserParams zeros(const DenoiserConfig& cfg);

  /// Visits each tensor in a fixed order as (role, values, shape).
  void for_each_tensor(const std::function<void(const std::string&, std::span<S>, std::vector<std::size_t>)>& fn);
  void for_each_tensor(
      const std::function<void(const std::string&, std::span<const S>, std::vector<std::size_t>)>& fn) const;

  std::size_t num_values() const;

  template <typename T>
  BasicDenoiserParams<T> cast() const;
};

using DenoiserParams = BasicDenoiserParams<float>;
using ParamGrads = BasicDenoiserParams<float>;

/// Fan-in uniform weights; unit norm scales and zero shifts; zero final linear in every
/// block and a zero output projection, so a fresh network predicts exactly zero.
DenoiserParams init_params(const DenoiserConfig& cfg, Rng& rng);

/// Batch activations, one feature vector per row, stored channel-major so each channel is
/// contiguous across the batch (group statistics then reduce whole columns).
template <typename S>
using ActMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;

/// Activations retained by `forward` for `backward`.
template <typename S>
struct ForwardCache {
  struct Block {
    ActMatrix<S> xhat1, inv_std1, pre1, sig1, act1;
    ActMatrix<S> xhat2, inv_std2, pre2, sig2, act2;
  };
  ActMatrix<S> input;
  ActMatrix<S> final_hidden;
  std::vector<Block> input_blocks;
  std::vector<Block> output_blocks;
};

/// Batched forward pass: one feature vector per row of `x_t`.
template <typename S>
RowMatrix<S> denoiser_forward(const DenoiserConfig& cfg, const BasicDenoiserParams<S>& params,
                              const RowMatrix<S>& x_t, std::span<const int> timesteps,
                              ForwardCache<S>* cache = nullptr);

/// Reverse pass of <forward(x_t), upstream>; parameter gradients are added into `grads`.
/// Returns the gradient with respect to `x_t`.
template <typename S>
RowMatrix<S> denoiser_backward(const DenoiserConfig& cfg, const BasicDenoiserParams<S>& params,
                               const ForwardCache<S>& cache, const RowMatrix<S>& upstream,
                               BasicDenoiserParams<S>& grads);

/// Isolated GroupNorm over the row vectors of `x` (exposed for tests).
template <typename S>
RowMatrix<S> group_norm(const RowMatrix<S>& x, const NormLayer<S>& layer, std::size_t groups);

/// Trained (or freshly initialized) MLP denoiser usable wherever a NoisePredictor is expected.
class MlpDenoiser final : public NoisePredictor {
 public:
  MlpDenoiser(DenoiserConfig cfg, DenoiserParams params);

  std::size_t dim() const override { return cfg_.input_dim; }
  FloatMatrix predict(const FloatMatrix& x_t, std::span<const int> timesteps) const override;

  /// Single-vector convenience wrapper.
  std::vector<float> forward(std::span<const float> x_t, int t) const;

  const DenoiserConfig& config() const { return cfg_; }
  const DenoiserParams& params() const { return params_; }
  /// True when every output-projection weight and bias is exactly zero.
  bool is_zero_output() const;

 private:
  DenoiserConfig cfg_;
  DenoiserParams params_;
};

}  // namespace dood
