#pragma once

#include <cstddef>
#include <span>

#include <Eigen/Core>

namespace dood {

template <typename S>
using RowMatrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using ColVector = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using FloatMatrix = RowMatrix<float>;

/// Anything that maps a batch of perturbed vectors x_t (one per row) and their
/// timesteps to a noise estimate of the same shape.
///
/// `timesteps` holds either one entry per row or a single entry shared by all rows.
class NoisePredictor {
 public:
  virtual ~NoisePredictor() = default;
  virtual std::size_t dim() const = 0;
  virtual FloatMatrix predict(const FloatMatrix& x_t, std::span<const int> timesteps) const = 0;
};

}  // namespace dood
