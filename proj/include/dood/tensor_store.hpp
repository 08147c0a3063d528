#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace dood {

enum class DType : std::uint8_t { Float32 = 0, UInt8 = 1 };

/// Row-major dense tensor of rank 1..4 holding float32 or uint8 values.
///
/// Both payload vectors exist but only the one matching `dtype()` is populated.
class DenseTensor {
 public:
  DenseTensor() = default;

  static DenseTensor zeros(DType dtype, std::vector<std::uint64_t> shape);
  static DenseTensor from_floats(std::vector<std::uint64_t> shape, std::vector<float> values);
  static DenseTensor from_bytes(std::vector<std::uint64_t> shape, std::vector<std::uint8_t> values);

  DType dtype() const { return dtype_; }
  const std::vector<std::uint64_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::uint64_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const;

  std::span<const float> floats() const;
  std::span<float> floats();
  std::span<const std::uint8_t> bytes() const;
  std::span<std::uint8_t> bytes();

  friend bool operator==(const DenseTensor& a, const DenseTensor& b);

 private:
  DenseTensor(DType dtype, std::vector<std::uint64_t> shape);
  static void check_shape(const std::vector<std::uint64_t>& shape);

  DType dtype_ = DType::Float32;
  std::vector<std::uint64_t> shape_;
  std::vector<float> f32_;
  std::vector<std::uint8_t> u8_;
};

inline constexpr char kTensorMagic[8] = {'D', 'O', 'O', 'D', 'T', 'N', 'S', 'R'};
inline constexpr std::uint32_t kTensorVersion = 1;

/// Serializes `t` into the DTF container (little-endian, byte-for-byte deterministic).
std::vector<std::uint8_t> encode_tensor(const DenseTensor& t);
DenseTensor decode_tensor(std::span<const std::uint8_t> bytes);

void write_tensor(const std::filesystem::path& path, const DenseTensor& t);
DenseTensor read_tensor(const std::filesystem::path& path);

/// H x W grid of C-dimensional feature vectors; storage is a [H, W, C] float tensor.
struct FeatureMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::vector<float> values;  // row-major [H, W, C]

  std::size_t num_vectors() const { return height * width; }
  std::span<const float> vector_at(std::size_t index) const {
    return {values.data() + index * channels, channels};
  }

  static FeatureMap from_tensor(const DenseTensor& t);
  DenseTensor to_tensor() const;
};

inline constexpr std::uint8_t kMaskInlier = 0;
inline constexpr std::uint8_t kMaskOoD = 1;
inline constexpr std::uint8_t kMaskIgnore = 255;

/// Pixel-level OoD ground truth; labels are 0 (inlier), 1 (OoD) or 255 (ignore).
struct OoDMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;

  static OoDMask from_tensor(const DenseTensor& t);
  DenseTensor to_tensor() const;
};

}  // namespace dood
