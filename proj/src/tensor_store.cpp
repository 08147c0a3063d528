#include "dood/tensor_store.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "dood/errors.hpp"

namespace dood {

namespace {

static_assert(sizeof(float) == 4);

constexpr std::size_t kMaxRank = 4;

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
  using U = std::make_unsigned_t<T>;
  auto bits = static_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<std::uint8_t>(bits & 0xFFu));
    bits = static_cast<U>(bits >> 8);
  }
}

template <typename T>
T get_le(std::span<const std::uint8_t> in, std::size_t offset) {
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    value |= static_cast<T>(static_cast<T>(in[offset + i]) << (8 * i));
  }
  return value;
}

std::size_t shape_product(const std::vector<std::uint64_t>& shape) {
  std::uint64_t n = 1;
  for (auto d : shape) n *= d;
  return static_cast<std::size_t>(n);
}

}  // namespace

DenseTensor::DenseTensor(DType dtype, std::vector<std::uint64_t> shape)
    : dtype_(dtype), shape_(std::move(shape)) {
  check_shape(shape_);
}

void DenseTensor::check_shape(const std::vector<std::uint64_t>& shape) {
  if (shape.empty() || shape.size() > kMaxRank) {
    throw DataError("tensor rank must be in [1, 4], got " + std::to_string(shape.size()));
  }
  for (auto d : shape) {
    if (d == 0) throw DataError("tensor dimensions must be >= 1");
  }
}

DenseTensor DenseTensor::zeros(DType dtype, std::vector<std::uint64_t> shape) {
  DenseTensor t(dtype, std::move(shape));
  if (dtype == DType::Float32) {
    t.f32_.assign(t.numel(), 0.0f);
  } else {
    t.u8_.assign(t.numel(), 0);
  }
  return t;
}

DenseTensor DenseTensor::from_floats(std::vector<std::uint64_t> shape, std::vector<float> values) {
  DenseTensor t(DType::Float32, std::move(shape));
  if (values.size() != t.numel()) {
    throw DataError("payload has " + std::to_string(values.size()) + " elements, shape needs " +
                    std::to_string(t.numel()));
  }
  t.f32_ = std::move(values);
  return t;
}

DenseTensor DenseTensor::from_bytes(std::vector<std::uint64_t> shape, std::vector<std::uint8_t> values) {
  DenseTensor t(DType::UInt8, std::move(shape));
  if (values.size() != t.numel()) {
    throw DataError("payload has " + std::to_string(values.size()) + " elements, shape needs " +
                    std::to_string(t.numel()));
  }
  t.u8_ = std::move(values);
  return t;
}

std::size_t DenseTensor::numel() const { return shape_.empty() ? 0 : shape_product(shape_); }

std::span<const float> DenseTensor::floats() const {
  if (dtype_ != DType::Float32) throw DataError("tensor is not float32");
  return f32_;
}
std::span<float> DenseTensor::floats() {
  if (dtype_ != DType::Float32) throw DataError("tensor is not float32");
  return f32_;
}
std::span<const std::uint8_t> DenseTensor::bytes() const {
  if (dtype_ != DType::UInt8) throw DataError("tensor is not uint8");
  return u8_;
}
std::span<std::uint8_t> DenseTensor::bytes() {
  if (dtype_ != DType::UInt8) throw DataError("tensor is not uint8");
  return u8_;
}

bool operator==(const DenseTensor& a, const DenseTensor& b) {
  if (a.dtype_ != b.dtype_ || a.shape_ != b.shape_) return false;
  if (a.dtype_ == DType::UInt8) return a.u8_ == b.u8_;
  // bitwise comparison so NaN payloads and signed zeros round-trip exactly
  return a.f32_.size() == b.f32_.size() &&
         std::memcmp(a.f32_.data(), b.f32_.data(), a.f32_.size() * sizeof(float)) == 0;
}

std::vector<std::uint8_t> encode_tensor(const DenseTensor& t) {
  if (t.dtype() != DType::Float32 && t.dtype() != DType::UInt8) {
    throw DataError("unsupported dtype");
  }
  std::vector<std::uint8_t> out;
  const std::size_t elem = t.dtype() == DType::Float32 ? 4 : 1;
  out.reserve(14 + 8 * t.rank() + elem * t.numel());
  out.insert(out.end(), std::begin(kTensorMagic), std::end(kTensorMagic));
  put_le<std::uint32_t>(out, kTensorVersion);
  out.push_back(static_cast<std::uint8_t>(t.dtype()));
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (auto d : t.shape()) put_le<std::uint64_t>(out, d);
  if (t.dtype() == DType::Float32) {
    for (float v : t.floats()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  } else {
    auto b = t.bytes();
    out.insert(out.end(), b.begin(), b.end());
  }
  return out;
}

DenseTensor decode_tensor(std::span<const std::uint8_t> in) {
  if (in.size() < 8 || std::memcmp(in.data(), kTensorMagic, 8) != 0) throw DataError("bad magic");
  if (in.size() < 14) throw DataError("truncated header");
  const auto version = get_le<std::uint32_t>(in, 8);
  if (version != kTensorVersion) throw DataError("unsupported DTF version " + std::to_string(version));
  const std::uint8_t code = in[12];
  if (code > 1) throw DataError("unknown dtype code " + std::to_string(code));
  const auto dtype = static_cast<DType>(code);
  const std::size_t rank = in[13];
  if (rank == 0 || rank > kMaxRank) throw DataError("rank " + std::to_string(rank) + " outside [1, 4]");
  if (in.size() < 14 + 8 * rank) throw DataError("truncated header");
  std::vector<std::uint64_t> shape(rank);
  std::size_t offset = 14;
  for (auto& d : shape) {
    d = get_le<std::uint64_t>(in, offset);
    offset += 8;
    if (d == 0) throw DataError("zero-sized dimension");
  }
  const std::size_t elem = dtype == DType::Float32 ? 4 : 1;
  const std::size_t n = shape_product(shape);
  const std::size_t remaining = in.size() - offset;
  if (remaining < n * elem) throw DataError("truncated payload");
  if (remaining > n * elem) throw DataError("trailing bytes after payload");
  if (dtype == DType::Float32) {
    std::vector<float> values(n);
    for (std::size_t i = 0; i < n; ++i) {
      values[i] = std::bit_cast<float>(get_le<std::uint32_t>(in, offset + 4 * i));
    }
    return DenseTensor::from_floats(std::move(shape), std::move(values));
  }
  return DenseTensor::from_bytes(std::move(shape),
                                 std::vector<std::uint8_t>(in.begin() + static_cast<std::ptrdiff_t>(offset), in.end()));
}

void write_tensor(const std::filesystem::path& path, const DenseTensor& t) {
  const auto bytes = encode_tensor(t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

DenseTensor read_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_tensor(bytes);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

FeatureMap FeatureMap::from_tensor(const DenseTensor& t) {
  if (t.dtype() != DType::Float32 || t.rank() != 3) {
    throw DataError("feature map must be a rank-3 float32 tensor [H, W, C]");
  }
  FeatureMap m;
  m.height = t.dim(0);
  m.width = t.dim(1);
  m.channels = t.dim(2);
  auto v = t.floats();
  for (float x : v) {
    if (!std::isfinite(x)) throw DataError("feature map contains non-finite values");
  }
  m.values.assign(v.begin(), v.end());
  return m;
}

DenseTensor FeatureMap::to_tensor() const {
  return DenseTensor::from_floats({height, width, channels}, values);
}

OoDMask OoDMask::from_tensor(const DenseTensor& t) {
  if (t.dtype() != DType::UInt8 || t.rank() != 2) throw DataError("mask must be a rank-2 uint8 tensor [H, W]");
  OoDMask m;
  m.height = t.dim(0);
  m.width = t.dim(1);
  auto b = t.bytes();
  for (auto v : b) {
    if (v != kMaskInlier && v != kMaskOoD && v != kMaskIgnore) {
      throw DataError("mask label " + std::to_string(v) + " not in {0, 1, 255}");
    }
  }
  m.labels.assign(b.begin(), b.end());
  return m;
}

DenseTensor OoDMask::to_tensor() const { return DenseTensor::from_bytes({height, width}, labels); }

}  // namespace dood
