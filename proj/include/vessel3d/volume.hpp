#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vessel3d/error.hpp"

namespace vessel3d {

struct Dims {
  std::size_t nx = 0;
  std::size_t ny = 0;
  std::size_t nz = 0;

  std::size_t voxels() const { return nx * ny * nz; }
  bool operator==(const Dims&) const = default;
};

std::string to_string(const Dims& dims);

struct VoxelCoord {
  std::size_t x = 0;
  std::size_t y = 0;
  std::size_t z = 0;

  bool operator==(const VoxelCoord&) const = default;
  auto operator<=>(const VoxelCoord&) const = default;
};

/// Scalar 3D grid in x-fastest order: index = x + nx * (y + ny * z).
/// Values are immutable after construction; the optional mask marks the
/// region of interest (true = inside).
class Volume3 {
 public:
  Volume3() = default;

  /// Throws ValidationError on size mismatch, zero dims or non-finite data.
  Volume3(Dims dims, std::vector<float> data);
  Volume3(Dims dims, std::vector<float> data, std::vector<std::uint8_t> mask);

  static Volume3 constant(Dims dims, float value);

  const Dims& dims() const { return dims_; }
  std::size_t size() const { return data_.size(); }
  std::span<const float> data() const { return data_; }

  bool has_mask() const { return mask_.has_value(); }
  /// Empty span when no mask is attached.
  std::span<const std::uint8_t> mask() const;
  /// Without a mask every voxel is inside.
  bool in_mask(std::size_t index) const { return !mask_ || (*mask_)[index] != 0; }
  bool in_mask(const VoxelCoord& c) const { return in_mask(index(c)); }
  std::size_t mask_count() const;

  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
    return x + dims_.nx * (y + dims_.ny * z);
  }
  std::size_t index(const VoxelCoord& c) const { return index(c.x, c.y, c.z); }
  VoxelCoord coord(std::size_t index) const {
    return {index % dims_.nx, (index / dims_.nx) % dims_.ny, index / (dims_.nx * dims_.ny)};
  }
  bool contains(const VoxelCoord& c) const {
    return c.x < dims_.nx && c.y < dims_.ny && c.z < dims_.nz;
  }

  float at(std::size_t x, std::size_t y, std::size_t z) const { return data_[index(x, y, z)]; }
  float at(const VoxelCoord& c) const { return at(c.x, c.y, c.z); }

  /// Clamp-to-edge access for signed coordinates.
  float clamped(std::ptrdiff_t x, std::ptrdiff_t y, std::ptrdiff_t z) const;

  Volume3 with_mask(std::vector<std::uint8_t> mask) const;
  Volume3 without_mask() const;

 private:
  Dims dims_;
  std::vector<float> data_;
  std::optional<std::vector<std::uint8_t>> mask_;
};

}  // namespace vessel3d
