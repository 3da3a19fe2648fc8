#pragma once

#include <string>
#include <vector>

#include "vessel3d/pyramid.hpp"
#include "vessel3d/sparse_coding.hpp"

namespace vessel3d {

struct VoxelRef {
  std::string volume_id;
  VoxelCoord voxel;

  bool operator==(const VoxelRef&) const = default;
};

/// Per-voxel predictors, one row per voxel. Columns are scale-major:
/// the d responses at scale 0, then the d responses at scale 1, ...
struct FeatureMatrix {
  std::size_t row_length = 0;
  std::vector<float> values;  // row-major, rows() * row_length
  std::vector<VoxelRef> voxels;

  std::size_t rows() const { return voxels.size(); }
  std::span<const float> row(std::size_t r) const {
    return std::span<const float>(values).subspan(r * row_length, row_length);
  }
  /// Appends `other`; row lengths must agree unless this matrix is empty.
  void append(const FeatureMatrix& other);
};

struct FeaturizeOptions {
  int num_scales = 2;
  PyramidConfig pyramid;
  unsigned threads = 1;
  /// Upper bound on num_scales * d.
  std::size_t max_row_length = 1u << 16;
};

/// Dense 3D cross-correlation (no kernel flip) with clamp-to-edge borders.
/// `filter` holds edge^3 taps in x-fastest order; output dims equal input dims.
Volume3 convolve3(const Volume3& vol, std::span<const double> filter, int edge, unsigned threads = 1);

/// Holds the pyramid of one volume so feature rows can be produced in
/// chunks (whole-volume prediction streams through it slab by slab).
class Featurizer {
 public:
  Featurizer(const Volume3& vol, std::string volume_id, const Dictionary& dict,
             const FeaturizeOptions& opts);

  std::size_t row_length() const { return row_length_; }
  const GaussianPyramid& pyramid() const { return pyramid_; }

  /// Validates every query voxel (in bounds, in mask) before computing.
  FeatureMatrix rows(std::span<const VoxelCoord> query) const;

 private:
  GaussianPyramid pyramid_;
  std::string volume_id_;
  const Dictionary& dict_;
  FeaturizeOptions opts_;
  std::size_t row_length_;
};

/// Responses of every atom at every scale, sampled at the query voxels.
/// Scale l reads level l of the Gaussian pyramid at (x, y, z) / factor^l.
FeatureMatrix featurize_voxels(const Volume3& vol, const std::string& volume_id,
                               const Dictionary& dict, std::span<const VoxelCoord> query,
                               const FeaturizeOptions& opts);

/// Same as featurize_voxels over every in-mask voxel in x-fastest order.
FeatureMatrix featurize_full(const Volume3& vol, const std::string& volume_id,
                             const Dictionary& dict, const FeaturizeOptions& opts);

/// Low-level engine shared by the above: responses at `coords` of one level.
/// `out` receives coords.size() rows of dict.d() values with stride `row_stride`.
void filter_responses(const Volume3& level, const Dictionary& dict,
                      std::span<const VoxelCoord> coords, float* out, std::size_t row_stride,
                      unsigned threads);

}  // namespace vessel3d
