#pragma once

#include <span>
#include <vector>

#include "vessel3d/volume.hpp"

namespace vessel3d {

struct PyramidConfig {
  double sigma = 1.0;  // voxels
  int radius = 2;      // kernel taps = 2 * radius + 1
  int factor = 2;      // subsampling stride
};

/// 2*radius+1 taps of exp(-i^2 / (2 sigma^2)), normalized to sum to one.
std::vector<double> gaussian_kernel_1d(double sigma, int radius);

/// Applies `kernel` along x, then y, then z with clamp-to-edge borders.
Volume3 smooth_separable(const Volume3& vol, std::span<const double> kernel, unsigned threads = 1);

/// Keeps voxels at multiples of `factor`, starting at 0. The mask, if any,
/// is subsampled with the same rule.
Volume3 subsample(const Volume3& vol, int factor);

/// Multiscale stack; levels[0] is the input volume unmodified and each
/// further level is subsample(smooth(previous)).
class GaussianPyramid {
 public:
  GaussianPyramid(const Volume3& vol, int num_levels, const PyramidConfig& cfg,
                  unsigned threads = 1);

  std::size_t num_levels() const { return levels_.size(); }
  const Volume3& level(std::size_t k) const { return levels_.at(k); }
  const std::vector<Volume3>& levels() const { return levels_; }
  const PyramidConfig& config() const { return cfg_; }

  /// Stride from level 0 coordinates to level k coordinates (factor^k).
  std::size_t stride(std::size_t k) const;

 private:
  std::vector<Volume3> levels_;
  PyramidConfig cfg_;
};

inline GaussianPyramid build_pyramid(const Volume3& vol, int num_levels, const PyramidConfig& cfg,
                                     unsigned threads = 1) {
  return GaussianPyramid(vol, num_levels, cfg, threads);
}

}  // namespace vessel3d
