#include "vessel3d/pyramid.hpp"

#include <cmath>
#include <string>

#include "vessel3d/parallel.hpp"

namespace vessel3d {

std::vector<double> gaussian_kernel_1d(double sigma, int radius) {
  if (!(sigma > 0.0) || !std::isfinite(sigma))
    throw ValidationError("gaussian sigma must be positive, got " + std::to_string(sigma));
  if (radius < 1) throw ValidationError("gaussian radius must be >= 1, got " + std::to_string(radius));
  std::vector<double> k(2 * static_cast<std::size_t>(radius) + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-(i * i) / (2.0 * sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    sum += v;
  }
  for (auto& v : k) v /= sum;
  return k;
}

namespace {

// One 1D pass along `axis` (0 = x, 1 = y, 2 = z) with clamped borders.
void convolve_axis(std::span<const double> in, std::span<double> out, const Dims& d, int axis,
                   std::span<const double> kernel, unsigned threads) {
  const auto radius = static_cast<std::ptrdiff_t>(kernel.size() / 2);
  const std::size_t n_axis = axis == 0 ? d.nx : axis == 1 ? d.ny : d.nz;
  const std::size_t step = axis == 0 ? 1 : axis == 1 ? d.nx : d.nx * d.ny;
  const auto last = static_cast<std::ptrdiff_t>(n_axis) - 1;

  parallel_for(d.nz, threads, [&](std::size_t z0, std::size_t z1) {
    for (std::size_t z = z0; z < z1; ++z)
      for (std::size_t y = 0; y < d.ny; ++y)
        for (std::size_t x = 0; x < d.nx; ++x) {
          const std::size_t idx = x + d.nx * (y + d.ny * z);
          const std::size_t pos = axis == 0 ? x : axis == 1 ? y : z;
          const std::size_t base = idx - pos * step;
          double acc = 0.0;
          for (std::ptrdiff_t t = -radius; t <= radius; ++t) {
            auto p = static_cast<std::ptrdiff_t>(pos) + t;
            p = p < 0 ? 0 : (p > last ? last : p);
            acc += kernel[static_cast<std::size_t>(t + radius)] *
                   in[base + static_cast<std::size_t>(p) * step];
          }
          out[idx] = acc;
        }
  });
}

}  // namespace

Volume3 smooth_separable(const Volume3& vol, std::span<const double> kernel, unsigned threads) {
  if (kernel.empty()) throw ValidationError("smoothing kernel is empty");
  if (kernel.size() % 2 == 0)
    throw ValidationError("smoothing kernel length must be odd, got " + std::to_string(kernel.size()));
  const auto& d = vol.dims();
  std::vector<double> a(vol.data().begin(), vol.data().end());
  std::vector<double> b(a.size());
  convolve_axis(a, b, d, 0, kernel, threads);
  convolve_axis(b, a, d, 1, kernel, threads);
  convolve_axis(a, b, d, 2, kernel, threads);
  std::vector<float> out(b.begin(), b.end());
  if (vol.has_mask()) {
    auto m = vol.mask();
    return Volume3(d, std::move(out), std::vector<std::uint8_t>(m.begin(), m.end()));
  }
  return Volume3(d, std::move(out));
}

Volume3 subsample(const Volume3& vol, int factor) {
  if (factor < 1) throw ValidationError("subsampling factor must be >= 1");
  const auto f = static_cast<std::size_t>(factor);
  const auto& d = vol.dims();
  const Dims nd{(d.nx + f - 1) / f, (d.ny + f - 1) / f, (d.nz + f - 1) / f};
  if (nd.nx == 0 || nd.ny == 0 || nd.nz == 0)
    throw ValidationError("subsampled level would have a zero dimension");
  std::vector<float> data(nd.voxels());
  std::vector<std::uint8_t> mask(vol.has_mask() ? nd.voxels() : 0);
  const auto src = vol.data();
  const auto src_mask = vol.mask();
  for (std::size_t z = 0; z < nd.nz; ++z)
    for (std::size_t y = 0; y < nd.ny; ++y)
      for (std::size_t x = 0; x < nd.nx; ++x) {
        const std::size_t di = x + nd.nx * (y + nd.ny * z);
        const std::size_t si = vol.index(x * f, y * f, z * f);
        data[di] = src[si];
        if (!mask.empty()) mask[di] = src_mask[si];
      }
  if (vol.has_mask()) return Volume3(nd, std::move(data), std::move(mask));
  return Volume3(nd, std::move(data));
}

GaussianPyramid::GaussianPyramid(const Volume3& vol, int num_levels, const PyramidConfig& cfg,
                                 unsigned threads)
    : cfg_(cfg) {
  if (num_levels < 1) throw ValidationError("pyramid needs at least one level");
  if (cfg.factor < 2) throw ValidationError("pyramid factor must be >= 2");
  const auto kernel = gaussian_kernel_1d(cfg.sigma, cfg.radius);
  levels_.reserve(static_cast<std::size_t>(num_levels));
  levels_.push_back(vol);
  for (int k = 1; k < num_levels; ++k)
    levels_.push_back(subsample(smooth_separable(levels_.back(), kernel, threads), cfg.factor));
}

std::size_t GaussianPyramid::stride(std::size_t k) const {
  std::size_t s = 1;
  for (std::size_t i = 0; i < k; ++i) s *= static_cast<std::size_t>(cfg_.factor);
  return s;
}

}  // namespace vessel3d
