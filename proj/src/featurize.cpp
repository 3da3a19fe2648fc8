#include "vessel3d/featurize.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "vessel3d/error.hpp"
#include "vessel3d/parallel.hpp"

namespace vessel3d {

void FeatureMatrix::append(const FeatureMatrix& other) {
  if (other.rows() == 0) return;
  if (rows() == 0 && values.empty()) row_length = other.row_length;
  if (other.row_length != row_length)
    throw ValidationError("cannot append feature rows of length " + std::to_string(other.row_length) +
                          " to rows of length " + std::to_string(row_length));
  values.insert(values.end(), other.values.begin(), other.values.end());
  voxels.insert(voxels.end(), other.voxels.begin(), other.voxels.end());
}

namespace {

void check_edge(const Volume3& vol, int edge) {
  if (edge < 1 || edge % 2 == 0)
    throw ValidationError("filter edge must be odd and positive, got " + std::to_string(edge));
  const auto k = static_cast<std::size_t>(edge);
  const auto& d = vol.dims();
  if (d.nx < k || d.ny < k || d.nz < k)
    throw ValidationError("volume " + to_string(d) + " is smaller than the " + std::to_string(edge) +
                          "^3 filter");
}

// Gathers the clamped edge^3 neighbourhood centred at c, x-fastest.
void gather(const Volume3& vol, const VoxelCoord& c, int edge, double* out) {
  const auto half = static_cast<std::ptrdiff_t>(edge / 2);
  const auto& d = vol.dims();
  const auto data = vol.data();
  const auto cl = [](std::ptrdiff_t v, std::size_t n) {
    return static_cast<std::size_t>(v < 0 ? 0 : (v >= static_cast<std::ptrdiff_t>(n) ? static_cast<std::ptrdiff_t>(n) - 1 : v));
  };
  std::size_t i = 0;
  for (std::ptrdiff_t dz = -half; dz <= half; ++dz) {
    const std::size_t z = cl(static_cast<std::ptrdiff_t>(c.z) + dz, d.nz);
    for (std::ptrdiff_t dy = -half; dy <= half; ++dy) {
      const std::size_t y = cl(static_cast<std::ptrdiff_t>(c.y) + dy, d.ny);
      const std::size_t row = d.nx * (y + d.ny * z);
      for (std::ptrdiff_t dx = -half; dx <= half; ++dx)
        out[i++] = data[row + cl(static_cast<std::ptrdiff_t>(c.x) + dx, d.nx)];
    }
  }
}

// Fixed summation order so results never depend on threading.
inline double dot(const double* a, const double* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}

}  // namespace

Volume3 convolve3(const Volume3& vol, std::span<const double> filter, int edge, unsigned threads) {
  check_edge(vol, edge);
  const auto taps = static_cast<std::size_t>(edge) * edge * edge;
  if (filter.size() != taps)
    throw ValidationError("filter has " + std::to_string(filter.size()) + " taps, expected " +
                          std::to_string(taps));
  const auto& d = vol.dims();
  std::vector<float> out(vol.size());
  parallel_for(d.nz, threads, [&](std::size_t z0, std::size_t z1) {
    std::vector<double> hood(taps);
    for (std::size_t z = z0; z < z1; ++z)
      for (std::size_t y = 0; y < d.ny; ++y)
        for (std::size_t x = 0; x < d.nx; ++x) {
          gather(vol, {x, y, z}, edge, hood.data());
          out[vol.index(x, y, z)] = static_cast<float>(dot(hood.data(), filter.data(), taps));
        }
  });
  if (vol.has_mask()) {
    auto m = vol.mask();
    return Volume3(d, std::move(out), std::vector<std::uint8_t>(m.begin(), m.end()));
  }
  return Volume3(d, std::move(out));
}

void filter_responses(const Volume3& level, const Dictionary& dict,
                      std::span<const VoxelCoord> coords, float* out, std::size_t row_stride,
                      unsigned threads) {
  const int edge = dict.patch_edge();
  const auto taps = static_cast<std::size_t>(dict.n());
  const auto d = static_cast<std::size_t>(dict.d());
  const double* atoms = dict.atoms().data();  // column-major: atom j at j * taps
  parallel_for(coords.size(), threads, [&](std::size_t i0, std::size_t i1) {
    std::vector<double> hood(taps);
    for (std::size_t i = i0; i < i1; ++i) {
      if (!level.contains(coords[i]))
        throw ValidationError("voxel outside level dims " + to_string(level.dims()));
      gather(level, coords[i], edge, hood.data());
      float* row = out + i * row_stride;
      for (std::size_t j = 0; j < d; ++j)
        row[j] = static_cast<float>(dot(hood.data(), atoms + j * taps, taps));
    }
  });
}

Featurizer::Featurizer(const Volume3& vol, std::string volume_id, const Dictionary& dict,
                       const FeaturizeOptions& opts)
    : pyramid_(vol, opts.num_scales, opts.pyramid, opts.threads),
      volume_id_(std::move(volume_id)),
      dict_(dict),
      opts_(opts) {
  const auto d = static_cast<std::size_t>(dict.d());
  const auto s = static_cast<std::size_t>(opts.num_scales);
  if (d > opts.max_row_length / s)
    throw ValidationError("row length " + std::to_string(s) + " x " + std::to_string(d) +
                          " exceeds the configured limit " + std::to_string(opts.max_row_length));
  if (dict.patch_edge() % 2 == 0)
    throw ValidationError("dictionary patch edge must be odd for centred filtering");
  row_length_ = s * d;
}

FeatureMatrix Featurizer::rows(std::span<const VoxelCoord> query) const {
  const Volume3& vol = pyramid_.level(0);
  for (const auto& q : query) {
    const std::string where =
        "(" + std::to_string(q.x) + "," + std::to_string(q.y) + "," + std::to_string(q.z) + ")";
    if (!vol.contains(q))
      throw ValidationError("query voxel " + where + " outside dims " + to_string(vol.dims()));
    if (!vol.in_mask(q)) throw ValidationError("query voxel " + where + " outside mask");
  }

  FeatureMatrix fm;
  fm.row_length = row_length_;
  fm.values.assign(query.size() * row_length_, 0.0f);
  fm.voxels.reserve(query.size());
  for (const auto& q : query) fm.voxels.push_back({volume_id_, q});
  if (query.empty()) return fm;

  const auto d = static_cast<std::size_t>(dict_.d());
  filter_responses(pyramid_.level(0), dict_, query, fm.values.data(), row_length_, opts_.threads);

  // Coarse levels: many queries share a mapped voxel, so evaluate each
  // distinct one once and scatter.
  std::vector<std::size_t> mapped(query.size());
  std::vector<VoxelCoord> distinct;
  std::vector<float> responses;
  for (std::size_t l = 1; l < pyramid_.num_levels(); ++l) {
    const Volume3& level = pyramid_.level(l);
    const std::size_t stride = pyramid_.stride(l);
    for (std::size_t i = 0; i < query.size(); ++i)
      mapped[i] = level.index(query[i].x / stride, query[i].y / stride, query[i].z / stride);
    std::vector<std::size_t> keys = mapped;
    std::sort(keys.begin(), keys.end());
    keys.erase(std::unique(keys.begin(), keys.end()), keys.end());
    distinct.resize(keys.size());
    for (std::size_t k = 0; k < keys.size(); ++k) distinct[k] = level.coord(keys[k]);
    responses.assign(keys.size() * d, 0.0f);
    filter_responses(level, dict_, distinct, responses.data(), d, opts_.threads);
    for (std::size_t i = 0; i < query.size(); ++i) {
      const auto k = static_cast<std::size_t>(std::lower_bound(keys.begin(), keys.end(), mapped[i]) - keys.begin());
      std::copy_n(responses.data() + k * d, d, fm.values.data() + i * row_length_ + l * d);
    }
  }
  for (float v : fm.values)
    if (!std::isfinite(v)) throw NumericalError("non-finite feature value");
  return fm;
}

FeatureMatrix featurize_voxels(const Volume3& vol, const std::string& volume_id,
                               const Dictionary& dict, std::span<const VoxelCoord> query,
                               const FeaturizeOptions& opts) {
  return Featurizer(vol, volume_id, dict, opts).rows(query);
}

FeatureMatrix featurize_full(const Volume3& vol, const std::string& volume_id,
                             const Dictionary& dict, const FeaturizeOptions& opts) {
  std::vector<VoxelCoord> all;
  all.reserve(vol.mask_count());
  for (std::size_t i = 0; i < vol.size(); ++i)
    if (vol.in_mask(i)) all.push_back(vol.coord(i));
  return featurize_voxels(vol, volume_id, dict, all, opts);
}

}  // namespace vessel3d
