#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>
#include <string>

#include "vessel3d/error.hpp"
#include "vessel3d/evaluation.hpp"

namespace vessel3d {
namespace {

using Vec3 = std::array<double, 3>;

Vec3 add(const Vec3& a, const Vec3& b) { return {a[0] + b[0], a[1] + b[1], a[2] + b[2]}; }
Vec3 sub(const Vec3& a, const Vec3& b) { return {a[0] - b[0], a[1] - b[1], a[2] - b[2]}; }
Vec3 scale(const Vec3& a, double s) { return {a[0] * s, a[1] * s, a[2] * s}; }
double dot3(const Vec3& a, const Vec3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }
Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}
Vec3 normalized(const Vec3& a) { return scale(a, 1.0 / std::sqrt(dot3(a, a))); }

double segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = sub(b, a);
  const double len2 = dot3(ab, ab);
  double t = len2 > 0.0 ? dot3(sub(p, a), ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const Vec3 d = sub(p, add(a, scale(ab, t)));
  return std::sqrt(dot3(d, d));
}

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint32_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), stream};
  return std::mt19937_64(seq);
}

Vec3 random_direction(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  for (;;) {
    const Vec3 v{n(rng), n(rng), n(rng)};
    if (dot3(v, v) > 1e-12) return normalized(v);
  }
}

// Marks voxels within `radius` of segment ab.
void rasterize_segment(const Vec3& a, const Vec3& b, double radius, const Dims& dims,
                       std::vector<std::uint8_t>& truth) {
  const auto lo = [&](int axis) {
    return static_cast<std::ptrdiff_t>(std::floor(std::min(a[axis], b[axis]) - radius));
  };
  const auto hi = [&](int axis) {
    return static_cast<std::ptrdiff_t>(std::ceil(std::max(a[axis], b[axis]) + radius));
  };
  const std::ptrdiff_t n[3] = {static_cast<std::ptrdiff_t>(dims.nx), static_cast<std::ptrdiff_t>(dims.ny),
                               static_cast<std::ptrdiff_t>(dims.nz)};
  const std::ptrdiff_t x0 = std::max<std::ptrdiff_t>(0, lo(0)), x1 = std::min(n[0] - 1, hi(0));
  const std::ptrdiff_t y0 = std::max<std::ptrdiff_t>(0, lo(1)), y1 = std::min(n[1] - 1, hi(1));
  const std::ptrdiff_t z0 = std::max<std::ptrdiff_t>(0, lo(2)), z1 = std::min(n[2] - 1, hi(2));
  for (std::ptrdiff_t z = z0; z <= z1; ++z)
    for (std::ptrdiff_t y = y0; y <= y1; ++y)
      for (std::ptrdiff_t x = x0; x <= x1; ++x) {
        const std::size_t idx = static_cast<std::size_t>(x + n[0] * (y + n[1] * z));
        if (truth[idx]) continue;
        const Vec3 p{static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)};
        if (segment_distance(p, a, b) <= radius) truth[idx] = 1;
      }
}

std::vector<std::size_t> pick(std::vector<std::size_t> pool, std::size_t count, std::mt19937_64& rng) {
  std::shuffle(pool.begin(), pool.end(), rng);
  pool.resize(std::min(count, pool.size()));
  std::sort(pool.begin(), pool.end());
  return pool;
}

}  // namespace

void PhantomSpec::validate() const {
  if (dims.nx == 0 || dims.ny == 0 || dims.nz == 0) throw ValidationError("phantom dims must be positive");
  if (num_tubes < 0 || num_blobs < 0) throw ValidationError("tube and blob counts must be >= 0");
  if (tube_radius_min < 1.0 || tube_radius_max < tube_radius_min)
    throw ValidationError("tube radii must satisfy 1 <= min <= max");
  if (blob_radius_min < 1.0 || blob_radius_max < blob_radius_min)
    throw ValidationError("blob radii must satisfy 1 <= min <= max");
  if (!(noise_std >= 0.0)) throw ValidationError("noise_std must be >= 0");
  if (!(helix_fraction >= 0.0 && helix_fraction <= 1.0))
    throw ValidationError("helix_fraction must lie in [0, 1]");
  if (blob_negative_fraction && !(*blob_negative_fraction >= 0.0 && *blob_negative_fraction <= 1.0))
    throw ValidationError("blob_negative_fraction must lie in [0, 1]");
}

double distance_to_polyline(const std::array<double, 3>& p,
                            const std::vector<std::array<double, 3>>& line) {
  if (line.empty()) return std::numeric_limits<double>::infinity();
  if (line.size() == 1) return segment_distance(p, line[0], line[0]);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i + 1 < line.size(); ++i)
    best = std::min(best, segment_distance(p, line[i], line[i + 1]));
  return best;
}

Phantom gen_phantom(const PhantomSpec& spec, const std::string& volume_id) {
  spec.validate();
  const Dims& dims = spec.dims;
  const double extent[3] = {static_cast<double>(dims.nx), static_cast<double>(dims.ny),
                            static_cast<double>(dims.nz)};
  const double half_diagonal =
      0.5 * std::sqrt(extent[0] * extent[0] + extent[1] * extent[1] + extent[2] * extent[2]);
  constexpr double kHelixRadiusMin = 3.0, kHelixRadiusMax = 6.0;
  constexpr double kPitchMin = 12.0, kPitchMax = 24.0;

  auto geo = stream_rng(spec.seed, 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(geo); };
  const auto center_with_margin = [&](double margin, const char* what) {
    Vec3 c{};
    for (int a = 0; a < 3; ++a) {
      if (extent[a] - 1.0 < 2.0 * margin)
        throw ValidationError(std::string(what) + " of margin " + std::to_string(margin) +
                              " cannot fit inside dims " + to_string(dims));
      c[a] = uniform(margin, extent[a] - 1.0 - margin);
    }
    return c;
  };

  Phantom ph;
  for (int i = 0; i < spec.num_blobs; ++i) {
    BlobGeometry blob;
    blob.radius = uniform(spec.blob_radius_min, spec.blob_radius_max);
    blob.center = center_with_margin(blob.radius, "blob");
    ph.blobs.push_back(blob);
  }
  for (int i = 0; i < spec.num_tubes; ++i) {
    TubeGeometry tube;
    tube.radius = uniform(spec.tube_radius_min, spec.tube_radius_max);
    tube.helix = unit(geo) < spec.helix_fraction;
    const Vec3 axis = random_direction(geo);
    if (!tube.helix) {
      const Vec3 c = center_with_margin(tube.radius + 1.0, "tube");
      tube.centerline = {sub(c, scale(axis, half_diagonal)), add(c, scale(axis, half_diagonal))};
    } else {
      const double coil = uniform(kHelixRadiusMin, kHelixRadiusMax);
      const double pitch = uniform(kPitchMin, kPitchMax);
      const Vec3 c = center_with_margin(tube.radius + coil + 1.0, "helical tube");
      Vec3 helper = std::abs(axis[0]) < 0.9 ? Vec3{1, 0, 0} : Vec3{0, 1, 0};
      const Vec3 e1 = normalized(cross(axis, helper));
      const Vec3 e2 = cross(axis, e1);
      const double step = 0.5;
      for (double t = -half_diagonal; t <= half_diagonal + 1e-9; t += step) {
        const double phase = 2.0 * std::numbers::pi * t / pitch;
        tube.centerline.push_back(
            add(add(c, scale(axis, t)), add(scale(e1, coil * std::cos(phase)), scale(e2, coil * std::sin(phase)))));
      }
    }
    ph.tubes.push_back(std::move(tube));
  }

  const std::size_t count = dims.voxels();
  ph.tube_truth.assign(count, 0);
  ph.blob_truth.assign(count, 0);
  for (const auto& blob : ph.blobs) {
    for (std::size_t z = 0; z < dims.nz; ++z)
      for (std::size_t y = 0; y < dims.ny; ++y)
        for (std::size_t x = 0; x < dims.nx; ++x) {
          const Vec3 p{static_cast<double>(x), static_cast<double>(y), static_cast<double>(z)};
          const Vec3 d = sub(p, blob.center);
          if (dot3(d, d) <= blob.radius * blob.radius) ph.blob_truth[x + dims.nx * (y + dims.ny * z)] = 1;
        }
  }
  for (const auto& tube : ph.tubes) {
    if (tube.centerline.size() == 1) {
      rasterize_segment(tube.centerline[0], tube.centerline[0], tube.radius, dims, ph.tube_truth);
    }
    for (std::size_t i = 0; i + 1 < tube.centerline.size(); ++i)
      rasterize_segment(tube.centerline[i], tube.centerline[i + 1], tube.radius, dims, ph.tube_truth);
  }

  std::vector<float> data(count, spec.background);
  for (std::size_t i = 0; i < count; ++i) {
    if (ph.tube_truth[i]) data[i] = spec.tube_intensity;
    else if (ph.blob_truth[i]) data[i] = spec.blob_intensity;
  }
  if (spec.noise_std > 0.0) {
    auto noise_rng = stream_rng(spec.seed, 2);
    std::normal_distribution<double> noise(0.0, spec.noise_std);
    for (auto& v : data) v = static_cast<float>(v + noise(noise_rng));
  }
  ph.volume = Volume3(dims, std::move(data), std::vector<std::uint8_t>(count, 1));

  if (spec.annotations_per_class == 0) return ph;

  std::vector<std::size_t> tube_pool, blob_pool, background_pool;
  for (std::size_t i = 0; i < count; ++i) {
    if (ph.tube_truth[i]) tube_pool.push_back(i);
    else if (ph.blob_truth[i]) blob_pool.push_back(i);
    else background_pool.push_back(i);
  }
  if (tube_pool.empty())
    throw ValidationError("phantom has no tube voxels: the vessel annotation class would be empty");
  if (blob_pool.empty() && background_pool.empty())
    throw ValidationError("phantom has no non-tube voxels: the non-vessel annotation class would be empty");

  const std::size_t per_class =
      std::min({spec.annotations_per_class, tube_pool.size(), blob_pool.size() + background_pool.size()});
  auto ann_rng = stream_rng(spec.seed, 3);
  const auto positives = pick(std::move(tube_pool), per_class, ann_rng);
  std::vector<std::size_t> negatives;
  if (spec.blob_negative_fraction) {
    std::size_t from_blobs = std::min(
        blob_pool.size(),
        static_cast<std::size_t>(std::llround(*spec.blob_negative_fraction * static_cast<double>(per_class))));
    if (per_class - from_blobs > background_pool.size()) from_blobs = per_class - background_pool.size();
    negatives = pick(std::move(blob_pool), from_blobs, ann_rng);
    const auto bg = pick(std::move(background_pool), per_class - from_blobs, ann_rng);
    negatives.insert(negatives.end(), bg.begin(), bg.end());
  } else {
    background_pool.insert(background_pool.end(), blob_pool.begin(), blob_pool.end());
    negatives = pick(std::move(background_pool), per_class, ann_rng);
  }
  std::sort(negatives.begin(), negatives.end());

  std::size_t ip = 0, in = 0;
  while (ip < positives.size() || in < negatives.size()) {
    const bool take_positive =
        in >= negatives.size() || (ip < positives.size() && positives[ip] < negatives[in]);
    const std::size_t idx = take_positive ? positives[ip++] : negatives[in++];
    ph.annotations.add({volume_id, ph.volume.coord(idx), take_positive ? Label::kVessel : Label::kNonVessel});
  }
  return ph;
}

}  // namespace vessel3d
