#include "vessel3d/sparse_coding.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "vessel3d/error.hpp"
#include "vessel3d/parallel.hpp"

namespace vessel3d {
namespace {

constexpr double kUnitTolerance = 1e-6;
constexpr double kCollapsedNorm = 1e-10;
constexpr double kUnusedEnergy = 1e-10;

// Independent RNG streams derived from the master seed.
enum class Stream : std::uint64_t { kSampling = 1, kInit = 2, kShuffle = 3, kReplace = 4 };

std::mt19937_64 make_rng(std::uint64_t seed, Stream stream, std::uint64_t sub = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(sub),
                    static_cast<std::uint32_t>(sub >> 32)};
  return std::mt19937_64(seq);
}

}  // namespace

// --- Dictionary ---------------------------------------------------------------

Dictionary::Dictionary(Eigen::MatrixXd atoms, int edge) : atoms_(std::move(atoms)), edge_(edge) {
  if (edge_ < 1) throw ValidationError("dictionary patch edge must be positive");
  const auto n = static_cast<Eigen::Index>(edge_) * edge_ * edge_;
  if (atoms_.rows() != n)
    throw ValidationError("dictionary has " + std::to_string(atoms_.rows()) +
                          " rows, expected edge^3 = " + std::to_string(n));
  if (atoms_.cols() < 1) throw ValidationError("dictionary needs at least one atom");
  if (!atoms_.allFinite()) throw ValidationError("dictionary contains non-finite values");
  if (max_norm_deviation() >= kUnitTolerance)
    throw ValidationError("dictionary columns are not unit norm (deviation " +
                          std::to_string(max_norm_deviation()) + ")");
}

Dictionary Dictionary::from_unnormalized(Eigen::MatrixXd atoms, int edge) {
  for (Eigen::Index j = 0; j < atoms.cols(); ++j) {
    const double norm = atoms.col(j).norm();
    if (!(norm > 0.0)) throw ValidationError("dictionary column " + std::to_string(j) + " is zero");
    atoms.col(j) /= norm;
  }
  return Dictionary(std::move(atoms), edge);
}

double Dictionary::max_norm_deviation() const {
  double worst = 0.0;
  for (Eigen::Index j = 0; j < atoms_.cols(); ++j)
    worst = std::max(worst, std::abs(atoms_.col(j).norm() - 1.0));
  return worst;
}

void DictLearnConfig::validate() const {
  if (d < 1) throw ValidationError("dictionary size d must be positive");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ValidationError("lambda must be >= 0");
  if (patch_edge < 1 || patch_edge % 2 == 0) throw ValidationError("patch edge must be a positive odd number");
  if (num_patches < 1) throw ValidationError("num_patches must be positive");
  if (batch_size < 1) throw ValidationError("batch_size must be positive");
  if (epochs < 1) throw ValidationError("epochs must be positive");
}

// --- Dictionary update ------------------------------------------------------------

Dictionary dict_update(const Dictionary& dict, const DictStats& stats, const AtomSource& fresh,
                       std::vector<Eigen::Index>* replaced) {
  const Eigen::Index n = dict.n();
  const Eigen::Index d = dict.d();
  if (stats.a.rows() != d || stats.a.cols() != d || stats.b.rows() != n || stats.b.cols() != d)
    throw ValidationError("dict_update: statistics are A " + std::to_string(stats.a.rows()) + "x" +
                          std::to_string(stats.a.cols()) + ", B " + std::to_string(stats.b.rows()) +
                          "x" + std::to_string(stats.b.cols()) + " for a " + std::to_string(n) + "x" +
                          std::to_string(d) + " dictionary");
  Eigen::MatrixXd atoms = dict.atoms();
  for (Eigen::Index j = 0; j < d; ++j) {
    const double ajj = stats.a(j, j);
    const double step = std::max(ajj, kCollapsedNorm);
    Eigen::VectorXd u = atoms.col(j) + (stats.b.col(j) - atoms * stats.a.col(j)) / step;
    const double norm = u.norm();
    if (!(norm >= kCollapsedNorm) || !std::isfinite(norm)) {
      if (fresh) {
        Eigen::VectorXd v = fresh();
        atoms.col(j) = v / v.norm();
        if (replaced) replaced->push_back(j);
      }
      continue;
    }
    atoms.col(j) = u / norm;
  }
  return Dictionary(std::move(atoms), dict.patch_edge());
}

// --- Patch sampling -----------------------------------------------------------------

PatchSet sample_patches(const std::vector<GaussianPyramid>& pyramids, const DictLearnConfig& cfg) {
  cfg.validate();
  const auto k = static_cast<std::size_t>(cfg.patch_edge);
  const std::size_t half = k / 2;

  struct Slot {
    std::size_t pyramid, level;
    std::size_t ox, oy, oz;  // origin counts per axis
    std::uint64_t origins;
  };
  std::vector<Slot> slots;
  std::uint64_t total = 0;
  bool any_valid_center = false;
  for (std::size_t p = 0; p < pyramids.size(); ++p) {
    for (std::size_t l = 0; l < pyramids[p].num_levels(); ++l) {
      const auto& vol = pyramids[p].level(l);
      const auto& dm = vol.dims();
      if (dm.nx < k || dm.ny < k || dm.nz < k) continue;
      Slot s{p, l, dm.nx - k + 1, dm.ny - k + 1, dm.nz - k + 1, 0};
      s.origins = static_cast<std::uint64_t>(s.ox) * s.oy * s.oz;
      if (!any_valid_center) {
        if (!vol.has_mask()) {
          any_valid_center = true;
        } else {
          for (std::size_t z = 0; z < s.oz && !any_valid_center; ++z)
            for (std::size_t y = 0; y < s.oy && !any_valid_center; ++y)
              for (std::size_t x = 0; x < s.ox && !any_valid_center; ++x)
                any_valid_center = vol.in_mask(vol.index(x + half, y + half, z + half));
        }
      }
      total += s.origins;
      slots.push_back(s);
    }
  }
  if (total == 0 || !any_valid_center)
    throw ValidationError("no valid patch origins: every level is smaller than the " +
                          std::to_string(k) + "^3 patch or the mask is empty");

  std::vector<std::uint64_t> cumulative(slots.size());
  std::uint64_t run = 0;
  for (std::size_t i = 0; i < slots.size(); ++i) cumulative[i] = (run += slots[i].origins);

  const auto n = static_cast<Eigen::Index>(k * k * k);
  PatchSet set;
  set.edge = cfg.patch_edge;
  set.values.resize(n, static_cast<Eigen::Index>(cfg.num_patches));
  set.sources.reserve(cfg.num_patches);

  auto rng = make_rng(cfg.seed, Stream::kSampling);
  std::uniform_int_distribution<std::uint64_t> pick(0, total - 1);
  while (set.sources.size() < cfg.num_patches) {
    const std::uint64_t u = pick(rng);
    const auto si = static_cast<std::size_t>(
        std::upper_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin());
    const Slot& s = slots[si];
    std::uint64_t off = u - (cumulative[si] - s.origins);
    const std::size_t ox = off % s.ox;
    off /= s.ox;
    const std::size_t oy = off % s.oy;
    const std::size_t oz = off / s.oy;
    const auto& vol = pyramids[s.pyramid].level(s.level);
    if (!vol.in_mask(vol.index(ox + half, oy + half, oz + half))) continue;

    auto col = set.values.col(static_cast<Eigen::Index>(set.sources.size()));
    const auto data = vol.data();
    Eigen::Index i = 0;
    for (std::size_t z = 0; z < k; ++z)
      for (std::size_t y = 0; y < k; ++y)
        for (std::size_t x = 0; x < k; ++x) col[i++] = data[vol.index(ox + x, oy + y, oz + z)];
    col.array() -= col.mean();
    set.sources.push_back({s.pyramid, s.level, ox, oy, oz});
  }
  return set;
}

// --- Training -------------------------------------------------------------------------

namespace {

// Random non-zero patch, unit-normalized. Throws when the data are all zero.
Eigen::VectorXd draw_atom(const PatchSet& patches, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> pick(0, patches.size() - 1);
  const std::size_t attempts = 1000 + 10 * patches.size();
  for (std::size_t t = 0; t < attempts; ++t) {
    const Eigen::VectorXd v = patches.values.col(static_cast<Eigen::Index>(pick(rng)));
    const double norm = v.norm();
    if (norm > kCollapsedNorm) return v / norm;
  }
  throw ValidationError("cannot initialize dictionary atoms: sampled patches are all zero "
                        "(constant input volumes)");
}

}  // namespace

TrainingResult train_dictionary(const PatchSet& patches, const DictLearnConfig& cfg,
                                unsigned threads) {
  cfg.validate();
  if (patches.size() == 0) throw ValidationError("train_dictionary: no patches");
  const Eigen::Index n = patches.dim();
  if (n != static_cast<Eigen::Index>(cfg.patch_edge) * cfg.patch_edge * cfg.patch_edge)
    throw ValidationError("train_dictionary: patch length does not match patch_edge^3");
  const Eigen::Index d = cfg.d;

  auto init_rng = make_rng(cfg.seed, Stream::kInit);
  Eigen::MatrixXd init(n, d);
  for (Eigen::Index j = 0; j < d; ++j) init.col(j) = draw_atom(patches, init_rng);
  Dictionary dict(std::move(init), cfg.patch_edge);

  auto replace_rng = make_rng(cfg.seed, Stream::kReplace);
  const AtomSource fresh = [&] { return draw_atom(patches, replace_rng); };

  TrainingResult result;
  result.patch_count = patches.size();
  DictStats stats(n, d);
  std::vector<std::size_t> order(patches.size());

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto shuffle_rng = make_rng(cfg.seed, Stream::kShuffle, static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    Eigen::VectorXd usage = Eigen::VectorXd::Zero(d);

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t count = std::min(cfg.batch_size, order.size() - start);
      const auto b = static_cast<Eigen::Index>(count);
      Eigen::MatrixXd batch(n, b);
      for (Eigen::Index i = 0; i < b; ++i)
        batch.col(i) = patches.values.col(static_cast<Eigen::Index>(order[start + static_cast<std::size_t>(i)]));

      const Eigen::MatrixXd& atoms = dict.atoms();
      const Eigen::MatrixXd gram = atoms.transpose() * atoms;
      const Eigen::MatrixXd corr = atoms.transpose() * batch;
      Eigen::MatrixXd codes(d, b);
      parallel_for(count, threads, [&](std::size_t i0, std::size_t i1) {
        for (std::size_t i = i0; i < i1; ++i) {
          const auto c = static_cast<Eigen::Index>(i);
          codes.col(c) = lars_lasso_gram(gram, corr.col(c), cfg.lambda).coeffs;
        }
      });

      const Eigen::MatrixXd residual = atoms * codes - batch;
      const double objective =
          residual.squaredNorm() + cfg.lambda * codes.cwiseAbs().sum();
      result.objective_trace.push_back(objective / static_cast<double>(count));

      stats.a += codes * codes.transpose();
      stats.b += batch * codes.transpose();
      usage += codes.rowwise().squaredNorm();

      std::vector<Eigen::Index> replaced;
      dict = dict_update(dict, stats, fresh, &replaced);
      for (Eigen::Index j : replaced) {
        stats.a.row(j).setZero();
        stats.a.col(j).setZero();
        stats.b.col(j).setZero();
      }
      result.replaced_atoms += replaced.size();
    }

    // Atoms no patch used during the whole epoch start over from data.
    Eigen::MatrixXd atoms = dict.atoms();
    bool changed = false;
    for (Eigen::Index j = 0; j < d; ++j) {
      if (usage[j] >= kUnusedEnergy) continue;
      atoms.col(j) = fresh();
      stats.a.row(j).setZero();
      stats.a.col(j).setZero();
      stats.b.col(j).setZero();
      ++result.replaced_atoms;
      changed = true;
    }
    if (changed) dict = Dictionary(std::move(atoms), cfg.patch_edge);
  }

  // Round to what the float32 container stores so in-memory and on-disk
  // dictionaries are interchangeable.
  Eigen::MatrixXd rounded = dict.atoms().cast<float>().cast<double>();
  result.dictionary = Dictionary(std::move(rounded), cfg.patch_edge);
  return result;
}

TrainingResult train_dictionary(const std::vector<GaussianPyramid>& pyramids,
                                const DictLearnConfig& cfg, unsigned threads) {
  return train_dictionary(sample_patches(pyramids, cfg), cfg, threads);
}

}  // namespace vessel3d
