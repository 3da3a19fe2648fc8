#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "vessel3d/pyramid.hpp"

namespace vessel3d {

/// Where a patch was cut from: pyramid index, level and origin (min corner).
struct PatchSource {
  std::size_t pyramid = 0;
  std::size_t level = 0;
  std::size_t x = 0;
  std::size_t y = 0;
  std::size_t z = 0;
};

/// Mean-subtracted k^3 patches stored as columns, flattened x-fastest.
struct PatchSet {
  int edge = 0;
  Eigen::MatrixXd values;  // n x count
  std::vector<PatchSource> sources;

  std::size_t size() const { return sources.size(); }
  Eigen::Index dim() const { return values.rows(); }
};

/// n x d matrix of unit-norm atoms; each column is a k^3 filter flattened in
/// the same x-fastest order as patches.
class Dictionary {
 public:
  Dictionary() = default;
  /// Throws ValidationError unless rows == edge^3 and every column has unit
  /// L2 norm within 1e-6.
  Dictionary(Eigen::MatrixXd atoms, int edge);

  /// Normalizes every column first; zero columns are rejected.
  static Dictionary from_unnormalized(Eigen::MatrixXd atoms, int edge);

  const Eigen::MatrixXd& atoms() const { return atoms_; }
  Eigen::Index n() const { return atoms_.rows(); }
  Eigen::Index d() const { return atoms_.cols(); }
  int patch_edge() const { return edge_; }

  /// Max over columns of | ||D_j|| - 1 |.
  double max_norm_deviation() const;

 private:
  Eigen::MatrixXd atoms_;
  int edge_ = 0;
};

struct SparseCode {
  Eigen::VectorXd coeffs;
  std::vector<Eigen::Index> active_set;  // indices with nonzero coefficients, ascending
  int steps = 0;                         // homotopy breakpoints visited
  bool truncated = false;                // stopped early on a singular active Gram matrix
};

/// Exact LASSO solution of min_x ||D x - p||^2 + lambda ||x||_1 via the LARS
/// homotopy with sign-change drops. The path stops once the largest residual
/// correlation |D^T (p - D x)| reaches lambda / 2, which is where the KKT
/// conditions of this objective hold. Ties enter by lowest column index.
SparseCode lars_lasso(const Eigen::MatrixXd& atoms, const Eigen::VectorXd& patch, double lambda);
SparseCode lars_lasso(const Dictionary& dict, const Eigen::VectorXd& patch, double lambda);

/// Same solver on precomputed gram = D^T D and correlations = D^T p.
SparseCode lars_lasso_gram(const Eigen::MatrixXd& gram, const Eigen::VectorXd& correlations,
                           double lambda);

/// ||D x - p||^2 + lambda ||x||_1.
double lasso_objective(const Eigen::MatrixXd& atoms, const Eigen::VectorXd& patch,
                       const Eigen::VectorXd& code, double lambda);

struct DictLearnConfig {
  int d = 64;
  double lambda = 1.0;
  int patch_edge = 5;
  std::size_t num_patches = 100'000;
  std::size_t batch_size = 256;
  int epochs = 1;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Sufficient statistics of the codes seen so far: A = sum x x^T, B = sum p x^T.
struct DictStats {
  Eigen::MatrixXd a;  // d x d
  Eigen::MatrixXd b;  // n x d

  DictStats() = default;
  DictStats(Eigen::Index n, Eigen::Index d)
      : a(Eigen::MatrixXd::Zero(d, d)), b(Eigen::MatrixXd::Zero(n, d)) {}
};

/// Source of replacement atoms for columns whose update collapses.
using AtomSource = std::function<Eigen::VectorXd()>;

/// One sweep of block coordinate descent over the columns:
/// u_j = D_j + (B_j - D A_j) / max(A_jj, eps), then D_j = u_j / ||u_j||.
/// For A_jj > 0 this is the exact minimizer of the code-fixed objective over
/// the unit sphere for column j. Columns with ||u_j|| < 1e-10 are replaced
/// from `fresh` when given and left unchanged otherwise.
Dictionary dict_update(const Dictionary& dict, const DictStats& stats, const AtomSource& fresh = {},
                       std::vector<Eigen::Index>* replaced = nullptr);

/// Draws cfg.num_patches patches uniformly over (pyramid, level, origin)
/// triples whose center voxel is inside the mask; each is mean-subtracted.
PatchSet sample_patches(const std::vector<GaussianPyramid>& pyramids, const DictLearnConfig& cfg);

struct TrainingResult {
  Dictionary dictionary;
  std::vector<double> objective_trace;  // mean per-patch objective of each mini-batch
  std::size_t replaced_atoms = 0;
  std::size_t patch_count = 0;
};

/// Mini-batch dictionary learning: codes by lars_lasso, columns by
/// dict_update on accumulated (A, B). Atoms are initialized from random
/// non-zero patches; the returned matrix is rounded to float32 precision.
TrainingResult train_dictionary(const PatchSet& patches, const DictLearnConfig& cfg,
                                unsigned threads = 1);
TrainingResult train_dictionary(const std::vector<GaussianPyramid>& pyramids,
                                const DictLearnConfig& cfg, unsigned threads = 1);

}  // namespace vessel3d
