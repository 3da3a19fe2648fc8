#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "vessel3d/featurize.hpp"

namespace vessel3d {

struct NewtonOptions {
  double tol = 1e-8;  // gradient infinity-norm in standardized coordinates
  int max_iter = 100;
  int max_halvings = 30;
  double max_weight_norm = 1e6;
};

/// Linear logistic model on z-scored features.
struct LogisticModel {
  Eigen::VectorXd weights;       // standardized space
  double bias = 0.0;
  double l2 = 0.0;
  Eigen::VectorXd feature_mean;
  Eigen::VectorXd feature_scale;  // > 0; constant features get 1

  // Training diagnostics.
  int iterations = 0;
  double gradient_norm = 0.0;  // infinity norm at exit
  bool converged = false;
  std::vector<double> objective_trace;  // initial objective, then minus each accepted decrease
  bool hessian_always_pd = true;        // every Newton system factored by LLT

  Eigen::Index dim() const { return weights.size(); }
};

/// Row-major copy of the feature rows as doubles.
Eigen::MatrixXd to_matrix(const FeatureMatrix& x);

/// Negative log-likelihood + (l2 / 2) ||w||^2 on already standardized rows;
/// the bias is unpenalized.
double logistic_objective(const Eigen::MatrixXd& z, std::span<const std::uint8_t> y,
                          const Eigen::VectorXd& w, double b, double l2);

/// Gradient of logistic_objective; the last entry is d/db.
Eigen::VectorXd logistic_gradient(const Eigen::MatrixXd& z, std::span<const std::uint8_t> y,
                                  const Eigen::VectorXd& w, double b, double l2);

/// Damped Newton (step halving on objective increase). Throws NumericalError
/// when ||w|| exceeds opts.max_weight_norm (separable data without
/// regularization) and ValidationError for single-class labels with l2 = 0.
LogisticModel train_logreg(const Eigen::MatrixXd& x, std::span<const std::uint8_t> y, double l2,
                           const NewtonOptions& opts = {});
LogisticModel train_logreg(const FeatureMatrix& x, std::span<const std::uint8_t> y, double l2,
                           const NewtonOptions& opts = {});

Eigen::VectorXd predict_proba(const LogisticModel& model, const Eigen::MatrixXd& x);
Eigen::VectorXd predict_proba(const LogisticModel& model, const FeatureMatrix& x);

/// Vessel iff probability is strictly greater than 0.5.
inline std::uint8_t classify(double probability) { return probability > 0.5 ? 1 : 0; }

struct CvResult {
  std::vector<double> grid;
  Eigen::MatrixXd fold_accuracy;  // grid.size() x folds, fractions in [0, 1]
  std::vector<int> fold_of;       // validation fold of every row
  double best_l2 = 0.0;
  Eigen::VectorXd mean_accuracy() const { return fold_accuracy.rowwise().mean(); }
};

struct CvOptions {
  int folds = 10;
  std::uint64_t seed = 1;
  unsigned threads = 1;
  NewtonOptions newton;
};

std::vector<double> default_l2_grid();

/// Stratified k-fold assignment: each class is shuffled and dealt
/// round-robin, continuing the fold counter across classes.
std::vector<int> stratified_folds(std::span<const std::uint8_t> y, int folds, std::uint64_t seed);

/// Picks the l2 with the best mean validation accuracy; ties go to the smaller l2.
CvResult cross_validate(const Eigen::MatrixXd& x, std::span<const std::uint8_t> y,
                        std::vector<double> grid, const CvOptions& opts = {});

}  // namespace vessel3d
