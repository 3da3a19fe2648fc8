#include <cmath>
#include <limits>
#include <string>

#include "vessel3d/error.hpp"
#include "vessel3d/sparse_coding.hpp"

namespace vessel3d {
namespace {

constexpr double kDenominatorFloor = 1e-12;
constexpr double kSingularPivot = 1e-10;

double sign_of(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

SparseCode lars_lasso_gram(const Eigen::MatrixXd& gram, const Eigen::VectorXd& correlations,
                           double lambda) {
  const Eigen::Index d = gram.rows();
  if (gram.cols() != d || correlations.size() != d)
    throw ValidationError("lars: gram is " + std::to_string(gram.rows()) + "x" +
                          std::to_string(gram.cols()) + " but correlations have length " +
                          std::to_string(correlations.size()));
  if (!(lambda >= 0.0) || !std::isfinite(lambda))
    throw ValidationError("lars: lambda must be finite and non-negative");
  if (!gram.allFinite() || !correlations.allFinite())
    throw ValidationError("lars: non-finite input");

  SparseCode code;
  code.coeffs = Eigen::VectorXd::Zero(d);
  if (d == 0) return code;

  // Gradient of ||Dx - p||^2 is -2 D^T r, so optimality means |D^T r| <= lambda / 2.
  const double target = lambda / 2.0;

  Eigen::VectorXd& x = code.coeffs;
  Eigen::VectorXd c = correlations;
  Eigen::Index first = 0;
  for (Eigen::Index j = 1; j < d; ++j)
    if (std::abs(c[j]) > std::abs(c[first])) first = j;
  double level = std::abs(c[first]);
  if (level <= target) return code;

  std::vector<Eigen::Index> active{first};
  std::vector<char> is_active(static_cast<std::size_t>(d), 0);
  is_active[static_cast<std::size_t>(first)] = 1;
  Eigen::Index just_dropped = -1;

  const int max_steps = static_cast<int>(8 * d + 16);
  for (int step = 0;; ++step) {
    if (step >= max_steps) {
      code.truncated = true;
      break;
    }
    code.steps = step + 1;
    const auto k = static_cast<Eigen::Index>(active.size());
    Eigen::MatrixXd gram_a(k, k);
    Eigen::VectorXd signs(k);
    for (Eigen::Index r = 0; r < k; ++r) {
      const Eigen::Index jr = active[static_cast<std::size_t>(r)];
      for (Eigen::Index s = 0; s < k; ++s) gram_a(r, s) = gram(jr, active[static_cast<std::size_t>(s)]);
      signs[r] = x[jr] != 0.0 ? sign_of(x[jr]) : sign_of(c[jr]);
    }
    Eigen::LLT<Eigen::MatrixXd> llt(gram_a);
    bool singular = llt.info() != Eigen::Success;
    if (!singular) {
      const Eigen::VectorXd diag = llt.matrixL().toDenseMatrix().diagonal();
      singular = diag.minCoeff() * diag.minCoeff() < kSingularPivot * diag.maxCoeff() * diag.maxCoeff();
    }
    if (singular) {
      // The newest atom made the equicorrelation set degenerate; keep the
      // solution reached so far.
      code.truncated = true;
      break;
    }
    const Eigen::VectorXd w = llt.solve(signs);

    // Rate of change of every correlation along the direction.
    Eigen::VectorXd rate = Eigen::VectorXd::Zero(d);
    for (Eigen::Index r = 0; r < k; ++r) rate += gram.col(active[static_cast<std::size_t>(r)]) * w[r];

    enum class Event { kTarget, kAdd, kDrop };
    Event event = Event::kTarget;
    double gamma = level - target;
    Eigen::Index event_index = -1;

    for (Eigen::Index j = 0; j < d; ++j) {
      if (is_active[static_cast<std::size_t>(j)]) continue;
      // A just-dropped atom sits at the level with its old sign; only the
      // opposite sign may bring it back.
      const bool dropped = j == just_dropped;
      double best = std::numeric_limits<double>::infinity();
      if (1.0 - rate[j] > kDenominatorFloor && !(dropped && c[j] > 0.0))
        best = std::min(best, std::max(level - c[j], 0.0) / (1.0 - rate[j]));
      if (1.0 + rate[j] > kDenominatorFloor && !(dropped && c[j] < 0.0))
        best = std::min(best, std::max(level + c[j], 0.0) / (1.0 + rate[j]));
      if (best < gamma) {
        gamma = best;
        event = Event::kAdd;
        event_index = j;
      }
    }
    for (Eigen::Index r = 0; r < k; ++r) {
      const Eigen::Index j = active[static_cast<std::size_t>(r)];
      if (w[r] == 0.0 || x[j] == 0.0) continue;
      const double g = -x[j] / w[r];
      if (g > 0.0 && g < gamma) {
        gamma = g;
        event = Event::kDrop;
        event_index = j;
      }
    }

    for (Eigen::Index r = 0; r < k; ++r) x[active[static_cast<std::size_t>(r)]] += gamma * w[r];
    level -= gamma;
    c = correlations - gram * x;

    if (event == Event::kTarget) break;
    if (event == Event::kDrop) {
      x[event_index] = 0.0;
      is_active[static_cast<std::size_t>(event_index)] = 0;
      std::erase(active, event_index);
      just_dropped = event_index;
      if (active.empty()) {
        // Every coefficient returned to zero; restart from the largest correlation.
        Eigen::Index best = -1;
        for (Eigen::Index j = 0; j < d; ++j)
          if (j != event_index && (best < 0 || std::abs(c[j]) > std::abs(c[best]))) best = j;
        if (best < 0 || std::abs(c[best]) <= target) break;
        active.push_back(best);
        is_active[static_cast<std::size_t>(best)] = 1;
      }
    } else {
      active.push_back(event_index);
      is_active[static_cast<std::size_t>(event_index)] = 1;
      just_dropped = -1;
    }
  }

  for (Eigen::Index j = 0; j < d; ++j)
    if (x[j] != 0.0) code.active_set.push_back(j);
  return code;
}

SparseCode lars_lasso(const Eigen::MatrixXd& atoms, const Eigen::VectorXd& patch, double lambda) {
  if (patch.size() != atoms.rows())
    throw ValidationError("lars: patch length " + std::to_string(patch.size()) +
                          " does not match dictionary rows " + std::to_string(atoms.rows()));
  if (!atoms.allFinite() || !patch.allFinite()) throw ValidationError("lars: non-finite input");
  const Eigen::MatrixXd gram = atoms.transpose() * atoms;
  const Eigen::VectorXd corr = atoms.transpose() * patch;
  return lars_lasso_gram(gram, corr, lambda);
}

SparseCode lars_lasso(const Dictionary& dict, const Eigen::VectorXd& patch, double lambda) {
  return lars_lasso(dict.atoms(), patch, lambda);
}

double lasso_objective(const Eigen::MatrixXd& atoms, const Eigen::VectorXd& patch,
                       const Eigen::VectorXd& code, double lambda) {
  return (atoms * code - patch).squaredNorm() + lambda * code.lpNorm<1>();
}

}  // namespace vessel3d
