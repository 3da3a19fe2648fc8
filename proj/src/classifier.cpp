#include "vessel3d/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "vessel3d/error.hpp"
#include "vessel3d/parallel.hpp"

namespace vessel3d {
namespace {

double softplus(double s) { return std::max(s, 0.0) + std::log1p(std::exp(-std::abs(s))); }

double sigmoid(double s) {
  if (s >= 0.0) return 1.0 / (1.0 + std::exp(-s));
  const double e = std::exp(s);
  return e / (1.0 + e);
}

void check_labels(Eigen::Index rows, std::span<const std::uint8_t> y) {
  if (static_cast<Eigen::Index>(y.size()) != rows)
    throw ValidationError("label count " + std::to_string(y.size()) + " does not match row count " +
                          std::to_string(rows));
  for (auto v : y)
    if (v > 1) throw ValidationError("labels must be 0 or 1");
}

// softplus(s + d) - softplus(s) without cancelling two large terms.
double softplus_change(double s, double d) {
  if (std::abs(d) > 30.0) return softplus(s + d) - softplus(s);
  return std::log1p(sigmoid(s) * std::expm1(d));
}

// Objective difference between (w + dw, b + db) and (w, b), accurate to
// rounding of the change itself rather than of the objective.
double objective_change(const Eigen::VectorXd& score, const Eigen::VectorXd& dscore,
                        std::span<const std::uint8_t> y, const Eigen::VectorXd& w,
                        const Eigen::VectorXd& dw, double l2) {
  double delta = 0.0;
  for (Eigen::Index i = 0; i < score.size(); ++i)
    delta += y[static_cast<std::size_t>(i)] ? softplus_change(-score[i], -dscore[i])
                                            : softplus_change(score[i], dscore[i]);
  return delta + 0.5 * l2 * (2.0 * w.dot(dw) + dw.squaredNorm());
}

}  // namespace

Eigen::MatrixXd to_matrix(const FeatureMatrix& x) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(x.rows()), static_cast<Eigen::Index>(x.row_length));
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto row = x.row(r);
    for (std::size_t c = 0; c < x.row_length; ++c)
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = row[c];
  }
  return m;
}

double logistic_objective(const Eigen::MatrixXd& z, std::span<const std::uint8_t> y,
                          const Eigen::VectorXd& w, double b, double l2) {
  const Eigen::VectorXd s = (z * w).array() + b;
  double nll = 0.0;
  for (Eigen::Index i = 0; i < s.size(); ++i)
    nll += softplus(s[i]) - (y[static_cast<std::size_t>(i)] ? s[i] : 0.0);
  return nll + 0.5 * l2 * w.squaredNorm();
}

Eigen::VectorXd logistic_gradient(const Eigen::MatrixXd& z, std::span<const std::uint8_t> y,
                                  const Eigen::VectorXd& w, double b, double l2) {
  const Eigen::VectorXd s = (z * w).array() + b;
  Eigen::VectorXd resid(s.size());
  for (Eigen::Index i = 0; i < s.size(); ++i)
    resid[i] = sigmoid(s[i]) - static_cast<double>(y[static_cast<std::size_t>(i)]);
  Eigen::VectorXd g(w.size() + 1);
  g.head(w.size()) = z.transpose() * resid + l2 * w;
  g[w.size()] = resid.sum();
  return g;
}

LogisticModel train_logreg(const Eigen::MatrixXd& x, std::span<const std::uint8_t> y, double l2,
                           const NewtonOptions& opts) {
  const Eigen::Index n = x.rows();
  const Eigen::Index p = x.cols();
  check_labels(n, y);
  if (n < 1) throw ValidationError("train_logreg: no training rows");
  if (!(l2 >= 0.0) || !std::isfinite(l2)) throw ValidationError("train_logreg: l2 must be >= 0");
  if (!x.allFinite()) throw ValidationError("train_logreg: non-finite features");
  const auto positives = std::count(y.begin(), y.end(), std::uint8_t{1});
  if (l2 == 0.0 && (positives == 0 || positives == n))
    throw ValidationError("train_logreg: single-class labels without regularization diverge");

  LogisticModel model;
  model.l2 = l2;
  model.feature_mean = x.colwise().mean().transpose();
  model.feature_scale.resize(p);
  std::vector<Eigen::Index> free_cols;
  for (Eigen::Index c = 0; c < p; ++c) {
    const double sd = std::sqrt((x.col(c).array() - model.feature_mean[c]).square().mean());
    if (sd <= 1e-12 * std::max(1.0, std::abs(model.feature_mean[c]))) {
      model.feature_scale[c] = 1.0;  // constant column, weight pinned at zero
    } else {
      model.feature_scale[c] = sd;
      free_cols.push_back(c);
    }
  }
  const auto q = static_cast<Eigen::Index>(free_cols.size());
  Eigen::MatrixXd z(n, q);
  for (Eigen::Index k = 0; k < q; ++k) {
    const Eigen::Index c = free_cols[static_cast<std::size_t>(k)];
    z.col(k) = (x.col(c).array() - model.feature_mean[c]) / model.feature_scale[c];
  }

  Eigen::VectorXd w = Eigen::VectorXd::Zero(q);
  double b = 0.0;
  double f = logistic_objective(z, y, w, b, l2);
  Eigen::VectorXd g = logistic_gradient(z, y, w, b, l2);
  model.objective_trace.push_back(f);

  for (int iter = 0;; ++iter) {
    model.gradient_norm = g.lpNorm<Eigen::Infinity>();
    if (model.gradient_norm < opts.tol) {
      model.converged = true;
      break;
    }
    if (iter >= opts.max_iter) break;

    const Eigen::VectorXd s = (z * w).array() + b;
    Eigen::VectorXd weight(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double sg = sigmoid(s[i]);
      weight[i] = sg * (1.0 - sg);
    }
    Eigen::MatrixXd h(q + 1, q + 1);
    const Eigen::MatrixXd zw = z.transpose() * weight.asDiagonal();
    h.topLeftCorner(q, q) = zw * z;
    h.topLeftCorner(q, q).diagonal().array() += l2;
    h.topRightCorner(q, 1) = zw.rowwise().sum();
    h.bottomLeftCorner(1, q) = h.topRightCorner(q, 1).transpose();
    h(q, q) = weight.sum();

    Eigen::LLT<Eigen::MatrixXd> llt(h);
    if (llt.info() != Eigen::Success) {
      model.hessian_always_pd = false;
      double jitter = 1e-10 * std::max(1.0, h.diagonal().mean());
      do {
        Eigen::MatrixXd hj = h;
        hj.diagonal().array() += jitter;
        llt.compute(hj);
        jitter *= 10.0;
      } while (llt.info() != Eigen::Success && jitter < 1e10);
      if (llt.info() != Eigen::Success) throw NumericalError("train_logreg: Newton system is singular");
    }
    const Eigen::VectorXd step = llt.solve(-g);

    const Eigen::VectorXd dscore_full = (z * step.head(q)).array() + step[q];
    double t = 1.0;
    bool accepted = false;
    for (int h_i = 0; h_i <= opts.max_halvings; ++h_i, t *= 0.5) {
      const Eigen::VectorXd dw = t * step.head(q);
      const double change = objective_change(s, t * dscore_full, y, w, dw, l2);
      if (!std::isfinite(change) || change > 0.0) continue;
      w += dw;
      b += t * step[q];
      f += change;
      g = logistic_gradient(z, y, w, b, l2);
      accepted = true;
      break;
    }
    model.iterations = iter + 1;
    if (!accepted) break;  // no representable decrease left
    model.objective_trace.push_back(f);
    if (w.norm() > opts.max_weight_norm)
      throw NumericalError("train_logreg: weight norm exceeded " + std::to_string(opts.max_weight_norm) +
                           " (perfectly separable data without enough regularization)");
  }

  model.weights = Eigen::VectorXd::Zero(p);
  for (Eigen::Index k = 0; k < q; ++k) model.weights[free_cols[static_cast<std::size_t>(k)]] = w[k];
  model.bias = b;
  model.gradient_norm = g.lpNorm<Eigen::Infinity>();
  return model;
}

LogisticModel train_logreg(const FeatureMatrix& x, std::span<const std::uint8_t> y, double l2,
                           const NewtonOptions& opts) {
  return train_logreg(to_matrix(x), y, l2, opts);
}

Eigen::VectorXd predict_proba(const LogisticModel& model, const Eigen::MatrixXd& x) {
  if (x.cols() != model.dim())
    throw ValidationError("predict: rows have " + std::to_string(x.cols()) +
                          " features, model expects " + std::to_string(model.dim()));
  const Eigen::VectorXd w = model.weights.cwiseQuotient(model.feature_scale);
  const double offset = model.bias - w.dot(model.feature_mean);
  const Eigen::VectorXd s = (x * w).array() + offset;
  return s.unaryExpr([](double v) { return sigmoid(v); });
}

Eigen::VectorXd predict_proba(const LogisticModel& model, const FeatureMatrix& x) {
  return predict_proba(model, to_matrix(x));
}

std::vector<double> default_l2_grid() { return {1e-3, 1e-2, 1e-1, 1.0, 10.0, 1e2, 1e3}; }

std::vector<int> stratified_folds(std::span<const std::uint8_t> y, int folds, std::uint64_t seed) {
  if (folds < 2) throw ValidationError("cross-validation needs at least 2 folds");
  if (y.size() < static_cast<std::size_t>(folds))
    throw ValidationError("cross-validation: " + std::to_string(y.size()) + " rows for " +
                          std::to_string(folds) + " folds");
  std::vector<int> fold_of(y.size(), -1);
  std::mt19937_64 rng(seed);
  std::size_t dealt = 0;
  for (std::uint8_t cls : {std::uint8_t{0}, std::uint8_t{1}}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < y.size(); ++i)
      if (y[i] == cls) idx.push_back(i);
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t i : idx) fold_of[i] = static_cast<int>(dealt++ % static_cast<std::size_t>(folds));
  }
  return fold_of;
}

CvResult cross_validate(const Eigen::MatrixXd& x, std::span<const std::uint8_t> y,
                        std::vector<double> grid, const CvOptions& opts) {
  check_labels(x.rows(), y);
  if (grid.empty()) throw ValidationError("cross-validation grid is empty");
  std::sort(grid.begin(), grid.end());
  CvResult result;
  result.grid = grid;
  result.fold_of = stratified_folds(y, opts.folds, opts.seed);
  const auto g = static_cast<Eigen::Index>(grid.size());
  result.fold_accuracy = Eigen::MatrixXd::Zero(g, opts.folds);

  const auto tasks = grid.size() * static_cast<std::size_t>(opts.folds);
  parallel_for(tasks, opts.threads, [&](std::size_t t0, std::size_t t1) {
    for (std::size_t t = t0; t < t1; ++t) {
      const std::size_t gi = t / static_cast<std::size_t>(opts.folds);
      const int fold = static_cast<int>(t % static_cast<std::size_t>(opts.folds));
      std::vector<Eigen::Index> train, valid;
      for (std::size_t i = 0; i < y.size(); ++i)
        (result.fold_of[i] == fold ? valid : train).push_back(static_cast<Eigen::Index>(i));
      const Eigen::MatrixXd xt = x(train, Eigen::all);
      std::vector<std::uint8_t> yt;
      for (auto i : train) yt.push_back(y[static_cast<std::size_t>(i)]);
      const LogisticModel m = train_logreg(xt, yt, grid[gi], opts.newton);
      const Eigen::VectorXd prob = predict_proba(m, x(valid, Eigen::all));
      std::size_t correct = 0;
      for (std::size_t k = 0; k < valid.size(); ++k)
        correct += classify(prob[static_cast<Eigen::Index>(k)]) == y[static_cast<std::size_t>(valid[k])];
      result.fold_accuracy(static_cast<Eigen::Index>(gi), fold) =
          valid.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(valid.size());
    }
  });

  const Eigen::VectorXd mean = result.mean_accuracy();
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < g; ++i)
    if (mean[i] > mean[best] + 1e-12) best = i;
  result.best_l2 = grid[static_cast<std::size_t>(best)];
  return result;
}

}  // namespace vessel3d
