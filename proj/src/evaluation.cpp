#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "vessel3d/error.hpp"
#include "vessel3d/evaluation.hpp"
#include "vessel3d/parallel.hpp"

namespace vessel3d {

void EvalConfig::validate(std::size_t labeled) const {
  if (trials < 1) throw ValidationError("evaluation needs at least one trial");
  if (train_count < 1 || test_count < 1)
    throw ValidationError("train and test counts must be positive");
  if (train_count + test_count > labeled)
    throw ValidationError("train + test = " + std::to_string(train_count + test_count) +
                          " exceeds the " + std::to_string(labeled) + " labeled voxels");
  if (max_redraws < 0) throw ValidationError("max_redraws must be >= 0");
  if (fixed_l2 && !(*fixed_l2 >= 0.0)) throw ValidationError("fixed l2 must be >= 0");
}

Split make_split(std::span<const std::uint8_t> y, const EvalConfig& cfg, std::size_t trial) {
  Split split;
  std::vector<std::size_t> order(y.size());
  for (int attempt = 0; attempt <= cfg.max_redraws; ++attempt) {
    std::seed_seq seq{static_cast<std::uint32_t>(cfg.seed), static_cast<std::uint32_t>(cfg.seed >> 32),
                      static_cast<std::uint32_t>(trial), static_cast<std::uint32_t>(trial >> 32),
                      static_cast<std::uint32_t>(attempt)};
    std::mt19937_64 rng(seq);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    const auto train_end = order.begin() + static_cast<std::ptrdiff_t>(cfg.train_count);
    std::size_t positives = 0;
    for (auto it = order.begin(); it != train_end; ++it) positives += y[*it];
    if (positives == 0 || positives == cfg.train_count) {
      ++split.redraws;
      continue;
    }
    split.train.assign(order.begin(), train_end);
    split.test.assign(train_end, train_end + static_cast<std::ptrdiff_t>(cfg.test_count));
    return split;
  }
  throw ValidationError("trial " + std::to_string(trial) + ": training split lacked a class after " +
                        std::to_string(cfg.max_redraws) + " redraws");
}

AccuracySummary summarize_accuracies(std::span<const double> per_trial) {
  if (per_trial.empty()) throw ValidationError("no trials to summarize");
  AccuracySummary s;
  const double n = static_cast<double>(per_trial.size());
  s.mean = std::accumulate(per_trial.begin(), per_trial.end(), 0.0) / n;
  if (per_trial.size() < 2) return s;
  double ss = 0.0;
  for (double a : per_trial) ss += (a - s.mean) * (a - s.mean);
  s.std = std::sqrt(ss / (n - 1.0));
  s.std_defined = true;
  return s;
}

EvalReport evaluate_repeated(const Eigen::MatrixXd& x, std::span<const std::uint8_t> y,
                             const EvalConfig& cfg) {
  if (static_cast<Eigen::Index>(y.size()) != x.rows())
    throw ValidationError("label count does not match feature rows");
  cfg.validate(y.size());
  const auto positives = static_cast<std::size_t>(std::count(y.begin(), y.end(), std::uint8_t{1}));
  if (positives == 0 || positives == y.size())
    throw ValidationError("evaluation needs both classes among the labeled voxels");

  EvalReport report;
  report.config = cfg;
  if (cfg.fixed_l2) {
    report.l2 = *cfg.fixed_l2;
  } else {
    CvOptions cv;
    cv.folds = cfg.cv_folds;
    cv.seed = cfg.cv_seed;
    cv.threads = cfg.threads;
    cv.newton = cfg.newton;
    report.cv = cross_validate(x, y, cfg.l2_grid, cv);
    report.l2 = report.cv->best_l2;
  }

  report.per_trial.assign(cfg.trials, 0.0);
  std::vector<int> redraws(cfg.trials, 0);
  parallel_for(cfg.trials, cfg.threads, [&](std::size_t t0, std::size_t t1) {
    for (std::size_t t = t0; t < t1; ++t) {
      const Split split = make_split(y, cfg, t);
      redraws[t] = split.redraws;
      const auto rows = [](const std::vector<std::size_t>& idx) {
        return std::vector<Eigen::Index>(idx.begin(), idx.end());
      };
      const Eigen::MatrixXd xt = x(rows(split.train), Eigen::all);
      std::vector<std::uint8_t> yt;
      yt.reserve(split.train.size());
      for (auto i : split.train) yt.push_back(y[i]);
      const LogisticModel model = train_logreg(xt, yt, report.l2, cfg.newton);
      const Eigen::VectorXd prob = predict_proba(model, x(rows(split.test), Eigen::all));
      std::size_t correct = 0;
      for (std::size_t k = 0; k < split.test.size(); ++k)
        correct += classify(prob[static_cast<Eigen::Index>(k)]) == y[split.test[k]];
      report.per_trial[t] = 100.0 * static_cast<double>(correct) / static_cast<double>(split.test.size());
    }
  });
  for (int r : redraws) report.total_redraws += static_cast<std::size_t>(r);
  report.accuracy = summarize_accuracies(report.per_trial);
  return report;
}

ConfusionMetrics confusion_metrics(std::span<const std::uint8_t> predicted,
                                   std::span<const std::uint8_t> actual) {
  if (predicted.size() != actual.size())
    throw ValidationError("confusion_metrics: length mismatch");
  if (predicted.empty()) throw ValidationError("confusion_metrics: empty input");
  ConfusionMetrics m;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i] > 1 || actual[i] > 1) throw ValidationError("confusion_metrics: labels must be 0 or 1");
    if (actual[i]) (predicted[i] ? m.tp : m.fn)++;
    else (predicted[i] ? m.fp : m.tn)++;
  }
  const auto pct = [](std::size_t num, std::size_t den) {
    return den == 0 ? std::numeric_limits<double>::quiet_NaN()
                    : 100.0 * static_cast<double>(num) / static_cast<double>(den);
  };
  m.accuracy = pct(m.tp + m.tn, predicted.size());
  m.sensitivity = pct(m.tp, m.tp + m.fn);
  m.specificity = pct(m.tn, m.tn + m.fp);
  return m;
}

double dice(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
  if (a.size() != b.size()) throw ValidationError("dice: length mismatch");
  std::size_t both = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    na += a[i] != 0;
    nb += b[i] != 0;
    both += a[i] != 0 && b[i] != 0;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

}  // namespace vessel3d
