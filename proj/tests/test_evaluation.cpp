#include <doctest.h>

#include <set>

#include "support.hpp"
#include "vessel3d/error.hpp"
#include "vessel3d/evaluation.hpp"

using namespace vessel3d;
using Eigen::MatrixXd;

namespace {

std::vector<std::uint8_t> alternating(std::size_t n) {
  std::vector<std::uint8_t> y(n);
  for (std::size_t i = 0; i < n; ++i) y[i] = i % 2;
  return y;
}

double segment_distance(std::array<double, 3> p, std::array<double, 3> a, std::array<double, 3> b) {
  double ab2 = 0, t = 0;
  for (int i = 0; i < 3; ++i) ab2 += (b[i] - a[i]) * (b[i] - a[i]), t += (p[i] - a[i]) * (b[i] - a[i]);
  t = ab2 > 0 ? std::clamp(t / ab2, 0.0, 1.0) : 0.0;
  double d2 = 0;
  for (int i = 0; i < 3; ++i) d2 += std::pow(p[i] - (a[i] + t * (b[i] - a[i])), 2);
  return std::sqrt(d2);
}

bool inside_tube(const TubeGeometry& tube, std::array<double, 3> p) {
  for (std::size_t i = 0; i + 1 < tube.centerline.size(); ++i)
    if (segment_distance(p, tube.centerline[i], tube.centerline[i + 1]) <= tube.radius) return true;
  return false;
}

}  // namespace

TEST_CASE("splits are disjoint with exact sizes") {
  const auto y = alternating(882);
  EvalConfig cfg;
  for (std::size_t t = 0; t < 200; ++t) {
    const Split s = make_split(y, cfg, t);
    CHECK(s.train.size() == 657);
    CHECK(s.test.size() == 225);
    std::set<std::size_t> all(s.train.begin(), s.train.end());
    all.insert(s.test.begin(), s.test.end());
    CHECK(all.size() == 882);
  }
  CHECK(make_split(y, cfg, 5).train == make_split(y, cfg, 5).train);
  CHECK(make_split(y, cfg, 5).train != make_split(y, cfg, 6).train);
}

TEST_CASE("splits lacking a class are redrawn, and the cap raises") {
  std::vector<std::uint8_t> y(50, 0);
  y[0] = 1;
  EvalConfig cfg;
  cfg.train_count = 5;
  cfg.test_count = 5;
  cfg.max_redraws = 1000;
  std::size_t redraws = 0;
  for (std::size_t t = 0; t < 20; ++t) {
    const Split s = make_split(y, cfg, t);
    redraws += s.redraws;
    CHECK(std::count_if(s.train.begin(), s.train.end(), [&](std::size_t i) { return y[i] == 1; }) == 1);
  }
  CHECK(redraws > 0);
  cfg.max_redraws = 0;
  bool raised = false;
  for (std::size_t t = 0; t < 20 && !raised; ++t) {
    try {
      make_split(y, cfg, t);
    } catch (const ValidationError&) {
      raised = true;
    }
  }
  CHECK(raised);
}

TEST_CASE("config validation") {
  EvalConfig cfg;
  CHECK_NOTHROW(cfg.validate(882));
  CHECK_THROWS_AS(cfg.validate(881), ValidationError);
  cfg.trials = 0;
  CHECK_THROWS_AS(cfg.validate(882), ValidationError);
}

TEST_CASE("sample standard deviation") {
  const std::vector<double> two{100.0, 0.0};
  const auto s = summarize_accuracies(two);
  CHECK(s.mean == doctest::Approx(50.0));
  CHECK(s.std == doctest::Approx(70.7106781187).epsilon(1e-9));
  CHECK(s.std_defined);
  const std::vector<double> one{93.0};
  const auto u = summarize_accuracies(one);
  CHECK(u.mean == 93.0);
  CHECK(u.std == 0.0);
  CHECK_FALSE(u.std_defined);
}

TEST_CASE("single trial on separable data") {
  const std::size_t n = 40;
  MatrixXd x(n, 2);
  const auto y = alternating(n);
  for (std::size_t i = 0; i < n; ++i) x(Eigen::Index(i), 0) = y[i] ? 1.0 + i * 0.01 : -1.0 - i * 0.01, x(Eigen::Index(i), 1) = 0.3 * i;
  EvalConfig cfg;
  cfg.train_count = 30;
  cfg.test_count = 10;
  cfg.trials = 1;
  cfg.cv_folds = 5;
  const EvalReport r = evaluate_repeated(x, y, cfg);
  CHECK(r.accuracy.mean == 100.0);
  CHECK(r.accuracy.std == 0.0);
  CHECK_FALSE(r.accuracy.std_defined);
}

TEST_CASE("repeated evaluation is deterministic and thread independent") {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> g;
  const std::size_t n = 120;
  MatrixXd x(n, 3);
  std::vector<std::uint8_t> y(n);
  for (std::size_t i = 0; i < n; ++i) {
    y[i] = g(rng) > 0;
    for (int j = 0; j < 3; ++j) x(Eigen::Index(i), j) = g(rng) + (y[i] ? 0.8 : 0.0) * (j == 0);
  }
  EvalConfig cfg;
  cfg.train_count = 90;
  cfg.test_count = 30;
  cfg.trials = 25;
  cfg.l2_grid = {0.01, 0.1, 1, 10};
  const EvalReport a = evaluate_repeated(x, y, cfg);
  cfg.threads = 4;
  const EvalReport b = evaluate_repeated(x, y, cfg);
  CHECK(a.per_trial == b.per_trial);
  CHECK(a.l2 == b.l2);
  CHECK(a.per_trial.size() == 25);
  CHECK(a.accuracy.mean > 50.0);
  cfg.fixed_l2 = 3.0;
  const EvalReport c = evaluate_repeated(x, y, cfg);
  CHECK(c.l2 == 3.0);
  CHECK_FALSE(c.cv.has_value());
}

TEST_CASE("confusion metrics") {
  const std::vector<std::uint8_t> actual{1, 1, 1, 0, 0, 0};
  const std::vector<std::uint8_t> pred{1, 1, 0, 0, 0, 1};
  const auto m = confusion_metrics(pred, actual);
  CHECK(m.tp == 2);
  CHECK(m.tn == 2);
  CHECK(m.fp == 1);
  CHECK(m.fn == 1);
  CHECK(m.accuracy == doctest::Approx(66.6667).epsilon(1e-4));
  const auto same = confusion_metrics(actual, actual);
  CHECK(same.accuracy == 100.0);
  CHECK(same.sensitivity == 100.0);
  CHECK(same.specificity == 100.0);
  std::vector<std::uint8_t> flipped(actual.size());
  for (std::size_t i = 0; i < actual.size(); ++i) flipped[i] = !actual[i];
  const auto none = confusion_metrics(flipped, actual);
  CHECK(none.accuracy == 0.0);
  CHECK(none.sensitivity == 0.0);
  CHECK(none.specificity == 0.0);
  const std::vector<std::uint8_t> ones{1, 1};
  CHECK(std::isnan(confusion_metrics(ones, ones).specificity));
  CHECK_THROWS_AS(confusion_metrics(ones, actual), ValidationError);
}

TEST_CASE("phantom labels agree with the analytic geometry") {
  PhantomSpec spec;
  spec.helix_fraction = 0.5;
  const Phantom ph = gen_phantom(spec);
  CHECK(ph.volume.dims() == Dims{64, 64, 64});
  CHECK(ph.volume.mask_count() == ph.volume.size());
  CHECK(ph.annotations.count(Label::kVessel) == 100);
  CHECK(ph.annotations.count(Label::kNonVessel) == 100);
  CHECK(ph.tubes.size() == 6);
  CHECK(ph.blobs.size() == 6);
  for (const auto& a : ph.annotations.entries()) {
    const std::array<double, 3> p{double(a.voxel.x), double(a.voxel.y), double(a.voxel.z)};
    bool in_tube = false;
    for (const auto& t : ph.tubes) in_tube = in_tube || inside_tube(t, p);
    CHECK(in_tube == (a.label == Label::kVessel));
    CHECK(ph.tube_truth[ph.volume.index(a.voxel)] == (a.label == Label::kVessel));
  }
  for (const auto& t : ph.tubes) CHECK((t.radius >= 1.0 && t.radius <= 3.0));
  for (const auto& b : ph.blobs) CHECK((b.radius >= 3.0 && b.radius <= 5.0));
  std::size_t blob_hits = 0;
  for (std::size_t i = 0; i < ph.volume.size(); ++i) {
    if (!ph.blob_truth[i]) continue;
    const auto c = ph.volume.coord(i);
    bool inside = false;
    for (const auto& b : ph.blobs) {
      const double d = std::hypot(c.x - b.center[0], c.y - b.center[1], c.z - b.center[2]);
      inside = inside || d <= b.radius;
    }
    blob_hits += inside;
    if (blob_hits > 200) break;
  }
  CHECK(blob_hits > 0);
}

TEST_CASE("phantom intensities and blob-biased negatives") {
  PhantomSpec spec;
  spec.noise_std = 0.0;
  spec.blob_negative_fraction = 0.5;
  const Phantom ph = gen_phantom(spec);
  std::size_t from_blobs = 0;
  for (const auto& a : ph.annotations.entries()) {
    const float v = ph.volume.at(a.voxel);
    if (a.label == Label::kVessel) CHECK(v == 1.0f);
    else from_blobs += ph.blob_truth[ph.volume.index(a.voxel)];
  }
  CHECK(from_blobs == 50);
}

TEST_CASE("phantom determinism and degenerate specs") {
  PhantomSpec spec;
  spec.dims = {32, 32, 32};
  spec.num_blobs = 2;
  spec.tube_radius_max = 2.0;
  spec.blob_radius_max = 3.0;
  const Phantom a = gen_phantom(spec);
  const Phantom b = gen_phantom(spec);
  CHECK(std::equal(a.volume.data().begin(), a.volume.data().end(), b.volume.data().begin()));
  CHECK(a.annotations.entries() == b.annotations.entries());
  spec.seed = 2;
  CHECK_FALSE(std::equal(a.volume.data().begin(), a.volume.data().end(), gen_phantom(spec).volume.data().begin()));

  PhantomSpec flat;
  flat.num_tubes = 0;
  flat.num_blobs = 0;
  flat.noise_std = 0.0;
  CHECK_THROWS_WITH_AS(gen_phantom(flat), doctest::Contains("vessel"), ValidationError);
  flat.annotations_per_class = 0;
  const Phantom c = gen_phantom(flat);
  for (float v : c.volume.data()) CHECK(v == 0.0f);

  PhantomSpec big;
  big.dims = {8, 8, 8};
  big.tube_radius_min = big.tube_radius_max = 5.0;
  CHECK_THROWS_AS(gen_phantom(big), ValidationError);
}

TEST_CASE("dice") {
  const std::vector<std::uint8_t> a{1, 1, 0, 0}, b{1, 0, 1, 0}, z{0, 0, 0, 0};
  CHECK(dice(a, a) == 1.0);
  CHECK(dice(a, b) == doctest::Approx(0.5));
  CHECK(dice(a, z) == 0.0);
}
