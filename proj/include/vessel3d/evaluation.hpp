#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "vessel3d/classifier.hpp"
#include "vessel3d/volume_io.hpp"

namespace vessel3d {

// --- Repeated random-split protocol -------------------------------------------------

struct EvalConfig {
  std::size_t train_count = 657;
  std::size_t test_count = 225;
  std::size_t trials = 1000;
  std::uint64_t seed = 7;
  int cv_folds = 10;
  std::uint64_t cv_seed = 7;  // fold assignment for the one-off l2 selection
  std::vector<double> l2_grid = default_l2_grid();
  /// When set, skips cross-validation and uses this strength for every trial.
  std::optional<double> fixed_l2;
  int max_redraws = 10;
  unsigned threads = 1;
  NewtonOptions newton;

  void validate(std::size_t labeled) const;
};

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  int redraws = 0;  // draws rejected because the training part lacked a class
};

/// Uniform split without replacement for one trial. The RNG is seeded from
/// (seed, trial, attempt) so trials are independent of execution order.
Split make_split(std::span<const std::uint8_t> y, const EvalConfig& cfg, std::size_t trial);

struct AccuracySummary {
  double mean = 0.0;  // percent
  double std = 0.0;   // percent, sample (N - 1) convention
  bool std_defined = false;
};

/// Mean and sample standard deviation of per-trial accuracies in percent.
/// A single trial reports std 0 with std_defined = false.
AccuracySummary summarize_accuracies(std::span<const double> per_trial_percent);

struct EvalReport {
  AccuracySummary accuracy;
  std::vector<double> per_trial;  // percent
  double l2 = 0.0;
  std::optional<CvResult> cv;
  std::size_t total_redraws = 0;
  EvalConfig config;
};

/// Selects l2 once by cross-validation on all rows (unless fixed), then
/// trains and tests on cfg.trials random splits.
EvalReport evaluate_repeated(const Eigen::MatrixXd& x, std::span<const std::uint8_t> y,
                             const EvalConfig& cfg);

struct ConfusionMetrics {
  std::size_t tp = 0, tn = 0, fp = 0, fn = 0;
  double accuracy = 0.0;     // percent
  double sensitivity = 0.0;  // percent; NaN without actual positives
  double specificity = 0.0;  // percent; NaN without actual negatives
};

ConfusionMetrics confusion_metrics(std::span<const std::uint8_t> predicted,
                                   std::span<const std::uint8_t> actual);

// --- Synthetic phantoms ---------------------------------------------------------------

struct PhantomSpec {
  Dims dims{64, 64, 64};
  int num_tubes = 6;
  double tube_radius_min = 1.0;
  double tube_radius_max = 3.0;
  /// Share of tubes drawn as helices instead of straight cylinders.
  double helix_fraction = 0.0;
  int num_blobs = 6;
  double blob_radius_min = 3.0;
  double blob_radius_max = 5.0;
  float background = 0.0f;
  float tube_intensity = 1.0f;
  float blob_intensity = 1.0f;
  double noise_std = 0.05;
  /// Annotated voxels per class; 0 produces an unannotated volume.
  std::size_t annotations_per_class = 100;
  /// Share of the non-vessel annotations forced to come from blob interiors.
  /// Unset: non-vessel voxels are drawn uniformly from everything outside the tubes.
  std::optional<double> blob_negative_fraction;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Tube centerline as a polyline of points in voxel coordinates.
struct TubeGeometry {
  std::vector<std::array<double, 3>> centerline;
  double radius = 1.0;
  bool helix = false;
};

struct BlobGeometry {
  std::array<double, 3> center{};
  double radius = 1.0;
};

struct Phantom {
  Volume3 volume;  // full mask attached
  AnnotationSet annotations;
  std::vector<std::uint8_t> tube_truth;  // 1 inside any tube
  std::vector<std::uint8_t> blob_truth;  // 1 inside any blob
  std::vector<TubeGeometry> tubes;
  std::vector<BlobGeometry> blobs;
};

/// Background plus Gaussian noise, spherical confounders at blob intensity
/// and tubes (straight or helical) drawn last at tube intensity. Vessel
/// annotations come from tube voxels, non-vessel ones from blobs and
/// background in equal number. Throws ValidationError when the geometry does
/// not fit or a requested class has no voxels.
Phantom gen_phantom(const PhantomSpec& spec, const std::string& volume_id = "phantom");

/// Euclidean distance from p to the polyline.
double distance_to_polyline(const std::array<double, 3>& p,
                            const std::vector<std::array<double, 3>>& line);

/// 2|A∩B| / (|A| + |B|); 1 when both are empty.
double dice(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b);

}  // namespace vessel3d
