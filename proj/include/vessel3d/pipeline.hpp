#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vessel3d/evaluation.hpp"
#include "vessel3d/sparse_coding.hpp"

namespace vessel3d::cli {

enum ExitCode : int { kOk = 0, kUsage = 1, kValidation = 2, kRuntime = 3 };

struct ClassifierSettings {
  int cv_folds = 10;
  std::vector<double> l2_grid = default_l2_grid();
  std::uint64_t seed = 7;
  NewtonOptions newton;
};

/// Every stage's settings in one document. Thread counts are deliberately
/// not part of it: they never change results.
struct PipelineConfig {
  std::filesystem::path out_dir = "run";
  std::string volume_id = "phantom";
  PhantomSpec phantom;
  int dictionary_volumes = 1;  // unannotated phantoms the dictionary is learned from
  PyramidConfig pyramid;
  int scales = 2;
  DictLearnConfig dict;
  ClassifierSettings classifier;
  std::size_t train_count = 120;
  std::size_t test_count = 40;
  std::size_t trials = 50;
  std::uint64_t eval_seed = 7;
  bool predict = true;

  /// Derives every stage seed from one master seed.
  void reseed(std::uint64_t master);
  EvalConfig eval_config(unsigned threads) const;
};

/// Missing keys keep their defaults; unknown keys are rejected.
PipelineConfig config_from_json(const nlohmann::json& doc);
nlohmann::json config_to_json(const PipelineConfig& cfg);
nlohmann::json phantom_to_json(const PhantomSpec& spec);
PhantomSpec phantom_from_json(const nlohmann::json& doc, PhantomSpec base = {});

// --- Stages ------------------------------------------------------------------------

struct PhantomArgs {
  PhantomSpec spec;
  std::string volume_id = "phantom";
  std::filesystem::path volume_out;
  std::filesystem::path annotations_out;  // empty: no annotation file
  std::filesystem::path truth_out;        // empty: no ground-truth volume
};
Phantom run_phantom(const PhantomArgs& args);

struct TrainDictArgs {
  std::vector<std::filesystem::path> volumes;
  std::vector<std::filesystem::path> masks;  // empty or one per volume
  PyramidConfig pyramid;
  int scales = 2;
  DictLearnConfig dict;
  std::filesystem::path out;
  unsigned threads = 1;
};
TrainingResult run_train_dict(const TrainDictArgs& args);

struct FeaturizeArgs {
  std::filesystem::path volume;
  std::filesystem::path mask;         // optional
  std::string volume_id;              // empty: file stem of `volume`
  std::filesystem::path dict;
  std::filesystem::path annotations;  // optional: restrict to this volume's annotated voxels
  std::filesystem::path model;        // optional: must reference the same dictionary
  int scales = 2;
  PyramidConfig pyramid;
  std::filesystem::path out;
  unsigned threads = 1;
};
FeatureMatrix run_featurize(const FeaturizeArgs& args);

struct TrainClfArgs {
  std::vector<std::filesystem::path> features;
  std::filesystem::path labels;
  ClassifierSettings classifier;
  std::optional<double> l2;  // skip cross-validation
  std::filesystem::path out;
  unsigned threads = 1;
};
LogisticModel run_train_clf(const TrainClfArgs& args);

struct EvaluateArgs {
  std::vector<std::filesystem::path> features;
  std::filesystem::path labels;
  EvalConfig eval;
  std::filesystem::path report;  // JSON; a plain-text table goes next to it as .txt
};
EvalReport run_evaluate(const EvaluateArgs& args);

struct PredictArgs {
  std::filesystem::path volume;
  std::filesystem::path mask;  // optional
  std::filesystem::path dict;
  std::filesystem::path model;
  std::filesystem::path probability_out;
  std::filesystem::path segmentation_out;
  unsigned threads = 1;
};
struct PredictResult {
  Volume3 probability;
  std::vector<std::uint8_t> segmentation;
};
PredictResult run_predict(const PredictArgs& args);

struct PipelineResult {
  EvalReport report;
  double dice = 0.0;  // segmentation vs phantom tubes; 0 when predict is off
  std::filesystem::path dictionary, features, model, report_path;
};
PipelineResult run_pipeline(const PipelineConfig& cfg, unsigned threads);

/// Joins feature rows with annotation labels by (volume_id, x, y, z); rows
/// without a label are dropped.
struct LabeledRows {
  Eigen::MatrixXd x;
  std::vector<std::uint8_t> y;
};
LabeledRows join_labels(const FeatureMatrix& fm, const AnnotationSet& labels);

/// Entry point of the `vessel3d` executable.
int run_subcommand(int argc, char** argv);

}  // namespace vessel3d::cli
