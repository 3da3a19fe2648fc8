#include "vessel3d/pipeline.hpp"

#include <chrono>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "vessel3d/artifacts.hpp"
#include "vessel3d/error.hpp"
#include "vessel3d/log.hpp"
#include "vessel3d/volume_io.hpp"

namespace vessel3d::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// --- JSON helpers ------------------------------------------------------------------

void check_keys(const json& obj, std::initializer_list<const char*> allowed, const std::string& section) {
  if (!obj.is_object()) throw ValidationError("config section '" + section + "' must be an object");
  for (const auto& [key, _] : obj.items()) {
    bool known = false;
    for (const char* a : allowed) known = known || key == a;
    if (!known) throw ValidationError("unknown config key '" + section + "." + key + "'");
  }
}

template <typename T>
void read_into(const json& obj, const char* key, T& field) {
  if (obj.contains(key)) field = obj.at(key).get<T>();
}

json file_ref(const fs::path& path) {
  return {{"file", path.filename().string()}, {"sha256", sha256_file(path)}};
}

json pyramid_json(const PyramidConfig& p) {
  return {{"sigma", p.sigma}, {"radius", p.radius}, {"factor", p.factor}};
}

PyramidConfig pyramid_from(const json& doc, PyramidConfig p = {}) {
  check_keys(doc, {"sigma", "radius", "factor"}, "pyramid");
  read_into(doc, "sigma", p.sigma);
  read_into(doc, "radius", p.radius);
  read_into(doc, "factor", p.factor);
  return p;
}

json dict_json(const DictLearnConfig& d) {
  return {{"d", d.d},           {"lambda", d.lambda},         {"patch_edge", d.patch_edge},
          {"num_patches", d.num_patches}, {"batch_size", d.batch_size}, {"epochs", d.epochs},
          {"seed", d.seed}};
}

DictLearnConfig dict_from(const json& doc, DictLearnConfig d = {}) {
  check_keys(doc, {"d", "lambda", "patch_edge", "num_patches", "batch_size", "epochs", "seed"}, "dictionary");
  read_into(doc, "d", d.d);
  read_into(doc, "lambda", d.lambda);
  read_into(doc, "patch_edge", d.patch_edge);
  read_into(doc, "num_patches", d.num_patches);
  read_into(doc, "batch_size", d.batch_size);
  read_into(doc, "epochs", d.epochs);
  read_into(doc, "seed", d.seed);
  return d;
}

json classifier_json(const ClassifierSettings& c) {
  return {{"cv_folds", c.cv_folds}, {"l2_grid", c.l2_grid}, {"seed", c.seed},
          {"tol", c.newton.tol},    {"max_iter", c.newton.max_iter}};
}

ClassifierSettings classifier_from(const json& doc, ClassifierSettings c = {}) {
  check_keys(doc, {"cv_folds", "l2_grid", "seed", "tol", "max_iter"}, "classifier");
  read_into(doc, "cv_folds", c.cv_folds);
  read_into(doc, "l2_grid", c.l2_grid);
  read_into(doc, "seed", c.seed);
  read_into(doc, "tol", c.newton.tol);
  read_into(doc, "max_iter", c.newton.max_iter);
  return c;
}

json eval_json(const EvalConfig& e) {
  json j = {{"train", e.train_count}, {"test", e.test_count}, {"trials", e.trials},
            {"seed", e.seed},         {"cv_folds", e.cv_folds}, {"cv_seed", e.cv_seed},
            {"l2_grid", e.l2_grid},   {"threshold", "probability > 0.5"}};
  if (e.fixed_l2) j["fixed_l2"] = *e.fixed_l2;
  return j;
}

void log_stage(const std::string& stage, double seconds, json fields = json::object()) {
  fields["stage"] = stage;
  fields["seconds"] = std::round(seconds * 1000.0) / 1000.0;
  log::info(fields.dump());
}

class Stopwatch {
 public:
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

Volume3 load_volume(const fs::path& path, const fs::path& mask) {
  Volume3 vol = read_volume(path);
  if (!mask.empty()) vol = attach_mask(vol, read_volume(mask));
  return vol;
}

json truncated_trace(const std::vector<double>& trace, std::size_t tail) {
  const std::size_t start = trace.size() > tail ? trace.size() - tail : 0;
  return std::vector<double>(trace.begin() + static_cast<std::ptrdiff_t>(start), trace.end());
}

double window_mean(const std::vector<double>& trace, bool first, std::size_t window) {
  if (trace.empty()) return 0.0;
  const std::size_t w = std::min(window, trace.size());
  const auto begin = first ? trace.begin() : trace.end() - static_cast<std::ptrdiff_t>(w);
  double s = 0.0;
  for (auto it = begin; it != begin + static_cast<std::ptrdiff_t>(w); ++it) s += *it;
  return s / static_cast<double>(w);
}

struct LoadedFeatures {
  FeatureMatrix fm;
  json sidecar;  // of the first file
  json refs = json::array();
};

LoadedFeatures load_features(const std::vector<fs::path>& paths) {
  if (paths.empty()) throw ValidationError("no feature files given");
  LoadedFeatures out;
  for (const auto& p : paths) {
    json side;
    FeatureMatrix fm = read_features(p, &side);
    if (out.sidecar.is_null()) {
      out.sidecar = side;
    } else if (side.value("dictionary_sha256", "") != out.sidecar.value("dictionary_sha256", "") ||
               side.value("scales", 0) != out.sidecar.value("scales", 0)) {
      throw ValidationError(p.string() + " was featurized with a different dictionary or scale count");
    }
    out.fm.append(fm);
    out.refs.push_back(file_ref(p));
  }
  return out;
}

std::string table_text(const EvalReport& report, const json& features_sidecar) {
  const json dict = features_sidecar.value("dictionary", json::object());
  const auto k = dict.value("patch_edge", 0);
  const auto cell = [](const std::string& label, const std::string& value) {
    std::ostringstream s;
    s << std::left << std::setw(34) << label << "| " << value << '\n';
    return s.str();
  };
  std::ostringstream acc;
  acc << std::fixed << std::setprecision(2) << report.accuracy.mean << "\xC2\xB1" << report.accuracy.std << '%';
  if (!report.accuracy.std_defined) acc << " (single trial, std undefined)";
  std::ostringstream out;
  out << cell("", "3D multiscale features");
  out << std::string(34, '-') << "+" << std::string(30, '-') << '\n';
  out << cell("Algorithm for D training", "minibatch LASSO+LAR");
  out << cell("Algorithm for logit regression", "Newton's L2");
  out << cell("Dim of patches and elements",
              std::to_string(k) + "x" + std::to_string(k) + "x" + std::to_string(k));
  out << cell("Number of patches", std::to_string(dict.value("patch_count", 0)));
  out << cell("Number of elements", std::to_string(dict.value("d", 0)));
  out << cell("Number of scales s", std::to_string(features_sidecar.value("scales", 0)));
  out << cell("Number of features", std::to_string(features_sidecar.value("row_length", 0)));
  out << cell("Selected l2", [&] {
    std::ostringstream s;
    s << report.l2;
    return s.str();
  }());
  out << cell("Split (train/test) x trials", std::to_string(report.config.train_count) + "/" +
                                                 std::to_string(report.config.test_count) + " x " +
                                                 std::to_string(report.config.trials));
  out << cell("Accuracy (mean, sample std)", acc.str());
  return out.str();
}

}  // namespace

// --- Config ------------------------------------------------------------------------

json phantom_to_json(const PhantomSpec& s) {
  return {{"dims", {s.dims.nx, s.dims.ny, s.dims.nz}},
          {"num_tubes", s.num_tubes},
          {"tube_radius", {s.tube_radius_min, s.tube_radius_max}},
          {"helix_fraction", s.helix_fraction},
          {"num_blobs", s.num_blobs},
          {"blob_radius", {s.blob_radius_min, s.blob_radius_max}},
          {"background", s.background},
          {"tube_intensity", s.tube_intensity},
          {"blob_intensity", s.blob_intensity},
          {"noise_std", s.noise_std},
          {"annotations_per_class", s.annotations_per_class},
          {"blob_negative_fraction", s.blob_negative_fraction ? json(*s.blob_negative_fraction) : json(nullptr)},
          {"seed", s.seed}};
}

PhantomSpec phantom_from_json(const json& doc, PhantomSpec s) {
  check_keys(doc,
             {"dims", "num_tubes", "tube_radius", "helix_fraction", "num_blobs", "blob_radius", "background",
              "tube_intensity", "blob_intensity", "noise_std", "annotations_per_class",
              "blob_negative_fraction", "seed"},
             "phantom");
  try {
    if (doc.contains("dims")) {
      const auto d = doc.at("dims").get<std::vector<std::size_t>>();
      if (d.size() != 3) throw ValidationError("phantom.dims needs three entries");
      s.dims = {d[0], d[1], d[2]};
    }
    read_into(doc, "num_tubes", s.num_tubes);
    if (doc.contains("tube_radius")) {
      const auto r = doc.at("tube_radius").get<std::vector<double>>();
      if (r.size() != 2) throw ValidationError("phantom.tube_radius needs [min, max]");
      s.tube_radius_min = r[0];
      s.tube_radius_max = r[1];
    }
    read_into(doc, "helix_fraction", s.helix_fraction);
    read_into(doc, "num_blobs", s.num_blobs);
    if (doc.contains("blob_radius")) {
      const auto r = doc.at("blob_radius").get<std::vector<double>>();
      if (r.size() != 2) throw ValidationError("phantom.blob_radius needs [min, max]");
      s.blob_radius_min = r[0];
      s.blob_radius_max = r[1];
    }
    read_into(doc, "background", s.background);
    read_into(doc, "tube_intensity", s.tube_intensity);
    read_into(doc, "blob_intensity", s.blob_intensity);
    read_into(doc, "noise_std", s.noise_std);
    read_into(doc, "annotations_per_class", s.annotations_per_class);
    if (doc.contains("blob_negative_fraction")) {
      const auto& v = doc.at("blob_negative_fraction");
      s.blob_negative_fraction = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
    }
    read_into(doc, "seed", s.seed);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("invalid phantom spec: ") + e.what());
  }
  s.validate();
  return s;
}

void PipelineConfig::reseed(std::uint64_t master) {
  phantom.seed = master;
  dict.seed = master + 1;
  classifier.seed = master + 2;
  eval_seed = master + 3;
}

EvalConfig PipelineConfig::eval_config(unsigned threads) const {
  EvalConfig e;
  e.train_count = train_count;
  e.test_count = test_count;
  e.trials = trials;
  e.seed = eval_seed;
  e.cv_folds = classifier.cv_folds;
  e.cv_seed = classifier.seed;
  e.l2_grid = classifier.l2_grid;
  e.newton = classifier.newton;
  e.threads = threads;
  return e;
}

PipelineConfig config_from_json(const json& doc) {
  PipelineConfig c;
  check_keys(doc,
             {"out_dir", "volume_id", "phantom", "dictionary_volumes", "pyramid", "scales", "dictionary",
              "classifier", "evaluation", "predict"},
             "config");
  try {
    if (doc.contains("out_dir")) c.out_dir = doc.at("out_dir").get<std::string>();
    read_into(doc, "volume_id", c.volume_id);
    if (doc.contains("phantom")) c.phantom = phantom_from_json(doc.at("phantom"), c.phantom);
    read_into(doc, "dictionary_volumes", c.dictionary_volumes);
    if (doc.contains("pyramid")) c.pyramid = pyramid_from(doc.at("pyramid"), c.pyramid);
    read_into(doc, "scales", c.scales);
    if (doc.contains("dictionary")) c.dict = dict_from(doc.at("dictionary"), c.dict);
    if (doc.contains("classifier")) c.classifier = classifier_from(doc.at("classifier"), c.classifier);
    if (doc.contains("evaluation")) {
      const auto& e = doc.at("evaluation");
      check_keys(e, {"train", "test", "trials", "seed"}, "evaluation");
      read_into(e, "train", c.train_count);
      read_into(e, "test", c.test_count);
      read_into(e, "trials", c.trials);
      read_into(e, "seed", c.eval_seed);
    }
    read_into(doc, "predict", c.predict);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("invalid config: ") + e.what());
  }
  if (c.scales < 1) throw ValidationError("scales must be >= 1");
  if (c.dictionary_volumes < 1) throw ValidationError("dictionary_volumes must be >= 1");
  c.dict.validate();
  return c;
}

json config_to_json(const PipelineConfig& c) {
  return {{"out_dir", c.out_dir.string()},
          {"volume_id", c.volume_id},
          {"phantom", phantom_to_json(c.phantom)},
          {"dictionary_volumes", c.dictionary_volumes},
          {"pyramid", pyramid_json(c.pyramid)},
          {"scales", c.scales},
          {"dictionary", dict_json(c.dict)},
          {"classifier", classifier_json(c.classifier)},
          {"evaluation", {{"train", c.train_count}, {"test", c.test_count}, {"trials", c.trials}, {"seed", c.eval_seed}}},
          {"predict", c.predict}};
}

// --- Stages ------------------------------------------------------------------------

Phantom run_phantom(const PhantomArgs& args) {
  Stopwatch sw;
  if (args.volume_out.empty()) throw ValidationError("phantom: an output volume path is required");
  PhantomSpec spec = args.spec;
  if (args.annotations_out.empty()) spec.annotations_per_class = 0;
  Phantom ph = gen_phantom(spec, args.volume_id);
  write_volume(ph.volume, args.volume_out, ElementType::kFloat32);
  json side = {{"format", "vessel3d-phantom"}, {"volume_id", args.volume_id}, {"spec", phantom_to_json(spec)},
               {"tube_voxels", std::count(ph.tube_truth.begin(), ph.tube_truth.end(), 1)},
               {"blob_voxels", std::count(ph.blob_truth.begin(), ph.blob_truth.end(), 1)}};
  if (!args.annotations_out.empty()) {
    write_annotations(ph.annotations, args.annotations_out);
    side["annotations"] = file_ref(args.annotations_out);
  }
  if (!args.truth_out.empty()) {
    std::vector<float> truth(ph.tube_truth.begin(), ph.tube_truth.end());
    write_volume(Volume3(ph.volume.dims(), std::move(truth)), args.truth_out, ElementType::kUInt8);
    side["truth"] = file_ref(args.truth_out);
  }
  write_json(side, sidecar_path(args.volume_out));
  log_stage("phantom", sw.seconds(),
            {{"volume", args.volume_out.string()}, {"annotations", ph.annotations.size()}});
  return ph;
}

TrainingResult run_train_dict(const TrainDictArgs& args) {
  Stopwatch sw;
  if (args.volumes.empty()) throw ValidationError("train-dict: no input volumes");
  if (!args.masks.empty() && args.masks.size() != args.volumes.size())
    throw ValidationError("train-dict: give either no masks or one per volume");
  if (args.out.empty()) throw ValidationError("train-dict: an output path is required");
  std::vector<GaussianPyramid> pyramids;
  json inputs = json::array();
  for (std::size_t i = 0; i < args.volumes.size(); ++i) {
    const fs::path mask = args.masks.empty() ? fs::path{} : args.masks[i];
    pyramids.emplace_back(load_volume(args.volumes[i], mask), args.scales, args.pyramid, args.threads);
    json ref = file_ref(args.volumes[i]);
    if (!mask.empty()) ref["mask"] = file_ref(mask);
    inputs.push_back(std::move(ref));
  }
  TrainingResult result = train_dictionary(pyramids, args.dict, args.threads);
  const auto& trace = result.objective_trace;
  json meta = {{"config", {{"dictionary", dict_json(args.dict)}, {"pyramid", pyramid_json(args.pyramid)}, {"scales", args.scales}}},
               {"inputs", std::move(inputs)},
               {"training",
                {{"patch_count", result.patch_count},
                 {"patch_edge", args.dict.patch_edge},
                 {"d", args.dict.d},
                 {"lambda", args.dict.lambda},
                 {"seed", args.dict.seed},
                 {"batches", trace.size()},
                 {"replaced_atoms", result.replaced_atoms},
                 {"objective_first_window", window_mean(trace, true, 50)},
                 {"objective_last_window", window_mean(trace, false, 50)},
                 {"objective_trace_tail", truncated_trace(trace, 50)}}}};
  write_dictionary(result.dictionary, args.out, meta);
  log_stage("train-dict", sw.seconds(),
            {{"out", args.out.string()}, {"patches", result.patch_count}, {"batches", trace.size()},
             {"objective_first_window", window_mean(trace, true, 50)},
             {"objective_last_window", window_mean(trace, false, 50)}});
  return result;
}

FeatureMatrix run_featurize(const FeaturizeArgs& args) {
  Stopwatch sw;
  if (args.out.empty()) throw ValidationError("featurize: an output path is required");
  const std::string dict_sha = sha256_file(args.dict);
  if (!args.model.empty()) {
    const json model = read_json(args.model);
    const std::string expected = model.value("dictionary_sha256", "");
    if (expected != dict_sha)
      throw ValidationError("dictionary hash mismatch: " + args.dict.string() + " is " + dict_sha +
                            " but model " + args.model.string() + " was trained on " + expected);
  }
  const Dictionary dict = read_dictionary(args.dict);
  const Volume3 vol = load_volume(args.volume, args.mask);
  const std::string volume_id = args.volume_id.empty() ? args.volume.stem().string() : args.volume_id;

  FeaturizeOptions opts;
  opts.num_scales = args.scales;
  opts.pyramid = args.pyramid;
  opts.threads = args.threads;

  FeatureMatrix fm;
  json meta = {{"dictionary_sha256", dict_sha},
               {"dictionary_file", args.dict.filename().string()},
               {"scales", args.scales},
               {"pyramid", pyramid_json(args.pyramid)},
               {"volume", file_ref(args.volume)}};
  if (!args.mask.empty()) meta["mask"] = file_ref(args.mask);
  if (fs::exists(sidecar_path(args.dict))) {
    const json dside = read_json(sidecar_path(args.dict));
    if (dside.contains("training")) meta["dictionary"] = dside["training"];
  }
  if (!args.annotations.empty()) {
    const AnnotationSet ann = read_annotations(args.annotations);
    AnnotationSet mine;
    for (const auto& a : ann.for_volume(volume_id)) mine.add(a);
    const auto issues = validate_annotations(mine, {{volume_id, &vol}});
    if (!issues.empty())
      throw ValidationError("annotation " + std::to_string(issues.front().entry) + " of volume '" +
                            volume_id + "': " + issues.front().reason + " (" + std::to_string(issues.size()) +
                            " invalid entries)");
    std::vector<VoxelCoord> coords;
    for (const auto& a : mine.entries()) coords.push_back(a.voxel);
    fm = featurize_voxels(vol, volume_id, dict, coords, opts);
    meta["annotations"] = file_ref(args.annotations);
  } else {
    fm = featurize_full(vol, volume_id, dict, opts);
  }
  write_features(fm, args.out, meta);
  log_stage("featurize", sw.seconds(),
            {{"out", args.out.string()}, {"rows", fm.rows()}, {"row_length", fm.row_length}});
  return fm;
}

LabeledRows join_labels(const FeatureMatrix& fm, const AnnotationSet& labels) {
  std::map<std::pair<std::string, VoxelCoord>, Label> lookup;
  for (const auto& a : labels.entries()) lookup.emplace(std::make_pair(a.volume_id, a.voxel), a.label);
  std::vector<Eigen::Index> rows;
  LabeledRows out;
  for (std::size_t r = 0; r < fm.rows(); ++r) {
    const auto it = lookup.find({fm.voxels[r].volume_id, fm.voxels[r].voxel});
    if (it == lookup.end()) continue;
    rows.push_back(static_cast<Eigen::Index>(r));
    out.y.push_back(static_cast<std::uint8_t>(it->second));
  }
  if (rows.empty()) throw ValidationError("no feature row matches an annotated voxel");
  out.x = to_matrix(fm)(rows, Eigen::all);
  return out;
}

LogisticModel run_train_clf(const TrainClfArgs& args) {
  Stopwatch sw;
  if (args.out.empty()) throw ValidationError("train-clf: an output path is required");
  const LoadedFeatures lf = load_features(args.features);
  const LabeledRows data = join_labels(lf.fm, read_annotations(args.labels));

  json cv_json = nullptr;
  double l2 = 0.0;
  if (args.l2) {
    l2 = *args.l2;
  } else {
    CvOptions cv;
    cv.folds = args.classifier.cv_folds;
    cv.seed = args.classifier.seed;
    cv.threads = args.threads;
    cv.newton = args.classifier.newton;
    const CvResult res = cross_validate(data.x, data.y, args.classifier.l2_grid, cv);
    l2 = res.best_l2;
    const Eigen::VectorXd mean = res.mean_accuracy();
    cv_json = {{"grid", res.grid},
               {"mean_accuracy", std::vector<double>(mean.data(), mean.data() + mean.size())},
               {"best_l2", res.best_l2},
               {"folds", cv.folds},
               {"seed", cv.seed}};
  }
  const LogisticModel model = train_logreg(data.x, data.y, l2, args.classifier.newton);

  json doc = model_to_json(model);
  doc["format"] = "vessel3d-logistic-model";
  doc["dictionary_sha256"] = lf.sidecar.value("dictionary_sha256", "");
  doc["scales"] = lf.sidecar.value("scales", 0);
  doc["pyramid"] = lf.sidecar.value("pyramid", json::object());
  doc["row_length"] = lf.fm.row_length;
  doc["training_rows"] = data.y.size();
  doc["cv"] = cv_json;
  doc["config"] = classifier_json(args.classifier);
  doc["inputs"] = {{"features", lf.refs}, {"labels", file_ref(args.labels)}};
  write_json(doc, args.out);
  log_stage("train-clf", sw.seconds(),
            {{"out", args.out.string()}, {"l2", l2}, {"rows", data.y.size()}, {"converged", model.converged},
             {"gradient_inf_norm", model.gradient_norm}});
  return model;
}

EvalReport run_evaluate(const EvaluateArgs& args) {
  Stopwatch sw;
  if (args.report.empty()) throw ValidationError("evaluate: a report path is required");
  const LoadedFeatures lf = load_features(args.features);
  const LabeledRows data = join_labels(lf.fm, read_annotations(args.labels));
  const EvalReport report = evaluate_repeated(data.x, data.y, args.eval);

  json cv_json = nullptr;
  if (report.cv) {
    const Eigen::VectorXd mean = report.cv->mean_accuracy();
    cv_json = {{"grid", report.cv->grid},
               {"mean_accuracy", std::vector<double>(mean.data(), mean.data() + mean.size())},
               {"best_l2", report.cv->best_l2}};
  }
  json doc = {{"format", "vessel3d-eval-report"},
              {"accuracy_mean", report.accuracy.mean},
              {"accuracy_std", report.accuracy.std},
              {"std_convention", "sample (N-1)"},
              {"std_defined", report.accuracy.std_defined},
              {"accuracy", [&] {
                 std::ostringstream s;
                 s << std::fixed << std::setprecision(2) << report.accuracy.mean << "\xC2\xB1"
                   << report.accuracy.std << "%";
                 return s.str();
               }()},
              {"l2", report.l2},
              {"cv", cv_json},
              {"labeled_voxels", data.y.size()},
              {"total_redraws", report.total_redraws},
              {"per_trial", report.per_trial},
              {"config", eval_json(args.eval)},
              {"dictionary_sha256", lf.sidecar.value("dictionary_sha256", "")},
              {"inputs", {{"features", lf.refs}, {"labels", file_ref(args.labels)}}}};
  write_json(doc, args.report);
  fs::path txt = args.report;
  txt.replace_extension(".txt");
  const std::string table = table_text(report, lf.sidecar);
  std::ofstream(txt) << table;
  log_stage("evaluate", sw.seconds(),
            {{"report", args.report.string()}, {"accuracy_mean", report.accuracy.mean},
             {"accuracy_std", report.accuracy.std}, {"l2", report.l2}});
  return report;
}

PredictResult run_predict(const PredictArgs& args) {
  Stopwatch sw;
  if (args.probability_out.empty() || args.segmentation_out.empty())
    throw ValidationError("predict: probability and segmentation output paths are required");
  const json model_doc = read_json(args.model);
  const LogisticModel model = model_from_json(model_doc);
  const std::string dict_sha = sha256_file(args.dict);
  const std::string expected = model_doc.value("dictionary_sha256", "");
  if (expected != dict_sha)
    throw ValidationError("dictionary hash mismatch: " + args.dict.string() + " is " + dict_sha +
                          " but model " + args.model.string() + " was trained on " + expected);
  const Dictionary dict = read_dictionary(args.dict);

  FeaturizeOptions opts;
  opts.num_scales = model_doc.value("scales", 0);
  opts.pyramid = pyramid_from(model_doc.value("pyramid", json::object()));
  opts.threads = args.threads;
  if (static_cast<Eigen::Index>(opts.num_scales) * dict.d() != model.dim())
    throw ValidationError("model expects " + std::to_string(model.dim()) + " features but " +
                          std::to_string(opts.num_scales) + " scales x " + std::to_string(dict.d()) +
                          " atoms give " + std::to_string(opts.num_scales * dict.d()));

  const Volume3 vol = load_volume(args.volume, args.mask);
  const Dims& dims = vol.dims();
  std::vector<float> prob(vol.size(), 0.0f);
  std::vector<std::uint8_t> seg(vol.size(), 0);

  if (vol.mask_count() > 0) {
    const Featurizer featurizer(vol, args.volume.stem().string(), dict, opts);
    constexpr std::size_t kSlab = 8;
    std::vector<VoxelCoord> coords;
    for (std::size_t z0 = 0; z0 < dims.nz; z0 += kSlab) {
      coords.clear();
      const std::size_t z1 = std::min(dims.nz, z0 + kSlab);
      for (std::size_t z = z0; z < z1; ++z)
        for (std::size_t y = 0; y < dims.ny; ++y)
          for (std::size_t x = 0; x < dims.nx; ++x)
            if (vol.in_mask(vol.index(x, y, z))) coords.push_back({x, y, z});
      if (coords.empty()) continue;
      const Eigen::VectorXd p = predict_proba(model, featurizer.rows(coords));
      for (std::size_t i = 0; i < coords.size(); ++i) {
        const std::size_t idx = vol.index(coords[i]);
        prob[idx] = static_cast<float>(p[static_cast<Eigen::Index>(i)]);
        seg[idx] = classify(p[static_cast<Eigen::Index>(i)]);
      }
    }
  }

  PredictResult result{Volume3(dims, std::move(prob)), std::move(seg)};
  write_volume(result.probability, args.probability_out, ElementType::kFloat32);
  write_volume(Volume3(dims, std::vector<float>(result.segmentation.begin(), result.segmentation.end())),
               args.segmentation_out, ElementType::kUInt8);
  json side = {{"format", "vessel3d-prediction"},
               {"threshold", "probability > 0.5"},
               {"dictionary_sha256", dict_sha},
               {"inputs", {{"volume", file_ref(args.volume)}, {"dictionary", file_ref(args.dict)},
                           {"model", file_ref(args.model)}}}};
  if (!args.mask.empty()) side["inputs"]["mask"] = file_ref(args.mask);
  write_json(side, sidecar_path(args.probability_out));
  write_json(side, sidecar_path(args.segmentation_out));
  log_stage("predict", sw.seconds(),
            {{"probability", args.probability_out.string()},
             {"segmented_voxels", std::count(result.segmentation.begin(), result.segmentation.end(), 1)}});
  return result;
}

PipelineResult run_pipeline(const PipelineConfig& cfg, unsigned threads) {
  Stopwatch sw;
  const fs::path dir = cfg.out_dir;
  fs::create_directories(dir);
  PipelineResult out;

  PhantomArgs ph;
  ph.spec = cfg.phantom;
  ph.volume_id = cfg.volume_id;
  ph.volume_out = dir / "volume.mhd";
  ph.annotations_out = dir / "annotations.csv";
  ph.truth_out = dir / "truth.mhd";
  const Phantom phantom = run_phantom(ph);

  TrainDictArgs td;
  for (int i = 0; i < cfg.dictionary_volumes; ++i) {
    PhantomArgs unlabeled;
    unlabeled.spec = cfg.phantom;
    unlabeled.spec.seed = cfg.phantom.seed + 1 + static_cast<std::uint64_t>(i);
    unlabeled.volume_id = "unlabeled_" + std::to_string(i);
    unlabeled.volume_out = dir / (unlabeled.volume_id + ".mhd");
    run_phantom(unlabeled);
    td.volumes.push_back(unlabeled.volume_out);
  }
  td.pyramid = cfg.pyramid;
  td.scales = cfg.scales;
  td.dict = cfg.dict;
  td.out = out.dictionary = dir / "dictionary.bin";
  td.threads = threads;
  run_train_dict(td);

  FeaturizeArgs fa;
  fa.volume = ph.volume_out;
  fa.volume_id = cfg.volume_id;
  fa.dict = td.out;
  fa.annotations = ph.annotations_out;
  fa.scales = cfg.scales;
  fa.pyramid = cfg.pyramid;
  fa.out = out.features = dir / "features.bin";
  fa.threads = threads;
  run_featurize(fa);

  TrainClfArgs tc;
  tc.features = {fa.out};
  tc.labels = ph.annotations_out;
  tc.classifier = cfg.classifier;
  tc.out = out.model = dir / "model.json";
  tc.threads = threads;
  run_train_clf(tc);

  EvaluateArgs ev;
  ev.features = {fa.out};
  ev.labels = ph.annotations_out;
  ev.eval = cfg.eval_config(threads);
  ev.report = out.report_path = dir / "report.json";
  out.report = run_evaluate(ev);

  json summary = {{"format", "vessel3d-pipeline"},
                  {"config", config_to_json(cfg)},
                  {"accuracy_mean", out.report.accuracy.mean},
                  {"accuracy_std", out.report.accuracy.std},
                  {"artifacts",
                   {{"volume", file_ref(ph.volume_out)},
                    {"annotations", file_ref(ph.annotations_out)},
                    {"dictionary", file_ref(td.out)},
                    {"features", file_ref(fa.out)},
                    {"model", file_ref(tc.out)},
                    {"report", file_ref(ev.report)}}}};
  if (cfg.predict) {
    PredictArgs pa;
    pa.volume = ph.volume_out;
    pa.dict = td.out;
    pa.model = tc.out;
    pa.probability_out = dir / "probability.mhd";
    pa.segmentation_out = dir / "segmentation.mhd";
    pa.threads = threads;
    const PredictResult pred = run_predict(pa);
    out.dice = dice(pred.segmentation, phantom.tube_truth);
    summary["dice_vs_tubes"] = out.dice;
    summary["artifacts"]["probability"] = file_ref(pa.probability_out);
    summary["artifacts"]["segmentation"] = file_ref(pa.segmentation_out);
  }
  write_json(summary, dir / "pipeline.json");
  log_stage("pipeline", sw.seconds(),
            {{"out_dir", dir.string()}, {"accuracy_mean", out.report.accuracy.mean}, {"dice", out.dice}});
  return out;
}

// --- Command line ------------------------------------------------------------------

namespace {

std::optional<std::string> prescan_config(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config" && i + 1 < argc) return std::string(argv[i + 1]);
    if (a.starts_with("--config=")) return a.substr(9);
  }
  if (const char* env = std::getenv("VESSEL3D_CONFIG"); env && *env) return std::string(env);
  return std::nullopt;
}

void add_pyramid_flags(CLI::App* app, PyramidConfig& p, int& scales) {
  app->add_option("--scales", scales, "Number of pyramid scales s")->capture_default_str();
  app->add_option("--sigma", p.sigma, "Gaussian sigma in voxels")->capture_default_str();
  app->add_option("--pyramid-factor", p.factor, "Subsampling stride between scales")->capture_default_str();
  app->add_option("--kernel-radius", p.radius, "Gaussian kernel radius")->capture_default_str();
}

void print_table(fs::path report) {
  std::ifstream in(report.replace_extension(".txt"));
  std::cout << in.rdbuf();
}

}  // namespace

int run_subcommand(int argc, char** argv) {
  PipelineConfig cfg;
  try {
    if (const auto path = prescan_config(argc, argv)) cfg = config_from_json(read_json(*path));
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }

  CLI::App app{"Multiscale 3D dictionary features and voxel-wise vessel classification"};
  app.require_subcommand(1);
  unsigned threads = 0;
  std::optional<std::uint64_t> seed;
  std::string config_path;
  app.add_option("--threads", threads, "Worker threads (0 = all cores)")->envname("VESSEL3D_THREADS");
  app.add_option("--seed", seed, "Seed for the stage that runs (pipeline: master seed)")->envname("VESSEL3D_SEED");
  app.add_option("--config", config_path, "Pipeline config JSON supplying defaults")->envname("VESSEL3D_CONFIG");

  // phantom
  auto* phantom = app.add_subcommand("phantom", "Generate a synthetic tube/blob phantom");
  std::string spec_path, volume_id = cfg.volume_id;
  PhantomArgs pa;
  phantom->add_option("--spec", spec_path, "Phantom spec JSON");
  phantom->add_option("--out", pa.volume_out, "Output volume (.mhd)")->required();
  phantom->add_option("--ann", pa.annotations_out, "Output annotation CSV");
  phantom->add_option("--truth", pa.truth_out, "Output tube ground-truth volume (.mhd)");
  phantom->add_option("--volume-id", volume_id, "Volume id written to the annotations")->capture_default_str();

  // train-dict
  auto* train_dict = app.add_subcommand("train-dict", "Learn a dictionary of 3D filters");
  TrainDictArgs td;
  td.pyramid = cfg.pyramid;
  td.scales = cfg.scales;
  td.dict = cfg.dict;
  train_dict->add_option("volumes", td.volumes, "Input volumes (.mhd)")->required();
  train_dict->add_option("--mask", td.masks, "Mask volume per input (repeatable)");
  train_dict->add_option("--out", td.out, "Output dictionary (.bin)")->required();
  train_dict->add_option("--d", td.dict.d, "Number of atoms")->capture_default_str();
  train_dict->add_option("--lambda", td.dict.lambda, "L1 weight")->capture_default_str();
  train_dict->add_option("--patch-edge", td.dict.patch_edge, "Patch edge k")->capture_default_str();
  train_dict->add_option("--patches", td.dict.num_patches, "Patch budget")->capture_default_str();
  train_dict->add_option("--batch-size", td.dict.batch_size, "Patches per mini-batch")->capture_default_str();
  train_dict->add_option("--epochs", td.dict.epochs, "Passes over the patches")->capture_default_str();
  add_pyramid_flags(train_dict, td.pyramid, td.scales);

  // featurize
  auto* featurize = app.add_subcommand("featurize", "Compute multiscale filter responses");
  FeaturizeArgs fa;
  fa.scales = cfg.scales;
  fa.pyramid = cfg.pyramid;
  featurize->add_option("volume", fa.volume, "Input volume (.mhd)")->required();
  featurize->add_option("--dict", fa.dict, "Dictionary (.bin)")->required();
  featurize->add_option("--out", fa.out, "Output features (.bin)")->required();
  featurize->add_option("--mask", fa.mask, "Mask volume");
  featurize->add_option("--ann", fa.annotations, "Only featurize this volume's annotated voxels");
  featurize->add_option("--volume-id", fa.volume_id, "Volume id (default: file stem)");
  featurize->add_option("--model", fa.model, "Model that must reference the same dictionary");
  add_pyramid_flags(featurize, fa.pyramid, fa.scales);

  // train-clf
  auto* train_clf = app.add_subcommand("train-clf", "Train the Newton L2 logistic classifier");
  TrainClfArgs tc;
  tc.classifier = cfg.classifier;
  double fixed_l2 = -1.0;
  train_clf->add_option("--features", tc.features, "Feature files (repeatable)")->required();
  train_clf->add_option("--labels", tc.labels, "Annotation CSV")->required();
  train_clf->add_option("--out", tc.out, "Output model (.json)")->required();
  train_clf->add_option("--cv-folds", tc.classifier.cv_folds, "Cross-validation folds")->capture_default_str();
  train_clf->add_option("--grid", tc.classifier.l2_grid, "Candidate l2 strengths")->delimiter(',');
  auto* clf_l2 = train_clf->add_option("--l2", fixed_l2, "Fixed l2 (skips cross-validation)");

  // predict
  auto* predict = app.add_subcommand("predict", "Segment a whole volume");
  PredictArgs pr;
  predict->add_option("volume", pr.volume, "Input volume (.mhd)")->required();
  predict->add_option("--dict", pr.dict, "Dictionary (.bin)")->required();
  predict->add_option("--model", pr.model, "Model (.json)")->required();
  predict->add_option("--out", pr.probability_out, "Probability volume (.mhd, float32)")->required();
  predict->add_option("--seg", pr.segmentation_out, "Segmentation volume (.mhd, uint8)")->required();
  predict->add_option("--mask", pr.mask, "Mask volume");

  // evaluate
  auto* evaluate = app.add_subcommand("evaluate", "Repeated random-split accuracy");
  EvaluateArgs ev;
  ev.eval = cfg.eval_config(0);
  double eval_l2 = -1.0;
  evaluate->add_option("--features", ev.features, "Feature files (repeatable)")->required();
  evaluate->add_option("--labels", ev.labels, "Annotation CSV")->required();
  evaluate->add_option("--report", ev.report, "Report JSON")->required();
  evaluate->add_option("--train", ev.eval.train_count, "Training voxels per trial")->capture_default_str();
  evaluate->add_option("--test", ev.eval.test_count, "Test voxels per trial")->capture_default_str();
  evaluate->add_option("--trials", ev.eval.trials, "Number of random splits")->capture_default_str();
  evaluate->add_option("--cv-folds", ev.eval.cv_folds, "Folds for the l2 selection")->capture_default_str();
  evaluate->add_option("--grid", ev.eval.l2_grid, "Candidate l2 strengths")->delimiter(',');
  auto* eval_l2_opt = evaluate->add_option("--l2", eval_l2, "Fixed l2 (skips cross-validation)");

  // pipeline
  auto* pipeline = app.add_subcommand("pipeline", "Run every stage from one config");
  std::string out_dir;
  pipeline->add_option("--out-dir", out_dir, "Output directory (overrides the config)");

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (phantom->parsed()) {
      pa.spec = spec_path.empty() ? cfg.phantom : phantom_from_json(read_json(spec_path), cfg.phantom);
      if (seed) pa.spec.seed = *seed;
      pa.volume_id = volume_id;
      run_phantom(pa);
    } else if (train_dict->parsed()) {
      if (seed) td.dict.seed = *seed;
      td.threads = threads;
      run_train_dict(td);
    } else if (featurize->parsed()) {
      fa.threads = threads;
      run_featurize(fa);
    } else if (train_clf->parsed()) {
      if (clf_l2->count()) tc.l2 = fixed_l2;
      if (seed) tc.classifier.seed = *seed;
      tc.threads = threads;
      run_train_clf(tc);
    } else if (predict->parsed()) {
      pr.threads = threads;
      run_predict(pr);
    } else if (evaluate->parsed()) {
      if (eval_l2_opt->count()) ev.eval.fixed_l2 = eval_l2;
      if (seed) ev.eval.seed = *seed;
      ev.eval.threads = threads;
      run_evaluate(ev);
      print_table(ev.report);
    } else if (pipeline->parsed()) {
      if (config_path.empty()) {
        std::cerr << "error: pipeline requires --config\n";
        return kUsage;
      }
      if (seed) cfg.reseed(*seed);
      if (!out_dir.empty()) cfg.out_dir = out_dir;
      print_table(run_pipeline(cfg, threads).report_path);
    }
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntime;
  }
  return kOk;
}

}  // namespace vessel3d::cli
