#include <doctest.h>

#include <fstream>
#include <iostream>
#include <sstream>

#include "support.hpp"
#include "vessel3d/artifacts.hpp"
#include "vessel3d/error.hpp"
#include "vessel3d/log.hpp"
#include "vessel3d/pipeline.hpp"

using namespace vessel3d;
using nlohmann::json;
using testsupport::TempDir;

namespace {

struct Outcome {
  int code;
  std::string out;
  std::string err;
};

Outcome run(std::vector<std::string> args) {
  args.insert(args.begin(), "vessel3d");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  std::ostringstream out, err;
  auto* old_out = std::cout.rdbuf(out.rdbuf());
  auto* old_err = std::cerr.rdbuf(err.rdbuf());
  log::set_sink([](log::Level, const std::string&) {});
  const int code = cli::run_subcommand(static_cast<int>(argv.size()), argv.data());
  log::set_sink({});
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  return {code, out.str(), err.str()};
}

json small_config(const std::filesystem::path& out_dir) {
  return {{"out_dir", out_dir.string()},
          {"phantom", {{"dims", {48, 48, 48}}, {"noise_std", 0.2}, {"num_blobs", 4}}},
          {"dictionary", {{"d", 24}, {"num_patches", 20000}}},
          {"classifier", {{"l2_grid", {0.1, 1, 10, 100}}, {"cv_folds", 5}}},
          {"evaluation", {{"train", 120}, {"test", 40}, {"trials", 10}}}};
}

}  // namespace

TEST_CASE("help and usage exit codes") {
  CHECK(run({"--help"}).code == 0);
  const Outcome h = run({"train-dict", "--help"});
  CHECK(h.code == 0);
  CHECK(h.out.find("--patch-edge") != std::string::npos);
  CHECK(run({}).code == cli::kUsage);
  CHECK(run({"nonsense"}).code == cli::kUsage);
  CHECK(run({"featurize", "--dict"}).code == cli::kUsage);
}

TEST_CASE("dictionary container roundtrip and tamper detection") {
  TempDir dir("art");
  std::mt19937_64 rng(1);
  Eigen::MatrixXd m = Eigen::MatrixXd::Random(27, 4);
  const Dictionary d = Dictionary::from_unnormalized(m.cast<float>().cast<double>(), 3);
  write_dictionary(d, dir / "d.bin", {{"note", "x"}});
  const json side = read_json(sidecar_path(dir / "d.bin"));
  CHECK(side["sha256"] == sha256_file(dir / "d.bin"));
  CHECK(side["note"] == "x");
  const Dictionary back = read_dictionary(dir / "d.bin");
  CHECK((back.atoms() - d.atoms()).cwiseAbs().maxCoeff() < 1e-7);
  {
    std::fstream f(dir / "d.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-1, std::ios::end);
    f.put('\x7f');
  }
  CHECK_THROWS_AS(read_dictionary(dir / "d.bin"), ValidationError);
  std::ofstream(dir / "junk.bin") << "not a dictionary";
  CHECK_THROWS_AS(read_dictionary(dir / "junk.bin"), ValidationError);
}

TEST_CASE("feature container and model json roundtrip") {
  TempDir dir("art");
  FeatureMatrix fm;
  fm.row_length = 3;
  fm.values = {1, 2, 3, 4, 5, 6};
  fm.voxels = {{"a", {1, 2, 3}}, {"b", {0, 0, 0}}};
  write_features(fm, dir / "f.bin", {{"scales", 2}});
  json side;
  const FeatureMatrix back = read_features(dir / "f.bin", &side);
  CHECK(back.values == fm.values);
  CHECK(back.voxels == fm.voxels);
  CHECK(side["scales"] == 2);
  std::filesystem::remove(sidecar_path(dir / "f.bin"));
  CHECK_THROWS(read_features(dir / "f.bin"));

  LogisticModel m;
  m.weights = Eigen::Vector2d(0.5, -0.25);
  m.bias = 0.1;
  m.l2 = 10;
  m.feature_mean = Eigen::Vector2d(1, 2);
  m.feature_scale = Eigen::Vector2d(3, 4);
  const LogisticModel r = model_from_json(json::parse(model_to_json(m).dump()));
  CHECK(r.weights == m.weights);
  CHECK(r.bias == m.bias);
  CHECK(r.feature_scale == m.feature_scale);
  CHECK(sha256_bytes("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("config parsing") {
  const auto cfg = cli::config_from_json(json{{"scales", 3}, {"dictionary", {{"d", 8}}}});
  CHECK(cfg.scales == 3);
  CHECK(cfg.dict.d == 8);
  CHECK_THROWS_AS(cli::config_from_json(json{{"dictionnary", {}}}), ValidationError);
  CHECK_THROWS_AS(cli::config_from_json(json{{"phantom", {{"noise", 1}}}}), ValidationError);
  const auto back = cli::config_from_json(cli::config_to_json(cfg));
  CHECK(cli::config_to_json(back) == cli::config_to_json(cfg));
}

TEST_CASE("stage commands chain and check provenance") {
  TempDir dir("cli");
  const auto p = [&](const char* n) { return (dir / n).string(); };
  std::ofstream(dir / "spec.json") << json{{"dims", {32, 32, 32}}, {"num_blobs", 2}, {"blob_radius", {2, 3}}}.dump();
  REQUIRE(run({"phantom", "--spec", p("spec.json"), "--out", p("v.mhd"), "--ann", p("a.csv"), "--truth", p("t.mhd")}).code == 0);
  REQUIRE(run({"--seed", "5", "phantom", "--spec", p("spec.json"), "--out", p("u.mhd")}).code == 0);
  REQUIRE(run({"train-dict", p("u.mhd"), "--out", p("d.bin"), "--d", "8", "--patches", "2000"}).code == 0);
  CHECK(read_json(sidecar_path(dir / "d.bin"))["training"]["patch_count"] == 2000);
  REQUIRE(run({"featurize", p("v.mhd"), "--dict", p("d.bin"), "--ann", p("a.csv"), "--volume-id", "phantom",
               "--out", p("f.bin")})
              .code == 0);
  REQUIRE(run({"train-clf", "--features", p("f.bin"), "--labels", p("a.csv"), "--out", p("m.json"), "--grid",
               "0.1,1,10", "--cv-folds", "5"})
              .code == 0);
  const json model = read_json(dir / "m.json");
  CHECK(model["dictionary_sha256"] == sha256_file(dir / "d.bin"));
  CHECK(model["row_length"] == 16);
  REQUIRE(run({"evaluate", "--features", p("f.bin"), "--labels", p("a.csv"), "--train", "120", "--test", "40",
               "--trials", "5", "--seed", "3", "--report", p("r.json"), "--l2", "1"})
              .code == 0);
  const json report = read_json(dir / "r.json");
  CHECK(report["per_trial"].size() == 5);
  CHECK(report["l2"] == 1.0);
  CHECK(std::filesystem::exists(dir / "r.txt"));
  REQUIRE(run({"predict", p("v.mhd"), "--dict", p("d.bin"), "--model", p("m.json"), "--out", p("prob.mhd"),
               "--seg", p("seg.mhd")})
              .code == 0);
  CHECK(read_volume(dir / "seg.mhd").dims() == Dims{32, 32, 32});

  REQUIRE(run({"train-dict", p("u.mhd"), "--out", p("other.bin"), "--d", "8", "--patches", "2000", "--seed", "9"}).code == 0);
  const Outcome mismatch = run({"featurize", p("v.mhd"), "--dict", p("other.bin"), "--model", p("m.json"),
                                "--out", p("g.bin")});
  CHECK(mismatch.code == cli::kValidation);
  CHECK(mismatch.err.find("dictionary hash mismatch") != std::string::npos);
  CHECK(run({"predict", p("v.mhd"), "--dict", p("other.bin"), "--model", p("m.json"), "--out", p("x.mhd"),
             "--seg", p("y.mhd")})
            .code == cli::kValidation);
  CHECK(run({"featurize", p("missing.mhd"), "--dict", p("d.bin"), "--out", p("g.bin")}).code == cli::kRuntime);
}

TEST_CASE("predict edge cases: empty mask and zero weights") {
  TempDir dir("pred");
  std::mt19937_64 rng(3);
  Eigen::MatrixXd atoms = Eigen::MatrixXd::Random(27, 2);
  write_dictionary(Dictionary::from_unnormalized(atoms.cast<float>().cast<double>(), 3), dir / "d.bin");
  LogisticModel m;
  m.weights = Eigen::VectorXd::Zero(4);
  m.feature_mean = Eigen::VectorXd::Zero(4);
  m.feature_scale = Eigen::VectorXd::Ones(4);
  json doc = model_to_json(m);
  doc["dictionary_sha256"] = sha256_file(dir / "d.bin");
  doc["scales"] = 2;
  doc["pyramid"] = {{"sigma", 1.0}, {"radius", 2}, {"factor", 2}};
  write_json(doc, dir / "m.json");
  write_volume(Volume3::constant({6, 6, 6}, 0.0f), dir / "zero.mhd");
  write_volume(Volume3::constant({6, 6, 6}, 0.0f), dir / "nomask.mhd");

  cli::PredictArgs a;
  a.volume = dir / "zero.mhd";
  a.dict = dir / "d.bin";
  a.model = dir / "m.json";
  a.probability_out = dir / "p.mhd";
  a.segmentation_out = dir / "s.mhd";
  log::set_sink([](log::Level, const std::string&) {});
  const auto half = cli::run_predict(a);
  for (float v : half.probability.data()) CHECK(v == 0.5f);
  for (auto s : half.segmentation) CHECK(s == 0);

  a.mask = dir / "nomask.mhd";
  const auto empty = cli::run_predict(a);
  log::set_sink({});
  for (float v : empty.probability.data()) CHECK(v == 0.0f);
  for (auto s : empty.segmentation) CHECK(s == 0);
}

TEST_CASE("pipeline on a small phantom: artifacts, segmentation overlap, held-out probabilities") {
  TempDir dir("pipe");
  std::ofstream(dir / "cfg.json") << small_config(dir / "run").dump();
  const Outcome o = run({"pipeline", "--config", (dir / "cfg.json").string()});
  REQUIRE(o.code == 0);
  const auto run_dir = dir / "run";
  for (const char* f : {"volume.mhd", "annotations.csv", "dictionary.bin", "features.bin", "model.json",
                        "report.json", "probability.mhd", "segmentation.mhd", "pipeline.json"})
    CHECK(std::filesystem::exists(run_dir / f));
  const json summary = read_json(run_dir / "pipeline.json");
  CHECK(summary["dice_vs_tubes"].get<double>() >= 0.5);

  // Held-out phantom with a different seed.
  auto cfg = cli::config_from_json(small_config(run_dir));
  cli::PhantomArgs pa;
  pa.spec = cfg.phantom;
  pa.spec.seed = 99;
  pa.volume_out = dir / "held.mhd";
  pa.annotations_out = dir / "held.csv";
  log::set_sink([](log::Level, const std::string&) {});
  cli::run_phantom(pa);
  cli::FeaturizeArgs fa;
  fa.volume = pa.volume_out;
  fa.volume_id = "phantom";
  fa.dict = run_dir / "dictionary.bin";
  fa.model = run_dir / "model.json";
  fa.annotations = pa.annotations_out;
  fa.out = dir / "held.bin";
  const FeatureMatrix fm = cli::run_featurize(fa);
  log::set_sink({});
  const auto rows = cli::join_labels(fm, read_annotations(pa.annotations_out));
  const Eigen::VectorXd prob = predict_proba(model_from_json(read_json(run_dir / "model.json")), rows.x);
  double pos = 0, neg = 0;
  std::size_t np = 0, nn = 0;
  for (std::size_t i = 0; i < rows.y.size(); ++i)
    (rows.y[i] ? (pos += prob[Eigen::Index(i)], ++np) : (neg += prob[Eigen::Index(i)], ++nn));
  CHECK(pos / np > neg / nn);

  const auto train = cli::join_labels(read_features(run_dir / "features.bin"), read_annotations(run_dir / "annotations.csv"));
  const std::vector<double> grid{0.01, 0.1, 1, 10};
  const CvResult a = cross_validate(train.x, train.y, grid, {});
  const CvResult b = cross_validate(train.x, train.y, grid, {});
  CHECK(a.best_l2 == b.best_l2);
  CHECK(a.fold_accuracy == b.fold_accuracy);
}
