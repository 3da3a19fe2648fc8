#include "vessel3d/artifacts.hpp"

#include <openssl/evp.h>

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "vessel3d/error.hpp"

namespace vessel3d {

static_assert(std::endian::native == std::endian::little,
              "artifact containers assume a little-endian host");

namespace {

constexpr std::array<char, 8> kDictMagic{'V', '3', 'D', 'D', 'I', 'C', 'T', '\0'};
constexpr std::array<char, 8> kFeatMagic{'V', '3', 'D', 'F', 'E', 'A', 'T', '\0'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void put(std::string& buf, T v) {
  char bytes[sizeof(T)];
  std::memcpy(bytes, &v, sizeof(T));
  buf.append(bytes, sizeof(T));
}

class Reader {
 public:
  Reader(std::string bytes, std::string name) : bytes_(std::move(bytes)), name_(std::move(name)) {}
  template <typename T>
  T get() {
    if (pos_ + sizeof(T) > bytes_.size()) throw ValidationError(name_ + ": truncated container");
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }
  void expect_magic(const std::array<char, 8>& magic) {
    if (bytes_.size() < magic.size() || std::memcmp(bytes_.data(), magic.data(), magic.size()) != 0)
      throw ValidationError(name_ + ": bad magic");
    pos_ = magic.size();
  }

 private:
  std::string bytes_;
  std::string name_;
  std::size_t pos_ = 0;
};

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void dump(const std::string& bytes, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace

std::string sha256_bytes(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> md{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md.data(), &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256 failed");
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i)
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
  return hex.str();
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_bytes(slurp(path)); }

std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".json");
}

nlohmann::json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": invalid JSON: " + e.what());
  }
}

void write_json(const nlohmann::json& doc, const std::filesystem::path& path) {
  dump(doc.dump(2) + "\n", path);
}

// --- Dictionary ------------------------------------------------------------------

void write_dictionary(const Dictionary& dict, const std::filesystem::path& path,
                      const nlohmann::json& meta) {
  std::string buf(kDictMagic.begin(), kDictMagic.end());
  put<std::uint32_t>(buf, kVersion);
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(dict.patch_edge()));
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(dict.d()));
  const auto& a = dict.atoms();
  for (Eigen::Index r = 0; r < a.rows(); ++r)
    for (Eigen::Index c = 0; c < a.cols(); ++c) put<float>(buf, static_cast<float>(a(r, c)));
  dump(buf, path);

  nlohmann::json side = meta;
  side["format"] = "vessel3d-dictionary";
  side["version"] = kVersion;
  side["patch_edge"] = dict.patch_edge();
  side["d"] = dict.d();
  side["sha256"] = sha256_bytes(buf);
  write_json(side, sidecar_path(path));
}

Dictionary read_dictionary(const std::filesystem::path& path) {
  std::string bytes = slurp(path);
  const auto side_path = sidecar_path(path);
  if (std::filesystem::exists(side_path)) {
    const auto side = read_json(side_path);
    const std::string actual = sha256_bytes(bytes);
    if (side.contains("sha256") && side["sha256"].get<std::string>() != actual)
      throw ValidationError(path.string() + ": content hash " + actual +
                            " does not match the sidecar's " + side["sha256"].get<std::string>());
  }
  Reader in(std::move(bytes), path.string());
  in.expect_magic(kDictMagic);
  if (in.get<std::uint32_t>() != kVersion) throw ValidationError(path.string() + ": unsupported version");
  const auto k = in.get<std::uint32_t>();
  const auto d = in.get<std::uint32_t>();
  const std::size_t n = static_cast<std::size_t>(k) * k * k;
  if (k == 0 || d == 0 || in.remaining() != n * d * sizeof(float))
    throw ValidationError(path.string() + ": payload does not match k=" + std::to_string(k) +
                          ", d=" + std::to_string(d));
  Eigen::MatrixXd atoms(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  for (Eigen::Index r = 0; r < atoms.rows(); ++r)
    for (Eigen::Index c = 0; c < atoms.cols(); ++c) atoms(r, c) = in.get<float>();
  return Dictionary(std::move(atoms), static_cast<int>(k));
}

// --- Features --------------------------------------------------------------------

void write_features(const FeatureMatrix& fm, const std::filesystem::path& path,
                    const nlohmann::json& meta) {
  std::string buf(kFeatMagic.begin(), kFeatMagic.end());
  put<std::uint32_t>(buf, kVersion);
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(fm.row_length));
  put<std::uint64_t>(buf, static_cast<std::uint64_t>(fm.rows()));
  buf.append(reinterpret_cast<const char*>(fm.values.data()), fm.values.size() * sizeof(float));
  dump(buf, path);

  nlohmann::json side = meta;
  std::vector<std::string> ids;
  std::map<std::string, std::size_t> id_index;
  nlohmann::json voxels = nlohmann::json::array();
  for (const auto& v : fm.voxels) {
    auto [it, inserted] = id_index.emplace(v.volume_id, ids.size());
    if (inserted) ids.push_back(v.volume_id);
    voxels.push_back({it->second, v.voxel.x, v.voxel.y, v.voxel.z});
  }
  side["format"] = "vessel3d-features";
  side["version"] = kVersion;
  side["row_length"] = fm.row_length;
  side["row_count"] = fm.rows();
  side["sha256"] = sha256_bytes(buf);
  side["volume_ids"] = ids;
  side["voxels"] = std::move(voxels);
  write_json(side, sidecar_path(path));
}

FeatureMatrix read_features(const std::filesystem::path& path, nlohmann::json* sidecar) {
  std::string bytes = slurp(path);
  const auto side_path = sidecar_path(path);
  if (!std::filesystem::exists(side_path))
    throw ValidationError(path.string() + ": missing sidecar " + side_path.string());
  nlohmann::json side = read_json(side_path);
  if (side.value("sha256", std::string{}) != sha256_bytes(bytes))
    throw ValidationError(path.string() + ": content hash does not match its sidecar");

  Reader in(std::move(bytes), path.string());
  in.expect_magic(kFeatMagic);
  if (in.get<std::uint32_t>() != kVersion) throw ValidationError(path.string() + ": unsupported version");
  FeatureMatrix fm;
  fm.row_length = in.get<std::uint32_t>();
  const auto rows = in.get<std::uint64_t>();
  if (in.remaining() != rows * fm.row_length * sizeof(float))
    throw ValidationError(path.string() + ": payload size does not match the header");
  fm.values.resize(rows * fm.row_length);
  for (auto& v : fm.values) v = in.get<float>();

  try {
    const auto ids = side.at("volume_ids").get<std::vector<std::string>>();
    const auto& voxels = side.at("voxels");
    if (voxels.size() != rows) throw ValidationError(path.string() + ": sidecar voxel count mismatch");
    fm.voxels.reserve(rows);
    for (const auto& v : voxels)
      fm.voxels.push_back({ids.at(v.at(0).get<std::size_t>()),
                           {v.at(1).get<std::size_t>(), v.at(2).get<std::size_t>(), v.at(3).get<std::size_t>()}});
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(path.string() + ": malformed sidecar: " + e.what());
  } catch (const std::out_of_range&) {
    throw ValidationError(path.string() + ": sidecar references an unknown volume id");
  }
  if (sidecar) *sidecar = std::move(side);
  return fm;
}

// --- Model -----------------------------------------------------------------------

namespace {

std::vector<double> to_vec(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

Eigen::VectorXd from_vec(const std::vector<double>& v) {
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

nlohmann::json model_to_json(const LogisticModel& model) {
  return {{"weights", to_vec(model.weights)},
          {"bias", model.bias},
          {"l2", model.l2},
          {"feature_mean", to_vec(model.feature_mean)},
          {"feature_scale", to_vec(model.feature_scale)},
          {"training",
           {{"iterations", model.iterations},
            {"gradient_inf_norm", model.gradient_norm},
            {"converged", model.converged},
            {"final_objective", model.objective_trace.empty() ? 0.0 : model.objective_trace.back()}}}};
}

LogisticModel model_from_json(const nlohmann::json& doc) {
  LogisticModel m;
  try {
    m.weights = from_vec(doc.at("weights").get<std::vector<double>>());
    m.bias = doc.at("bias").get<double>();
    m.l2 = doc.at("l2").get<double>();
    m.feature_mean = from_vec(doc.at("feature_mean").get<std::vector<double>>());
    m.feature_scale = from_vec(doc.at("feature_scale").get<std::vector<double>>());
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed model: ") + e.what());
  }
  if (m.feature_mean.size() != m.weights.size() || m.feature_scale.size() != m.weights.size())
    throw ValidationError("model standardization vectors do not match the weight count");
  if ((m.feature_scale.array() <= 0.0).any()) throw ValidationError("model feature scales must be > 0");
  if (doc.contains("training")) {
    const auto& t = doc["training"];
    m.iterations = t.value("iterations", 0);
    m.gradient_norm = t.value("gradient_inf_norm", 0.0);
    m.converged = t.value("converged", false);
  }
  return m;
}

}  // namespace vessel3d
