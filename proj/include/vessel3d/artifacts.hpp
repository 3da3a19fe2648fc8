#pragma once

#include <filesystem>
#include <string>

#include <json.hpp>

#include "vessel3d/classifier.hpp"
#include "vessel3d/featurize.hpp"
#include "vessel3d/sparse_coding.hpp"

namespace vessel3d {

/// Lowercase hex SHA-256 of a file's bytes.
std::string sha256_file(const std::filesystem::path& path);
std::string sha256_bytes(std::string_view bytes);

/// `<path>.json`, the metadata file written next to every binary artifact.
std::filesystem::path sidecar_path(const std::filesystem::path& path);

nlohmann::json read_json(const std::filesystem::path& path);
/// Pretty-printed with a trailing newline.
void write_json(const nlohmann::json& doc, const std::filesystem::path& path);

// Dictionary container, little-endian:
//   "V3DDICT\0" | u32 version=1 | u32 k | u32 d | float32[k^3 * d] row-major
// The sidecar records the container's sha256 plus `meta`.
void write_dictionary(const Dictionary& dict, const std::filesystem::path& path,
                      const nlohmann::json& meta = nlohmann::json::object());
/// Rejects bad magic/version/shape and, when a sidecar exists, a sha256 that
/// does not match the container.
Dictionary read_dictionary(const std::filesystem::path& path);

// Feature container, little-endian:
//   "V3DFEAT\0" | u32 version=1 | u32 row_length | u64 row_count | float32 rows
// Voxel references live in the sidecar ("volume_ids" plus [id, x, y, z] rows).
void write_features(const FeatureMatrix& fm, const std::filesystem::path& path,
                    const nlohmann::json& meta = nlohmann::json::object());
/// Needs the sidecar for voxel references; `sidecar` receives it when non-null.
FeatureMatrix read_features(const std::filesystem::path& path, nlohmann::json* sidecar = nullptr);

nlohmann::json model_to_json(const LogisticModel& model);
LogisticModel model_from_json(const nlohmann::json& doc);

}  // namespace vessel3d
