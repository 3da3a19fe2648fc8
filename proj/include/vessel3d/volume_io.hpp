#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "vessel3d/volume.hpp"

namespace vessel3d {

/// Raw payload element types understood by the MetaImage reader/writer.
enum class ElementType { kInt16, kUInt8, kFloat32 };

std::string metaimage_name(ElementType type);

/// Reads a MetaImage header (.mhd) and its little-endian raw payload.
/// Honored keys: NDims (must be 3), DimSize, ElementType
/// (MET_SHORT/MET_UCHAR/MET_FLOAT), ElementDataFile. Unknown keys are
/// logged as warnings and ignored. The result carries no mask.
Volume3 read_volume(const std::filesystem::path& meta_path);

/// Writes `<meta_path>` plus a sibling `.raw` payload. Integer element
/// types round to nearest and saturate.
void write_volume(const Volume3& vol, const std::filesystem::path& meta_path,
                  ElementType type = ElementType::kFloat32);

/// Mask = (mask_vol value != 0) per voxel.
Volume3 attach_mask(const Volume3& vol, const Volume3& mask_vol);

enum class Label : std::uint8_t { kNonVessel = 0, kVessel = 1 };

struct Annotation {
  std::string volume_id;
  VoxelCoord voxel;
  Label label = Label::kNonVessel;
  bool operator==(const Annotation&) const = default;
};

/// Annotated voxels. Construction through read_annotations or add()
/// rejects duplicate (volume_id, x, y, z) tuples.
class AnnotationSet {
 public:
  void add(Annotation a);
  const std::vector<Annotation>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t count(Label label) const;
  /// Entries of one volume, in file order.
  std::vector<Annotation> for_volume(const std::string& volume_id) const;
  std::vector<std::string> volume_ids() const;

 private:
  std::vector<Annotation> entries_;
  std::map<std::pair<std::string, VoxelCoord>, std::size_t> seen_;
};

/// CSV with header `volume_id,x,y,z,label`, 0-based indices, LF or CRLF.
AnnotationSet read_annotations(const std::filesystem::path& csv_path);
void write_annotations(const AnnotationSet& set, const std::filesystem::path& csv_path);

struct AnnotationIssue {
  std::size_t entry = 0;
  std::string reason;
};

/// Returns one issue per entry that lies outside its volume's dims or
/// outside its mask, or references an unknown volume.
std::vector<AnnotationIssue> validate_annotations(
    const AnnotationSet& set, const std::map<std::string, const Volume3*>& volumes);

}  // namespace vessel3d
