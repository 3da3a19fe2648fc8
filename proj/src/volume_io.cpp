#include "vessel3d/volume_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include "vessel3d/log.hpp"

namespace vessel3d {

static_assert(std::endian::native == std::endian::little,
              "raw payload I/O assumes a little-endian host");

std::string to_string(const Dims& dims) {
  return "(" + std::to_string(dims.nx) + "," + std::to_string(dims.ny) + "," +
         std::to_string(dims.nz) + ")";
}

// --- Volume3 ---------------------------------------------------------------

Volume3::Volume3(Dims dims, std::vector<float> data) : dims_(dims), data_(std::move(data)) {
  if (dims_.nx == 0 || dims_.ny == 0 || dims_.nz == 0)
    throw ValidationError("volume dims must be positive, got " + to_string(dims_));
  if (data_.size() != dims_.voxels())
    throw ValidationError("volume data length " + std::to_string(data_.size()) +
                          " does not match dims " + to_string(dims_));
  for (float v : data_)
    if (!std::isfinite(v)) throw ValidationError("volume contains non-finite intensities");
}

Volume3::Volume3(Dims dims, std::vector<float> data, std::vector<std::uint8_t> mask)
    : Volume3(dims, std::move(data)) {
  if (mask.size() != data_.size())
    throw ValidationError("mask length " + std::to_string(mask.size()) +
                          " does not match volume length " + std::to_string(data_.size()));
  for (auto& m : mask) m = m != 0;
  mask_ = std::move(mask);
}

Volume3 Volume3::constant(Dims dims, float value) {
  return Volume3(dims, std::vector<float>(dims.voxels(), value));
}

std::span<const std::uint8_t> Volume3::mask() const {
  if (!mask_) return {};
  return *mask_;
}

std::size_t Volume3::mask_count() const {
  if (!mask_) return data_.size();
  return static_cast<std::size_t>(std::count(mask_->begin(), mask_->end(), std::uint8_t{1}));
}

float Volume3::clamped(std::ptrdiff_t x, std::ptrdiff_t y, std::ptrdiff_t z) const {
  const auto clampi = [](std::ptrdiff_t v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp<std::ptrdiff_t>(v, 0, static_cast<std::ptrdiff_t>(n) - 1));
  };
  return data_[index(clampi(x, dims_.nx), clampi(y, dims_.ny), clampi(z, dims_.nz))];
}

Volume3 Volume3::with_mask(std::vector<std::uint8_t> mask) const {
  return Volume3(dims_, data_, std::move(mask));
}

Volume3 Volume3::without_mask() const { return Volume3(dims_, data_); }

// --- MetaImage ----------------------------------------------------------------

std::string metaimage_name(ElementType type) {
  switch (type) {
    case ElementType::kInt16: return "MET_SHORT";
    case ElementType::kUInt8: return "MET_UCHAR";
    case ElementType::kFloat32: return "MET_FLOAT";
  }
  return "MET_FLOAT";
}

namespace {

std::size_t element_size(ElementType type) {
  switch (type) {
    case ElementType::kInt16: return 2;
    case ElementType::kUInt8: return 1;
    case ElementType::kFloat32: return 4;
  }
  return 4;
}

std::string trim(std::string s) {
  const auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

bool is_true(const std::string& v) { return v == "True" || v == "true" || v == "1"; }

}  // namespace

Volume3 read_volume(const std::filesystem::path& meta_path) {
  std::ifstream in(meta_path);
  if (!in) throw IoError("cannot open MetaImage header " + meta_path.string());

  std::optional<int> ndims;
  std::optional<Dims> dims;
  std::optional<ElementType> type;
  std::optional<std::string> data_file;

  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError(meta_path.string() + ":" + std::to_string(line_no) +
                            ": expected 'Key = Value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    std::istringstream vs(value);
    if (key == "NDims") {
      int n = 0;
      if (!(vs >> n)) throw ValidationError("malformed NDims in " + meta_path.string());
      ndims = n;
    } else if (key == "DimSize") {
      long long x = 0, y = 0, z = 0;
      if (!(vs >> x >> y >> z) || x <= 0 || y <= 0 || z <= 0)
        throw ValidationError("DimSize must hold three positive integers in " + meta_path.string());
      dims = Dims{static_cast<std::size_t>(x), static_cast<std::size_t>(y),
                  static_cast<std::size_t>(z)};
    } else if (key == "ElementType") {
      if (value == "MET_SHORT") type = ElementType::kInt16;
      else if (value == "MET_UCHAR") type = ElementType::kUInt8;
      else if (value == "MET_FLOAT") type = ElementType::kFloat32;
      else throw ValidationError("unsupported ElementType '" + value + "' in " + meta_path.string());
    } else if (key == "ElementDataFile") {
      data_file = value;
      break;  // by convention the last header key
    } else if (key == "BinaryDataByteOrderMSB" || key == "ElementByteOrderMSB") {
      if (is_true(value)) throw ValidationError("big-endian payloads are not supported");
    } else if (key == "CompressedData") {
      if (is_true(value)) throw ValidationError("compressed payloads are not supported");
    } else if (key == "ObjectType" || key == "BinaryData") {
      // accepted as written by write_volume
    } else {
      log::warn("ignoring MetaImage key '" + key + "' in " + meta_path.string());
    }
  }

  if (!ndims || *ndims != 3) throw ValidationError("NDims must be 3 in " + meta_path.string());
  if (!dims) throw ValidationError("missing DimSize in " + meta_path.string());
  if (!type) throw ValidationError("missing ElementType in " + meta_path.string());
  if (!data_file || data_file->empty())
    throw ValidationError("missing ElementDataFile in " + meta_path.string());
  if (*data_file == "LOCAL" || *data_file == "LIST")
    throw ValidationError("ElementDataFile " + *data_file + " is not supported");

  std::filesystem::path raw_path(*data_file);
  if (raw_path.is_relative()) raw_path = meta_path.parent_path() / raw_path;
  std::ifstream raw(raw_path, std::ios::binary);
  if (!raw) throw IoError("cannot open raw payload " + raw_path.string());

  const std::size_t count = dims->voxels();
  const std::size_t esize = element_size(*type);
  const auto actual_bytes = std::filesystem::file_size(raw_path);
  if (actual_bytes != count * esize)
    throw ValidationError("raw payload " + raw_path.string() + " holds " +
                          std::to_string(actual_bytes / esize) + " elements of " +
                          metaimage_name(*type) + ", header declares " + std::to_string(count) +
                          " " + to_string(*dims) + ": size mismatch");

  std::vector<char> bytes(count * esize);
  raw.read(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!raw) throw IoError("short read from " + raw_path.string());

  std::vector<float> data(count);
  for (std::size_t i = 0; i < count; ++i) {
    const char* src = bytes.data() + i * esize;
    switch (*type) {
      case ElementType::kInt16: {
        std::int16_t v;
        std::memcpy(&v, src, 2);
        data[i] = static_cast<float>(v);
        break;
      }
      case ElementType::kUInt8:
        data[i] = static_cast<float>(static_cast<std::uint8_t>(*src));
        break;
      case ElementType::kFloat32: {
        float v;
        std::memcpy(&v, src, 4);
        if (!std::isfinite(v))
          throw ValidationError("non-finite value at voxel " + std::to_string(i) + " in " +
                                raw_path.string());
        data[i] = v;
        break;
      }
    }
  }
  return Volume3(*dims, std::move(data));
}

void write_volume(const Volume3& vol, const std::filesystem::path& meta_path, ElementType type) {
  std::filesystem::path raw_path = meta_path;
  raw_path.replace_extension(".raw");

  std::ofstream header(meta_path);
  if (!header) throw IoError("cannot write MetaImage header " + meta_path.string());
  const auto& d = vol.dims();
  header << "ObjectType = Image\n"
         << "NDims = 3\n"
         << "BinaryData = True\n"
         << "BinaryDataByteOrderMSB = False\n"
         << "DimSize = " << d.nx << ' ' << d.ny << ' ' << d.nz << '\n'
         << "ElementType = " << metaimage_name(type) << '\n'
         << "ElementDataFile = " << raw_path.filename().string() << '\n';
  if (!header) throw IoError("failed writing " + meta_path.string());

  const std::size_t esize = element_size(type);
  std::vector<char> bytes(vol.size() * esize);
  const auto data = vol.data();
  for (std::size_t i = 0; i < data.size(); ++i) {
    char* dst = bytes.data() + i * esize;
    switch (type) {
      case ElementType::kInt16: {
        const auto v = static_cast<std::int16_t>(
            std::clamp(std::nearbyint(data[i]), -32768.0f, 32767.0f));
        std::memcpy(dst, &v, 2);
        break;
      }
      case ElementType::kUInt8:
        *dst = static_cast<char>(static_cast<std::uint8_t>(std::clamp(std::nearbyint(data[i]), 0.0f, 255.0f)));
        break;
      case ElementType::kFloat32:
        std::memcpy(dst, &data[i], 4);
        break;
    }
  }
  std::ofstream raw(raw_path, std::ios::binary);
  if (!raw) throw IoError("cannot write raw payload " + raw_path.string());
  raw.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!raw) throw IoError("failed writing " + raw_path.string());
}

Volume3 attach_mask(const Volume3& vol, const Volume3& mask_vol) {
  if (!(vol.dims() == mask_vol.dims()))
    throw ValidationError("mask dims " + to_string(mask_vol.dims()) + " differ from volume dims " +
                          to_string(vol.dims()));
  std::vector<std::uint8_t> mask(vol.size());
  const auto m = mask_vol.data();
  for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = m[i] != 0.0f;
  return vol.with_mask(std::move(mask));
}

// --- Annotations --------------------------------------------------------------

void AnnotationSet::add(Annotation a) {
  auto key = std::make_pair(a.volume_id, a.voxel);
  if (seen_.contains(key))
    throw ValidationError("duplicate annotation for volume '" + a.volume_id + "' at (" +
                          std::to_string(a.voxel.x) + "," + std::to_string(a.voxel.y) + "," +
                          std::to_string(a.voxel.z) + ")");
  seen_.emplace(std::move(key), entries_.size());
  entries_.push_back(std::move(a));
}

std::size_t AnnotationSet::count(Label label) const {
  return static_cast<std::size_t>(std::count_if(
      entries_.begin(), entries_.end(), [label](const Annotation& a) { return a.label == label; }));
}

std::vector<Annotation> AnnotationSet::for_volume(const std::string& volume_id) const {
  std::vector<Annotation> out;
  for (const auto& a : entries_)
    if (a.volume_id == volume_id) out.push_back(a);
  return out;
}

std::vector<std::string> AnnotationSet::volume_ids() const {
  std::vector<std::string> ids;
  std::set<std::string> seen;
  for (const auto& a : entries_)
    if (seen.insert(a.volume_id).second) ids.push_back(a.volume_id);
  return ids;
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> fields;
  std::string field;
  std::istringstream ss(line);
  while (std::getline(ss, field, ',')) fields.push_back(trim(field));
  if (!line.empty() && line.back() == ',') fields.emplace_back();
  return fields;
}

std::size_t parse_index(const std::string& s, const std::string& where) {
  if (s.empty() || !std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); }))
    throw ValidationError(where + ": coordinate '" + s + "' is not a non-negative integer");
  return static_cast<std::size_t>(std::stoull(s));
}

}  // namespace

AnnotationSet read_annotations(const std::filesystem::path& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw IoError("cannot open annotation file " + csv_path.string());
  std::string line;
  if (!std::getline(in, line)) throw ValidationError(csv_path.string() + ": missing header line");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line.starts_with("\xEF\xBB\xBF")) line.erase(0, 3);
  if (split_csv(line) != std::vector<std::string>{"volume_id", "x", "y", "z", "label"})
    throw ValidationError(csv_path.string() + ": header must be 'volume_id,x,y,z,label'");

  AnnotationSet set;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const std::string where = csv_path.string() + ":" + std::to_string(line_no);
    const auto f = split_csv(line);
    if (f.size() != 5) throw ValidationError(where + ": expected 5 fields, got " + std::to_string(f.size()));
    if (f[0].empty()) throw ValidationError(where + ": empty volume_id");
    Annotation a;
    a.volume_id = f[0];
    a.voxel = {parse_index(f[1], where), parse_index(f[2], where), parse_index(f[3], where)};
    if (f[4] == "0") a.label = Label::kNonVessel;
    else if (f[4] == "1") a.label = Label::kVessel;
    else throw ValidationError(where + ": invalid label '" + f[4] + "' (expected 0 or 1)");
    try {
      set.add(std::move(a));
    } catch (const ValidationError& e) {
      throw ValidationError(where + ": " + e.what());
    }
  }
  return set;
}

void write_annotations(const AnnotationSet& set, const std::filesystem::path& csv_path) {
  std::ofstream out(csv_path);
  if (!out) throw IoError("cannot write annotation file " + csv_path.string());
  out << "volume_id,x,y,z,label\n";
  for (const auto& a : set.entries())
    out << a.volume_id << ',' << a.voxel.x << ',' << a.voxel.y << ',' << a.voxel.z << ','
        << static_cast<int>(a.label) << '\n';
  if (!out) throw IoError("failed writing " + csv_path.string());
}

std::vector<AnnotationIssue> validate_annotations(
    const AnnotationSet& set, const std::map<std::string, const Volume3*>& volumes) {
  std::vector<AnnotationIssue> issues;
  const auto& entries = set.entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& a = entries[i];
    const auto it = volumes.find(a.volume_id);
    if (it == volumes.end() || it->second == nullptr) {
      issues.push_back({i, "unknown volume '" + a.volume_id + "'"});
    } else if (!it->second->contains(a.voxel)) {
      issues.push_back({i, "voxel outside dims " + to_string(it->second->dims())});
    } else if (!it->second->in_mask(a.voxel)) {
      issues.push_back({i, "voxel outside mask"});
    }
  }
  return issues;
}

}  // namespace vessel3d
