#include "neuropipe/volume_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "neuropipe/error.hpp"

namespace neuropipe {

namespace fs = std::filesystem;

namespace {

constexpr int kHeaderBytes = 348;
constexpr int kNiftiDataOffset = 352;

// NIfTI-1 / Analyze 7.5 datatype codes.
enum : std::int16_t {
  kDtUInt8 = 2,
  kDtInt16 = 4,
  kDtInt32 = 8,
  kDtFloat32 = 16,
  kDtFloat64 = 64,
  kDtInt8 = 256,
  kDtUInt16 = 512,
  kDtUInt32 = 768,
};

int datatype_bytes(int dt) {
  switch (dt) {
    case kDtUInt8: case kDtInt8: return 1;
    case kDtInt16: case kDtUInt16: return 2;
    case kDtInt32: case kDtUInt32: case kDtFloat32: return 4;
    case kDtFloat64: return 8;
    default: return 0;
  }
}

std::vector<char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), Errc::IoFailure, "cannot open " + path.string());
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const fs::path& path, const std::string& header, const std::vector<char>& payload) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), Errc::IoFailure, "cannot write " + path.string());
  out.write(header.data(), static_cast<std::streamsize>(header.size()));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  out.flush();
  require(static_cast<bool>(out), Errc::IoFailure, "write failed for " + path.string());
}

template <typename T>
T load(const char* p, bool swap) {
  std::array<char, sizeof(T)> raw;
  std::memcpy(raw.data(), p, sizeof(T));
  if (swap) std::reverse(raw.begin(), raw.end());
  T v;
  std::memcpy(&v, raw.data(), sizeof(T));
  return v;
}

template <typename T>
void store(std::string& buf, std::size_t offset, T v) {
  static_assert(std::endian::native == std::endian::little, "writer assumes little-endian host");
  std::memcpy(buf.data() + offset, &v, sizeof(T));
}

std::vector<double> decode_payload(const char* p, std::size_t count, int dt, bool swap) {
  std::vector<double> out(count);
  const int nb = datatype_bytes(dt);
  for (std::size_t i = 0; i < count; ++i, p += nb) {
    switch (dt) {
      case kDtUInt8: out[i] = static_cast<unsigned char>(*p); break;
      case kDtInt8: out[i] = static_cast<signed char>(*p); break;
      case kDtInt16: out[i] = load<std::int16_t>(p, swap); break;
      case kDtUInt16: out[i] = load<std::uint16_t>(p, swap); break;
      case kDtInt32: out[i] = load<std::int32_t>(p, swap); break;
      case kDtUInt32: out[i] = load<std::uint32_t>(p, swap); break;
      case kDtFloat32: out[i] = load<float>(p, swap); break;
      case kDtFloat64: out[i] = load<double>(p, swap); break;
      default: fail(Errc::CorruptHeader, "unsupported datatype " + std::to_string(dt));
    }
  }
  return out;
}

StorageType resolve_storage(const std::vector<double>& voxels, StorageType requested) {
  if (requested != StorageType::Auto) return requested;
  bool u8 = true, i16 = true, f32 = true;
  for (double v : voxels) {
    const bool integral = std::nearbyint(v) == v;
    u8 = u8 && integral && v >= 0 && v <= 255;
    i16 = i16 && integral && v >= -32768 && v <= 32767;
    f32 = f32 && static_cast<double>(static_cast<float>(v)) == v;
  }
  if (u8) return StorageType::UInt8;
  if (i16) return StorageType::Int16;
  if (f32) return StorageType::Float32;
  return StorageType::Float64;
}

std::int16_t storage_datatype(StorageType t) {
  switch (t) {
    case StorageType::UInt8: return kDtUInt8;
    case StorageType::Int16: return kDtInt16;
    case StorageType::Float32: return kDtFloat32;
    default: return kDtFloat64;
  }
}

std::vector<char> encode_payload(const std::vector<double>& voxels, StorageType t) {
  const int nb = datatype_bytes(storage_datatype(t));
  std::vector<char> out(voxels.size() * static_cast<std::size_t>(nb));
  char* p = out.data();
  for (double v : voxels) {
    switch (t) {
      case StorageType::UInt8: *p = static_cast<char>(static_cast<unsigned char>(v)); break;
      case StorageType::Int16: { auto x = static_cast<std::int16_t>(v); std::memcpy(p, &x, 2); break; }
      case StorageType::Float32: { auto x = static_cast<float>(v); std::memcpy(p, &x, 4); break; }
      default: std::memcpy(p, &v, 8); break;
    }
    p += nb;
  }
  return out;
}

// Shared by NIfTI-1 and Analyze 7.5: the first 348 bytes have the same layout
// for the fields used here.
struct RawHeader {
  std::array<int, 3> file_dims{};  // fastest axis first
  std::array<double, 3> pixdim{};
  int datatype = 0;
  double vox_offset = 0;
  double slope = 0, intercept = 0;
  bool swap = false;
};

RawHeader parse_raw_header(const std::vector<char>& bytes, const std::string& name, bool allow_swap) {
  require(bytes.size() >= kHeaderBytes, Errc::CorruptHeader, name + ": header truncated");
  const char* h = bytes.data();
  RawHeader hdr;
  if (load<std::int32_t>(h, false) != kHeaderBytes) {
    require(load<std::int32_t>(h, true) == kHeaderBytes, Errc::CorruptHeader,
            name + ": sizeof_hdr is not 348");
    require(allow_swap, Errc::CorruptHeader, name + ": big-endian Analyze is not supported");
    hdr.swap = true;
  }
  const auto ndim = load<std::int16_t>(h + 40, hdr.swap);
  require(ndim >= 1 && ndim <= 7, Errc::CorruptHeader, name + ": bad dimension count");
  for (int a = 0; a < 3; ++a) {
    const int d = a < ndim ? load<std::int16_t>(h + 42 + 2 * a, hdr.swap) : 1;
    require(d >= 1, Errc::CorruptHeader, name + ": non-positive dimension");
    hdr.file_dims[static_cast<std::size_t>(a)] = d;
    const double pd = load<float>(h + 80 + 4 * a, hdr.swap);
    hdr.pixdim[static_cast<std::size_t>(a)] = (a < ndim && pd > 0) ? pd : 1.0;
  }
  for (int a = 3; a < ndim; ++a) {
    require(load<std::int16_t>(h + 42 + 2 * a, hdr.swap) == 1, Errc::CorruptHeader,
            name + ": only single-frame 3D volumes are supported");
  }
  hdr.datatype = load<std::int16_t>(h + 70, hdr.swap);
  require(datatype_bytes(hdr.datatype) > 0, Errc::CorruptHeader,
          name + ": unsupported datatype " + std::to_string(hdr.datatype));
  hdr.vox_offset = load<float>(h + 108, hdr.swap);
  hdr.slope = load<float>(h + 112, hdr.swap);
  hdr.intercept = load<float>(h + 116, hdr.swap);
  return hdr;
}

VolumeImage volume_from_raw(const RawHeader& hdr, const char* payload, std::size_t payload_bytes,
                            const std::string& name, bool apply_scaling) {
  VolumeImage vol;
  // File axes are listed fastest first; our axis 2 is the fastest.
  vol.dims = {hdr.file_dims[2], hdr.file_dims[1], hdr.file_dims[0]};
  vol.spacing = {hdr.pixdim[2], hdr.pixdim[1], hdr.pixdim[0]};
  const std::size_t count = vol.voxel_count();
  const std::size_t need = count * static_cast<std::size_t>(datatype_bytes(hdr.datatype));
  require(payload_bytes == need, Errc::CorruptHeader,
          name + ": header declares " + std::to_string(count) + " voxels (" +
              std::to_string(need) + " bytes) but payload holds " + std::to_string(payload_bytes) +
              " bytes");
  vol.voxels = decode_payload(payload, count, hdr.datatype, hdr.swap);
  if (apply_scaling && hdr.slope != 0.0 && !(hdr.slope == 1.0 && hdr.intercept == 0.0)) {
    for (double& v : vol.voxels) v = v * hdr.slope + hdr.intercept;
  }
  vol.validate();
  return vol;
}

std::string make_raw_header(const VolumeImage& vol, StorageType storage, bool nifti) {
  std::string h(nifti ? kNiftiDataOffset : kHeaderBytes, '\0');
  store<std::int32_t>(h, 0, kHeaderBytes);
  if (!nifti) {
    std::memcpy(h.data() + 4, "dsr", 3);  // data_type field is free text in Analyze
    store<std::int32_t>(h, 32, 16384);     // extents
    h[38] = 'r';                           // regular
  }
  store<std::int16_t>(h, 40, 3);
  store<std::int16_t>(h, 42, static_cast<std::int16_t>(vol.dims[2]));
  store<std::int16_t>(h, 44, static_cast<std::int16_t>(vol.dims[1]));
  store<std::int16_t>(h, 46, static_cast<std::int16_t>(vol.dims[0]));
  for (int a = 3; a < 7; ++a) store<std::int16_t>(h, 42 + 2 * a, 1);
  const std::int16_t dt = storage_datatype(storage);
  store<std::int16_t>(h, 70, dt);
  store<std::int16_t>(h, 72, static_cast<std::int16_t>(8 * datatype_bytes(dt)));
  store<float>(h, 76, 1.0f);
  store<float>(h, 80, static_cast<float>(vol.spacing[2]));
  store<float>(h, 84, static_cast<float>(vol.spacing[1]));
  store<float>(h, 88, static_cast<float>(vol.spacing[0]));
  if (nifti) {
    store<float>(h, 108, static_cast<float>(kNiftiDataOffset));
    h[123] = 10;  // xyzt_units: mm, seconds
    store<std::int16_t>(h, 252, 0);  // qform_code
    store<std::int16_t>(h, 254, 0);  // sform_code
    std::memcpy(h.data() + 344, "n+1", 4);
  }
  return h;
}

void require_exact_spacing(const VolumeImage& vol) {
  for (double s : vol.spacing) {
    require(static_cast<double>(static_cast<float>(s)) == s, Errc::IoFailure,
            "voxel spacing is not representable in single precision");
  }
  for (int d : vol.dims) {
    require(d <= std::numeric_limits<std::int16_t>::max(), Errc::IoFailure,
            "extent exceeds 16-bit header field");
  }
}

VolumeImage read_nifti(const fs::path& path) {
  const auto bytes = read_file(path);
  const std::string name = path.string();
  const RawHeader hdr = parse_raw_header(bytes, name, true);
  require(std::memcmp(bytes.data() + 344, "n+1", 4) == 0, Errc::CorruptHeader,
          name + ": not a single-file NIfTI-1 image");
  const auto offset = static_cast<std::size_t>(hdr.vox_offset);
  require(offset >= kHeaderBytes && offset <= bytes.size(), Errc::CorruptHeader,
          name + ": vox_offset outside file");
  return volume_from_raw(hdr, bytes.data() + offset, bytes.size() - offset, name, true);
}

void write_nifti(const VolumeImage& vol, const fs::path& path, StorageType storage) {
  write_file(path, make_raw_header(vol, storage, true), encode_payload(vol.voxels, storage));
}

fs::path analyze_image_path(const fs::path& header) {
  fs::path img = header;
  return img.replace_extension(".img");
}

VolumeImage read_analyze(const fs::path& path) {
  fs::path hdr_path = path;
  if (path.extension() == ".img") hdr_path.replace_extension(".hdr");
  const auto bytes = read_file(hdr_path);
  const std::string name = hdr_path.string();
  const RawHeader hdr = parse_raw_header(bytes, name, false);
  const auto payload = read_file(analyze_image_path(hdr_path));
  const auto offset = static_cast<std::size_t>(std::max(0.0, hdr.vox_offset));
  require(offset <= payload.size(), Errc::CorruptHeader, name + ": vox_offset beyond .img");
  return volume_from_raw(hdr, payload.data() + offset, payload.size() - offset, name, false);
}

void write_analyze(const VolumeImage& vol, const fs::path& path, StorageType storage) {
  fs::path hdr_path = path;
  if (path.extension() != ".hdr") hdr_path.replace_extension(".hdr");
  write_file(hdr_path, make_raw_header(vol, storage, false), {});
  write_file(analyze_image_path(hdr_path), {}, encode_payload(vol.voxels, storage));
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

VolumeImage read_metaimage(const fs::path& path) {
  const auto bytes = read_file(path);
  const std::string name = path.string();
  std::size_t pos = 0;
  int ndims = 0;
  std::vector<int> dims;
  std::vector<double> spacing;
  int dt = 0;
  bool msb = false;
  std::string data_file;
  while (pos < bytes.size() && data_file.empty()) {
    const auto eol = std::find(bytes.begin() + static_cast<std::ptrdiff_t>(pos), bytes.end(), '\n');
    std::string line(bytes.begin() + static_cast<std::ptrdiff_t>(pos), eol);
    pos = static_cast<std::size_t>(eol - bytes.begin()) + 1;
    const auto eq = line.find('=');
    if (eq == std::string::npos) continue;
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    std::istringstream vs(value);
    if (key == "NDims") {
      vs >> ndims;
    } else if (key == "DimSize") {
      for (int d; vs >> d;) dims.push_back(d);
    } else if (key == "ElementSpacing" || key == "ElementSize") {
      if (key == "ElementSpacing" || spacing.empty()) {
        spacing.clear();
        for (double s; vs >> s;) spacing.push_back(s);
      }
    } else if (key == "ElementType") {
      if (value == "MET_UCHAR") dt = kDtUInt8;
      else if (value == "MET_CHAR") dt = kDtInt8;
      else if (value == "MET_SHORT") dt = kDtInt16;
      else if (value == "MET_USHORT") dt = kDtUInt16;
      else if (value == "MET_INT") dt = kDtInt32;
      else if (value == "MET_UINT") dt = kDtUInt32;
      else if (value == "MET_FLOAT") dt = kDtFloat32;
      else if (value == "MET_DOUBLE") dt = kDtFloat64;
      else fail(Errc::CorruptHeader, name + ": unsupported ElementType " + value);
    } else if (key == "BinaryDataByteOrderMSB" || key == "ElementByteOrderMSB") {
      msb = value == "True" || value == "true";
    } else if (key == "CompressedData") {
      require(value != "True" && value != "true", Errc::UnknownFormat,
              name + ": compressed MetaImage data is not supported");
    } else if (key == "ElementNumberOfChannels") {
      require(value == "1", Errc::CorruptHeader, name + ": multi-channel MetaImage not supported");
    } else if (key == "ElementDataFile") {
      data_file = value;
    }
  }
  require(!data_file.empty(), Errc::CorruptHeader, name + ": missing ElementDataFile");
  require(ndims >= 1 && ndims <= 3 && static_cast<int>(dims.size()) == ndims, Errc::CorruptHeader,
          name + ": inconsistent NDims/DimSize");
  require(dt != 0, Errc::CorruptHeader, name + ": missing ElementType");
  RawHeader hdr;
  hdr.datatype = dt;
  hdr.swap = msb;
  for (int a = 0; a < 3; ++a) {
    const auto i = static_cast<std::size_t>(a);
    hdr.file_dims[i] = a < ndims ? dims[i] : 1;
    require(hdr.file_dims[i] >= 1, Errc::CorruptHeader, name + ": non-positive DimSize");
    hdr.pixdim[i] = i < spacing.size() ? spacing[i] : 1.0;
  }
  if (data_file == "LOCAL") {
    return volume_from_raw(hdr, bytes.data() + pos, bytes.size() - pos, name, false);
  }
  const auto raw = read_file(path.parent_path() / data_file);
  return volume_from_raw(hdr, raw.data(), raw.size(), name, false);
}

std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

void write_metaimage(const VolumeImage& vol, const fs::path& path, StorageType storage) {
  const char* type = "MET_DOUBLE";
  switch (storage) {
    case StorageType::UInt8: type = "MET_UCHAR"; break;
    case StorageType::Int16: type = "MET_SHORT"; break;
    case StorageType::Float32: type = "MET_FLOAT"; break;
    default: break;
  }
  std::ostringstream h;
  h << "ObjectType = Image\nNDims = 3\nBinaryData = True\nBinaryDataByteOrderMSB = False\n"
    << "CompressedData = False\n"
    << "ElementSpacing = " << format_double(vol.spacing[2]) << ' ' << format_double(vol.spacing[1])
    << ' ' << format_double(vol.spacing[0]) << '\n'
    << "DimSize = " << vol.dims[2] << ' ' << vol.dims[1] << ' ' << vol.dims[0] << '\n'
    << "ElementType = " << type << "\nElementDataFile = LOCAL\n";
  write_file(path, h.str(), encode_payload(vol.voxels, storage));
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(trim(cur));
      cur.clear();
    } else {
      cur += ch;
    }
  }
  out.push_back(trim(cur));
  return out;
}

}  // namespace

std::optional<VolumeFormat> parse_volume_format(std::string_view text) {
  if (text == "nifti" || text == "nii") return VolumeFormat::Nifti;
  if (text == "mha" || text == "metaimage") return VolumeFormat::MetaImage;
  if (text == "analyze" || text == "hdr") return VolumeFormat::Analyze;
  return std::nullopt;
}

std::optional<VolumeFormat> format_from_extension(const fs::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".nii") return VolumeFormat::Nifti;
  if (ext == ".mha") return VolumeFormat::MetaImage;
  if (ext == ".hdr" || ext == ".img") return VolumeFormat::Analyze;
  return std::nullopt;
}

VolumeImage read_volume(const fs::path& path, std::optional<VolumeFormat> hint) {
  const auto format = hint ? hint : format_from_extension(path);
  require(format.has_value(), Errc::UnknownFormat,
          "cannot infer volume format of " + path.string());
  switch (*format) {
    case VolumeFormat::Nifti: return read_nifti(path);
    case VolumeFormat::MetaImage: return read_metaimage(path);
    case VolumeFormat::Analyze: return read_analyze(path);
  }
  fail(Errc::UnknownFormat, path.string());
}

void write_volume(const VolumeImage& vol, const fs::path& path, VolumeFormat format,
                  StorageType storage) {
  vol.validate();
  require_exact_spacing(vol);
  const StorageType resolved = resolve_storage(vol.voxels, storage);
  switch (format) {
    case VolumeFormat::Nifti: write_nifti(vol, path, resolved); break;
    case VolumeFormat::MetaImage: write_metaimage(vol, path, resolved); break;
    case VolumeFormat::Analyze: write_analyze(vol, path, resolved); break;
  }
}

fs::path Manifest::resolve(const ManifestRow& row) const {
  const fs::path p(row.path);
  return p.is_absolute() ? p : base_dir / p;
}

Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), Errc::IoFailure, "cannot open manifest " + path.string());
  Manifest m;
  m.base_dir = path.parent_path();
  std::string line;
  require(static_cast<bool>(std::getline(in, line)), Errc::ParseError, "empty manifest");
  const auto header = split_csv(line);
  const std::vector<std::string> expected = {"subject_id", "path",  "modality",
                                             "plane_hint", "label", "split"};
  require(header == expected, Errc::ParseError,
          "manifest header must be subject_id,path,modality,plane_hint,label,split");
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto f = split_csv(line);
    require(f.size() == 6, Errc::ParseError,
            path.string() + ":" + std::to_string(line_no) + ": expected 6 fields");
    m.rows.push_back({f[0], f[1], f[2], f[3], f[4], f[5]});
  }
  return m;
}

void write_manifest(const Manifest& manifest, const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), Errc::IoFailure, "cannot write manifest " + path.string());
  out << "subject_id,path,modality,plane_hint,label,split\n";
  for (const auto& r : manifest.rows) {
    out << r.subject_id << ',' << r.path << ',' << r.modality << ',' << r.plane_hint << ','
        << r.label << ',' << r.split << '\n';
  }
  require(static_cast<bool>(out), Errc::IoFailure, "write failed for " + path.string());
}

}  // namespace neuropipe

namespace neuropipe {

namespace {

std::vector<std::string> split_colon(std::string_view text) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = text.find(':', start);
    parts.emplace_back(text.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

int parse_int(const std::string& s, std::string_view whole) {
  std::size_t used = 0;
  int v = 0;
  try {
    v = std::stoi(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  require(used == s.size() && !s.empty(), Errc::ParseError,
          "bad integer in plane hint '" + std::string(whole) + "'");
  return v;
}

}  // namespace

PlaneHint parse_plane_hint(std::string_view text) {
  PlaneHint hint;
  if (text.empty()) return hint;
  const auto parts = split_colon(text);
  if (parts[0] == "voi") {
    require(parts.size() == 7, Errc::ParseError,
            "voi hint needs six integers: '" + std::string(text) + "'");
    VoiSpec v;
    for (int a = 0; a < 3; ++a) {
      v.lower[a] = parse_int(parts[1 + a], text);
      v.upper[a] = parse_int(parts[4 + a], text);
    }
    hint.voi = v;
    return hint;
  }
  hint.plane = parse_plane(parts[0]);
  require(hint.plane.has_value() && parts.size() <= 2, Errc::ParseError,
          "bad plane hint '" + std::string(text) + "'");
  if (parts.size() == 2) hint.index = parse_int(parts[1], text);
  return hint;
}

std::string format_plane_hint(const PlaneHint& hint) {
  if (hint.voi) {
    std::string s = "voi";
    for (int a = 0; a < 3; ++a) s += ':' + std::to_string(hint.voi->lower[a]);
    for (int a = 0; a < 3; ++a) s += ':' + std::to_string(hint.voi->upper[a]);
    return s;
  }
  if (!hint.plane) return {};
  std::string s(plane_name(*hint.plane));
  if (hint.index) s += ':' + std::to_string(*hint.index);
  return s;
}

}  // namespace neuropipe
