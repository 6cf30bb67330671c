#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "neuropipe/volume.hpp"

namespace neuropipe {

enum class VolumeFormat { Nifti, MetaImage, Analyze };

// On-disk element type. Auto picks the narrowest type that stores every voxel exactly.
enum class StorageType { Auto, UInt8, Int16, Float32, Float64 };

std::optional<VolumeFormat> parse_volume_format(std::string_view text);
std::optional<VolumeFormat> format_from_extension(const std::filesystem::path& path);

// Reads .nii, .mha or .hdr/.img. Modality and subject id are not stored in
// these formats; callers fill them from the manifest.
VolumeImage read_volume(const std::filesystem::path& path,
                        std::optional<VolumeFormat> hint = std::nullopt);

void write_volume(const VolumeImage& vol, const std::filesystem::path& path, VolumeFormat format,
                  StorageType storage = StorageType::Auto);

// Manifest row: subject_id,path,modality,plane_hint,label,split
struct ManifestRow {
  std::string subject_id;
  std::string path;
  std::string modality;  // a Modality name, or MASK for instance-label volumes
  std::string plane_hint;
  std::string label;
  std::string split;
};

struct Manifest {
  std::filesystem::path base_dir;  // relative paths resolve against this
  std::vector<ManifestRow> rows;

  std::filesystem::path resolve(const ManifestRow& row) const;
};

// plane_hint grammar: empty, "<plane>", "<plane>:<index>" or
// "voi:l0:l1:l2:u0:u1:u2".
struct PlaneHint {
  std::optional<Plane> plane;
  std::optional<int> index;
  std::optional<VoiSpec> voi;
};
PlaneHint parse_plane_hint(std::string_view text);  // ParseError
std::string format_plane_hint(const PlaneHint& hint);

Manifest read_manifest(const std::filesystem::path& path);
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);

}  // namespace neuropipe
