#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "neuropipe/tensor.hpp"

namespace neuropipe {

// Declaration order is the canonical channel order.
enum class Modality { T1, T1c, T2, FLAIR, DWI, PD };
inline constexpr std::array<Modality, 6> kAllModalities = {
    Modality::T1, Modality::T1c, Modality::T2, Modality::FLAIR, Modality::DWI, Modality::PD};

// Axis mapping: axial indexes axis 0, coronal axis 1, sagittal axis 2.
enum class Plane { Axial, Coronal, Sagittal };
inline constexpr std::array<Plane, 3> kAllPlanes = {Plane::Axial, Plane::Coronal, Plane::Sagittal};

std::string_view modality_name(Modality m);
std::optional<Modality> parse_modality(std::string_view text);
std::string_view plane_name(Plane p);
std::optional<Plane> parse_plane(std::string_view text);
constexpr int plane_axis(Plane p) { return static_cast<int>(p); }

// One 3D scalar grid of one modality of one subject. Voxel (i0, i1, i2) lives
// at (i0 * d1 + i1) * d2 + i2.
struct VolumeImage {
  std::array<int, 3> dims{1, 1, 1};
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  Modality modality = Modality::T1;
  std::string subject_id;
  std::vector<double> voxels = std::vector<double>(1, 0.0);

  static VolumeImage zeros(std::array<int, 3> dims, Modality modality = Modality::T1,
                           std::string subject_id = {});

  std::size_t index(int i0, int i1, int i2) const noexcept {
    return (static_cast<std::size_t>(i0) * dims[1] + i1) * dims[2] + i2;
  }
  double& at(int i0, int i1, int i2) noexcept { return voxels[index(i0, i1, i2)]; }
  double at(int i0, int i1, int i2) const noexcept { return voxels[index(i0, i1, i2)]; }
  std::size_t voxel_count() const noexcept {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }

  // Throws ShapeMismatch / NonFiniteData / CorruptHeader when an invariant is broken.
  void validate() const;
};

bool same_grid_and_values(const VolumeImage& a, const VolumeImage& b);

// Per-volume min-max rescale to [0, 1]; constant volumes map to 0.
VolumeImage normalize_intensity(VolumeImage vol);

struct VoiSpec {
  std::array<int, 3> lower{0, 0, 0};
  std::array<int, 3> upper{1, 1, 1};  // exclusive

  static VoiSpec full(const VolumeImage& vol) { return {{0, 0, 0}, vol.dims}; }
  std::array<int, 3> extent() const {
    return {upper[0] - lower[0], upper[1] - lower[1], upper[2] - lower[2]};
  }
  friend bool operator==(const VoiSpec&, const VoiSpec&) = default;
};

using ChannelTag = std::variant<Modality, Plane>;
std::string channel_tag_name(const ChannelTag& tag);

struct Provenance {
  std::string subject_id;
  std::optional<Plane> plane;
  int slice_index = -1;
  std::optional<Modality> modality;  // source modality of a single-plane slice
  std::optional<VoiSpec> voi;
  std::vector<Modality> zero_filled;  // channels synthesized as zeros
};

// A 2D multi-channel image stored channel-major as a (C, H, W) tensor.
class SliceStack {
 public:
  SliceStack() = default;
  SliceStack(Tensor pixels, std::vector<ChannelTag> tags, Provenance provenance = {});

  int channels() const { return pixels_.dim(0); }
  int height() const { return pixels_.dim(1); }
  int width() const { return pixels_.dim(2); }

  const Tensor& pixels() const noexcept { return pixels_; }
  Tensor& pixels() noexcept { return pixels_; }
  const std::vector<ChannelTag>& tags() const noexcept { return tags_; }
  const Provenance& provenance() const noexcept { return provenance_; }
  Provenance& provenance() noexcept { return provenance_; }

  bool is_modality_stack() const;
  bool is_plane_stack() const;
  std::vector<Modality> modalities() const;  // throws if plane-tagged

  // Copy of one channel as a single-channel stack with the same provenance.
  SliceStack channel(int c) const;
  // Replaces pixel data keeping tags; shape channel count must match.
  SliceStack with_pixels(Tensor pixels) const;

  friend bool operator==(const SliceStack& a, const SliceStack& b) {
    return a.pixels_ == b.pixels_ && a.tags_ == b.tags_;
  }

 private:
  Tensor pixels_;
  std::vector<ChannelTag> tags_;
  Provenance provenance_;
};

SliceStack extract_slice(const VolumeImage& vol, Plane plane, int index);
VolumeImage extract_voi(const VolumeImage& vol, const VoiSpec& voi);
// Center slice of the VOI along each axis, each resampled to side x side,
// channels ordered (axial, coronal, sagittal).
SliceStack plane_triplet(const VolumeImage& vol, const VoiSpec& voi, int side);
// Canonical modality order regardless of input order.
SliceStack stack_modalities(const std::vector<SliceStack>& slices);

// Half-pixel-centred bilinear resize of every channel (edge-clamped).
Tensor resize_bilinear(const Tensor& chw, int out_h, int out_w);

}  // namespace neuropipe
