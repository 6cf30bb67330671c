#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "neuropipe/augment.hpp"
#include "neuropipe/boxes.hpp"
#include "neuropipe/labels.hpp"
#include "neuropipe/volume.hpp"
#include "neuropipe/volume_io.hpp"

namespace neuropipe {

struct SyntheticSpec {
  std::array<int, 3> dims{32, 32, 32};
  double noise_scale = 4.0;  // lattice spacing of the smooth texture, voxels
  double noise_amplitude = 0.03;
  // Overrides the per-class lesion count of tumor classes; (0, 0) forces Healthy.
  std::optional<std::array<int, 2>> lesion_count;
  // Lesion centre per axis as a fraction of (extent - 1), and semi-axes in voxels.
  std::array<Interval, 3> center_fraction{{{0.4, 0.6}, {0.4, 0.6}, {0.4, 0.6}}};
  std::array<Interval, 3> radius{{{3.0, 6.0}, {3.0, 6.0}, {3.0, 6.0}}};
  // Additive lesion intensity per modality, canonical order T1..PD.
  std::array<double, 6> lesion_contrast{-0.15, 0.2, 0.25, 0.3, 0.25, 0.15};
  // Normalized-radius bounds of the four nested shells, outermost first.
  std::array<double, 4> shell_fractions{1.0, 0.75, 0.5, 0.25};
  std::vector<Modality> modalities{Modality::T1, Modality::T1c, Modality::T2, Modality::FLAIR};
  std::optional<LesionClass> force_class;
  std::uint64_t seed = 1;

  void validate() const;  // BadConfig / SpecInfeasible
};

struct Ellipsoid {
  std::array<double, 3> center{};
  std::array<double, 3> radii{};

  // Squared normalized radius of voxel (i0, i1, i2).
  double rho2(int i0, int i1, int i2) const {
    const double a = (i0 - center[0]) / radii[0];
    const double b = (i1 - center[1]) / radii[1];
    const double c = (i2 - center[2]) / radii[2];
    return a * a + b * b + c * c;
  }
  bool contains(int i0, int i1, int i2) const { return rho2(i0, i1, i2) <= 1.0; }
};

struct LesionInstance {
  SubRegion region = SubRegion::Edema;
  std::optional<Ellipsoid> shape;     // absent when loaded from disk
  std::vector<std::uint8_t> mask;     // voxel_count entries, 1 inside
  std::vector<std::uint8_t> shells;   // 0 outside, else 1 + shell (1 = outermost)
};

struct SyntheticCase {
  std::string subject_id;
  LesionClass label = LesionClass::Healthy;
  std::array<int, 3> dims{};
  std::vector<VolumeImage> volumes;  // canonical modality order
  std::vector<LesionInstance> lesions;
  int focus_slice = 0;  // axial slice through the first lesion (or the middle)

  const VolumeImage& volume(Modality m) const;  // ShapeMismatch if absent
};

LesionClass class_for_index(const SyntheticSpec& spec, std::uint64_t case_index);
SyntheticCase generate_case(const SyntheticSpec& spec, std::uint64_t case_index);
// The lesion-free image the case was built on.
VolumeImage background_volume(const SyntheticSpec& spec, std::uint64_t case_index, Modality m);

// Label volume: 0 background, else 1 + 16 * instance + 4 * region + shell.
VolumeImage encode_label_volume(const SyntheticCase& c);
std::vector<LesionInstance> decode_label_volume(const VolumeImage& labels);

// 2D views used by the models.
struct LesionSlice {
  std::string subject_id;
  int slice_index = 0;
  SliceStack stack;                 // normalized modality channels
  std::vector<BoundingBox> boxes;   // tight boxes of the instance masks
  std::vector<Tensor> masks;        // (1, H, W) binary
  std::vector<SubRegion> regions;
};

LesionSlice lesion_slice(const SyntheticCase& c, int axial_index);
inline LesionSlice lesion_slice(const SyntheticCase& c) { return lesion_slice(c, c.focus_slice); }

struct ClassifierSample {
  std::string subject_id;
  SliceStack input;  // (axial, coronal, sagittal) of one modality, side x side
  LesionClass label = LesionClass::Healthy;
};

ClassifierSample classifier_sample(const SyntheticCase& c, Modality modality, int side);

// Writes volumes/<subject>_<modality>.nii, label volumes and manifest.csv into
// out_dir; returns the manifest path. Split names: train[, val], test.
std::filesystem::path generate_dataset(const SyntheticSpec& spec, int n_cases,
                                       const std::vector<double>& split_fractions,
                                       const std::filesystem::path& out_dir);

std::vector<std::string> split_names(std::size_t n);
std::vector<int> split_counts(int n_cases, const std::vector<double>& fractions);

// Cases of a manifest grouped by subject in first-appearance order.
std::vector<SyntheticCase> load_cases(const Manifest& manifest,
                                      const std::optional<std::string>& split = std::nullopt);

}  // namespace neuropipe
