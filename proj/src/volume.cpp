#include "neuropipe/volume.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "neuropipe/error.hpp"

namespace neuropipe {

namespace {

std::string lower(std::string_view text) {
  std::string out(text);
  for (char& ch : out) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
  return out;
}

std::string voi_string(const VoiSpec& voi) {
  std::string s = "[";
  for (int a = 0; a < 3; ++a) s += std::to_string(voi.lower[a]) + (a < 2 ? "," : ")-(");
  for (int a = 0; a < 3; ++a) s += std::to_string(voi.upper[a]) + (a < 2 ? "," : ")");
  return s;
}

void check_voi(const VolumeImage& vol, const VoiSpec& voi) {
  for (int a = 0; a < 3; ++a) {
    require(voi.lower[a] >= 0 && voi.lower[a] < voi.upper[a] && voi.upper[a] <= vol.dims[a],
            Errc::VoiOutOfBounds, "VOI " + voi_string(voi) + " outside volume");
  }
}

}  // namespace

std::string_view modality_name(Modality m) {
  switch (m) {
    case Modality::T1: return "T1";
    case Modality::T1c: return "T1c";
    case Modality::T2: return "T2";
    case Modality::FLAIR: return "FLAIR";
    case Modality::DWI: return "DWI";
    case Modality::PD: return "PD";
  }
  return "?";
}

std::optional<Modality> parse_modality(std::string_view text) {
  const std::string key = lower(text);
  for (Modality m : kAllModalities) {
    if (lower(modality_name(m)) == key) return m;
  }
  if (key == "flair" || key == "f") return Modality::FLAIR;
  return std::nullopt;
}

std::string_view plane_name(Plane p) {
  switch (p) {
    case Plane::Axial: return "axial";
    case Plane::Coronal: return "coronal";
    case Plane::Sagittal: return "sagittal";
  }
  return "?";
}

std::optional<Plane> parse_plane(std::string_view text) {
  const std::string key = lower(text);
  for (Plane p : kAllPlanes) {
    if (plane_name(p) == key) return p;
  }
  return std::nullopt;
}

std::string channel_tag_name(const ChannelTag& tag) {
  if (const auto* m = std::get_if<Modality>(&tag)) return std::string(modality_name(*m));
  return std::string(plane_name(std::get<Plane>(tag)));
}

VolumeImage VolumeImage::zeros(std::array<int, 3> dims, Modality modality,
                               std::string subject_id) {
  VolumeImage vol;
  vol.dims = dims;
  vol.modality = modality;
  vol.subject_id = std::move(subject_id);
  vol.voxels.assign(vol.voxel_count(), 0.0);
  return vol;
}

void VolumeImage::validate() const {
  for (int a = 0; a < 3; ++a) {
    require(dims[a] >= 1, Errc::ShapeMismatch, "volume extent must be >= 1");
    require(spacing[a] > 0.0 && std::isfinite(spacing[a]), Errc::CorruptHeader,
            "voxel spacing must be positive");
  }
  require(voxels.size() == voxel_count(), Errc::ShapeMismatch, "voxel count mismatch");
  for (double v : voxels) {
    require(std::isfinite(v), Errc::NonFiniteData, "volume contains NaN or Inf");
  }
}

bool same_grid_and_values(const VolumeImage& a, const VolumeImage& b) {
  return a.dims == b.dims && a.spacing == b.spacing && a.voxels == b.voxels;
}

VolumeImage normalize_intensity(VolumeImage vol) {
  const auto [lo_it, hi_it] = std::minmax_element(vol.voxels.begin(), vol.voxels.end());
  const double lo = *lo_it;
  const double range = *hi_it - lo;
  for (double& v : vol.voxels) v = range > 0.0 ? (v - lo) / range : 0.0;
  return vol;
}

SliceStack::SliceStack(Tensor pixels, std::vector<ChannelTag> tags, Provenance provenance)
    : pixels_(std::move(pixels)), tags_(std::move(tags)), provenance_(std::move(provenance)) {
  require(pixels_.rank() == 3, Errc::ShapeMismatch, "slice stack pixels must be (C, H, W)");
  require(pixels_.dim(0) == static_cast<int>(tags_.size()), Errc::ShapeMismatch,
          "one channel tag per channel required");
  require(pixels_.dim(0) >= 1 && pixels_.dim(0) <= 6, Errc::ShapeMismatch,
          "slice stack must have 1..6 channels");
  require(pixels_.dim(1) >= 1 && pixels_.dim(2) >= 1, Errc::ShapeMismatch,
          "slice stack must be at least 1x1");
  const bool modal = std::holds_alternative<Modality>(tags_.front());
  for (const auto& t : tags_) {
    require(std::holds_alternative<Modality>(t) == modal, Errc::ShapeMismatch,
            "channel tags must be all modalities or all planes");
  }
  if (modal) {
    auto mods = modalities();
    std::sort(mods.begin(), mods.end());
    require(std::adjacent_find(mods.begin(), mods.end()) == mods.end(),
            Errc::DuplicateModality, "modality repeated in slice stack");
  }
}

bool SliceStack::is_modality_stack() const {
  return !tags_.empty() && std::holds_alternative<Modality>(tags_.front());
}

bool SliceStack::is_plane_stack() const {
  return !tags_.empty() && std::holds_alternative<Plane>(tags_.front());
}

std::vector<Modality> SliceStack::modalities() const {
  std::vector<Modality> out;
  for (const auto& t : tags_) {
    require(std::holds_alternative<Modality>(t), Errc::WrongChannels,
            "stack is tagged by plane, not modality");
    out.push_back(std::get<Modality>(t));
  }
  return out;
}

SliceStack SliceStack::channel(int c) const {
  require(c >= 0 && c < channels(), Errc::IndexOutOfRange, "channel index out of range");
  Tensor one = Tensor::chw(1, height(), width());
  const std::size_t plane = static_cast<std::size_t>(height()) * width();
  std::copy_n(pixels_.data() + c * plane, plane, one.data());
  return SliceStack(std::move(one), {tags_[static_cast<std::size_t>(c)]}, provenance_);
}

SliceStack SliceStack::with_pixels(Tensor pixels) const {
  return SliceStack(std::move(pixels), tags_, provenance_);
}

SliceStack extract_slice(const VolumeImage& vol, Plane plane, int index) {
  const int axis = plane_axis(plane);
  require(index >= 0 && index < vol.dims[axis], Errc::IndexOutOfRange,
          std::string(plane_name(plane)) + " index " + std::to_string(index) + " outside [0," +
              std::to_string(vol.dims[axis]) + ")");
  const int h = axis == 0 ? vol.dims[1] : vol.dims[0];
  const int w = axis == 2 ? vol.dims[1] : vol.dims[2];
  Tensor px = Tensor::chw(1, h, w);
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      double v = 0.0;
      switch (plane) {
        case Plane::Axial: v = vol.at(index, r, c); break;
        case Plane::Coronal: v = vol.at(r, index, c); break;
        case Plane::Sagittal: v = vol.at(r, c, index); break;
      }
      px.at(0, r, c) = v;
    }
  }
  Provenance prov;
  prov.subject_id = vol.subject_id;
  prov.plane = plane;
  prov.slice_index = index;
  prov.modality = vol.modality;
  return SliceStack(std::move(px), {plane}, std::move(prov));
}

VolumeImage extract_voi(const VolumeImage& vol, const VoiSpec& voi) {
  check_voi(vol, voi);
  const auto ext = voi.extent();
  VolumeImage out = VolumeImage::zeros(ext, vol.modality, vol.subject_id);
  out.spacing = vol.spacing;
  for (int i = 0; i < ext[0]; ++i)
    for (int j = 0; j < ext[1]; ++j)
      for (int k = 0; k < ext[2]; ++k)
        out.at(i, j, k) = vol.at(voi.lower[0] + i, voi.lower[1] + j, voi.lower[2] + k);
  return out;
}

Tensor resize_bilinear(const Tensor& chw, int out_h, int out_w) {
  require(out_h >= 1 && out_w >= 1, Errc::DegenerateOutput, "resize target must be >= 1x1");
  const int c_n = chw.dim(0), in_h = chw.dim(1), in_w = chw.dim(2);
  if (in_h == out_h && in_w == out_w) return chw;
  Tensor out = Tensor::chw(c_n, out_h, out_w);
  const double sy = static_cast<double>(in_h) / out_h;
  const double sx = static_cast<double>(in_w) / out_w;
  for (int r = 0; r < out_h; ++r) {
    const double fy = std::clamp((r + 0.5) * sy - 0.5, 0.0, static_cast<double>(in_h - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, in_h - 1);
    const double wy = fy - y0;
    for (int c = 0; c < out_w; ++c) {
      const double fx = std::clamp((c + 0.5) * sx - 0.5, 0.0, static_cast<double>(in_w - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, in_w - 1);
      const double wx = fx - x0;
      for (int ch = 0; ch < c_n; ++ch) {
        const double top = chw.at(ch, y0, x0) * (1.0 - wx) + chw.at(ch, y0, x1) * wx;
        const double bottom = chw.at(ch, y1, x0) * (1.0 - wx) + chw.at(ch, y1, x1) * wx;
        out.at(ch, r, c) = top * (1.0 - wy) + bottom * wy;
      }
    }
  }
  return out;
}

SliceStack plane_triplet(const VolumeImage& vol, const VoiSpec& voi, int side) {
  require(side >= 1, Errc::BadConfig, "plane side must be >= 1");
  const VolumeImage sub = extract_voi(vol, voi);
  Tensor px = Tensor::chw(3, side, side);
  for (Plane p : kAllPlanes) {
    const int axis = plane_axis(p);
    const SliceStack s = extract_slice(sub, p, sub.dims[axis] / 2);
    const Tensor resized = resize_bilinear(s.pixels(), side, side);
    std::copy(resized.values().begin(), resized.values().end(),
              px.data() + static_cast<std::size_t>(axis) * side * side);
  }
  Provenance prov;
  prov.subject_id = vol.subject_id;
  prov.modality = vol.modality;
  prov.voi = voi;
  return SliceStack(std::move(px), {Plane::Axial, Plane::Coronal, Plane::Sagittal},
                    std::move(prov));
}

SliceStack stack_modalities(const std::vector<SliceStack>& slices) {
  require(!slices.empty(), Errc::EmptySubset, "no slices to stack");
  const SliceStack& first = slices.front();
  std::vector<std::pair<Modality, const SliceStack*>> tagged;
  for (const auto& s : slices) {
    require(s.channels() == 1, Errc::ShapeMismatch, "stack_modalities takes single-channel slices");
    require(s.height() == first.height() && s.width() == first.width(), Errc::ShapeMismatch,
            "slices differ in size");
    const auto& pa = s.provenance();
    const auto& pb = first.provenance();
    require(pa.subject_id == pb.subject_id && pa.plane == pb.plane &&
                pa.slice_index == pb.slice_index && pa.voi == pb.voi,
            Errc::ProvenanceMismatch, "slices come from different subjects or positions");
    std::optional<Modality> m;
    if (const auto* tag = std::get_if<Modality>(&s.tags().front())) m = *tag;
    else m = pa.modality;
    require(m.has_value(), Errc::WrongChannels, "slice carries no modality");
    tagged.emplace_back(*m, &s);
  }
  std::stable_sort(tagged.begin(), tagged.end(),
                   [](const auto& a, const auto& b) { return a.first < b.first; });
  for (std::size_t i = 1; i < tagged.size(); ++i) {
    require(tagged[i].first != tagged[i - 1].first, Errc::DuplicateModality,
            std::string(modality_name(tagged[i].first)) + " given twice");
  }
  const std::size_t plane = static_cast<std::size_t>(first.height()) * first.width();
  Tensor px = Tensor::chw(static_cast<int>(tagged.size()), first.height(), first.width());
  std::vector<ChannelTag> tags;
  for (std::size_t i = 0; i < tagged.size(); ++i) {
    std::copy_n(tagged[i].second->pixels().data(), plane, px.data() + i * plane);
    tags.emplace_back(tagged[i].first);
  }
  Provenance prov = first.provenance();
  prov.modality.reset();
  return SliceStack(std::move(px), std::move(tags), std::move(prov));
}

}  // namespace neuropipe
