#include "neuropipe/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "neuropipe/error.hpp"
#include "neuropipe/rng.hpp"

namespace neuropipe {

namespace {

constexpr std::size_t mod_index(Modality m) { return static_cast<std::size_t>(m); }

// Tissue intensities per modality (T1, T1c, T2, FLAIR, DWI, PD).
constexpr std::array<double, 6> kTissue{0.55, 0.55, 0.35, 0.40, 0.30, 0.50};
constexpr std::array<double, 6> kFluid{0.12, 0.12, 0.90, 0.08, 0.10, 0.80};

// Lesion gain per sub-region type and modality. FLAIR and T2 are >= 1 for
// every type so each lesion shows at least the configured contrast there.
constexpr std::array<std::array<double, 6>, 4> kTypeGain{{
    {1.0, 1.0, 1.0, 1.6, 1.0, 1.0},  // tumor core
    {1.0, 2.0, 1.0, 1.4, 1.0, 1.0},  // enhancing core
    {1.0, 0.0, 1.2, 1.2, 1.0, 1.0},  // non-enhancing core
    {1.0, 0.0, 1.4, 1.0, 1.0, 1.0},  // edema
}};
constexpr std::array<double, 4> kShellGain{1.0, 1.15, 1.3, 1.45};

struct Anatomy {
  std::array<double, 3> center{};
  std::array<double, 3> brain{};
  std::array<double, 3> ventricle{};
};

Anatomy anatomy_for(const SyntheticSpec& spec, LesionClass label) {
  Anatomy a;
  const bool atrophy = label == LesionClass::Alzheimer;
  for (int i = 0; i < 3; ++i) {
    const double d = spec.dims[static_cast<std::size_t>(i)];
    a.center[i] = 0.5 * (d - 1);
    a.brain[i] = (atrophy ? 0.40 : 0.46) * d;
    a.ventricle[i] = std::max(0.75, (atrophy ? 0.20 : 0.08) * d);
  }
  return a;
}

double quad(const std::array<double, 3>& c, const std::array<double, 3>& r, int i0, int i1, int i2) {
  const double a = (i0 - c[0]) / r[0], b = (i1 - c[1]) / r[1], d = (i2 - c[2]) / r[2];
  return a * a + b * b + d * d;
}

// Trilinear interpolation of a random lattice: a smooth texture in [-amp, amp] scale.
std::vector<double> smooth_noise(const SyntheticSpec& spec, std::uint64_t key) {
  const auto& d = spec.dims;
  const double step = std::max(1.0, spec.noise_scale);
  std::array<int, 3> n{};
  for (int a = 0; a < 3; ++a) n[a] = static_cast<int>(std::ceil((d[a] - 1) / step)) + 2;
  Rng rng(key);
  std::vector<double> lattice(static_cast<std::size_t>(n[0]) * n[1] * n[2]);
  for (double& v : lattice) v = rng.uniform(-1.0, 1.0);
  auto L = [&](int a, int b, int c) {
    return lattice[(static_cast<std::size_t>(a) * n[1] + b) * n[2] + c];
  };
  std::vector<double> out(static_cast<std::size_t>(d[0]) * d[1] * d[2]);
  std::size_t k = 0;
  for (int i0 = 0; i0 < d[0]; ++i0)
    for (int i1 = 0; i1 < d[1]; ++i1)
      for (int i2 = 0; i2 < d[2]; ++i2) {
        const double p0 = i0 / step, p1 = i1 / step, p2 = i2 / step;
        const int a = static_cast<int>(p0), b = static_cast<int>(p1), c = static_cast<int>(p2);
        const double f0 = p0 - a, f1 = p1 - b, f2 = p2 - c;
        double v = 0;
        for (int x = 0; x < 2; ++x)
          for (int y = 0; y < 2; ++y)
            for (int z = 0; z < 2; ++z)
              v += (x ? f0 : 1 - f0) * (y ? f1 : 1 - f1) * (z ? f2 : 1 - f2) * L(a + x, b + y, c + z);
        out[k++] = spec.noise_amplitude * v;
      }
  return out;
}

VolumeImage make_background(const SyntheticSpec& spec, std::uint64_t case_index, LesionClass label,
                            Modality m) {
  const std::uint64_t key = combine_keys(combine_keys(spec.seed, case_index), 100 + mod_index(m));
  const auto noise = smooth_noise(spec, key);
  const Anatomy an = anatomy_for(spec, label);
  VolumeImage vol = VolumeImage::zeros(spec.dims, m);
  std::size_t k = 0;
  for (int i0 = 0; i0 < spec.dims[0]; ++i0)
    for (int i1 = 0; i1 < spec.dims[1]; ++i1)
      for (int i2 = 0; i2 < spec.dims[2]; ++i2, ++k) {
        if (quad(an.center, an.brain, i0, i1, i2) > 1.0) continue;
        const bool fluid = quad(an.center, an.ventricle, i0, i1, i2) <= 1.0;
        vol.voxels[k] = (fluid ? kFluid : kTissue)[mod_index(m)] + noise[k];
      }
  return vol;
}

std::string case_subject(std::uint64_t case_index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "case%04llu", static_cast<unsigned long long>(case_index));
  return buf;
}

bool disjoint(const Ellipsoid& a, const Ellipsoid& b) {
  double dist2 = 0;
  for (int i = 0; i < 3; ++i) dist2 += (a.center[i] - b.center[i]) * (a.center[i] - b.center[i]);
  const double ra = *std::max_element(a.radii.begin(), a.radii.end());
  const double rb = *std::max_element(b.radii.begin(), b.radii.end());
  return std::sqrt(dist2) > ra + rb + 1.0;
}

struct LesionPlan {
  Ellipsoid shape;
  SubRegion region;
};

std::vector<LesionPlan> plan_lesions(const SyntheticSpec& spec, std::uint64_t case_index,
                                     LesionClass label) {
  Rng rng(combine_keys(combine_keys(spec.seed, case_index), 7));
  int count = 0;
  switch (label) {
    case LesionClass::Healthy:
    case LesionClass::Alzheimer: count = 0; break;
    case LesionClass::TumorHGG:
    case LesionClass::TumorLGG: count = 1; break;
    case LesionClass::MultipleSclerosis: count = 3 + rng.integer(0, 2); break;
  }
  if (spec.lesion_count && count > 0) count = rng.integer((*spec.lesion_count)[0], (*spec.lesion_count)[1]);

  std::vector<LesionPlan> plans;
  for (int n = 0; n < count; ++n) {
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      LesionPlan p;
      const bool ms = label == LesionClass::MultipleSclerosis;
      for (int a = 0; a < 3; ++a) {
        const Interval r = spec.radius[a];
        // Tumors: HGG in the upper half of the radius range, LGG in the lower half.
        double lo = r.lo, hi = r.hi;
        if (label == LesionClass::TumorHGG) lo = 0.5 * (r.lo + r.hi);
        if (label == LesionClass::TumorLGG) hi = 0.5 * (r.lo + r.hi);
        if (ms) lo = std::max(1.0, 0.4 * r.lo), hi = std::max(1.0, 0.4 * r.hi);
        p.shape.radii[a] = rng.uniform(lo, hi);
        const Interval f = spec.center_fraction[a];
        const double extent = spec.dims[a] - 1;
        if (ms) {
          // Scattered small lesions use a wider band than the tumor centre range.
          const double c_lo = std::min(extent * f.lo, std::max(hi, 0.2 * extent));
          const double c_hi = std::max(extent * f.hi, std::min(extent - hi, 0.8 * extent));
          p.shape.center[a] = rng.uniform(c_lo, c_hi);
        } else {
          p.shape.center[a] = extent * rng.uniform(f.lo, f.hi);
        }
      }
      if (ms) {
        // Keep small lesions on one of the three central planes.
        const int axis = rng.integer(0, 2);
        p.shape.center[axis] = std::floor(0.5 * spec.dims[axis]);
      }
      switch (label) {
        case LesionClass::TumorHGG:
          p.region = rng.uniform() < 0.5 ? SubRegion::EnhancingCore : SubRegion::TumorCore;
          break;
        case LesionClass::TumorLGG:
          p.region = rng.uniform() < 0.5 ? SubRegion::NonEnhancingCore : SubRegion::Edema;
          break;
        default: p.region = SubRegion::Edema;
      }
      placed = std::all_of(plans.begin(), plans.end(),
                           [&](const LesionPlan& q) { return disjoint(p.shape, q.shape); });
      if (placed) plans.push_back(p);
    }
    require(placed, Errc::SpecInfeasible,
            "cannot place " + std::to_string(count) + " disjoint lesions in the volume");
  }
  return plans;
}

}  // namespace

void SyntheticSpec::validate() const {
  for (int a = 0; a < 3; ++a) {
    require(dims[a] >= 1, Errc::BadConfig, "synthetic extent must be positive");
    const Interval r = radius[a], f = center_fraction[a];
    require(r.lo > 0 && r.lo <= r.hi, Errc::BadConfig, "lesion radius range must be positive and ordered");
    require(f.lo >= 0 && f.lo <= f.hi && f.hi <= 1, Errc::BadConfig,
            "lesion centre fractions must be ordered within [0, 1]");
    const double extent = dims[a] - 1;
    require(extent * f.lo - r.hi >= 0 && extent * f.hi + r.hi <= extent, Errc::SpecInfeasible,
            "lesion of radius up to " + std::to_string(r.hi) + " does not fit along axis " +
                std::to_string(a) + " of extent " + std::to_string(dims[a]));
  }
  for (int i = 0; i < 4; ++i) {
    require(shell_fractions[i] > 0 && shell_fractions[i] <= 1, Errc::BadConfig,
            "shell fractions must lie in (0, 1]");
    if (i > 0)
      require(shell_fractions[i] < shell_fractions[i - 1], Errc::BadConfig,
              "shell fractions must be strictly decreasing");
  }
  if (lesion_count)
    require((*lesion_count)[0] >= 0 && (*lesion_count)[0] <= (*lesion_count)[1], Errc::BadConfig,
            "lesion count range must be ordered and non-negative");
  require(!modalities.empty() && modalities.size() <= 6, Errc::BadConfig,
          "synthetic spec needs 1..6 modalities");
  for (std::size_t i = 0; i < modalities.size(); ++i)
    for (std::size_t j = i + 1; j < modalities.size(); ++j)
      require(modalities[i] != modalities[j], Errc::DuplicateModality, "modality listed twice");
  require(noise_amplitude >= 0 && noise_scale > 0, Errc::BadConfig, "bad texture parameters");
}

const VolumeImage& SyntheticCase::volume(Modality m) const {
  for (const auto& v : volumes)
    if (v.modality == m) return v;
  fail(Errc::ShapeMismatch, subject_id + " has no " + std::string(modality_name(m)) + " volume");
}

LesionClass class_for_index(const SyntheticSpec& spec, std::uint64_t case_index) {
  if (spec.force_class) return *spec.force_class;
  if (spec.lesion_count && (*spec.lesion_count)[1] == 0) return LesionClass::Healthy;
  return kAllClasses[case_index % kAllClasses.size()];
}

VolumeImage background_volume(const SyntheticSpec& spec, std::uint64_t case_index, Modality m) {
  spec.validate();
  VolumeImage v = make_background(spec, case_index, class_for_index(spec, case_index), m);
  v.subject_id = case_subject(case_index);
  return v;
}

SyntheticCase generate_case(const SyntheticSpec& spec, std::uint64_t case_index) {
  spec.validate();
  SyntheticCase c;
  c.subject_id = case_subject(case_index);
  c.label = class_for_index(spec, case_index);
  c.dims = spec.dims;

  const auto plans = plan_lesions(spec, case_index, c.label);
  const std::size_t nvox = static_cast<std::size_t>(spec.dims[0]) * spec.dims[1] * spec.dims[2];
  for (const auto& p : plans) {
    LesionInstance inst;
    inst.region = p.region;
    inst.shape = p.shape;
    inst.mask.assign(nvox, 0);
    inst.shells.assign(nvox, 0);
    std::size_t k = 0;
    for (int i0 = 0; i0 < spec.dims[0]; ++i0)
      for (int i1 = 0; i1 < spec.dims[1]; ++i1)
        for (int i2 = 0; i2 < spec.dims[2]; ++i2, ++k) {
          const double r2 = p.shape.rho2(i0, i1, i2);
          if (r2 > 1.0) continue;
          const double rho = std::sqrt(r2);
          int shell = 0;
          for (int s = 1; s < 4; ++s)
            if (rho <= spec.shell_fractions[s]) shell = s;
          inst.mask[k] = 1;
          inst.shells[k] = static_cast<std::uint8_t>(1 + shell);
        }
    c.lesions.push_back(std::move(inst));
  }
  c.focus_slice = plans.empty() ? spec.dims[0] / 2
                                : static_cast<int>(std::lround(plans.front().shape.center[0]));

  std::vector<Modality> mods = spec.modalities;
  std::sort(mods.begin(), mods.end());
  for (Modality m : mods) {
    VolumeImage v = make_background(spec, case_index, c.label, m);
    v.subject_id = c.subject_id;
    const double base = spec.lesion_contrast[mod_index(m)];
    for (const auto& inst : c.lesions) {
      const double gain = base * kTypeGain[static_cast<std::size_t>(inst.region)][mod_index(m)];
      for (std::size_t k = 0; k < nvox; ++k)
        if (inst.shells[k]) v.voxels[k] += gain * kShellGain[inst.shells[k] - 1u];
    }
    c.volumes.push_back(std::move(v));
  }
  return c;
}

VolumeImage encode_label_volume(const SyntheticCase& c) {
  require(c.lesions.size() <= 64, Errc::BadConfig, "too many lesions for a label volume");
  VolumeImage out = VolumeImage::zeros(c.dims, Modality::T1, c.subject_id);
  for (std::size_t i = 0; i < c.lesions.size(); ++i) {
    const auto& inst = c.lesions[i];
    for (std::size_t k = 0; k < out.voxels.size(); ++k)
      if (inst.mask[k])
        out.voxels[k] = static_cast<double>(1 + 16 * i + 4 * static_cast<std::size_t>(inst.region) +
                                            (inst.shells[k] - 1u));
  }
  return out;
}

std::vector<LesionInstance> decode_label_volume(const VolumeImage& labels) {
  std::map<int, LesionInstance> found;
  for (std::size_t k = 0; k < labels.voxels.size(); ++k) {
    const double v = labels.voxels[k];
    if (v == 0) continue;
    require(v > 0 && v == std::floor(v), Errc::BadLabel, "label volume values must be non-negative integers");
    const int code = static_cast<int>(v) - 1;
    const int instance = code / 16, region = (code / 4) % 4, shell = code % 4;
    auto [it, fresh] = found.try_emplace(instance);
    LesionInstance& inst = it->second;
    if (fresh) {
      inst.region = kAllSubRegions[static_cast<std::size_t>(region)];
      inst.mask.assign(labels.voxels.size(), 0);
      inst.shells.assign(labels.voxels.size(), 0);
    }
    require(inst.region == kAllSubRegions[static_cast<std::size_t>(region)], Errc::BadLabel,
            "instance carries two sub-region types");
    inst.mask[k] = 1;
    inst.shells[k] = static_cast<std::uint8_t>(1 + shell);
  }
  std::vector<LesionInstance> out;
  for (auto& [i, inst] : found) out.push_back(std::move(inst));
  return out;
}

LesionSlice lesion_slice(const SyntheticCase& c, int axial_index) {
  require(axial_index >= 0 && axial_index < c.dims[0], Errc::IndexOutOfRange,
          "axial index " + std::to_string(axial_index) + " outside the case");
  LesionSlice s;
  s.subject_id = c.subject_id;
  s.slice_index = axial_index;
  std::vector<SliceStack> channels;
  for (const auto& v : c.volumes) channels.push_back(extract_slice(normalize_intensity(v), Plane::Axial, axial_index));
  s.stack = stack_modalities(channels);

  const int h = c.dims[1], w = c.dims[2];
  const std::size_t offset = static_cast<std::size_t>(axial_index) * h * w;
  for (const auto& inst : c.lesions) {
    Tensor m = Tensor::chw(1, h, w);
    bool any = false;
    for (std::size_t k = 0; k < m.size(); ++k)
      if (inst.mask[offset + k]) m[k] = 1.0, any = true;
    if (!any) continue;
    s.boxes.push_back(*tight_box(m));
    s.masks.push_back(std::move(m));
    s.regions.push_back(inst.region);
  }
  return s;
}

ClassifierSample classifier_sample(const SyntheticCase& c, Modality modality, int side) {
  const VolumeImage v = normalize_intensity(c.volume(modality));
  return {c.subject_id, plane_triplet(v, VoiSpec::full(v), side), c.label};
}

std::vector<std::string> split_names(std::size_t n) {
  if (n == 1) return {"train"};
  if (n == 2) return {"train", "test"};
  if (n == 3) return {"train", "val", "test"};
  std::vector<std::string> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back("split" + std::to_string(i));
  return out;
}

std::vector<int> split_counts(int n_cases, const std::vector<double>& fractions) {
  require(!fractions.empty(), Errc::BadConfig, "no split fractions");
  double sum = 0;
  for (double f : fractions) {
    require(f >= 0, Errc::BadConfig, "split fractions must be non-negative");
    sum += f;
  }
  require(std::abs(sum - 1.0) < 1e-9, Errc::BadConfig, "split fractions must sum to 1");
  std::vector<int> counts;
  double cum = 0;
  int prev = 0;
  for (double f : fractions) {
    cum += f;
    const int edge = static_cast<int>(std::lround(cum * n_cases));
    counts.push_back(std::min(n_cases, edge) - prev);
    prev = std::min(n_cases, edge);
  }
  counts.back() += n_cases - prev;
  return counts;
}

std::filesystem::path generate_dataset(const SyntheticSpec& spec, int n_cases,
                                       const std::vector<double>& split_fractions,
                                       const std::filesystem::path& out_dir) {
  require(n_cases >= 1, Errc::BadConfig, "dataset needs at least one case");
  const auto counts = split_counts(n_cases, split_fractions);
  const auto names = split_names(counts.size());
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "volumes", ec);
  require(!ec, Errc::IoFailure, "cannot create " + (out_dir / "volumes").string() + ": " + ec.message());

  Manifest manifest;
  manifest.base_dir = out_dir;
  int case_index = 0;
  for (std::size_t s = 0; s < counts.size(); ++s)
    for (int n = 0; n < counts[s]; ++n, ++case_index) {
      const SyntheticCase c = generate_case(spec, static_cast<std::uint64_t>(case_index));
      const std::string hint = format_plane_hint({Plane::Axial, c.focus_slice, std::nullopt});
      const std::string label(class_name(c.label));
      for (const auto& v : c.volumes) {
        const std::string rel = "volumes/" + c.subject_id + "_" + std::string(modality_name(v.modality)) + ".nii";
        write_volume(v, out_dir / rel, VolumeFormat::Nifti, StorageType::Float32);
        manifest.rows.push_back({c.subject_id, rel, std::string(modality_name(v.modality)), hint, label, names[s]});
      }
      const std::string rel = "volumes/" + c.subject_id + "_MASK.nii";
      write_volume(encode_label_volume(c), out_dir / rel, VolumeFormat::Nifti);
      manifest.rows.push_back({c.subject_id, rel, "MASK", hint, label, names[s]});
    }
  const auto path = out_dir / "manifest.csv";
  write_manifest(manifest, path);
  return path;
}

std::vector<SyntheticCase> load_cases(const Manifest& manifest, const std::optional<std::string>& split) {
  std::vector<SyntheticCase> cases;
  std::map<std::string, std::size_t> where;
  for (const auto& row : manifest.rows) {
    if (split && row.split != *split) continue;
    auto [it, fresh] = where.try_emplace(row.subject_id, cases.size());
    if (fresh) {
      SyntheticCase c;
      c.subject_id = row.subject_id;
      const auto label = parse_class(row.label);
      require(label.has_value(), Errc::ParseError, "unknown class label '" + row.label + "'");
      c.label = *label;
      c.focus_slice = -1;
      cases.push_back(std::move(c));
    }
    SyntheticCase& c = cases[it->second];
    VolumeImage v = read_volume(manifest.resolve(row));
    if (c.volumes.empty() && c.lesions.empty()) c.dims = v.dims;
    require(v.dims == c.dims, Errc::ShapeMismatch, row.subject_id + " volumes have different grids");
    const PlaneHint hint = parse_plane_hint(row.plane_hint);
    if (hint.index) c.focus_slice = *hint.index;
    if (row.modality == "MASK") {
      c.lesions = decode_label_volume(v);
      continue;
    }
    const auto m = parse_modality(row.modality);
    require(m.has_value(), Errc::ParseError, "unknown modality '" + row.modality + "'");
    v.modality = *m;
    v.subject_id = row.subject_id;
    c.volumes.push_back(std::move(v));
  }
  for (auto& c : cases) {
    require(!c.volumes.empty(), Errc::EmptyDataset, c.subject_id + " has no image volumes");
    std::stable_sort(c.volumes.begin(), c.volumes.end(),
                     [](const VolumeImage& a, const VolumeImage& b) { return a.modality < b.modality; });
    if (c.focus_slice < 0) c.focus_slice = c.dims[0] / 2;
  }
  return cases;
}

}  // namespace neuropipe
