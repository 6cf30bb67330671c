#include <set>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "neuropipe/error.hpp"
#include "neuropipe/metrics.hpp"
#include "neuropipe/synthetic.hpp"

using namespace neuropipe;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("neuropipe_synth_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("zero lesion count gives a healthy case") {
  SyntheticSpec spec;
  spec.lesion_count = std::array<int, 2>{0, 0};
  for (std::uint64_t i = 0; i < 5; ++i) {
    const SyntheticCase c = generate_case(spec, i);
    CHECK(c.label == LesionClass::Healthy);
    CHECK(c.lesions.empty());
  }
}

TEST_CASE("centered sphere mask equals a voxel scan") {
  SyntheticSpec spec;
  spec.force_class = LesionClass::TumorHGG;
  spec.center_fraction = {{{0.5, 0.5}, {0.5, 0.5}, {0.5, 0.5}}};
  spec.radius = {{{5, 5}, {5, 5}, {5, 5}}};
  const SyntheticCase c = generate_case(spec, 3);
  REQUIRE(c.lesions.size() == 1);
  long expect = 0, got = 0;
  for (int i = 0; i < 32; ++i)
    for (int j = 0; j < 32; ++j)
      for (int k = 0; k < 32; ++k) {
        const double a = i - 15.5, b = j - 15.5, d = k - 15.5;
        const bool in = a * a + b * b + d * d <= 25.0;
        expect += in;
        got += c.lesions[0].mask[static_cast<std::size_t>((i * 32 + j) * 32 + k)];
        CHECK(static_cast<bool>(c.lesions[0].mask[static_cast<std::size_t>((i * 32 + j) * 32 + k)]) == in);
      }
  CHECK(got == expect);
  CHECK(expect == 552);
}

TEST_CASE("generation is deterministic") {
  SyntheticSpec spec;
  spec.seed = 77;
  for (std::uint64_t i = 0; i < 5; ++i) {
    const SyntheticCase a = generate_case(spec, i), b = generate_case(spec, i);
    REQUIRE(a.volumes.size() == b.volumes.size());
    for (std::size_t v = 0; v < a.volumes.size(); ++v) CHECK(a.volumes[v].voxels == b.volumes[v].voxels);
    REQUIRE(a.lesions.size() == b.lesions.size());
    for (std::size_t l = 0; l < a.lesions.size(); ++l) CHECK(a.lesions[l].shells == b.lesions[l].shells);
  }
  SyntheticSpec other = spec;
  other.seed = 78;
  CHECK(generate_case(other, 1).volumes[0].voxels != generate_case(spec, 1).volumes[0].voxels);
}

TEST_CASE("infeasible and invalid specs") {
  SyntheticSpec spec;
  spec.radius[1] = {10, 20};
  CHECK_THROWS_AS(generate_case(spec, 0), Error);
  try {
    generate_case(spec, 0);
  } catch (const Error& e) {
    CHECK(e.code() == Errc::SpecInfeasible);
  }
  SyntheticSpec shells;
  shells.shell_fractions = {1.0, 0.5, 0.5, 0.25};
  CHECK_THROWS_AS(shells.validate(), Error);
}

TEST_CASE("lesions show the configured contrast") {
  SyntheticSpec spec;
  spec.seed = 5;
  for (std::uint64_t i = 0; i < 10; ++i) {
    const SyntheticCase c = generate_case(spec, i);
    for (const auto& inst : c.lesions) {
      bool some_modality = false;
      for (const auto& v : c.volumes) {
        const VolumeImage bg = background_volume(spec, i, v.modality);
        const double need = std::abs(spec.lesion_contrast[static_cast<std::size_t>(v.modality)]);
        bool all = need > 0;
        for (std::size_t k = 0; k < v.voxels.size(); ++k)
          if (inst.mask[k] && std::abs(v.voxels[k] - bg.voxels[k]) < need - 1e-12) all = false;
        some_modality = some_modality || all;
      }
      CHECK(some_modality);
    }
  }
}

TEST_CASE("threshold recovers the generating masks") {
  SyntheticSpec spec;
  spec.seed = 9;
  for (std::uint64_t i = 0; i < 10; ++i) {
    const SyntheticCase c = generate_case(spec, i);
    const VolumeImage& flair = c.volume(Modality::FLAIR);
    const VolumeImage bg = background_volume(spec, i, Modality::FLAIR);
    std::vector<std::uint8_t> truth(flair.voxels.size(), 0), rederived(flair.voxels.size(), 0);
    for (const auto& inst : c.lesions)
      for (std::size_t k = 0; k < truth.size(); ++k) truth[k] |= inst.mask[k];
    for (std::size_t k = 0; k < truth.size(); ++k)
      rederived[k] = flair.voxels[k] - bg.voxels[k] >= 0.5 * spec.lesion_contrast[3] ? 1 : 0;
    CHECK(dice(truth, rederived) >= 0.99);
  }
}

TEST_CASE("classes are separable by a histogram feature") {
  SyntheticSpec spec;
  spec.seed = 31;
  // nearest class centroid on FLAIR histogram features, trained and tested on 50 cases
  auto features = [](const SyntheticCase& c) {
    const VolumeImage& v = c.volume(Modality::FLAIR);
    std::array<double, 4> f{};
    for (double x : v.voxels) {
      if (x < 0.2 && x > 0.0) f[0] += 1;
      if (x > 0.55) f[1] += 1;
      if (x > 0.75) f[2] += 1;
      if (x == 0.0) f[3] += 1;
    }
    for (double& x : f) x /= static_cast<double>(v.voxels.size());
    return f;
  };
  std::vector<std::array<double, 4>> feats;
  std::vector<int> labels;
  for (std::uint64_t i = 0; i < 50; ++i) {
    const SyntheticCase c = generate_case(spec, i);
    feats.push_back(features(c));
    labels.push_back(static_cast<int>(c.label));
  }
  std::array<std::array<double, 4>, 5> centroid{};
  std::array<int, 5> count{};
  for (std::size_t i = 0; i < feats.size(); ++i) {
    for (int d = 0; d < 4; ++d) centroid[labels[i]][d] += feats[i][d];
    count[labels[i]]++;
  }
  for (int k = 0; k < 5; ++k)
    for (int d = 0; d < 4; ++d) centroid[k][d] /= count[k];
  int hits = 0;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    int best = 0;
    double bd = 1e300;
    for (int k = 0; k < 5; ++k) {
      double d2 = 0;
      for (int d = 0; d < 4; ++d) d2 += (feats[i][d] - centroid[k][d]) * (feats[i][d] - centroid[k][d]);
      if (d2 < bd) bd = d2, best = k;
    }
    hits += best == labels[i];
  }
  CHECK(hits > 10);
}

TEST_CASE("label volume round trip") {
  SyntheticSpec spec;
  spec.force_class = LesionClass::MultipleSclerosis;
  const SyntheticCase c = generate_case(spec, 2);
  REQUIRE(c.lesions.size() >= 3);
  const auto back = decode_label_volume(encode_label_volume(c));
  REQUIRE(back.size() == c.lesions.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].mask == c.lesions[i].mask);
    CHECK(back[i].shells == c.lesions[i].shells);
    CHECK(back[i].region == c.lesions[i].region);
  }
}

TEST_CASE("lesion slices carry tight boxes") {
  SyntheticSpec spec;
  spec.dims = {12, 48, 40};
  spec.radius = {{{2, 3}, {5, 9}, {5, 9}}};
  spec.force_class = LesionClass::TumorHGG;
  const SyntheticCase c = generate_case(spec, 4);
  const LesionSlice s = lesion_slice(c);
  CHECK(s.stack.channels() == 4);
  CHECK(s.stack.height() == 48);
  CHECK(s.stack.width() == 40);
  REQUIRE(s.masks.size() == 1);
  CHECK(*tight_box(s.masks[0]) == s.boxes[0]);
  CHECK(s.boxes[0].width() >= 8);

  const ClassifierSample cs = classifier_sample(c, Modality::FLAIR, 32);
  CHECK(cs.input.is_plane_stack());
  CHECK(cs.input.pixels().shape() == Shape{3, 32, 32});
}

TEST_CASE("split arithmetic") {
  CHECK(split_counts(10, {0.8, 0.2}) == std::vector<int>{8, 2});
  CHECK(split_counts(7, {0.5, 0.5}) == std::vector<int>{4, 3});
  CHECK(split_counts(5, {1.0}) == std::vector<int>{5});
  CHECK_THROWS_AS(split_counts(5, {0.5, 0.4}), Error);
}

TEST_CASE("dataset on disk") {
  SyntheticSpec spec;
  spec.dims = {16, 16, 16};
  spec.radius = {{{2, 3}, {2, 3}, {2, 3}}};
  const fs::path a = scratch("a"), b = scratch("b");
  const fs::path ma = generate_dataset(spec, 5, {1.0}, a);
  const Manifest m = read_manifest(ma);
  CHECK(m.rows.size() == 25);
  std::set<std::string> classes;
  for (const auto& r : m.rows) classes.insert(r.label);
  CHECK(classes.size() == 5);

  const fs::path ten = scratch("ten");
  const Manifest m10 = read_manifest(generate_dataset(spec, 10, {0.8, 0.2}, ten));
  int train = 0, test = 0;
  for (const auto& r : m10.rows)
    if (r.modality == "MASK") (r.split == "train" ? train : test)++;
  CHECK(train == 8);
  CHECK(test == 2);
  const auto held_out = load_cases(m10, std::string("test"));
  CHECK(held_out.size() == 2);

  generate_dataset(spec, 5, {1.0}, b);
  CHECK(slurp(a / "manifest.csv") == slurp(b / "manifest.csv"));
  for (const auto& r : m.rows) CHECK(slurp(a / r.path) == slurp(b / r.path));

  const auto cases = load_cases(m);
  REQUIRE(cases.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    const SyntheticCase g = generate_case(spec, i);
    CHECK(cases[i].label == g.label);
    CHECK(cases[i].focus_slice == g.focus_slice);
    CHECK(cases[i].volumes.size() == 4);
    REQUIRE(cases[i].lesions.size() == g.lesions.size());
    for (std::size_t l = 0; l < g.lesions.size(); ++l) CHECK(cases[i].lesions[l].mask == g.lesions[l].mask);
  }
  fs::remove_all(a);
  fs::remove_all(b);
  fs::remove_all(ten);
}

TEST_CASE("plane hints") {
  const PlaneHint h = parse_plane_hint("axial:7");
  CHECK(h.plane == Plane::Axial);
  CHECK(h.index == 7);
  CHECK(format_plane_hint(h) == "axial:7");
  const PlaneHint v = parse_plane_hint("voi:1:2:3:4:5:6");
  REQUIRE(v.voi.has_value());
  CHECK(v.voi->upper[2] == 6);
  CHECK(format_plane_hint(v) == "voi:1:2:3:4:5:6");
  CHECK_FALSE(parse_plane_hint("").plane.has_value());
  CHECK_THROWS_AS(parse_plane_hint("oblique"), Error);
  CHECK_THROWS_AS(parse_plane_hint("voi:1:2"), Error);
}
