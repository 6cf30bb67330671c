#include <algorithm>
#include <chrono>
#include <cmath>

#include "doctest.h"
#include "neuropipe/detector.hpp"
#include "neuropipe/error.hpp"

using namespace neuropipe;

namespace {

DetectorConfig tiny_detector() {
  DetectorConfig c;
  c.in_channels = 4;
  c.backbone.channels = {8, 16, 16};
  c.backbone.pool_after = {true, true, false};
  c.spp_h = c.spp_w = 3;
  c.roi_feat_width = 48;
  c.global_channels = 8;
  c.global_grid = 2;
  c.fusion_width = 48;
  c.proposals.grid_scales = {12, 16, 20, 24, 28};
  c.proposals.grid_strides = {4, 4, 4, 4, 4};
  return c;
}

std::vector<DetectionSample> lesion_samples(int n, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.dims = {9, 64, 64};
  spec.radius = {{{2, 3}, {5, 11}, {5, 11}}};
  spec.center_fraction = {{{0.5, 0.5}, {0.3, 0.7}, {0.3, 0.7}}};
  spec.seed = seed;
  std::vector<DetectionSample> out;
  for (int i = 0; i < n; ++i) {
    spec.force_class = i % 2 ? LesionClass::TumorLGG : LesionClass::TumorHGG;
    out.push_back(detection_sample(lesion_slice(generate_case(spec, static_cast<std::uint64_t>(i))), 1));
  }
  return out;
}

Tensor random_image(int c, int h, int w, std::uint64_t seed) {
  Rng rng(seed);
  Tensor t = Tensor::chw(c, h, w);
  for (double& v : t.storage()) v = rng.uniform();
  return t;
}

template <class F>
Errc error_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return Errc::ParseError;
}

}  // namespace

TEST_CASE("shape contract") {
  DetectorConfig c;  // default widths
  c.backbone.channels = {8, 8, 8, 8, 8};
  Detector d(c);
  const Tensor img = random_image(4, 128, 128, 1);
  const std::vector<BoundingBox> rois{{0, 0, 32, 32}, {10, 20, 90, 70}, {100, 100, 128, 128}};
  const DetectorOutput out = d.forward(img, rois);
  REQUIRE(out.scores.size() == 3);
  for (const auto& s : out.scores) CHECK(s.size() == 2);
  CHECK(out.deltas.size() == 3);
  CHECK(d.forward(img, {}).scores.empty());
  CHECK(c.fused_width() == c.roi_feat_width + c.global_channels * c.global_grid * c.global_grid);
  CHECK(d.last_fused().dim(1) == 128 + 64 * 4);
}

TEST_CASE("proposals") {
  const SliceStack s(Tensor({4, 128, 128}, 0.0), {Modality::T1, Modality::T1c, Modality::T2, Modality::FLAIR});
  ProposalConfig p;
  p.grid_scales = {32};
  p.grid_strides = {32};
  CHECK(propose_rois(s, ProposalMode::Grid, p, nullptr, 0).size() == 16);

  const std::vector<BoundingBox> truth{{30, 40, 70, 90}};
  const auto a = propose_rois(s, ProposalMode::GroundTruthJitter, ProposalConfig{}, &truth, 5);
  const auto b = propose_rois(s, ProposalMode::GroundTruthJitter, ProposalConfig{}, &truth, 5);
  CHECK(a == b);
  int close = 0, background = 0;
  for (const auto& r : a) {
    const double v = iou(r, truth[0]);
    close += v > 0.5;
    background += v < 0.3;
  }
  CHECK(close >= 1);
  CHECK(background == ProposalConfig{}.background);
  CHECK(error_of([&] { propose_rois(s, ProposalMode::GroundTruthJitter, p, nullptr, 0); }) == Errc::MissingTruth);
}

TEST_CASE("delta identity and roundtrip") {
  const BoundingBox b{3.5, 7.25, 19.0, 30.5};
  const BoxDeltas d = encode_deltas(b, b);
  for (double v : d) CHECK(v == 0.0);
  Rng rng(8);
  for (int i = 0; i < 200; ++i) {
    const double x = rng.uniform(0, 50), y = rng.uniform(0, 50);
    const BoundingBox a{x, y, x + rng.uniform(1, 40), y + rng.uniform(1, 40)};
    const double x2 = rng.uniform(0, 50), y2 = rng.uniform(0, 50);
    const BoundingBox t{x2, y2, x2 + rng.uniform(1, 40), y2 + rng.uniform(1, 40)};
    const BoundingBox r = decode_deltas(encode_deltas(t, a), a);
    CHECK(std::abs(r.x_min - t.x_min) < 1e-9);
    CHECK(std::abs(r.y_max - t.y_max) < 1e-9);
  }
}

TEST_CASE("nms") {
  const std::vector<BoundingBox> same{{0, 0, 10, 10}, {0, 0, 10, 10}};
  const auto keep = nms(same, {0.8, 0.9}, 0.5);
  REQUIRE(keep.size() == 1);
  CHECK(keep[0] == 1);

  Rng rng(4);
  std::vector<BoundingBox> boxes;
  std::vector<double> scores;
  for (int i = 0; i < 40; ++i) {
    const double x = rng.uniform(0, 40), y = rng.uniform(0, 40);
    boxes.push_back({x, y, x + rng.uniform(5, 20), y + rng.uniform(5, 20)});
    scores.push_back(std::round(rng.uniform() * 10) / 10);
  }
  const auto kept = nms(boxes, scores, 0.5);
  for (std::size_t i = 0; i < kept.size(); ++i)
    for (std::size_t j = i + 1; j < kept.size(); ++j) CHECK(iou(boxes[kept[i]], boxes[kept[j]]) < 0.5);
  std::vector<std::size_t> perm(boxes.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = perm.size() - 1 - i;
  std::vector<BoundingBox> pb;
  std::vector<double> ps;
  for (std::size_t i : perm) pb.push_back(boxes[i]), ps.push_back(scores[i]);
  std::vector<BoundingBox> a, b;
  for (std::size_t i : kept) a.push_back(boxes[i]);
  for (std::size_t i : nms(pb, ps, 0.5)) b.push_back(pb[i]);
  CHECK(a == b);
}

TEST_CASE("detect contracts") {
  Detector d(tiny_detector());
  const auto samples = lesion_samples(1, 3);
  CHECK(detect(d, samples[0].stack, 1.0 + 1e-12).empty());
  const auto all = detect(d, samples[0].stack, 0.0);
  CHECK_FALSE(all.empty());
  for (std::size_t i = 1; i < all.size(); ++i) CHECK(all[i - 1].score >= all[i].score);
  for (const auto& det : all) {
    CHECK(det.box.x_min >= 0);
    CHECK(det.box.x_max <= 64);
    CHECK((det.score >= 0 && det.score <= 1));
  }
  const SliceStack two = modality_subset(samples[0].stack, {Modality::T2, Modality::FLAIR});
  CHECK(error_of([&] { detect(d, two); }) == Errc::WrongChannels);
}

TEST_CASE("global path ablation reduces to the local path") {
  DetectorConfig c = tiny_detector();
  Detector dual(c);
  for (auto* p : dual.global_parameters()) p->value.fill(0.0);
  Detector single = local_path_reduction(dual);
  CHECK_FALSE(single.config().global_path);
  const std::vector<BoundingBox> rois{{0, 0, 20, 20}, {10, 5, 50, 40}, {30, 30, 64, 64}};
  for (std::uint64_t i = 0; i < 10; ++i) {
    const Tensor img = random_image(4, 64, 64, 100 + i);
    const DetectorOutput a = dual.forward(img, rois), b = single.forward(img, rois);
    CHECK(a.scores == b.scores);
    CHECK(a.deltas == b.deltas);
  }
}

TEST_CASE("modality subset") {
  const auto s = lesion_samples(1, 9)[0].stack;
  CHECK(modality_subset(s, {Modality::T1, Modality::T1c, Modality::T2, Modality::FLAIR}) == s);
  const SliceStack t2 = modality_subset(s, {Modality::T2});
  CHECK(t2.channels() == 1);
  CHECK(t2.pixels() == s.channel(2).pixels());
  const SliceStack fixed = modality_subset(s, {Modality::T2}, true);
  CHECK(fixed.channels() == 4);
  CHECK(fixed.provenance().zero_filled.size() == 3);
  CHECK(error_of([&] { modality_subset(s, {}); }) == Errc::EmptySubset);
  CHECK(error_of([&] { modality_subset(t2, {Modality::PD}); }) == Errc::WrongChannels);
}

TEST_CASE("loss weights select terms") {
  CHECK(multitask_loss(0.0, 3.0, std::nullopt, {1, 0, 0}) == 0.0);
}

TEST_CASE("overfits synthetic lesion slices") {
  const auto data = lesion_samples(20, 21);
  Detector d(tiny_detector());
  TrainOptions opt;
  opt.iterations = 300;
  opt.batch_size = 2;
  opt.log_every = 100;
  opt.optimizer.learning_rate = 2e-3;
  const auto t0 = std::chrono::steady_clock::now();
  const TrainHistory h = train_detector(d, data, {}, opt);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (const auto& r : h.rows) MESSAGE(r.iteration << " loss " << r.train_loss << " eval " << r.test_loss << " hit " << r.accuracy);
  MESSAGE("detector training took " << secs << " s");
  CHECK(h.rows.back().accuracy >= 0.9);
}
