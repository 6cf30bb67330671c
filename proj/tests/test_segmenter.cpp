#include <chrono>
#include <cmath>

#include "doctest.h"
#include "neuropipe/error.hpp"
#include "neuropipe/metrics.hpp"
#include "neuropipe/segmenter.hpp"

using namespace neuropipe;

namespace {

SegmenterConfig tiny_segmenter() {
  SegmenterConfig c;
  c.backbone.channels = {8, 16, 16};
  c.backbone.pool_after = {true, false, false};
  c.rpn_width = 16;
  c.box_width = 32;
  c.mask_width = 64;
  c.cls_width = 32;
  c.num_categories = 1;
  c.anchors.kmeans_k = 3;
  return c;
}

std::vector<SegmentationSample> lesion_samples(int n, std::uint64_t seed, int categories) {
  SyntheticSpec spec;
  spec.dims = {9, 64, 64};
  spec.radius = {{{2, 3}, {5, 11}, {5, 11}}};
  spec.center_fraction = {{{0.5, 0.5}, {0.3, 0.7}, {0.3, 0.7}}};
  spec.seed = seed;
  std::vector<SegmentationSample> out;
  for (int i = 0; i < n; ++i) {
    spec.force_class = i % 2 ? LesionClass::TumorLGG : LesionClass::TumorHGG;
    out.push_back(segmentation_sample(lesion_slice(generate_case(spec, static_cast<std::uint64_t>(i))), categories));
  }
  return out;
}

Tensor ellipse(int h, int w, double cy, double cx, double ry, double rx) {
  Tensor t = Tensor::chw(1, h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const double dy = (y + 0.5 - cy) / ry, dx = (x + 0.5 - cx) / rx;
      t.at(0, y, x) = dy * dy + dx * dx <= 1.0 ? 1.0 : 0.0;
    }
  return t;
}

template <class F>
Errc error_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return Errc::BadConfig;
}

}  // namespace

TEST_CASE("anchors tile the feature grid") {
  AnchorConfig cfg;
  cfg.use_kmeans = false;
  const AnchorSet a = generate_anchors(8, 8, 16, cfg);
  CHECK(a.shapes.size() == 9);
  CHECK(a.size() == 576);
  // first cell, square anchor of scale 32 is centred at (8, 8)
  const BoundingBox& sq = a.boxes[4];
  CHECK(sq.center_x() == doctest::Approx(8.0));
  CHECK(sq.width() == doctest::Approx(32.0));
  CHECK(sq.height() == doctest::Approx(32.0));
  const BoundingBox& last = a.boxes.back();
  CHECK(last.center_x() == doctest::Approx(7.5 * 16));
  CHECK(last.center_y() == doctest::Approx(7.5 * 16));
  for (std::size_t i = 0; i < 9; ++i) {
    const double aspect = a.boxes[i].height() / a.boxes[i].width();
    CHECK(aspect == doctest::Approx(cfg.aspects[i % 3]));
  }
}

TEST_CASE("k-means anchor shapes") {
  std::vector<BoundingBox> same(12, BoundingBox{5, 5, 25, 25});
  for (const auto& [w, h] : kmeans_anchor_shapes(same, 9, 100, 3)) {
    CHECK(w == doctest::Approx(20.0));
    CHECK(h == doctest::Approx(20.0));
  }

  Rng rng(5);
  std::vector<BoundingBox> two;
  for (int i = 0; i < 40; ++i) {
    const bool big = i % 2;
    const double w = (big ? 40.0 : 10.0) * rng.uniform(0.97, 1.03), h = (big ? 20.0 : 10.0) * rng.uniform(0.97, 1.03);
    two.push_back({0, 0, w, h});
  }
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto c = kmeans_anchor_shapes(two, 2, 100, seed);
    REQUIRE(c.size() == 2);
    CHECK(std::abs(c[0].first - 10.0) / 10.0 < 0.05);
    CHECK(std::abs(c[0].second - 10.0) / 10.0 < 0.05);
    CHECK(std::abs(c[1].first - 40.0) / 40.0 < 0.05);
    CHECK(std::abs(c[1].second - 20.0) / 20.0 < 0.05);
  }
  CHECK(error_of([] { kmeans_anchor_shapes({}, 2, 10, 1); }) == Errc::EmptyDataset);
}

TEST_CASE("mask crop and paste") {
  const Tensor m = ellipse(64, 64, 30.0, 33.0, 9.0, 12.0);
  const BoundingBox box = *tight_box(m);
  const Tensor grid = crop_mask(m, box, 14);
  CHECK(grid.size() == 196);
  const Tensor back = paste_mask(grid, box, 64, 64);
  CHECK(dice(back, m) > 0.9);
  // nothing outside the box
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x)
      if (back.at(0, y, x) > 0) {
        CHECK(x + 0.5 >= box.x_min);
        CHECK(x + 0.5 <= box.x_max);
      }
  CHECK(error_of([] { paste_mask(Tensor({3, 5}), {0, 0, 4, 4}, 8, 8); }) == Errc::ShapeMismatch);
}

TEST_CASE("overlaps go to the higher score") {
  InstanceMask a, b;
  a.mask = Tensor::chw(1, 6, 6);
  b.mask = Tensor::chw(1, 6, 6);
  for (int y = 1; y < 4; ++y)
    for (int x = 1; x < 4; ++x) a.mask.at(0, y, x) = 1;
  for (int y = 2; y < 5; ++y)
    for (int x = 2; x < 5; ++x) b.mask.at(0, y, x) = 1;
  a.score = 0.6;
  b.score = 0.9;
  const auto out = resolve_overlaps({a, b});
  REQUIRE(out.size() == 2);
  CHECK(out[0].score == 0.9);
  CHECK(out[0].mask == b.mask);
  CHECK(out[1].mask.at(0, 2, 2) == 0.0);
  CHECK(out[1].mask.at(0, 1, 1) == 1.0);
  for (std::size_t i = 0; i < 36; ++i) CHECK(out[0].mask[i] + out[1].mask[i] <= 1.0);
  CHECK(out[1].box == BoundingBox{1, 1, 4, 4});

  // fully covered instances vanish
  InstanceMask c = a;
  c.score = 0.1;
  c.mask = b.mask;
  CHECK(resolve_overlaps({b, c}).size() == 1);
}

TEST_CASE("run-length masks") {
  Tensor m = Tensor::chw(1, 2, 3);
  for (int i = 1; i < 6; ++i) m[static_cast<std::size_t>(i)] = 1;
  CHECK(encode_rle(m) == "2x3:1 5");
  Tensor n = Tensor::chw(1, 1, 2);
  n[0] = 1;
  CHECK(encode_rle(n) == "1x2:0 1 1");
  CHECK(encode_rle(Tensor::chw(1, 2, 2)) == "2x2:4");
  CHECK(decode_rle("2x3:1 5") == m);
  CHECK(decode_rle("1x2:0 1 1") == n);

  Rng rng(9);
  for (int t = 0; t < 50; ++t) {
    Tensor r = Tensor::chw(1, 1 + rng.integer(0, 9), 1 + rng.integer(0, 9));
    for (double& v : r.storage()) v = rng.uniform() < 0.4 ? 1.0 : 0.0;
    CHECK(decode_rle(encode_rle(r)) == r);
  }
  for (const char* bad : {"2x3", "2x3:1 4", "2x3:1 6", "ax3:6", "2x3:1 -5", "0x3:"})
    CHECK(error_of([&] { decode_rle(bad); }) == Errc::ParseError);
}

TEST_CASE("cascade stage contract") {
  SegmenterConfig cfg = tiny_segmenter();
  cfg.num_categories = kNumSubRegions;
  cfg.objectness_threshold = 0.0;
  Segmenter s(cfg);
  const auto data = lesion_samples(1, 3, kNumSubRegions);
  const CascadeOutput out = s.cascade_forward(data[0].stack);
  CHECK(out.anchor_scores.size() == 32u * 32u * 3u);
  CHECK(!out.proposals.empty());
  CHECK(out.proposals.size() <= static_cast<std::size_t>(cfg.proposals));
  CHECK(out.refined.size() == out.proposals.size());
  CHECK(out.mask_logits.size() == out.refined.size());
  for (const auto& m : out.mask_logits) CHECK(m.shape() == Shape{14, 14});
  for (const auto& sc : out.instance_scores) CHECK(sc.size() == 5);
  for (const auto& b : out.refined) {
    CHECK(b.x_min >= 0);
    CHECK(b.x_max <= 64);
  }

  cfg.objectness_threshold = 1.0;
  Segmenter none(cfg);
  const CascadeOutput empty = none.cascade_forward(data[0].stack);
  CHECK(empty.proposals.empty());
  CHECK(empty.refined.empty());
  CHECK(empty.mask_logits.empty());
  CHECK(empty.instance_scores.empty());
  CHECK(segment_instances(none, data[0].stack).empty());

  CHECK(error_of([&] { s.cascade_forward(data[0].stack.channel(0)); }) == Errc::WrongChannels);
  SegmenterConfig bad = tiny_segmenter();
  bad.mask_size = 1;
  CHECK(error_of([&] { Segmenter x(bad); }) == Errc::BadConfig);
  bad = tiny_segmenter();
  bad.loss_weights[2] = -1;
  CHECK(error_of([&] { Segmenter x(bad); }) == Errc::NegativeWeight);
  CHECK(error_of([&] { s.set_anchor_shapes({{4, 4}}); }) == Errc::BadConfig);
}

TEST_CASE("segmenter loss is deterministic and finite") {
  Segmenter s(tiny_segmenter());
  const auto data = lesion_samples(2, 4, 1);
  const SegmenterLoss a = s.loss(data[0], 7, 0.0);
  const SegmenterLoss b = s.loss(data[0], 7, 0.0);
  CHECK(a.total == b.total);
  CHECK(std::isfinite(a.total));
  CHECK(a.objectness > 0);
  CHECK(a.mask > 0);
  CHECK(a.total == doctest::Approx(a.objectness + a.instance + a.anchor_reg + a.box_reg + a.mask));
}

TEST_CASE("segmented instances are disjoint with tight boxes") {
  Segmenter s(tiny_segmenter());
  SegmenterConfig cfg = tiny_segmenter();
  cfg.objectness_threshold = 0.0;
  cfg.score_threshold = 0.0;
  Segmenter loose(cfg);
  const auto data = lesion_samples(3, 6, 1);
  for (const auto& d : data) {
    const auto inst = segment_instances(loose, d.stack);
    Tensor sum = Tensor::chw(1, 64, 64);
    for (const auto& i : inst) {
      for (std::size_t q = 0; q < sum.size(); ++q) sum[q] += i.mask[q];
      CHECK(*tight_box(i.mask) == i.box);
      CHECK(i.score >= 0.0);
    }
    for (double v : sum.storage()) CHECK(v <= 1.0);
  }
}

TEST_CASE("overfits ten lesion slices") {
  const auto data = lesion_samples(10, 31, 1);
  Segmenter s(tiny_segmenter());
  TrainOptions opt;
  opt.iterations = 400;
  opt.batch_size = 2;
  opt.log_every = 100;
  opt.optimizer.learning_rate = 2e-3;
  const auto t0 = std::chrono::steady_clock::now();
  const TrainHistory h = train_segmenter(s, data, {}, opt);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (const auto& r : h.rows) MESSAGE(r.iteration << " loss " << r.train_loss << " eval " << r.test_loss << " dice " << r.accuracy);
  MESSAGE("segmenter training took " << secs << " s");
  CHECK(h.rows.back().accuracy >= 0.9);
  CHECK(error_of([&] { train_segmenter(s, {}, {}, opt); }) == Errc::EmptyDataset);
}
