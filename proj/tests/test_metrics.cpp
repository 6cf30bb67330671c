#include <cstdint>
#include <vector>

#include "doctest.h"
#include "neuropipe/error.hpp"
#include "neuropipe/metrics.hpp"
#include "neuropipe/rng.hpp"

using namespace neuropipe;

namespace {

using Mask = std::vector<std::uint8_t>;

Mask random_mask(Rng& rng, int n, double p) {
  Mask m(static_cast<std::size_t>(n));
  for (auto& v : m) v = rng.uniform() < p ? 1 : 0;
  return m;
}

}  // namespace

TEST_CASE("dice examples") {
  const Mask a{1, 1, 0, 0, 1};
  CHECK(dice(a, a) == 1.0);
  CHECK(dice(Mask{1, 1, 0, 0}, Mask{0, 0, 1, 1}) == 0.0);
  CHECK(dice(Mask(9, 0), Mask(9, 0)) == 1.0);
  CHECK(dice(Mask{1, 0, 0}, Mask{0, 0, 0}) == 0.0);

  // |A| = 4, |B| = 6, overlap 3
  const Mask x{1, 1, 1, 1, 0, 0, 0, 0, 0};
  const Mask y{0, 1, 1, 1, 1, 1, 1, 0, 0};
  CHECK(dice(x, y) == 0.6);

  CHECK_THROWS_AS(dice(Mask{1, 0}, Mask{1}), Error);
}

TEST_CASE("dice equals pixel counting on random masks") {
  Rng rng(2024);
  for (int trial = 0; trial < 100; ++trial) {
    const int h = 1 + rng.integer(0, 15), w = 1 + rng.integer(0, 15);
    const double p = rng.uniform();
    const Mask a = random_mask(rng, h * w, p), b = random_mask(rng, h * w, rng.uniform());
    long na = 0, nb = 0, both = 0;
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        const std::size_t i = static_cast<std::size_t>(r * w + c);
        if (a[i]) ++na;
        if (b[i]) ++nb;
        if (a[i] && b[i]) ++both;
      }
    const double expect = na + nb == 0 ? 1.0 : static_cast<double>(2 * both) / static_cast<double>(na + nb);
    CHECK(dice(a, b) == expect);
    CHECK(dice(a, b) == dice(b, a));
    if (na > 0) CHECK(dice(a, a) == 1.0);

    // 2tp / (2tp + fp + fn) of the pixel classification equals the mask Dice
    const MetricValues m = metrics_from_counts(confusion(a, b));
    CHECK(m.dice == dice(a, b));
  }
}

TEST_CASE("tensor masks threshold at 0.5") {
  const Tensor a({1, 2, 2}, {0.9, 0.2, 0.6, 0.0});
  const Tensor b({1, 2, 2}, {1.0, 0.0, 0.0, 0.0});
  CHECK(dice(a, b) == doctest::Approx(2.0 / 3.0));
  CHECK_THROWS_AS(dice(a, Tensor({1, 1, 4}, 0.0)), Error);

  std::vector<std::pair<Tensor, Tensor>> pairs{{a, b}, {Tensor({1, 1, 2}, 0.0), Tensor({1, 1, 2}, 0.0)}};
  CHECK(pooled_dice(pairs) == doctest::Approx(2.0 / 3.0));
  CHECK(mean_dice(pairs) == doctest::Approx((2.0 / 3.0 + 1.0) / 2.0));
}

TEST_CASE("confusion counts") {
  const std::vector<int> truth{1, 0, 0, 1, 1, 0, 1, 0, 0, 0};
  const std::vector<int> pred{1, 1, 0, 0, 1, 0, 1, 0, 0, 0};
  const ConfusionCounts c = confusion(pred, truth, 1);
  CHECK(c == ConfusionCounts{3, 1, 5, 1});
  CHECK(c.total() == 10);

  const ConfusionCounts same = confusion(truth, truth, 1);
  CHECK(same.fp == 0);
  CHECK(same.fn == 0);

  const std::vector<int> allpos(7, 1), allneg(7, 0);
  CHECK(confusion(allpos, allneg, 1) == ConfusionCounts{0, 7, 0, 0});

  try {
    confusion(pred, std::vector<int>{1}, 1);
    FAIL("expected LengthMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::LengthMismatch);
  }
}

TEST_CASE("summarize") {
  const MetricValues m = metrics_from_counts({3, 1, 5, 1});
  CHECK(m.sensitivity == 0.75);
  CHECK(m.specificity == 5.0 / 6.0);
  CHECK(m.accuracy == 0.8);
  CHECK(m.dice == 0.75);

  const MetricValues perfect = metrics_from_counts({4, 0, 6, 0});
  CHECK(perfect == MetricValues{1, 1, 1, 1});

  CHECK(metrics_from_counts({0, 2, 8, 0}).sensitivity == 1.0);

  const MetricsReport r = summarize({{"a", {3, 1, 5, 1}}, {"b", {4, 0, 6, 0}}});
  CHECK(r.macro.dice == (0.75 + 1.0) / 2);
  CHECK(r.macro.specificity == (5.0 / 6.0 + 1.0) / 2);
  CHECK(r.at("b").accuracy == 1.0);
}

TEST_CASE("classification report") {
  const std::vector<int> truth{0, 1, 2, 3, 4, 0, 1, 2, 3, 4};
  std::vector<int> pred = truth;
  pred[3] = 0;
  const MetricsReport r =
      classification_report(pred, truth, {"Healthy", "TumorHGG", "TumorLGG", "Alzheimer", "MultipleSclerosis"});
  CHECK(r.rows.size() == 5);
  CHECK(r.extras[0].second == 0.9);
  CHECK(r.at("Alzheimer").sensitivity == 0.5);
  CHECK(r.at("Healthy").specificity == 7.0 / 8.0);
  for (const auto& [k, v] : r.rows)
    for (double x : {v.dice, v.sensitivity, v.specificity, v.accuracy}) CHECK((x >= 0 && x <= 1));
}

TEST_CASE("box iou") {
  const BoundingBox a{0, 0, 1, 1};
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, {2, 2, 3, 3}) == 0.0);
  CHECK(iou(a, {0.5, 0, 1.5, 1}) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(iou(a, {0, 0, 1, 1.0000001}) < 1.0);
}
