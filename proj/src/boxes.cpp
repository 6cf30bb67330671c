#include "neuropipe/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>

#include "neuropipe/error.hpp"

namespace neuropipe {

namespace {
constexpr double kMaxLogScale = 4.135166556742356;  // log(1000 / 16)
}

double iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? std::min(1.0, inter / uni) : 0.0;
}

BoxDeltas encode_deltas(const BoundingBox& target, const BoundingBox& reference) {
  const double w = reference.width(), h = reference.height();
  return {(target.center_x() - reference.center_x()) / w,
          (target.center_y() - reference.center_y()) / h, std::log(target.width() / w),
          std::log(target.height() / h)};
}

BoundingBox decode_deltas(const BoxDeltas& d, const BoundingBox& reference) {
  const double w = reference.width(), h = reference.height();
  const double cx = reference.center_x() + d[0] * w;
  const double cy = reference.center_y() + d[1] * h;
  const double nw = w * std::exp(std::min(d[2], kMaxLogScale));
  const double nh = h * std::exp(std::min(d[3], kMaxLogScale));
  return {cx - 0.5 * nw, cy - 0.5 * nh, cx + 0.5 * nw, cy + 0.5 * nh};
}

BoundingBox clip_box(const BoundingBox& b, int height, int width) {
  return {std::clamp(b.x_min, 0.0, static_cast<double>(width)),
          std::clamp(b.y_min, 0.0, static_cast<double>(height)),
          std::clamp(b.x_max, 0.0, static_cast<double>(width)),
          std::clamp(b.y_max, 0.0, static_cast<double>(height))};
}

std::vector<std::size_t> nms(const std::vector<BoundingBox>& boxes,
                             const std::vector<double>& scores, double iou_threshold) {
  require(boxes.size() == scores.size(), Errc::LengthMismatch, "nms: boxes and scores differ");
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& ba = boxes[a];
    const auto& bb = boxes[b];
    return std::tie(scores[b], ba.x_min, ba.y_min, ba.x_max, ba.y_max) <
           std::tie(scores[a], bb.x_min, bb.y_min, bb.x_max, bb.y_max);
  });
  std::vector<std::size_t> kept;
  for (std::size_t i : order) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](std::size_t k) {
      return iou(boxes[i], boxes[k]) >= iou_threshold;
    });
    if (!suppressed) kept.push_back(i);
  }
  return kept;
}

std::optional<BoundingBox> tight_box(const Tensor& mask) {
  const int h = mask.dim(mask.rank() - 2), w = mask.dim(mask.rank() - 1);
  int r0 = h, r1 = -1, c0 = w, c1 = -1;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      if (mask[static_cast<std::size_t>(r) * w + c] != 0.0) {
        r0 = std::min(r0, r);
        r1 = std::max(r1, r);
        c0 = std::min(c0, c);
        c1 = std::max(c1, c);
      }
  if (r1 < 0) return std::nullopt;
  return BoundingBox{static_cast<double>(c0), static_cast<double>(r0),
                     static_cast<double>(c1 + 1), static_cast<double>(r1 + 1)};
}

}  // namespace neuropipe
