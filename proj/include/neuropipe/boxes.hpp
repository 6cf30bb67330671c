#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <vector>

#include "neuropipe/tensor.hpp"

namespace neuropipe {

// Continuous pixel coordinates; a box covering pixel columns [a, b) has
// x_min = a, x_max = b.
struct BoundingBox {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

  double width() const noexcept { return x_max - x_min; }
  double height() const noexcept { return y_max - y_min; }
  double area() const noexcept { return width() > 0 && height() > 0 ? width() * height() : 0.0; }
  double center_x() const noexcept { return 0.5 * (x_min + x_max); }
  double center_y() const noexcept { return 0.5 * (y_min + y_max); }
  bool valid() const noexcept { return x_min < x_max && y_min < y_max; }

  friend bool operator==(const BoundingBox&, const BoundingBox&) = default;
};

double iou(const BoundingBox& a, const BoundingBox& b);

// Regression target of `target` relative to `reference`:
// (dx / w, dy / h, log(w' / w), log(h' / h)).
using BoxDeltas = std::array<double, 4>;
BoxDeltas encode_deltas(const BoundingBox& target, const BoundingBox& reference);
BoundingBox decode_deltas(const BoxDeltas& deltas, const BoundingBox& reference);

BoundingBox clip_box(const BoundingBox& box, int height, int width);

// Greedy non-maximum suppression. Returns kept indices by descending score;
// equal scores are ordered by box coordinates so the result does not depend
// on input order.
std::vector<std::size_t> nms(const std::vector<BoundingBox>& boxes,
                             const std::vector<double>& scores, double iou_threshold);

// Tight box of the nonzero pixels of an (H, W) or (1, H, W) mask.
std::optional<BoundingBox> tight_box(const Tensor& mask);

}  // namespace neuropipe
