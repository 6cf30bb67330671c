#pragma once

#include <cstdint>
#include <vector>

#include "neuropipe/volume.hpp"

namespace neuropipe {

struct BoundingBox;

enum class FlipAxis { Horizontal, Vertical };

struct Interval {
  double lo = 1.0;
  double hi = 1.0;
};

struct AugmentPolicy {
  double flip_h_prob = 0.5;
  double flip_v_prob = 0.5;
  Interval contrast{0.8, 1.2};
  Interval scale{0.9, 1.1};
  std::uint64_t seed = 0;

  static AugmentPolicy identity() { return {0.0, 0.0, {1.0, 1.0}, {1.0, 1.0}, 0}; }
  void validate() const;  // BadConfig / NonPositiveFactor
};

// Parameters of one draw. Flips and scale are geometric (shared with masks and
// boxes); contrast is photometric (image only).
struct AugmentDraw {
  bool flip_h = false;
  bool flip_v = false;
  double contrast = 1.0;
  double scale = 1.0;
};

SliceStack flip(const SliceStack& stack, FlipAxis axis);
// out = mean + factor * (in - mean) per channel; clipped to [0, 1] when clip_unit.
SliceStack adjust_contrast(const SliceStack& stack, double factor, bool clip_unit = true);
// Bilinear resize of every channel to (round(H * f), round(W * f)).
SliceStack rescale(const SliceStack& stack, double factor);

// Pure function of (policy.seed, draw_index).
AugmentDraw draw_augmentation(const AugmentPolicy& policy, std::uint64_t draw_index);
// Applies flip-h, flip-v, contrast, scale in that order.
SliceStack apply_draw(const SliceStack& stack, const AugmentDraw& draw, bool clip_unit = true);
SliceStack apply_policy(const SliceStack& stack, const AugmentPolicy& policy,
                        std::uint64_t draw_index);

// Geometric part only, for label fields: (H, W) binary mask stored as a 1-channel
// tensor; resampled bilinearly then re-thresholded at 0.5.
Tensor apply_geometric_to_mask(const Tensor& mask, const AugmentDraw& draw);
// Boxes in pixel coordinates of an image of size (height, width).
std::vector<BoundingBox> apply_geometric_to_boxes(const std::vector<BoundingBox>& boxes,
                                                  const AugmentDraw& draw, int height, int width);

// Center crop or zero-pad every channel to (height, width).
SliceStack fit_to_size(const SliceStack& stack, int height, int width);

}  // namespace neuropipe
