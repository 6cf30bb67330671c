#include "neuropipe/augment.hpp"

#include <algorithm>
#include <cmath>

#include "neuropipe/boxes.hpp"
#include "neuropipe/error.hpp"
#include "neuropipe/rng.hpp"

namespace neuropipe {

namespace {

Tensor flip_tensor(const Tensor& t, FlipAxis axis) {
  const int c_n = t.dim(0), h = t.dim(1), w = t.dim(2);
  Tensor out = Tensor::chw(c_n, h, w);
  for (int c = 0; c < c_n; ++c)
    for (int r = 0; r < h; ++r)
      for (int x = 0; x < w; ++x) {
        const int sr = axis == FlipAxis::Vertical ? h - 1 - r : r;
        const int sx = axis == FlipAxis::Horizontal ? w - 1 - x : x;
        out.at(c, r, x) = t.at(c, sr, sx);
      }
  return out;
}

int scaled_extent(int extent, double factor) {
  return static_cast<int>(std::lround(extent * factor));
}

}  // namespace

void AugmentPolicy::validate() const {
  require(flip_h_prob >= 0.0 && flip_h_prob <= 1.0 && flip_v_prob >= 0.0 && flip_v_prob <= 1.0,
          Errc::BadConfig, "flip probabilities must lie in [0, 1]");
  require(contrast.lo <= contrast.hi && scale.lo <= scale.hi, Errc::BadConfig,
          "augmentation interval lower bound exceeds upper bound");
  require(contrast.lo > 0.0 && scale.lo > 0.0, Errc::NonPositiveFactor,
          "contrast and scale factors must be positive");
}

SliceStack flip(const SliceStack& stack, FlipAxis axis) {
  return stack.with_pixels(flip_tensor(stack.pixels(), axis));
}

SliceStack adjust_contrast(const SliceStack& stack, double factor, bool clip_unit) {
  require(factor > 0.0, Errc::NonPositiveFactor, "contrast factor must be positive");
  Tensor px = stack.pixels();
  const std::size_t plane = static_cast<std::size_t>(stack.height()) * stack.width();
  for (int c = 0; c < stack.channels(); ++c) {
    double* p = px.data() + c * plane;
    double sum = 0.0;
    for (std::size_t i = 0; i < plane; ++i) sum += p[i];
    const double mean = sum / static_cast<double>(plane);
    for (std::size_t i = 0; i < plane; ++i) {
      double v = mean + factor * (p[i] - mean);
      if (clip_unit) v = std::clamp(v, 0.0, 1.0);
      p[i] = v;
    }
  }
  return stack.with_pixels(std::move(px));
}

SliceStack rescale(const SliceStack& stack, double factor) {
  require(factor > 0.0, Errc::NonPositiveFactor, "scale factor must be positive");
  const int h = scaled_extent(stack.height(), factor);
  const int w = scaled_extent(stack.width(), factor);
  require(h >= 1 && w >= 1, Errc::DegenerateOutput, "rescaled stack would be empty");
  return stack.with_pixels(resize_bilinear(stack.pixels(), h, w));
}

AugmentDraw draw_augmentation(const AugmentPolicy& policy, std::uint64_t draw_index) {
  policy.validate();
  const std::uint64_t key = combine_keys(policy.seed, draw_index);
  AugmentDraw d;
  d.flip_h = counter_uniform(key, 0) < policy.flip_h_prob;
  d.flip_v = counter_uniform(key, 1) < policy.flip_v_prob;
  d.contrast = policy.contrast.lo + (policy.contrast.hi - policy.contrast.lo) * counter_uniform(key, 2);
  d.scale = policy.scale.lo + (policy.scale.hi - policy.scale.lo) * counter_uniform(key, 3);
  return d;
}

SliceStack apply_draw(const SliceStack& stack, const AugmentDraw& draw, bool clip_unit) {
  SliceStack out = stack;
  if (draw.flip_h) out = flip(out, FlipAxis::Horizontal);
  if (draw.flip_v) out = flip(out, FlipAxis::Vertical);
  if (draw.contrast != 1.0) out = adjust_contrast(out, draw.contrast, clip_unit);
  if (draw.scale != 1.0) out = rescale(out, draw.scale);
  return out;
}

SliceStack apply_policy(const SliceStack& stack, const AugmentPolicy& policy,
                        std::uint64_t draw_index) {
  return apply_draw(stack, draw_augmentation(policy, draw_index));
}

Tensor apply_geometric_to_mask(const Tensor& mask, const AugmentDraw& draw) {
  Tensor out = mask;
  if (draw.flip_h) out = flip_tensor(out, FlipAxis::Horizontal);
  if (draw.flip_v) out = flip_tensor(out, FlipAxis::Vertical);
  if (draw.scale != 1.0) {
    const int h = scaled_extent(out.dim(1), draw.scale);
    const int w = scaled_extent(out.dim(2), draw.scale);
    require(h >= 1 && w >= 1, Errc::DegenerateOutput, "rescaled mask would be empty");
    out = resize_bilinear(out, h, w);
    for (double& v : out.storage()) v = v > 0.5 ? 1.0 : 0.0;
  }
  return out;
}

std::vector<BoundingBox> apply_geometric_to_boxes(const std::vector<BoundingBox>& boxes,
                                                  const AugmentDraw& draw, int height, int width) {
  const double sy = draw.scale != 1.0 ? static_cast<double>(scaled_extent(height, draw.scale)) / height : 1.0;
  const double sx = draw.scale != 1.0 ? static_cast<double>(scaled_extent(width, draw.scale)) / width : 1.0;
  std::vector<BoundingBox> out;
  out.reserve(boxes.size());
  for (BoundingBox b : boxes) {
    if (draw.flip_h) b = {width - b.x_max, b.y_min, width - b.x_min, b.y_max};
    if (draw.flip_v) b = {b.x_min, height - b.y_max, b.x_max, height - b.y_min};
    out.push_back({b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy});
  }
  return out;
}

SliceStack fit_to_size(const SliceStack& stack, int height, int width) {
  if (stack.height() == height && stack.width() == width) return stack;
  Tensor px = Tensor::chw(stack.channels(), height, width);
  const int off_r = (stack.height() - height) / 2;
  const int off_c = (stack.width() - width) / 2;
  for (int c = 0; c < stack.channels(); ++c)
    for (int r = 0; r < height; ++r)
      for (int x = 0; x < width; ++x) {
        const int sr = r + off_r, sx = x + off_c;
        if (sr >= 0 && sr < stack.height() && sx >= 0 && sx < stack.width())
          px.at(c, r, x) = stack.pixels().at(c, sr, sx);
      }
  return stack.with_pixels(std::move(px));
}

}  // namespace neuropipe
