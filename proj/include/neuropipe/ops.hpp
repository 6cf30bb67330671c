#pragma once

#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <vector>

#include "neuropipe/boxes.hpp"
#include "neuropipe/tensor.hpp"

namespace neuropipe {

// Feature maps are (C, H, W) tensors.
using FeatureMap = Tensor;

struct PoolSpec {
  int window_h = 2, window_w = 2;
  int stride_h = 2, stride_w = 2;
};

// Per channel y = sqrt(sum of squares over the window); valid pooling.
FeatureMap l2pool_forward(const FeatureMap& x, const PoolSpec& spec);
// d/dx_i = g * x_i / y, 0 where y == 0; overlapping windows add.
FeatureMap l2pool_backward(const FeatureMap& x, const PoolSpec& spec, const FeatureMap& grad_out);

// Integer cell rectangle [row0, row1) x [col0, col1).
struct CellRect {
  int row0 = 0, col0 = 0, row1 = 0, col1 = 0;
  int rows() const { return row1 - row0; }
  int cols() const { return col1 - col0; }
  friend bool operator==(const CellRect&, const CellRect&) = default;
};

struct Roi {
  BoundingBox box;  // feature-map coordinates
  int out_h = 1, out_w = 1;
};

// Box edges snapped to cells by rounding. RoiOutOfBounds / RoiTooSmall.
CellRect snap_roi(const Roi& roi, int height, int width);

// Bin b of n over length L spans [floor(b L / n), floor((b + 1) L / n)).
inline int bin_start(int b, int length, int bins) {
  return static_cast<int>((static_cast<long>(b) * length) / bins);
}

struct RoiPoolResult {
  FeatureMap values;        // (C, out_h, out_w)
  std::vector<int> argmax;  // flat input index per output cell
};

// Single-level spatial pyramid pooling: max over each bin of the ROI grid.
FeatureMap roi_spp_pool(const FeatureMap& x, const Roi& roi);
RoiPoolResult roi_spp_pool_indexed(const FeatureMap& x, const Roi& roi);
RoiPoolResult roi_spp_pool_cells(const FeatureMap& x, const CellRect& cells, int out_h, int out_w);
// Scatters grad_out into grad_in (accumulating) through the recorded winners.
void roi_spp_pool_backward(const RoiPoolResult& forward, const FeatureMap& grad_out,
                           FeatureMap& grad_in);

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

// sum_{j != label} max(0, margin + s_j - s_label). BadLabel.
LossGrad multiclass_hinge_loss(std::span<const double> scores, int label, double margin);
// Log-sum-exp-stable cross-entropy; grad = softmax - onehot. BadLabel.
LossGrad softmax_ce(std::span<const double> scores, int label);
// sum_d f(p_d - t_d), f(u) = 0.5 u^2 for |u| < 1, |u| - 0.5 otherwise.
LossGrad smooth_l1(std::span<const double> pred, std::span<const double> target);
// Mean binary cross-entropy on logits; grad = (sigmoid(z) - t) / n.
LossGrad sigmoid_bce(std::span<const double> logits, std::span<const double> targets);

// w0 * cls + w1 * reg + w2 * mask (mask term 0 when absent). NegativeWeight.
double multitask_loss(double cls, double reg, std::optional<double> mask,
                      const std::array<double, 3>& weights);

std::vector<double> softmax(std::span<const double> scores);
inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace neuropipe
