#include "neuropipe/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "neuropipe/error.hpp"
#include "neuropipe/kernels.hpp"

namespace neuropipe {

namespace {

kernels::PoolGeometry pool_geometry(const FeatureMap& x, const PoolSpec& spec) {
  require(x.rank() == 3, Errc::ShapeMismatch, "feature map must be (C, H, W)");
  require(spec.window_h >= 1 && spec.window_w >= 1 && spec.stride_h >= 1 && spec.stride_w >= 1,
          Errc::BadConfig, "pool window and stride must be positive");
  require(spec.window_h <= x.dim(1) && spec.window_w <= x.dim(2), Errc::WindowTooLarge,
          "pool window larger than feature map " + shape_string(x.shape()));
  return {x.dim(0), x.dim(1), x.dim(2), spec.window_h, spec.window_w, spec.stride_h, spec.stride_w};
}

void check_label(std::size_t k, int label) {
  require(label >= 0 && static_cast<std::size_t>(label) < k, Errc::BadLabel,
          "label " + std::to_string(label) + " outside [0," + std::to_string(k) + ")");
}

}  // namespace

FeatureMap l2pool_forward(const FeatureMap& x, const PoolSpec& spec) {
  const auto g = pool_geometry(x, spec);
  FeatureMap y = Tensor::chw(g.channels, g.out_height(), g.out_width());
  kernels::parallel::l2pool_forward(g, x.values(), y.values());
  return y;
}

FeatureMap l2pool_backward(const FeatureMap& x, const PoolSpec& spec, const FeatureMap& grad_out) {
  const auto g = pool_geometry(x, spec);
  require(grad_out.shape() == Shape{g.channels, g.out_height(), g.out_width()}, Errc::ShapeMismatch,
          "l2pool grad_out has shape " + shape_string(grad_out.shape()));
  FeatureMap y = l2pool_forward(x, spec);
  FeatureMap dx(x.shape());
  kernels::parallel::l2pool_backward(g, x.values(), y.values(), grad_out.values(), dx.values());
  return dx;
}

CellRect snap_roi(const Roi& roi, int height, int width) {
  require(roi.out_h >= 1 && roi.out_w >= 1, Errc::BadConfig, "ROI output size must be positive");
  CellRect r{static_cast<int>(std::lround(roi.box.y_min)), static_cast<int>(std::lround(roi.box.x_min)),
             static_cast<int>(std::lround(roi.box.y_max)), static_cast<int>(std::lround(roi.box.x_max))};
  require(r.row0 >= 0 && r.col0 >= 0 && r.row1 <= height && r.col1 <= width, Errc::RoiOutOfBounds,
          "ROI outside the feature map");
  require(r.rows() >= 1 && r.cols() >= 1, Errc::RoiTooSmall, "ROI covers no cell");
  require(r.rows() >= roi.out_h && r.cols() >= roi.out_w, Errc::RoiTooSmall,
          "ROI spans fewer cells than output bins");
  return r;
}

RoiPoolResult roi_spp_pool_cells(const FeatureMap& x, const CellRect& cells, int out_h, int out_w) {
  require(x.rank() == 3, Errc::ShapeMismatch, "feature map must be (C, H, W)");
  require(cells.row0 >= 0 && cells.col0 >= 0 && cells.row1 <= x.dim(1) && cells.col1 <= x.dim(2),
          Errc::RoiOutOfBounds, "ROI outside the feature map");
  require(cells.rows() >= out_h && cells.cols() >= out_w, Errc::RoiTooSmall,
          "ROI spans fewer cells than output bins");
  const int c_n = x.dim(0), h = x.dim(1), w = x.dim(2);
  RoiPoolResult out{Tensor::chw(c_n, out_h, out_w),
                    std::vector<int>(static_cast<std::size_t>(c_n) * out_h * out_w)};
  for (int c = 0; c < c_n; ++c)
    for (int by = 0; by < out_h; ++by) {
      const int r0 = cells.row0 + bin_start(by, cells.rows(), out_h);
      const int r1 = cells.row0 + bin_start(by + 1, cells.rows(), out_h);
      for (int bx = 0; bx < out_w; ++bx) {
        const int c0 = cells.col0 + bin_start(bx, cells.cols(), out_w);
        const int c1 = cells.col0 + bin_start(bx + 1, cells.cols(), out_w);
        double best = -std::numeric_limits<double>::infinity();
        int best_i = -1;
        for (int r = r0; r < r1; ++r)
          for (int cc = c0; cc < c1; ++cc) {
            const int idx = (c * h + r) * w + cc;
            if (best_i < 0 || x[static_cast<std::size_t>(idx)] > best) {
              best = x[static_cast<std::size_t>(idx)];
              best_i = idx;
            }
          }
        const std::size_t oi = (static_cast<std::size_t>(c) * out_h + by) * out_w + bx;
        out.values[oi] = best;
        out.argmax[oi] = best_i;
      }
    }
  return out;
}

RoiPoolResult roi_spp_pool_indexed(const FeatureMap& x, const Roi& roi) {
  require(x.rank() == 3, Errc::ShapeMismatch, "feature map must be (C, H, W)");
  return roi_spp_pool_cells(x, snap_roi(roi, x.dim(1), x.dim(2)), roi.out_h, roi.out_w);
}

FeatureMap roi_spp_pool(const FeatureMap& x, const Roi& roi) {
  return roi_spp_pool_indexed(x, roi).values;
}

void roi_spp_pool_backward(const RoiPoolResult& forward, const FeatureMap& grad_out,
                           FeatureMap& grad_in) {
  require(grad_out.shape() == forward.values.shape(), Errc::ShapeMismatch,
          "roi pool grad_out shape mismatch");
  for (std::size_t i = 0; i < forward.argmax.size(); ++i)
    grad_in[static_cast<std::size_t>(forward.argmax[i])] += grad_out[i];
}

LossGrad multiclass_hinge_loss(std::span<const double> scores, int label, double margin) {
  check_label(scores.size(), label);
  require(margin > 0.0, Errc::BadConfig, "hinge margin must be positive");
  LossGrad out{0.0, std::vector<double>(scores.size(), 0.0)};
  const auto y = static_cast<std::size_t>(label);
  for (std::size_t j = 0; j < scores.size(); ++j) {
    if (j == y) continue;
    const double slack = margin + scores[j] - scores[y];
    if (slack > 0.0) {
      out.loss += slack;
      out.grad[j] += 1.0;
      out.grad[y] -= 1.0;
    }
  }
  return out;
}

std::vector<double> softmax(std::span<const double> scores) {
  const double top = *std::max_element(scores.begin(), scores.end());
  std::vector<double> p(scores.size());
  double z = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) z += (p[i] = std::exp(scores[i] - top));
  for (double& v : p) v /= z;
  return p;
}

LossGrad softmax_ce(std::span<const double> scores, int label) {
  check_label(scores.size(), label);
  const double top = *std::max_element(scores.begin(), scores.end());
  double z = 0.0;
  for (double s : scores) z += std::exp(s - top);
  const double lse = top + std::log(z);
  LossGrad out{lse - scores[static_cast<std::size_t>(label)], std::vector<double>(scores.size())};
  for (std::size_t i = 0; i < scores.size(); ++i) out.grad[i] = std::exp(scores[i] - lse);
  out.grad[static_cast<std::size_t>(label)] -= 1.0;
  return out;
}

LossGrad smooth_l1(std::span<const double> pred, std::span<const double> target) {
  require(pred.size() == target.size(), Errc::LengthMismatch, "smooth_l1 length mismatch");
  LossGrad out{0.0, std::vector<double>(pred.size())};
  for (std::size_t d = 0; d < pred.size(); ++d) {
    const double u = pred[d] - target[d];
    if (std::abs(u) < 1.0) {
      out.loss += 0.5 * u * u;
      out.grad[d] = u;
    } else {
      out.loss += std::abs(u) - 0.5;
      out.grad[d] = u > 0 ? 1.0 : -1.0;
    }
  }
  return out;
}

LossGrad sigmoid_bce(std::span<const double> logits, std::span<const double> targets) {
  require(logits.size() == targets.size(), Errc::LengthMismatch, "sigmoid_bce length mismatch");
  require(!logits.empty(), Errc::LengthMismatch, "sigmoid_bce on empty input");
  const double inv = 1.0 / static_cast<double>(logits.size());
  LossGrad out{0.0, std::vector<double>(logits.size())};
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double z = logits[i], t = targets[i];
    out.loss += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
    out.grad[i] = (sigmoid(z) - t) * inv;
  }
  out.loss *= inv;
  return out;
}

double multitask_loss(double cls, double reg, std::optional<double> mask,
                      const std::array<double, 3>& weights) {
  for (double w : weights) require(w >= 0.0, Errc::NegativeWeight, "loss weights must be >= 0");
  return weights[0] * cls + weights[1] * reg + (mask ? weights[2] * *mask : 0.0);
}

}  // namespace neuropipe
