#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "neuropipe/detector.hpp"

namespace neuropipe {

// Anchor shape as (width, height) in image pixels.
using AnchorShape = std::pair<double, double>;

struct AnchorConfig {
  std::vector<double> scales{16, 32, 64};
  std::vector<double> aspects{0.5, 1.0, 2.0};  // height / width
  bool use_kmeans = true;  // fit shapes to the training boxes
  int kmeans_k = 9;
  int kmeans_iterations = 100;
  std::uint64_t seed = 1;

  std::vector<AnchorShape> fixed_shapes() const;
  int count() const;
};

struct AnchorSet {
  std::vector<AnchorShape> shapes;
  int grid_h = 0, grid_w = 0, stride = 1;
  std::vector<BoundingBox> boxes;  // (row, col, shape) order, unclipped

  std::size_t size() const { return boxes.size(); }
};

// k-means over box (width, height) with 1 - IoU of centre-aligned boxes as the
// distance. Always returns k shapes (duplicates when the boxes have fewer modes).
std::vector<AnchorShape> kmeans_anchor_shapes(const std::vector<BoundingBox>& boxes, int k, int iterations,
                                              std::uint64_t seed);
AnchorSet tile_anchors(const std::vector<AnchorShape>& shapes, int grid_h, int grid_w, int stride);
AnchorSet generate_anchors(int grid_h, int grid_w, int stride, const AnchorConfig& cfg,
                           const std::vector<BoundingBox>* training_boxes = nullptr);

struct SegmenterConfig {
  int in_channels = 4;
  int num_categories = kNumSubRegions;
  BackboneSpec backbone{{16, 32, 32}, {true, false, false}};
  AnchorConfig anchors;
  int rpn_width = 32;
  int box_pool = 3;
  int box_width = 64;
  int mask_pool = 5;
  int mask_size = 14;
  int mask_width = 128;
  int cls_pool = 3;
  int cls_width = 64;
  double objectness_threshold = 0.5;
  int pre_nms_top = 64;
  int proposals = 8;      // stage-1 boxes kept after NMS
  double proposal_nms = 0.7;
  int jitter_per_truth = 4;
  double jitter = 0.1;
  int background = 4;
  int rpn_samples = 48;
  double score_threshold = 0.5;
  double nms_threshold = 0.5;
  std::array<double, 3> loss_weights{1.0, 1.0, 1.0};
  std::uint64_t seed = 1;

  void validate() const;
};

struct InstanceMask {
  Tensor mask;  // (1, H, W) of 0/1
  SubRegion region = SubRegion::Edema;
  int category = 1;
  double score = 0;
  BoundingBox box;  // tight box of mask
};

struct CascadeOutput {
  std::vector<double> anchor_scores;  // objectness logit per anchor
  std::vector<BoundingBox> proposals;  // stage 1 boxes surviving the threshold
  std::vector<BoundingBox> refined;    // stage 2
  std::vector<Tensor> mask_logits;     // stage 3, (mask_size, mask_size) each
  std::vector<std::vector<double>> instance_scores;  // stage 4, K + 1 logits
};

struct SegmentationSample {
  std::string subject_id;
  int slice_index = 0;
  SliceStack stack;
  std::vector<BoundingBox> boxes;
  std::vector<Tensor> masks;     // (1, H, W)
  std::vector<int> categories;   // 1..K
};

SegmentationSample segmentation_sample(const LesionSlice& s, int num_categories);

// ROI sets of one loss evaluation. The gradient treats boxes as constants;
// replaying a recorded set makes the loss a smooth function of the weights.
struct CascadeRois {
  std::vector<BoundingBox> stage2, stage3;
};

struct SegmenterLoss {
  double total = 0, objectness = 0, anchor_reg = 0, box_reg = 0, mask = 0, instance = 0;
};

class Segmenter {
 public:
  explicit Segmenter(SegmenterConfig cfg);

  const SegmenterConfig& config() const { return cfg_; }
  const std::vector<AnchorShape>& anchor_shapes() const { return shapes_; }
  void set_anchor_shapes(std::vector<AnchorShape> shapes);

  CascadeOutput cascade_forward(const SliceStack& stack);
  // Multi-task loss of one sample with ROI sampling keyed by `key`. When
  // `grad_scale` is nonzero, parameter gradients accumulate grad_scale * d(total).
  SegmenterLoss loss(const SegmentationSample& sample, std::uint64_t key, double grad_scale,
                     CascadeRois* record = nullptr, const CascadeRois* replay = nullptr);

  std::vector<Parameter*> parameters();
  // Parameters grouped per cascade stage: backbone, anchors, box, mask, instance.
  std::vector<std::vector<Parameter*>> stage_parameters();

 private:
  struct Pooled;
  struct Rpn;
  Rpn run_rpn(const Tensor& image, bool training);
  std::vector<BoundingBox> stage1_boxes(const Rpn& r, const AnchorSet& anchors, int height, int width,
                                        bool threshold);
  Pooled pool(const Tensor& features, const std::vector<BoundingBox>& boxes, int grid) const;
  void unpool(const Pooled& p, const Tensor& grad_rows, Tensor& grad_features) const;
  Tensor gate_rows(const Pooled& p, const Tensor& mask_logits, Tensor& gate) const;

  SegmenterConfig cfg_;
  std::vector<AnchorShape> shapes_;
  Sequential backbone_, rpn_trunk_, rpn_obj_, rpn_reg_;
  Sequential box_head_, mask_head_, cls_head_;
};

inline Segmenter build_segmenter(const SegmenterConfig& cfg) { return Segmenter(cfg); }

// Pastes an m x m probability grid into an h x w frame over `box`
// (bilinear, pixel centres), thresholded at 0.5.
Tensor paste_mask(const Tensor& probs, const BoundingBox& box, int height, int width);
// Crops a (1, H, W) mask over `box` onto an m x m grid, thresholded at 0.5.
Tensor crop_mask(const Tensor& mask, const BoundingBox& box, int m);

// Higher scores claim pixels first; empty instances are dropped and boxes re-tightened.
std::vector<InstanceMask> resolve_overlaps(std::vector<InstanceMask> instances);

std::vector<InstanceMask> segment_instances(Segmenter& model, const SliceStack& stack);

TrainHistory train_segmenter(Segmenter& model, const std::vector<SegmentationSample>& train,
                             const std::vector<SegmentationSample>& test, const TrainOptions& opt);

struct SegmenterEval {
  double loss = 0;
  double mean_instance_dice = 0;  // best-matching prediction per truth instance
  std::vector<double> instance_dice;
  std::vector<std::pair<Tensor, Tensor>> union_pairs;  // (predicted, truth) per sample
};
SegmenterEval evaluate_segmenter(Segmenter& model, const std::vector<SegmentationSample>& samples);

// Row-major run lengths, alternating zeros and ones, starting with zeros:
// "HxW:r0 r1 ...".
std::string encode_rle(const Tensor& mask);
Tensor decode_rle(const std::string& text);  // ParseError

}  // namespace neuropipe
