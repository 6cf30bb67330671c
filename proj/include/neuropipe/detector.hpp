#pragma once

#include <optional>
#include <set>
#include <vector>

#include "neuropipe/boxes.hpp"
#include "neuropipe/layers.hpp"
#include "neuropipe/synthetic.hpp"
#include "neuropipe/training.hpp"

namespace neuropipe {

// Convolutional stages, each a same-padded 3x3 conv + relu, optionally
// followed by a 2x2/2 max pool.
struct BackboneSpec {
  std::vector<int> channels{32, 64, 128, 128, 128};
  std::vector<bool> pool_after{true, true, true, true, false};

  int stride() const;
  void validate() const;
};

Sequential make_backbone(const BackboneSpec& spec, int in_channels, Rng& init);

// Maps an image-space box onto backbone cells. Boxes too small for the pooling
// grid are grown symmetrically (then shifted inside the map) until they span
// out_h x out_w cells.
CellRect roi_cells(const BoundingBox& image_box, int stride, int map_h, int map_w, int out_h, int out_w);

enum class ProposalMode { GroundTruthJitter, Grid };

struct ProposalConfig {
  double jitter = 0.15;         // max perturbation as a fraction of box size
  int jitter_per_truth = 6;
  int background = 6;           // boxes with IoU < 0.3 against every truth box
  std::vector<int> grid_scales{16, 24, 32};
  std::vector<int> grid_strides{8, 8, 8};
};

struct DetectorConfig {
  int in_channels = 4;
  int num_categories = 1;  // lesion categories; scores have num_categories + 1 entries
  BackboneSpec backbone;
  int spp_h = 3, spp_w = 3;
  int roi_feat_width = 128;
  bool global_path = true;
  int global_kernel = 7;
  int global_channels = 64;
  PoolSpec global_pool{2, 2, 2, 2};  // L2-norm pooling
  int global_grid = 2;
  int fusion_width = 128;
  std::array<double, 3> loss_weights{1.0, 1.0, 0.0};
  ProposalConfig proposals;
  int grid_samples = 16;           // IoU-labelled grid boxes added per training image
  double score_threshold = 0.5;
  double nms_threshold = 0.5;
  std::uint64_t seed = 1;

  int global_feat_width() const { return global_path ? global_channels * global_grid * global_grid : 0; }
  int fused_width() const { return roi_feat_width + global_feat_width(); }
  void validate() const;  // BadConfig
};

struct Detection {
  BoundingBox box;
  int category = 1;
  double score = 0;
};

struct DetectorOutput {
  std::vector<std::vector<double>> scores;  // N x (K + 1), raw logits
  std::vector<BoxDeltas> deltas;           // N
};

class Detector {
 public:
  explicit Detector(DetectorConfig cfg);

  const DetectorConfig& config() const { return cfg_; }
  // image is (C, H, W); ROIs are in image coordinates.
  DetectorOutput forward(const Tensor& image, const std::vector<BoundingBox>& rois, bool training = false);
  // Gradients of the last forward's outputs; parameter gradients accumulate.
  void backward(const std::vector<std::vector<double>>& grad_scores, const std::vector<BoxDeltas>& grad_deltas);

  std::vector<Parameter*> parameters();
  std::vector<Parameter*> global_parameters();
  Sequential& backbone() { return backbone_; }
  Sequential& global() { return global_; }
  Linear& roi_fc() { return roi_fc_; }
  Linear& fusion() { return fusion_; }
  Linear& cls_head() { return cls_; }
  Linear& reg_head() { return reg_; }
  // Features of the last forward: (N, fused width) rows.
  const Tensor& last_fused() const { return fused_; }

 private:
  DetectorConfig cfg_;
  Sequential backbone_, global_;
  Linear roi_fc_, fusion_, cls_, reg_;
  Relu roi_relu_, fusion_relu_;
  Shape feature_shape_;
  std::vector<RoiPoolResult> pooled_;
  Tensor fused_;
  int n_ = 0;
};

inline Detector build_detector(const DetectorConfig& cfg) { return Detector(cfg); }

// Same local weights, global path removed. The fusion weights keep their ROI columns.
Detector local_path_reduction(Detector& dual);

// Throws MissingTruth in jitter mode without truth boxes.
std::vector<BoundingBox> propose_rois(const SliceStack& stack, ProposalMode mode, const ProposalConfig& cfg,
                                      const std::vector<BoundingBox>* truth, std::uint64_t seed);

// Scores proposals, refines and clips boxes, thresholds, then NMS. WrongChannels.
std::vector<Detection> detect(Detector& model, const SliceStack& stack);
std::vector<Detection> detect(Detector& model, const SliceStack& stack, double score_threshold);

struct DetectionSample {
  std::string subject_id;
  int slice_index = 0;
  SliceStack stack;
  std::vector<BoundingBox> boxes;
  std::vector<int> categories;  // 1..K
};

DetectionSample detection_sample(const LesionSlice& s, int num_categories);

TrainHistory train_detector(Detector& model, const std::vector<DetectionSample>& train,
                            const std::vector<DetectionSample>& test, const TrainOptions& opt);

struct DetectorEval {
  double loss = 0;
  double hit_rate = 0;  // fraction of samples whose top detection has IoU >= 0.5
  std::vector<double> top_iou;
};
DetectorEval evaluate_detector(Detector& model, const std::vector<DetectionSample>& samples);

// Restricts the channels to `keep` in canonical order. With fixed_arity the
// other channels become zeros and are recorded in the provenance. EmptySubset,
// WrongChannels when `keep` names a channel the stack lacks.
SliceStack modality_subset(const SliceStack& stack, const std::set<Modality>& keep, bool fixed_arity = false);

}  // namespace neuropipe
