#include <algorithm>

#include "neuropipe/classifier.hpp"
#include "neuropipe/detector.hpp"
#include "neuropipe/gradcheck.hpp"
#include "neuropipe/segmenter.hpp"

namespace neuropipe {

namespace {

// At kGradEps, first-layer weight steps move max-pool and roi-pool winners, so
// the difference straddles a kink; a smaller step stays on one piece.
constexpr double kModelEps = 1e-5;

std::vector<std::size_t> pick_indices(std::size_t n, int count, Rng& rng) {
  std::vector<std::size_t> idx;
  for (int i = 0; i < count; ++i) idx.push_back(static_cast<std::size_t>(rng.uniform() * static_cast<double>(n)));
  std::sort(idx.begin(), idx.end());
  idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
  return idx;
}

GradCheckResult compare_at(std::string name, const Tensor& analytic, const std::vector<double>& numeric,
                           const std::vector<std::size_t>& idx) {
  GradCheckResult r{std::move(name), 0.0, kEndToEndTolerance, static_cast<int>(idx.size())};
  for (std::size_t i = 0; i < idx.size(); ++i)
    r.max_rel_error = std::max(r.max_rel_error, relative_error(analytic[idx[i]], numeric[i]));
  return r;
}

GradCheckResult check_parameter(const std::string& name, Parameter& p, const std::function<double()>& loss,
                                const std::function<void()>& backprop, Rng& rng) {
  const auto idx = pick_indices(p.value.size(), 12, rng);
  backprop();
  const Tensor analytic = p.grad;
  const auto numeric = numeric_gradient(loss, p.value.storage(), kModelEps, idx);
  return compare_at(name, analytic, numeric, idx);
}

SyntheticSpec small_lesion_spec(std::uint64_t seed) {
  SyntheticSpec spec;
  spec.dims = {9, 48, 48};
  spec.radius = {{{2, 3}, {5, 9}, {5, 9}}};
  spec.center_fraction = {{{0.5, 0.5}, {0.35, 0.65}, {0.35, 0.65}}};
  spec.force_class = LesionClass::TumorHGG;
  spec.seed = seed;
  return spec;
}

GradCheckResult classifier_check(std::uint64_t seed) {
  ClassifierConfig cfg;
  cfg.input_side = 32;
  cfg.channels = {2, 2, 2, 2, 2, 2, 2};
  cfg.fc_width = 8;
  cfg.dropout = 0.0;
  cfg.head = ClassifierHead::Softmax;
  cfg.seed = seed;
  Classifier model(cfg);
  Rng rng(mix64(seed ^ 0xc1a5));
  Tensor x = Tensor::chw(3, 32, 32);
  for (double& v : x.storage()) v = rng.uniform();
  const int label = static_cast<int>(seed % kNumClasses);
  auto loss = [&] { return model.loss(model.forward_tensor(x, false), label).loss; };
  const auto scores = model.forward_tensor(x, false);
  const LossGrad lg = model.loss(scores, label);
  const Tensor analytic = model.backward(lg.grad);
  const auto idx = pick_indices(x.size(), 16, rng);
  const auto numeric = numeric_gradient(loss, x.storage(), kModelEps, idx);
  return compare_at("classifier input", analytic, numeric, idx);
}

GradCheckResult detector_check(std::uint64_t seed) {
  DetectorConfig cfg;
  cfg.backbone.channels = {4, 8};
  cfg.backbone.pool_after = {true, false};
  cfg.roi_feat_width = 16;
  cfg.global_channels = 4;
  cfg.fusion_width = 16;
  cfg.seed = seed;
  Detector model(cfg);
  const LesionSlice s = lesion_slice(generate_case(small_lesion_spec(seed), 0));
  const BoundingBox t = s.boxes.at(0);
  const std::vector<BoundingBox> rois{t, {t.x_min - 2, t.y_min + 1, t.x_max + 3, t.y_max - 1}, {0, 0, 16, 16}};
  const std::vector<int> labels{1, 1, 0};
  auto run = [&](bool backprop) {
    const DetectorOutput out = model.forward(s.stack.pixels(), rois, false);
    double total = 0;
    std::vector<std::vector<double>> gs;
    std::vector<BoxDeltas> gd(rois.size(), BoxDeltas{});
    for (std::size_t i = 0; i < rois.size(); ++i) {
      LossGrad c = softmax_ce(out.scores[i], labels[i]);
      total += c.loss;
      gs.push_back(c.grad);
      if (labels[i] == 0) continue;
      const BoxDeltas target = encode_deltas(t, rois[i]);
      LossGrad r = smooth_l1(out.deltas[i], target);
      total += r.loss;
      std::copy(r.grad.begin(), r.grad.end(), gd[i].begin());
    }
    if (backprop) {
      zero_gradients(model.parameters());
      model.backward(gs, gd);
    }
    return total;
  };
  Rng rng(mix64(seed ^ 0xde7));
  auto* w = model.parameters().front();
  return check_parameter("detector " + w->name, *w, [&] { return run(false); }, [&] { run(true); }, rng);
}

std::vector<GradCheckResult> segmenter_checks(std::uint64_t seed) {
  SegmenterConfig cfg;
  cfg.backbone.channels = {4, 8};
  cfg.backbone.pool_after = {true, false};
  cfg.rpn_width = 8;
  cfg.box_width = 16;
  cfg.mask_width = 16;
  cfg.cls_width = 16;
  cfg.num_categories = kNumSubRegions;
  cfg.anchors.use_kmeans = false;
  cfg.anchors.scales = {12, 20};
  cfg.anchors.aspects = {1.0};
  cfg.seed = seed;
  Segmenter model(cfg);
  const SegmentationSample s =
      segmentation_sample(lesion_slice(generate_case(small_lesion_spec(seed), 0)), kNumSubRegions);
  const std::uint64_t key = mix64(seed ^ 0x5e6);
  // ROIs are constants of the backward pass, so differences replay them too
  CascadeRois rois;
  model.loss(s, key, 0.0, &rois);
  auto loss = [&] { return model.loss(s, key, 0.0, nullptr, &rois).total; };
  auto backprop = [&] {
    zero_gradients(model.parameters());
    model.loss(s, key, 1.0, nullptr, &rois);
  };
  Rng rng(mix64(seed ^ 0x5e7));
  const auto stages = model.stage_parameters();
  Parameter& backbone_w = *stages[0].front();
  Parameter& mask_w = *stages[3].front();
  return {check_parameter("segmenter " + backbone_w.name, backbone_w, loss, backprop, rng),
          check_parameter("segmenter " + mask_w.name, mask_w, loss, backprop, rng)};
}

}  // namespace

std::vector<GradCheckResult> end_to_end_gradient_checks(std::uint64_t seed) {
  std::vector<GradCheckResult> out{classifier_check(seed), detector_check(seed)};
  for (auto& r : segmenter_checks(seed)) out.push_back(std::move(r));
  return out;
}

std::vector<GradCheckResult> run_gradient_suite(std::uint64_t seed) {
  auto out = operator_gradient_checks(seed);
  for (auto& r : end_to_end_gradient_checks(seed)) out.push_back(std::move(r));
  return out;
}

}  // namespace neuropipe
