#include "neuropipe/detector.hpp"

#include <algorithm>
#include <cmath>

#include "neuropipe/error.hpp"

namespace neuropipe {

int BackboneSpec::stride() const {
  int s = 1;
  for (bool p : pool_after) s *= p ? 2 : 1;
  return s;
}

void BackboneSpec::validate() const {
  require(!channels.empty(), Errc::BadConfig, "backbone needs at least one stage");
  require(channels.size() == pool_after.size(), Errc::BadConfig,
          "backbone channel and pool lists differ in length");
  for (int c : channels) require(c >= 1, Errc::BadConfig, "backbone widths must be >= 1");
}

Sequential make_backbone(const BackboneSpec& spec, int in_channels, Rng& init) {
  spec.validate();
  Sequential net;
  int prev = in_channels;
  for (std::size_t i = 0; i < spec.channels.size(); ++i) {
    net.add<Conv2d>("backbone.conv" + std::to_string(i + 1), prev, spec.channels[i], 3, 1, 1, init);
    net.add<Relu>();
    if (spec.pool_after[i]) net.add<Pool2d>(PoolKind::Max, PoolSpec{2, 2, 2, 2});
    prev = spec.channels[i];
  }
  return net;
}

namespace {

void grow_span(int& lo, int& hi, int need, int limit) {
  while (hi - lo < need) {
    if (lo > 0) --lo;
    if (hi - lo < need && hi < limit) ++hi;
  }
}

}  // namespace

CellRect roi_cells(const BoundingBox& image_box, int stride, int map_h, int map_w, int out_h, int out_w) {
  require(map_h >= out_h && map_w >= out_w, Errc::RoiTooSmall, "feature map smaller than the pooling grid");
  auto cell = [&](double v, int limit) {
    return std::clamp(static_cast<int>(std::lround(v / stride)), 0, limit);
  };
  CellRect r{cell(image_box.y_min, map_h), cell(image_box.x_min, map_w), cell(image_box.y_max, map_h),
             cell(image_box.x_max, map_w)};
  if (r.row1 < r.row0) std::swap(r.row0, r.row1);
  if (r.col1 < r.col0) std::swap(r.col0, r.col1);
  grow_span(r.row0, r.row1, out_h, map_h);
  grow_span(r.col0, r.col1, out_w, map_w);
  return r;
}

void DetectorConfig::validate() const {
  require(in_channels >= 1 && in_channels <= 6, Errc::BadConfig, "detector input needs 1..6 channels");
  require(num_categories >= 1, Errc::BadConfig, "detector needs at least one category");
  backbone.validate();
  require(spp_h >= 1 && spp_w >= 1, Errc::BadConfig, "spp size must be >= 1");
  require(roi_feat_width >= 1 && fusion_width >= 1, Errc::BadConfig, "fc widths must be >= 1");
  if (global_path) {
    require(global_kernel >= 1 && global_kernel % 2 == 1, Errc::BadConfig, "global kernel must be odd");
    require(global_channels >= 1 && global_grid >= 1, Errc::BadConfig, "global path widths must be >= 1");
  }
  for (double w : loss_weights) require(w >= 0, Errc::NegativeWeight, "loss weights must be >= 0");
  require(proposals.grid_scales.size() == proposals.grid_strides.size() && !proposals.grid_scales.empty(),
          Errc::BadConfig, "grid scales and strides must pair up");
  for (std::size_t i = 0; i < proposals.grid_scales.size(); ++i)
    require(proposals.grid_scales[i] >= 1 && proposals.grid_strides[i] >= 1, Errc::BadConfig,
            "grid scales and strides must be >= 1");
  require(proposals.jitter >= 0 && proposals.jitter_per_truth >= 0 && proposals.background >= 0,
          Errc::BadConfig, "bad proposal settings");
}

namespace {
Rng& placeholder_rng() {
  thread_local Rng rng(0);
  return rng;
}
}  // namespace

Detector::Detector(DetectorConfig cfg)
    : cfg_((cfg.validate(), cfg)),
      roi_fc_("roi_fc", 1, 1, placeholder_rng()),
      fusion_("fusion", 1, 1, placeholder_rng()),
      cls_("cls", 1, 1, placeholder_rng()),
      reg_("reg", 1, 1, placeholder_rng()) {
  Rng init(cfg_.seed);
  backbone_ = make_backbone(cfg_.backbone, cfg_.in_channels, init);
  const int last = cfg_.backbone.channels.back();
  roi_fc_ = Linear("roi_fc", last * cfg_.spp_h * cfg_.spp_w, cfg_.roi_feat_width, init);
  Rng global_init(mix64(cfg_.seed ^ 0x910b));
  if (cfg_.global_path) {
    global_.add<Conv2d>("global.conv", cfg_.in_channels, cfg_.global_channels, cfg_.global_kernel, 1,
                        cfg_.global_kernel / 2, global_init);
    global_.add<Relu>();
    global_.add<Pool2d>(PoolKind::L2, cfg_.global_pool);
    global_.add<AdaptiveAvgPool>(cfg_.global_grid, cfg_.global_grid);
    global_.add<Flatten>();
  }
  Rng head_init(mix64(cfg_.seed ^ 0x4ead));
  fusion_ = Linear("fusion", cfg_.fused_width(), cfg_.fusion_width, head_init);
  cls_ = Linear("cls", cfg_.fusion_width, cfg_.num_categories + 1, head_init);
  reg_ = Linear("reg", cfg_.fusion_width, 4, head_init);
}

std::vector<Parameter*> Detector::parameters() {
  std::vector<Parameter*> out = backbone_.parameters();
  roi_fc_.collect_parameters(out);
  for (auto* p : global_.parameters()) out.push_back(p);
  fusion_.collect_parameters(out);
  cls_.collect_parameters(out);
  reg_.collect_parameters(out);
  return out;
}

std::vector<Parameter*> Detector::global_parameters() { return global_.parameters(); }

DetectorOutput Detector::forward(const Tensor& image, const std::vector<BoundingBox>& rois, bool training) {
  require(image.rank() == 3 && image.dim(0) == cfg_.in_channels, Errc::WrongChannels,
          "detector expects " + std::to_string(cfg_.in_channels) + " channels, got " + shape_string(image.shape()));
  n_ = static_cast<int>(rois.size());
  pooled_.clear();
  DetectorOutput out;
  if (n_ == 0) return out;

  const Tensor features = backbone_.forward(image, training);
  feature_shape_ = features.shape();
  const int stride = cfg_.backbone.stride();
  const int per_roi = features.dim(0) * cfg_.spp_h * cfg_.spp_w;
  Tensor pooled({n_, per_roi});
  for (int i = 0; i < n_; ++i) {
    const CellRect cells = roi_cells(rois[static_cast<std::size_t>(i)], stride, features.dim(1), features.dim(2),
                                     cfg_.spp_h, cfg_.spp_w);
    pooled_.push_back(roi_spp_pool_cells(features, cells, cfg_.spp_h, cfg_.spp_w));
    std::copy(pooled_.back().values.storage().begin(), pooled_.back().values.storage().end(),
              pooled.storage().begin() + static_cast<std::ptrdiff_t>(i) * per_roi);
  }
  const Tensor local = roi_relu_.forward(roi_fc_.forward(pooled, training), training);

  const int gw = cfg_.global_feat_width();
  Tensor global_vec;
  if (gw > 0) global_vec = global_.forward(image, training);
  const int fw = cfg_.fused_width();
  fused_ = Tensor({n_, fw});
  for (int i = 0; i < n_; ++i) {
    double* row = fused_.storage().data() + static_cast<std::size_t>(i) * fw;
    for (int j = 0; j < cfg_.roi_feat_width; ++j) row[j] = local[static_cast<std::size_t>(i) * cfg_.roi_feat_width + j];
    for (int j = 0; j < gw; ++j) row[cfg_.roi_feat_width + j] = global_vec[static_cast<std::size_t>(j)];
  }
  const Tensor hidden = fusion_relu_.forward(fusion_.forward(fused_, training), training);
  const Tensor scores = cls_.forward(hidden, training);
  const Tensor deltas = reg_.forward(hidden, training);
  const int k = cfg_.num_categories + 1;
  for (int i = 0; i < n_; ++i) {
    out.scores.emplace_back(scores.storage().begin() + static_cast<std::ptrdiff_t>(i) * k,
                            scores.storage().begin() + static_cast<std::ptrdiff_t>(i + 1) * k);
    BoxDeltas d{};
    for (int j = 0; j < 4; ++j) d[static_cast<std::size_t>(j)] = deltas[static_cast<std::size_t>(i * 4 + j)];
    out.deltas.push_back(d);
  }
  return out;
}

void Detector::backward(const std::vector<std::vector<double>>& grad_scores, const std::vector<BoxDeltas>& grad_deltas) {
  if (n_ == 0) return;
  require(static_cast<int>(grad_scores.size()) == n_ && static_cast<int>(grad_deltas.size()) == n_,
          Errc::ShapeMismatch, "detector gradients do not match the last forward");
  const int k = cfg_.num_categories + 1;
  Tensor gs({n_, k}), gd({n_, 4});
  for (int i = 0; i < n_; ++i) {
    for (int j = 0; j < k; ++j) gs[static_cast<std::size_t>(i * k + j)] = grad_scores[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
    for (int j = 0; j < 4; ++j) gd[static_cast<std::size_t>(i * 4 + j)] = grad_deltas[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)];
  }
  Tensor gh = cls_.backward(gs);
  const Tensor gh2 = reg_.backward(gd);
  for (std::size_t i = 0; i < gh.size(); ++i) gh[i] += gh2[i];
  const Tensor gfused = fusion_.backward(fusion_relu_.backward(gh));

  const int fw = cfg_.fused_width(), rw = cfg_.roi_feat_width, gw = cfg_.global_feat_width();
  Tensor glocal({n_, rw});
  Tensor gglobal({gw > 0 ? gw : 1}, 0.0);
  for (int i = 0; i < n_; ++i) {
    const double* row = gfused.storage().data() + static_cast<std::size_t>(i) * fw;
    for (int j = 0; j < rw; ++j) glocal[static_cast<std::size_t>(i * rw + j)] = row[j];
    for (int j = 0; j < gw; ++j) gglobal[static_cast<std::size_t>(j)] += row[rw + j];
  }
  if (gw > 0) global_.backward(gglobal);

  const Tensor gpooled = roi_fc_.backward(roi_relu_.backward(glocal));
  Tensor gfeat(feature_shape_, 0.0);
  const int per_roi = gpooled.dim(1);
  for (int i = 0; i < n_; ++i) {
    const auto& pr = pooled_[static_cast<std::size_t>(i)];
    Tensor g(pr.values.shape());
    std::copy(gpooled.storage().begin() + static_cast<std::ptrdiff_t>(i) * per_roi,
              gpooled.storage().begin() + static_cast<std::ptrdiff_t>(i + 1) * per_roi, g.storage().begin());
    roi_spp_pool_backward(pr, g, gfeat);
  }
  backbone_.backward(gfeat);
}

Detector local_path_reduction(Detector& dual) {
  DetectorConfig cfg = dual.config();
  cfg.global_path = false;
  Detector single(cfg);
  auto copy = [](const std::vector<Parameter*>& from, const std::vector<Parameter*>& to) {
    for (std::size_t i = 0; i < from.size(); ++i) to[i]->value = from[i]->value;
  };
  copy(dual.backbone().parameters(), single.backbone().parameters());
  single.roi_fc().weight().value = dual.roi_fc().weight().value;
  single.roi_fc().bias().value = dual.roi_fc().bias().value;
  const int rw = cfg.roi_feat_width, fw_dual = dual.config().fused_width();
  Tensor& w = single.fusion().weight().value;
  const Tensor& wd = dual.fusion().weight().value;
  for (int o = 0; o < cfg.fusion_width; ++o)
    for (int j = 0; j < rw; ++j)
      w[static_cast<std::size_t>(o * rw + j)] = wd[static_cast<std::size_t>(o * fw_dual + j)];
  single.fusion().bias().value = dual.fusion().bias().value;
  single.cls_head().weight().value = dual.cls_head().weight().value;
  single.cls_head().bias().value = dual.cls_head().bias().value;
  single.reg_head().weight().value = dual.reg_head().weight().value;
  single.reg_head().bias().value = dual.reg_head().bias().value;
  return single;
}

std::vector<BoundingBox> propose_rois(const SliceStack& stack, ProposalMode mode, const ProposalConfig& cfg,
                                      const std::vector<BoundingBox>* truth, std::uint64_t seed) {
  const int h = stack.height(), w = stack.width();
  std::vector<BoundingBox> out;
  if (mode == ProposalMode::Grid) {
    for (std::size_t s = 0; s < cfg.grid_scales.size(); ++s) {
      const int size = cfg.grid_scales[s], step = cfg.grid_strides[s];
      if (size > h || size > w) continue;
      for (int y = 0; y + size <= h; y += step)
        for (int x = 0; x + size <= w; x += step)
          out.push_back({static_cast<double>(x), static_cast<double>(y), static_cast<double>(x + size),
                         static_cast<double>(y + size)});
    }
    return out;
  }
  require(truth != nullptr && !truth->empty(), Errc::MissingTruth, "jitter proposals need truth boxes");
  Rng rng(seed);
  for (const auto& t : *truth) {
    out.push_back(t);
    for (int i = 0; i < cfg.jitter_per_truth; ++i) {
      const double dx = rng.uniform(-cfg.jitter, cfg.jitter) * t.width();
      const double dy = rng.uniform(-cfg.jitter, cfg.jitter) * t.height();
      const double sw = 1.0 + rng.uniform(-cfg.jitter, cfg.jitter);
      const double sh = 1.0 + rng.uniform(-cfg.jitter, cfg.jitter);
      const double cx = t.center_x() + dx, cy = t.center_y() + dy;
      const double bw = t.width() * sw, bh = t.height() * sh;
      BoundingBox b = clip_box({cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2}, h, w);
      if (b.valid()) out.push_back(b);
    }
  }
  double min_side = 1e300, max_side = 0;
  for (const auto& t : *truth) {
    min_side = std::min({min_side, t.width(), t.height()});
    max_side = std::max({max_side, t.width(), t.height()});
  }
  int made = 0;
  for (int attempt = 0; attempt < 50 * std::max(1, cfg.background) && made < cfg.background; ++attempt) {
    const double bw = std::min<double>(w, rng.uniform(0.75 * min_side, 1.25 * max_side));
    const double bh = std::min<double>(h, rng.uniform(0.75 * min_side, 1.25 * max_side));
    const double x = rng.uniform(0, w - bw), y = rng.uniform(0, h - bh);
    const BoundingBox b{x, y, x + bw, y + bh};
    bool far = true;
    for (const auto& t : *truth) far = far && iou(b, t) < 0.3;
    if (far && b.valid()) out.push_back(b), ++made;
  }
  return out;
}

namespace {

struct ScoredBox {
  BoundingBox box;
  int category;
  double score;
};

std::vector<ScoredBox> score_boxes(Detector& model, const SliceStack& stack, const std::vector<BoundingBox>& rois) {
  const DetectorOutput out = model.forward(stack.pixels(), rois, false);
  std::vector<ScoredBox> scored;
  for (std::size_t i = 0; i < rois.size(); ++i) {
    const auto p = softmax(out.scores[i]);
    std::size_t best = 1;
    for (std::size_t c = 2; c < p.size(); ++c)
      if (p[c] > p[best]) best = c;
    const BoundingBox refined = clip_box(decode_deltas(out.deltas[i], rois[i]), stack.height(), stack.width());
    scored.push_back({refined, static_cast<int>(best), p[best]});
  }
  return scored;
}

struct RoiTargets {
  std::vector<BoundingBox> rois;
  std::vector<int> label;  // -1 ignored, 0 background, 1..K category
  std::vector<int> match;  // matched truth index for positives
};

RoiTargets label_rois(std::vector<BoundingBox> rois, const DetectionSample& s) {
  RoiTargets t;
  t.rois = std::move(rois);
  for (const auto& r : t.rois) {
    double best = 0;
    int bi = -1;
    for (std::size_t j = 0; j < s.boxes.size(); ++j) {
      const double v = iou(r, s.boxes[j]);
      if (v > best) best = v, bi = static_cast<int>(j);
    }
    if (best >= 0.5) {
      t.label.push_back(s.categories[static_cast<std::size_t>(bi)]);
      t.match.push_back(bi);
    } else {
      t.label.push_back(best < 0.3 ? 0 : -1);
      t.match.push_back(-1);
    }
  }
  return t;
}

RoiTargets training_rois(const Detector& model, const DetectionSample& s, std::uint64_t key) {
  const auto& cfg = model.config();
  std::vector<BoundingBox> rois;
  if (!s.boxes.empty()) rois = propose_rois(s.stack, ProposalMode::GroundTruthJitter, cfg.proposals, &s.boxes, key);
  const auto grid = propose_rois(s.stack, ProposalMode::Grid, cfg.proposals, nullptr, key);
  Rng rng(mix64(key ^ 0x9a1d));
  for (int i = 0; i < cfg.grid_samples && !grid.empty(); ++i)
    rois.push_back(grid[static_cast<std::size_t>(rng.uniform() * static_cast<double>(grid.size()))]);
  return label_rois(std::move(rois), s);
}

// Multi-task loss of one image; fills gradients when requested.
double image_loss(Detector& model, const DetectionSample& s, const RoiTargets& t, double scale, bool backprop) {
  const auto& cfg = model.config();
  const DetectorOutput out = model.forward(s.stack.pixels(), t.rois, backprop);
  const std::size_t n = t.rois.size();
  std::size_t n_cls = 0, n_reg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    n_cls += t.label[i] >= 0;
    n_reg += t.label[i] > 0;
  }
  std::vector<std::vector<double>> gs(n, std::vector<double>(static_cast<std::size_t>(cfg.num_categories + 1), 0.0));
  std::vector<BoxDeltas> gd(n, BoxDeltas{});
  double cls = 0, reg = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (t.label[i] < 0) continue;
    LossGrad lg = softmax_ce(out.scores[i], t.label[i]);
    cls += lg.loss / static_cast<double>(n_cls);
    for (std::size_t j = 0; j < lg.grad.size(); ++j)
      gs[i][j] = scale * cfg.loss_weights[0] * lg.grad[j] / static_cast<double>(n_cls);
    if (t.label[i] == 0) continue;
    const BoxDeltas target = encode_deltas(s.boxes[static_cast<std::size_t>(t.match[i])], t.rois[i]);
    LossGrad lr = smooth_l1(out.deltas[i], target);
    reg += lr.loss / static_cast<double>(n_reg);
    for (std::size_t j = 0; j < 4; ++j) gd[i][j] = scale * cfg.loss_weights[1] * lr.grad[j] / static_cast<double>(n_reg);
  }
  if (backprop) model.backward(gs, gd);
  return multitask_loss(cls, reg, std::nullopt, cfg.loss_weights);
}

}  // namespace

std::vector<Detection> detect(Detector& model, const SliceStack& stack, double score_threshold) {
  require(stack.channels() == model.config().in_channels, Errc::WrongChannels,
          "detector expects " + std::to_string(model.config().in_channels) + " channels, got " +
              std::to_string(stack.channels()));
  const auto rois = propose_rois(stack, ProposalMode::Grid, model.config().proposals, nullptr, 0);
  const auto scored = score_boxes(model, stack, rois);
  std::vector<BoundingBox> boxes;
  std::vector<double> scores;
  std::vector<int> cats;
  for (const auto& s : scored)
    if (s.score >= score_threshold && s.box.valid()) {
      boxes.push_back(s.box);
      scores.push_back(s.score);
      cats.push_back(s.category);
    }
  std::vector<Detection> out;
  for (std::size_t i : nms(boxes, scores, model.config().nms_threshold)) out.push_back({boxes[i], cats[i], scores[i]});
  return out;
}

std::vector<Detection> detect(Detector& model, const SliceStack& stack) {
  return detect(model, stack, model.config().score_threshold);
}

DetectionSample detection_sample(const LesionSlice& s, int num_categories) {
  DetectionSample d{s.subject_id, s.slice_index, s.stack, s.boxes, {}};
  for (SubRegion r : s.regions) d.categories.push_back(num_categories == kNumSubRegions ? static_cast<int>(r) + 1 : 1);
  return d;
}

DetectorEval evaluate_detector(Detector& model, const std::vector<DetectionSample>& samples) {
  DetectorEval e;
  if (samples.empty()) return e;
  long hits = 0, scored = 0;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const RoiTargets t = training_rois(model, s, mix64(0xe7a1 + i));
    e.loss += image_loss(model, s, t, 0.0, false) / static_cast<double>(samples.size());
    if (s.boxes.empty()) continue;
    ++scored;
    const auto dets = detect(model, s.stack, 0.0);
    double best = 0;
    if (!dets.empty())
      for (const auto& b : s.boxes) best = std::max(best, iou(dets.front().box, b));
    e.top_iou.push_back(best);
    hits += best >= 0.5;
  }
  e.hit_rate = scored ? static_cast<double>(hits) / static_cast<double>(scored) : 1.0;
  return e;
}

TrainHistory train_detector(Detector& model, const std::vector<DetectionSample>& train,
                            const std::vector<DetectionSample>& test, const TrainOptions& opt) {
  opt.validate();
  require(!train.empty(), Errc::EmptyDataset, "detector training set is empty");
  bool annotated = false;
  for (const auto& s : train) {
    require(s.stack.channels() == model.config().in_channels, Errc::WrongChannels, "training slice channel count");
    require(s.boxes.size() == s.categories.size(), Errc::ShapeMismatch, "boxes and categories differ in length");
    annotated = annotated || !s.boxes.empty();
  }
  require(annotated, Errc::EmptyDataset, "detector needs at least one annotated slice");

  Optimizer optim(opt.optimizer, model.parameters());
  BatchSampler sampler(train.size(), opt.seed);
  TrainHistory history;
  const double inv = 1.0 / opt.batch_size;
  for (long t = 1; t <= opt.iterations; ++t) {
    optim.zero_grad();
    double loss = 0;
    const auto batch = sampler.next(opt.batch_size);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const std::uint64_t draw = static_cast<std::uint64_t>(t - 1) * opt.batch_size + b;
      DetectionSample s = train[batch[b]];
      const AugmentDraw d = draw_augmentation(opt.augment, draw);
      const int h = s.stack.height(), w = s.stack.width();
      s.stack = apply_draw(s.stack, d);
      s.boxes = apply_geometric_to_boxes(s.boxes, d, h, w);
      const RoiTargets targets = training_rois(model, s, combine_keys(opt.seed, draw));
      loss += inv * image_loss(model, s, targets, inv, true);
    }
    check_loss(loss, t, "detector");
    optim.step();
    if (should_log(t, opt)) {
      const DetectorEval e = evaluate_detector(model, test.empty() ? train : test);
      HistoryRow row{t, loss, e.loss, e.hit_rate};
      history.add(row);
      if (opt.on_row) opt.on_row(row);
    }
  }
  return history;
}

SliceStack modality_subset(const SliceStack& stack, const std::set<Modality>& keep, bool fixed_arity) {
  require(!keep.empty(), Errc::EmptySubset, "modality subset is empty");
  const auto mods = stack.modalities();
  for (Modality m : keep)
    require(std::find(mods.begin(), mods.end(), m) != mods.end(), Errc::WrongChannels,
            "stack has no " + std::string(modality_name(m)) + " channel");
  if (fixed_arity) {
    Tensor px = stack.pixels();
    Provenance prov = stack.provenance();
    const std::size_t plane = static_cast<std::size_t>(stack.height()) * stack.width();
    for (std::size_t c = 0; c < mods.size(); ++c) {
      if (keep.count(mods[c])) continue;
      std::fill_n(px.storage().begin() + static_cast<std::ptrdiff_t>(c * plane), plane, 0.0);
      prov.zero_filled.push_back(mods[c]);
    }
    SliceStack out(std::move(px), stack.tags(), prov);
    return out;
  }
  std::vector<SliceStack> parts;
  for (std::size_t c = 0; c < mods.size(); ++c)
    if (keep.count(mods[c])) parts.push_back(stack.channel(static_cast<int>(c)));
  SliceStack out = stack_modalities(parts);
  out.provenance() = stack.provenance();
  return out;
}

}  // namespace neuropipe
