#include "neuropipe/segmenter.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "neuropipe/error.hpp"
#include "neuropipe/metrics.hpp"

namespace neuropipe {

std::vector<AnchorShape> AnchorConfig::fixed_shapes() const {
  std::vector<AnchorShape> out;
  for (double s : scales)
    for (double a : aspects) out.emplace_back(s / std::sqrt(a), s * std::sqrt(a));
  return out;
}

int AnchorConfig::count() const {
  return use_kmeans ? kmeans_k : static_cast<int>(scales.size() * aspects.size());
}

namespace {

double shape_iou(const AnchorShape& a, const AnchorShape& b) {
  const double inter = std::min(a.first, b.first) * std::min(a.second, b.second);
  const double uni = a.first * a.second + b.first * b.second - inter;
  return uni > 0 ? inter / uni : 0.0;
}

}  // namespace

std::vector<AnchorShape> kmeans_anchor_shapes(const std::vector<BoundingBox>& boxes, int k, int iterations,
                                              std::uint64_t seed) {
  require(k >= 1, Errc::BadConfig, "k-means needs k >= 1");
  require(!boxes.empty(), Errc::EmptyDataset, "k-means needs at least one box");
  std::vector<AnchorShape> pts;
  for (const auto& b : boxes) {
    require(b.valid(), Errc::BadConfig, "k-means boxes must have positive size");
    pts.emplace_back(b.width(), b.height());
  }
  const std::size_t n = pts.size();
  Rng rng(seed);
  auto pick = [&](double total, const std::vector<double>& w) {
    double u = rng.uniform() * total;
    for (std::size_t i = 0; i < n; ++i) {
      if (u < w[i]) return i;
      u -= w[i];
    }
    return n - 1;
  };

  // k-means++ seeding
  std::vector<AnchorShape> cent{pts[static_cast<std::size_t>(rng.uniform() * static_cast<double>(n))]};
  std::vector<double> d2(n);
  while (static_cast<int>(cent.size()) < k) {
    double total = 0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = 1.0;
      for (const auto& c : cent) best = std::min(best, 1.0 - shape_iou(pts[i], c));
      d2[i] = best * best;
      total += d2[i];
    }
    if (total <= 0) {
      cent.push_back(pts[static_cast<std::size_t>(rng.uniform() * static_cast<double>(n))]);
    } else {
      cent.push_back(pts[pick(total, d2)]);
    }
  }

  std::vector<int> assign(n, -1);
  for (int it = 0; it < iterations; ++it) {
    bool changed = false;
    for (std::size_t i = 0; i < n; ++i) {
      int best = 0;
      double bd = 2.0;
      for (int c = 0; c < k; ++c) {
        const double d = 1.0 - shape_iou(pts[i], cent[static_cast<std::size_t>(c)]);
        if (d < bd) bd = d, best = c;
      }
      if (assign[i] != best) assign[i] = best, changed = true;
    }
    if (!changed) break;
    std::vector<AnchorShape> sum(static_cast<std::size_t>(k), {0.0, 0.0});
    std::vector<int> cnt(static_cast<std::size_t>(k), 0);
    for (std::size_t i = 0; i < n; ++i) {
      const auto c = static_cast<std::size_t>(assign[i]);
      sum[c].first += pts[i].first;
      sum[c].second += pts[i].second;
      ++cnt[c];
    }
    for (std::size_t c = 0; c < cent.size(); ++c)
      if (cnt[c] > 0) cent[c] = {sum[c].first / cnt[c], sum[c].second / cnt[c]};
  }
  std::sort(cent.begin(), cent.end(), [](const AnchorShape& a, const AnchorShape& b) {
    const double aa = a.first * a.second, ab = b.first * b.second;
    return aa != ab ? aa < ab : a < b;
  });
  return cent;
}

AnchorSet tile_anchors(const std::vector<AnchorShape>& shapes, int grid_h, int grid_w, int stride) {
  require(!shapes.empty(), Errc::BadConfig, "no anchor shapes");
  require(grid_h >= 1 && grid_w >= 1 && stride >= 1, Errc::BadConfig, "bad anchor grid");
  AnchorSet a{shapes, grid_h, grid_w, stride, {}};
  a.boxes.reserve(static_cast<std::size_t>(grid_h) * grid_w * shapes.size());
  for (int y = 0; y < grid_h; ++y)
    for (int x = 0; x < grid_w; ++x) {
      const double cx = (x + 0.5) * stride, cy = (y + 0.5) * stride;
      for (const auto& [w, h] : shapes) a.boxes.push_back({cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h});
    }
  return a;
}

AnchorSet generate_anchors(int grid_h, int grid_w, int stride, const AnchorConfig& cfg,
                           const std::vector<BoundingBox>* training_boxes) {
  if (cfg.use_kmeans && training_boxes && !training_boxes->empty())
    return tile_anchors(kmeans_anchor_shapes(*training_boxes, cfg.kmeans_k, cfg.kmeans_iterations, cfg.seed),
                        grid_h, grid_w, stride);
  return tile_anchors(cfg.fixed_shapes(), grid_h, grid_w, stride);
}

void SegmenterConfig::validate() const {
  require(in_channels >= 1 && in_channels <= 6, Errc::BadConfig, "segmenter input needs 1..6 channels");
  require(num_categories >= 1, Errc::BadConfig, "segmenter needs at least one category");
  backbone.validate();
  require(!anchors.scales.empty() && !anchors.aspects.empty(), Errc::BadConfig, "anchor scales/aspects empty");
  for (double v : anchors.scales) require(v > 0, Errc::BadConfig, "anchor scales must be > 0");
  for (double v : anchors.aspects) require(v > 0, Errc::BadConfig, "anchor aspects must be > 0");
  require(!anchors.use_kmeans || anchors.kmeans_k >= 1, Errc::BadConfig, "kmeans_k must be >= 1");
  require(rpn_width >= 1 && box_width >= 1 && mask_width >= 1 && cls_width >= 1, Errc::BadConfig,
          "segmenter widths must be >= 1");
  require(box_pool >= 1 && mask_pool >= 1 && cls_pool >= 1, Errc::BadConfig, "pool grids must be >= 1");
  require(mask_size >= 2, Errc::BadConfig, "mask_size must be >= 2");
  require(mask_size >= cls_pool, Errc::BadConfig, "mask_size must cover the instance pool grid");
  require(objectness_threshold >= 0 && objectness_threshold <= 1 && score_threshold >= 0 && score_threshold <= 1,
          Errc::BadConfig, "thresholds must lie in [0, 1]");
  require(pre_nms_top >= 1 && proposals >= 1 && rpn_samples >= 1, Errc::BadConfig, "proposal counts must be >= 1");
  require(jitter >= 0 && jitter_per_truth >= 0 && background >= 0, Errc::BadConfig, "bad jitter settings");
  for (double w : loss_weights) require(w >= 0, Errc::NegativeWeight, "loss weights must be >= 0");
}

SegmentationSample segmentation_sample(const LesionSlice& s, int num_categories) {
  SegmentationSample out{s.subject_id, s.slice_index, s.stack, s.boxes, s.masks, {}};
  for (SubRegion r : s.regions) out.categories.push_back(num_categories == kNumSubRegions ? static_cast<int>(r) + 1 : 1);
  return out;
}

struct Segmenter::Pooled {
  std::vector<RoiPoolResult> pools;
  Tensor rows;  // (n, C * grid * grid)
  int grid = 1;
};

struct Segmenter::Rpn {
  Tensor features, obj, reg;  // (C, h, w), (A, h, w), (4A, h, w)
};

Segmenter::Segmenter(SegmenterConfig cfg) : cfg_((cfg.validate(), cfg)) {
  Rng init(cfg_.seed);
  backbone_ = make_backbone(cfg_.backbone, cfg_.in_channels, init);
  const int c = cfg_.backbone.channels.back();
  const int a = cfg_.anchors.count();
  shapes_ = cfg_.anchors.use_kmeans ? std::vector<AnchorShape>(static_cast<std::size_t>(a), {16.0, 16.0})
                                    : cfg_.anchors.fixed_shapes();
  if (cfg_.anchors.use_kmeans) {
    // placeholder spread until fitted to data
    const auto fixed = cfg_.anchors.fixed_shapes();
    for (std::size_t i = 0; i < shapes_.size(); ++i) shapes_[i] = fixed[i % fixed.size()];
  }
  Rng rpn_init(mix64(cfg_.seed ^ 0x1a2b));
  rpn_trunk_.add<Conv2d>("rpn.conv", c, cfg_.rpn_width, 3, 1, 1, rpn_init);
  rpn_trunk_.add<Relu>();
  rpn_obj_.add<Conv2d>("rpn.objectness", cfg_.rpn_width, a, 1, 1, 0, rpn_init);
  rpn_reg_.add<Conv2d>("rpn.deltas", cfg_.rpn_width, 4 * a, 1, 1, 0, rpn_init);

  Rng head_init(mix64(cfg_.seed ^ 0x4ead));
  box_head_.add<Linear>("box.fc", c * cfg_.box_pool * cfg_.box_pool, cfg_.box_width, head_init);
  box_head_.add<Relu>();
  box_head_.add<Linear>("box.deltas", cfg_.box_width, 4, head_init);
  mask_head_.add<Linear>("mask.fc", c * cfg_.mask_pool * cfg_.mask_pool, cfg_.mask_width, head_init);
  mask_head_.add<Relu>();
  mask_head_.add<Linear>("mask.logits", cfg_.mask_width, cfg_.mask_size * cfg_.mask_size, head_init);
  cls_head_.add<Linear>("instance.fc", c * cfg_.cls_pool * cfg_.cls_pool, cfg_.cls_width, head_init);
  cls_head_.add<Relu>();
  cls_head_.add<Linear>("instance.scores", cfg_.cls_width, cfg_.num_categories + 1, head_init);
  // regression outputs start near the identity transform
  for (Parameter* p : {&dynamic_cast<Linear&>(box_head_.layer(2)).weight(),
                       &dynamic_cast<Conv2d&>(rpn_reg_.layer(0)).weight()})
    for (double& v : p->value.storage()) v *= 0.01;
}

void Segmenter::set_anchor_shapes(std::vector<AnchorShape> shapes) {
  require(static_cast<int>(shapes.size()) == cfg_.anchors.count(), Errc::BadConfig,
          "segmenter was built for " + std::to_string(cfg_.anchors.count()) + " anchor shapes");
  for (const auto& [w, h] : shapes) require(w > 0 && h > 0, Errc::BadConfig, "anchor shapes must be positive");
  shapes_ = std::move(shapes);
}

std::vector<std::vector<Parameter*>> Segmenter::stage_parameters() {
  auto rpn = rpn_trunk_.parameters();
  for (auto* p : rpn_obj_.parameters()) rpn.push_back(p);
  for (auto* p : rpn_reg_.parameters()) rpn.push_back(p);
  return {backbone_.parameters(), rpn, box_head_.parameters(), mask_head_.parameters(), cls_head_.parameters()};
}

std::vector<Parameter*> Segmenter::parameters() {
  std::vector<Parameter*> out;
  for (const auto& group : stage_parameters()) out.insert(out.end(), group.begin(), group.end());
  return out;
}

Segmenter::Rpn Segmenter::run_rpn(const Tensor& image, bool training) {
  require(image.rank() == 3 && image.dim(0) == cfg_.in_channels, Errc::WrongChannels,
          "segmenter expects " + std::to_string(cfg_.in_channels) + " channels, got " + shape_string(image.shape()));
  Rpn r;
  r.features = backbone_.forward(image, training);
  const Tensor hidden = rpn_trunk_.forward(r.features, training);
  r.obj = rpn_obj_.forward(hidden, training);
  r.reg = rpn_reg_.forward(hidden, training);
  return r;
}

namespace {

BoxDeltas anchor_deltas(const Tensor& reg, std::size_t index, int shapes, int grid_w) {
  const int a = static_cast<int>(index % static_cast<std::size_t>(shapes));
  const int cell = static_cast<int>(index / static_cast<std::size_t>(shapes));
  const int y = cell / grid_w, x = cell % grid_w;
  return {reg.at(4 * a, y, x), reg.at(4 * a + 1, y, x), reg.at(4 * a + 2, y, x), reg.at(4 * a + 3, y, x)};
}

double anchor_logit(const Tensor& obj, std::size_t index, int shapes, int grid_w) {
  const int a = static_cast<int>(index % static_cast<std::size_t>(shapes));
  const int cell = static_cast<int>(index / static_cast<std::size_t>(shapes));
  return obj.at(a, cell / grid_w, cell % grid_w);
}

double& anchor_ref(Tensor& t, std::size_t index, int shapes, int grid_w, int channel_offset, int per_shape) {
  const int a = static_cast<int>(index % static_cast<std::size_t>(shapes));
  const int cell = static_cast<int>(index / static_cast<std::size_t>(shapes));
  return t.at(per_shape * a + channel_offset, cell / grid_w, cell % grid_w);
}

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[static_cast<std::size_t>(rng.integer(0, static_cast<int>(i) - 1))]);
}

bool usable(const BoundingBox& b) { return b.valid() && b.width() >= 1.0 && b.height() >= 1.0; }

}  // namespace

std::vector<BoundingBox> Segmenter::stage1_boxes(const Rpn& r, const AnchorSet& anchors, int height, int width,
                                                 bool threshold) {
  const int a = static_cast<int>(shapes_.size());
  std::vector<std::size_t> idx;
  std::vector<double> score(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    score[i] = sigmoid(anchor_logit(r.obj, i, a, anchors.grid_w));
    if (!threshold || score[i] >= cfg_.objectness_threshold) idx.push_back(i);
  }
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return score[x] > score[y]; });
  if (idx.size() > static_cast<std::size_t>(cfg_.pre_nms_top)) idx.resize(static_cast<std::size_t>(cfg_.pre_nms_top));
  std::vector<BoundingBox> boxes;
  std::vector<double> scores;
  for (std::size_t i : idx) {
    const BoundingBox b =
        clip_box(decode_deltas(anchor_deltas(r.reg, i, a, anchors.grid_w), anchors.boxes[i]), height, width);
    if (!usable(b)) continue;
    boxes.push_back(b);
    scores.push_back(score[i]);
  }
  std::vector<BoundingBox> out;
  for (std::size_t i : nms(boxes, scores, cfg_.proposal_nms)) {
    if (static_cast<int>(out.size()) == cfg_.proposals) break;
    out.push_back(boxes[i]);
  }
  return out;
}

Segmenter::Pooled Segmenter::pool(const Tensor& features, const std::vector<BoundingBox>& boxes, int grid) const {
  Pooled p;
  p.grid = grid;
  const int c = features.dim(0);
  const std::size_t width = static_cast<std::size_t>(c) * grid * grid;
  p.rows = Tensor({static_cast<int>(boxes.size()), static_cast<int>(width)});
  const int stride = cfg_.backbone.stride();
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const CellRect cells = roi_cells(boxes[i], stride, features.dim(1), features.dim(2), grid, grid);
    p.pools.push_back(roi_spp_pool_cells(features, cells, grid, grid));
    std::copy(p.pools.back().values.storage().begin(), p.pools.back().values.storage().end(),
              p.rows.storage().begin() + static_cast<std::ptrdiff_t>(i * width));
  }
  return p;
}

void Segmenter::unpool(const Pooled& p, const Tensor& grad_rows, Tensor& grad_features) const {
  const int c = grad_features.dim(0);
  const std::size_t width = static_cast<std::size_t>(c) * p.grid * p.grid;
  for (std::size_t i = 0; i < p.pools.size(); ++i) {
    Tensor g({c, p.grid, p.grid});
    std::copy(grad_rows.storage().begin() + static_cast<std::ptrdiff_t>(i * width),
              grad_rows.storage().begin() + static_cast<std::ptrdiff_t>((i + 1) * width), g.storage().begin());
    roi_spp_pool_backward(p.pools[i], g, grad_features);
  }
}

// Multiplies each pooled cell by the mean mask probability of the matching
// floor-partitioned block of the m x m mask grid.
Tensor Segmenter::gate_rows(const Pooled& p, const Tensor& mask_logits, Tensor& gate) const {
  const int n = p.rows.dim(0), g = p.grid, m = cfg_.mask_size;
  const int c = p.rows.dim(1) / (g * g);
  gate = Tensor({n, g * g});
  Tensor out = p.rows;
  for (int i = 0; i < n; ++i) {
    const double* logits = mask_logits.data() + static_cast<std::size_t>(i) * m * m;
    for (int by = 0; by < g; ++by)
      for (int bx = 0; bx < g; ++bx) {
        const int y0 = bin_start(by, m, g), y1 = bin_start(by + 1, m, g);
        const int x0 = bin_start(bx, m, g), x1 = bin_start(bx + 1, m, g);
        double sum = 0;
        for (int y = y0; y < y1; ++y)
          for (int x = x0; x < x1; ++x) sum += sigmoid(logits[y * m + x]);
        gate[static_cast<std::size_t>(i) * g * g + by * g + bx] = sum / ((y1 - y0) * (x1 - x0));
      }
    for (int ch = 0; ch < c; ++ch)
      for (int b = 0; b < g * g; ++b)
        out[(static_cast<std::size_t>(i) * c + ch) * g * g + b] *= gate[static_cast<std::size_t>(i) * g * g + b];
  }
  return out;
}

CascadeOutput Segmenter::cascade_forward(const SliceStack& stack) {
  const Rpn r = run_rpn(stack.pixels(), false);
  const AnchorSet anchors = tile_anchors(shapes_, r.features.dim(1), r.features.dim(2), cfg_.backbone.stride());
  CascadeOutput out;
  const int a = static_cast<int>(shapes_.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) out.anchor_scores.push_back(anchor_logit(r.obj, i, a, anchors.grid_w));
  out.proposals = stage1_boxes(r, anchors, stack.height(), stack.width(), true);
  if (out.proposals.empty()) return out;

  const Pooled p2 = pool(r.features, out.proposals, cfg_.box_pool);
  const Tensor deltas = box_head_.forward(p2.rows, false);
  for (std::size_t i = 0; i < out.proposals.size(); ++i) {
    const BoxDeltas d{deltas[4 * i], deltas[4 * i + 1], deltas[4 * i + 2], deltas[4 * i + 3]};
    const BoundingBox b = clip_box(decode_deltas(d, out.proposals[i]), stack.height(), stack.width());
    out.refined.push_back(usable(b) ? b : out.proposals[i]);
  }

  const int m = cfg_.mask_size;
  const Pooled p3 = pool(r.features, out.refined, cfg_.mask_pool);
  const Tensor logits = mask_head_.forward(p3.rows, false);
  const Pooled p4 = pool(r.features, out.refined, cfg_.cls_pool);
  Tensor gate;
  const Tensor scores = cls_head_.forward(gate_rows(p4, logits, gate), false);
  const std::size_t k1 = static_cast<std::size_t>(cfg_.num_categories + 1);
  for (std::size_t i = 0; i < out.refined.size(); ++i) {
    Tensor ml({m, m});
    std::copy_n(logits.data() + i * m * m, m * m, ml.data());
    out.mask_logits.push_back(std::move(ml));
    out.instance_scores.emplace_back(scores.data() + i * k1, scores.data() + (i + 1) * k1);
  }
  return out;
}

SegmenterLoss Segmenter::loss(const SegmentationSample& s, std::uint64_t key, double grad_scale, CascadeRois* record,
                              const CascadeRois* replay) {
  require(s.boxes.size() == s.masks.size() && s.boxes.size() == s.categories.size(), Errc::ShapeMismatch,
          "boxes, masks and categories differ in length");
  const bool backprop = grad_scale != 0.0;
  const int H = s.stack.height(), W = s.stack.width();
  const Rpn r = run_rpn(s.stack.pixels(), backprop);
  const AnchorSet anchors = tile_anchors(shapes_, r.features.dim(1), r.features.dim(2), cfg_.backbone.stride());
  const int a = static_cast<int>(shapes_.size());
  const auto& w = cfg_.loss_weights;
  Rng rng(mix64(key ^ 0x5e9));
  SegmenterLoss L;

  // Stage 1: anchor labels
  std::vector<BoundingBox> clipped(anchors.size());
  std::vector<int> label(anchors.size(), -1), match(anchors.size(), -1);
  std::vector<double> best_for_truth(s.boxes.size(), 0.0);
  std::vector<std::vector<double>> ious(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    clipped[i] = clip_box(anchors.boxes[i], H, W);
    double best = 0;
    for (std::size_t j = 0; j < s.boxes.size(); ++j) {
      const double v = usable(clipped[i]) ? iou(clipped[i], s.boxes[j]) : 0.0;
      ious[i].push_back(v);
      best_for_truth[j] = std::max(best_for_truth[j], v);
      if (v > best) best = v, match[i] = static_cast<int>(j);
    }
    if (!usable(clipped[i])) continue;
    label[i] = best >= 0.5 ? 1 : (best < 0.3 ? 0 : -1);
  }
  for (std::size_t i = 0; i < anchors.size(); ++i)
    for (std::size_t j = 0; j < s.boxes.size(); ++j)
      if (best_for_truth[j] > 0 && ious[i][j] == best_for_truth[j]) label[i] = 1, match[i] = static_cast<int>(j);
  std::vector<std::size_t> pos, neg;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    if (label[i] == 1) pos.push_back(i);
    if (label[i] == 0) neg.push_back(i);
  }
  shuffle(pos, rng);
  shuffle(neg, rng);
  pos.resize(std::min(pos.size(), static_cast<std::size_t>(cfg_.rpn_samples / 2 > 0 ? cfg_.rpn_samples / 2 : 1)));
  neg.resize(std::min(neg.size(), static_cast<std::size_t>(cfg_.rpn_samples) - std::min(pos.size(), static_cast<std::size_t>(cfg_.rpn_samples))));
  std::vector<std::size_t> sampled = pos;
  sampled.insert(sampled.end(), neg.begin(), neg.end());
  Tensor g_obj(r.obj.shape()), g_reg(r.reg.shape());
  if (!sampled.empty()) {
    std::vector<double> logits, targets;
    for (std::size_t i : sampled) {
      logits.push_back(anchor_logit(r.obj, i, a, anchors.grid_w));
      targets.push_back(label[i] == 1 ? 1.0 : 0.0);
    }
    const LossGrad lg = sigmoid_bce(logits, targets);
    L.objectness = lg.loss;
    for (std::size_t q = 0; q < sampled.size(); ++q)
      anchor_ref(g_obj, sampled[q], a, anchors.grid_w, 0, 1) += grad_scale * w[0] * lg.grad[q];
  }
  for (std::size_t i : pos) {
    const BoxDeltas target = encode_deltas(s.boxes[static_cast<std::size_t>(match[i])], anchors.boxes[i]);
    const LossGrad lr = smooth_l1(anchor_deltas(r.reg, i, a, anchors.grid_w), target);
    const double inv = 1.0 / static_cast<double>(pos.size());
    L.anchor_reg += lr.loss * inv;
    for (int j = 0; j < 4; ++j) anchor_ref(g_reg, i, a, anchors.grid_w, j, 4) += grad_scale * w[1] * lr.grad[j] * inv;
  }

  // Stage 2 ROIs: detached stage-1 boxes, jittered truth and background boxes
  std::vector<BoundingBox> rois = replay ? replay->stage2 : stage1_boxes(r, anchors, H, W, false);
  for (const auto& b : replay ? std::vector<BoundingBox>{} : s.boxes) {
    rois.push_back(b);
    for (int q = 0; q < cfg_.jitter_per_truth; ++q) {
      const double jw = cfg_.jitter * b.width(), jh = cfg_.jitter * b.height();
      const BoundingBox j = clip_box({b.x_min + rng.uniform(-jw, jw), b.y_min + rng.uniform(-jh, jh),
                                      b.x_max + rng.uniform(-jw, jw), b.y_max + rng.uniform(-jh, jh)},
                                     H, W);
      if (usable(j)) rois.push_back(j);
    }
  }
  for (int q = 0, tries = 0; !replay && q < cfg_.background && tries < 50 * (cfg_.background + 1); ++tries) {
    const double side = rng.uniform(8.0, std::max(8.0, 0.5 * std::min(H, W)));
    const double x0 = rng.uniform(0.0, std::max(0.0, W - side)), y0 = rng.uniform(0.0, std::max(0.0, H - side));
    const BoundingBox b = clip_box({x0, y0, x0 + side, y0 + side}, H, W);
    bool clear = usable(b);
    for (const auto& t : s.boxes) clear = clear && iou(b, t) < 0.3;
    if (clear) rois.push_back(b), ++q;
  }
  if (rois.empty()) rois.push_back({0.0, 0.0, static_cast<double>(W), static_cast<double>(H)});
  auto best_match = [&](const BoundingBox& b) {
    double best = 0;
    int bi = -1;
    for (std::size_t j = 0; j < s.boxes.size(); ++j) {
      const double v = iou(b, s.boxes[j]);
      if (v > best) best = v, bi = static_cast<int>(j);
    }
    return std::pair{best, bi};
  };

  const std::size_t n = rois.size();
  const Pooled p2 = pool(r.features, rois, cfg_.box_pool);
  const Tensor deltas = box_head_.forward(p2.rows, backprop);
  Tensor g_deltas(deltas.shape());
  std::vector<BoundingBox> refined(n);
  std::vector<std::size_t> reg_pos;
  for (std::size_t i = 0; i < n; ++i) {
    const BoxDeltas d{deltas[4 * i], deltas[4 * i + 1], deltas[4 * i + 2], deltas[4 * i + 3]};
    const BoundingBox b = clip_box(decode_deltas(d, rois[i]), H, W);
    refined[i] = replay ? replay->stage3.at(i) : (usable(b) ? b : rois[i]);
    if (best_match(rois[i]).first >= 0.5) reg_pos.push_back(i);
  }
  for (std::size_t i : reg_pos) {
    const BoxDeltas d{deltas[4 * i], deltas[4 * i + 1], deltas[4 * i + 2], deltas[4 * i + 3]};
    const auto [v, j] = best_match(rois[i]);
    const LossGrad lr = smooth_l1(d, encode_deltas(s.boxes[static_cast<std::size_t>(j)], rois[i]));
    const double inv = 1.0 / static_cast<double>(reg_pos.size());
    L.box_reg += lr.loss * inv;
    for (std::size_t q = 0; q < 4; ++q) g_deltas[4 * i + q] = grad_scale * w[1] * lr.grad[q] * inv;
  }

  if (record) *record = {rois, refined};

  // Stages 3 and 4 on the refined boxes
  const int m = cfg_.mask_size;
  const std::size_t mm = static_cast<std::size_t>(m) * m;
  const Pooled p3 = pool(r.features, refined, cfg_.mask_pool);
  const Tensor logits = mask_head_.forward(p3.rows, backprop);
  const Pooled p4 = pool(r.features, refined, cfg_.cls_pool);
  Tensor gate;
  const Tensor gated = gate_rows(p4, logits, gate);
  const Tensor scores = cls_head_.forward(gated, backprop);
  Tensor g_logits(logits.shape()), g_scores(scores.shape());
  const std::size_t k1 = static_cast<std::size_t>(cfg_.num_categories + 1);
  std::vector<int> cls(n);
  std::vector<int> owner(n);
  std::size_t n_lab = 0, n_mask = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto [v, j] = best_match(refined[i]);
    owner[i] = j;
    cls[i] = v >= 0.5 ? s.categories[static_cast<std::size_t>(j)] : (v < 0.3 ? 0 : -1);
    n_lab += cls[i] >= 0;
    n_mask += cls[i] > 0;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (cls[i] < 0) continue;
    const LossGrad lg = softmax_ce(std::span<const double>(scores.data() + i * k1, k1), cls[i]);
    L.instance += lg.loss / static_cast<double>(n_lab);
    for (std::size_t q = 0; q < k1; ++q) g_scores[i * k1 + q] = grad_scale * w[0] * lg.grad[q] / static_cast<double>(n_lab);
    if (cls[i] == 0) continue;
    const Tensor target = crop_mask(s.masks[static_cast<std::size_t>(owner[i])], refined[i], m);
    const LossGrad lm = sigmoid_bce(std::span<const double>(logits.data() + i * mm, mm), target.storage());
    L.mask += lm.loss / static_cast<double>(n_mask);
    for (std::size_t q = 0; q < mm; ++q) g_logits[i * mm + q] = grad_scale * w[2] * lm.grad[q] / static_cast<double>(n_mask);
  }
  L.total = multitask_loss(L.objectness + L.instance, L.anchor_reg + L.box_reg, L.mask, w);
  if (!backprop) return L;

  Tensor g_features(r.features.shape());
  const Tensor g_gated = cls_head_.backward(g_scores);
  {
    const int g = cfg_.cls_pool, c = g_gated.dim(1) / (g * g);
    Tensor g_rows4 = g_gated;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> g_gate(static_cast<std::size_t>(g * g), 0.0);
      for (int ch = 0; ch < c; ++ch)
        for (int b = 0; b < g * g; ++b) {
          const std::size_t at = (i * c + ch) * g * g + b;
          g_gate[b] += g_gated[at] * p4.rows[at];
          g_rows4[at] = g_gated[at] * gate[i * g * g + b];
        }
      for (int by = 0; by < g; ++by)
        for (int bx = 0; bx < g; ++bx) {
          const int y0 = bin_start(by, m, g), y1 = bin_start(by + 1, m, g);
          const int x0 = bin_start(bx, m, g), x1 = bin_start(bx + 1, m, g);
          const double share = g_gate[by * g + bx] / ((y1 - y0) * (x1 - x0));
          for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) {
              const double p = sigmoid(logits[i * mm + y * m + x]);
              g_logits[i * mm + y * m + x] += share * p * (1 - p);
            }
        }
    }
    unpool(p4, g_rows4, g_features);
  }
  unpool(p3, mask_head_.backward(g_logits), g_features);
  unpool(p2, box_head_.backward(g_deltas), g_features);
  Tensor g_hidden = rpn_obj_.backward(g_obj);
  const Tensor g_hidden_reg = rpn_reg_.backward(g_reg);
  for (std::size_t i = 0; i < g_hidden.size(); ++i) g_hidden[i] += g_hidden_reg[i];
  const Tensor g_trunk = rpn_trunk_.backward(g_hidden);
  for (std::size_t i = 0; i < g_features.size(); ++i) g_features[i] += g_trunk[i];
  backbone_.backward(g_features);
  return L;
}

namespace {

double sample_clamped(const double* grid, int rows, int cols, double y, double x) {
  y = std::clamp(y, 0.0, static_cast<double>(rows - 1));
  x = std::clamp(x, 0.0, static_cast<double>(cols - 1));
  const int y0 = static_cast<int>(std::floor(y)), x0 = static_cast<int>(std::floor(x));
  const int y1 = std::min(y0 + 1, rows - 1), x1 = std::min(x0 + 1, cols - 1);
  const double fy = y - y0, fx = x - x0;
  return (1 - fy) * ((1 - fx) * grid[y0 * cols + x0] + fx * grid[y0 * cols + x1]) +
         fy * ((1 - fx) * grid[y1 * cols + x0] + fx * grid[y1 * cols + x1]);
}

}  // namespace

Tensor paste_mask(const Tensor& probs, const BoundingBox& box, int height, int width) {
  const int m = static_cast<int>(std::lround(std::sqrt(static_cast<double>(probs.size()))));
  require(m >= 1 && static_cast<std::size_t>(m) * m == probs.size(), Errc::ShapeMismatch, "mask grid must be square");
  Tensor out = Tensor::chw(1, height, width);
  if (!box.valid()) return out;
  const int r0 = std::max(0, static_cast<int>(std::floor(box.y_min)));
  const int r1 = std::min(height, static_cast<int>(std::ceil(box.y_max)));
  const int c0 = std::max(0, static_cast<int>(std::floor(box.x_min)));
  const int c1 = std::min(width, static_cast<int>(std::ceil(box.x_max)));
  for (int y = r0; y < r1; ++y) {
    const double cy = y + 0.5;
    if (cy < box.y_min || cy > box.y_max) continue;
    const double v = (cy - box.y_min) / box.height() * m - 0.5;
    for (int x = c0; x < c1; ++x) {
      const double cx = x + 0.5;
      if (cx < box.x_min || cx > box.x_max) continue;
      const double u = (cx - box.x_min) / box.width() * m - 0.5;
      out.at(0, y, x) = sample_clamped(probs.data(), m, m, v, u) > 0.5 ? 1.0 : 0.0;
    }
  }
  return out;
}

Tensor crop_mask(const Tensor& mask, const BoundingBox& box, int m) {
  require(m >= 1, Errc::BadConfig, "mask size must be >= 1");
  const int h = mask.dim(mask.rank() - 2), w = mask.dim(mask.rank() - 1);
  Tensor out({m, m});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < m; ++j) {
      const double y = box.y_min + (i + 0.5) * box.height() / m - 0.5;
      const double x = box.x_min + (j + 0.5) * box.width() / m - 0.5;
      const bool inside = y > -0.5 && y < h - 0.5 && x > -0.5 && x < w - 0.5;
      out[static_cast<std::size_t>(i) * m + j] = inside && sample_clamped(mask.data(), h, w, y, x) > 0.5 ? 1.0 : 0.0;
    }
  return out;
}

std::vector<InstanceMask> resolve_overlaps(std::vector<InstanceMask> instances) {
  std::stable_sort(instances.begin(), instances.end(),
                   [](const InstanceMask& a, const InstanceMask& b) { return a.score > b.score; });
  std::vector<InstanceMask> out;
  Tensor taken;
  for (auto& inst : instances) {
    if (taken.empty()) taken = Tensor(inst.mask.shape());
    require(inst.mask.shape() == taken.shape(), Errc::ShapeMismatch, "instance masks differ in size");
    for (std::size_t i = 0; i < inst.mask.size(); ++i) {
      if (inst.mask[i] > 0.5 && taken[i] > 0.5) inst.mask[i] = 0.0;
      if (inst.mask[i] > 0.5) taken[i] = 1.0;
    }
    const auto box = tight_box(inst.mask);
    if (!box) continue;
    inst.box = *box;
    out.push_back(std::move(inst));
  }
  return out;
}

std::vector<InstanceMask> segment_instances(Segmenter& model, const SliceStack& stack) {
  const auto& cfg = model.config();
  const CascadeOutput c = model.cascade_forward(stack);
  std::vector<BoundingBox> boxes;
  std::vector<double> scores;
  std::vector<int> cats;
  std::vector<std::size_t> source;
  for (std::size_t i = 0; i < c.refined.size(); ++i) {
    const auto p = softmax(c.instance_scores[i]);
    std::size_t best = 1;
    for (std::size_t k = 2; k < p.size(); ++k)
      if (p[k] > p[best]) best = k;
    if (p[best] < cfg.score_threshold) continue;
    boxes.push_back(c.refined[i]);
    scores.push_back(p[best]);
    cats.push_back(static_cast<int>(best));
    source.push_back(i);
  }
  std::vector<InstanceMask> found;
  for (std::size_t q : nms(boxes, scores, cfg.nms_threshold)) {
    Tensor probs = c.mask_logits[source[q]];
    for (auto& v : probs.storage()) v = sigmoid(v);
    InstanceMask inst;
    inst.mask = paste_mask(probs, boxes[q], stack.height(), stack.width());
    inst.category = cats[q];
    inst.region = cfg.num_categories == kNumSubRegions ? static_cast<SubRegion>(cats[q] - 1) : SubRegion::TumorCore;
    inst.score = scores[q];
    inst.box = boxes[q];
    found.push_back(std::move(inst));
  }
  return resolve_overlaps(std::move(found));
}

SegmenterEval evaluate_segmenter(Segmenter& model, const std::vector<SegmentationSample>& samples) {
  SegmenterEval e;
  if (samples.empty()) return e;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    e.loss += model.loss(s, mix64(0xe7a1 + i), 0.0).total / static_cast<double>(samples.size());
    const auto pred = segment_instances(model, s.stack);
    Tensor pu = Tensor::chw(1, s.stack.height(), s.stack.width()), tu = pu;
    for (const auto& p : pred)
      for (std::size_t q = 0; q < pu.size(); ++q) pu[q] = std::max(pu[q], p.mask[q]);
    for (const auto& t : s.masks) {
      double best = 0;
      for (const auto& p : pred) best = std::max(best, dice(p.mask, t));
      e.instance_dice.push_back(best);
      for (std::size_t q = 0; q < tu.size(); ++q) tu[q] = std::max(tu[q], t[q] > 0.5 ? 1.0 : 0.0);
    }
    e.union_pairs.emplace_back(std::move(pu), std::move(tu));
  }
  if (!e.instance_dice.empty())
    e.mean_instance_dice = std::accumulate(e.instance_dice.begin(), e.instance_dice.end(), 0.0) /
                           static_cast<double>(e.instance_dice.size());
  else
    e.mean_instance_dice = 1.0;
  return e;
}

TrainHistory train_segmenter(Segmenter& model, const std::vector<SegmentationSample>& train,
                             const std::vector<SegmentationSample>& test, const TrainOptions& opt) {
  opt.validate();
  require(!train.empty(), Errc::EmptyDataset, "segmenter training set is empty");
  std::vector<BoundingBox> all_boxes;
  for (const auto& s : train) {
    require(s.stack.channels() == model.config().in_channels, Errc::WrongChannels, "training slice channel count");
    require(s.boxes.size() == s.masks.size() && s.boxes.size() == s.categories.size(), Errc::ShapeMismatch,
            "boxes, masks and categories differ in length");
    all_boxes.insert(all_boxes.end(), s.boxes.begin(), s.boxes.end());
  }
  require(!all_boxes.empty(), Errc::EmptyDataset, "segmenter needs at least one annotated slice");
  const auto& ac = model.config().anchors;
  if (ac.use_kmeans) model.set_anchor_shapes(kmeans_anchor_shapes(all_boxes, ac.kmeans_k, ac.kmeans_iterations, ac.seed));

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
      SegmentationSample s = train[batch[b]];
      const AugmentDraw d = draw_augmentation(opt.augment, draw);
      const int h = s.stack.height(), w = s.stack.width();
      s.stack = apply_draw(s.stack, d);
      for (auto& m : s.masks) m = apply_geometric_to_mask(m, d);
      s.boxes = apply_geometric_to_boxes(s.boxes, d, h, w);
      loss += inv * model.loss(s, combine_keys(opt.seed, draw), inv).total;
    }
    check_loss(loss, t, "segmenter");
    optim.step();
    if (should_log(t, opt)) {
      const SegmenterEval e = evaluate_segmenter(model, test.empty() ? train : test);
      HistoryRow row{t, loss, e.loss, e.mean_instance_dice};
      history.add(row);
      if (opt.on_row) opt.on_row(row);
    }
  }
  return history;
}

std::string encode_rle(const Tensor& mask) {
  require(mask.rank() >= 2, Errc::ShapeMismatch, "mask must be 2-D");
  const int h = mask.dim(mask.rank() - 2), w = mask.dim(mask.rank() - 1);
  std::ostringstream os;
  os << h << 'x' << w << ':';
  bool cur = false;
  long run = 0;
  bool first = true;
  auto emit = [&] {
    os << (first ? "" : " ") << run;
    first = false;
  };
  for (std::size_t i = 0; i < mask.size(); ++i) {
    const bool v = mask[i] > 0.5;
    if (v != cur) {
      emit();
      cur = v;
      run = 0;
    }
    ++run;
  }
  emit();
  return os.str();
}

Tensor decode_rle(const std::string& text) {
  const auto colon = text.find(':');
  const auto x = text.find('x');
  require(colon != std::string::npos && x != std::string::npos && x < colon, Errc::ParseError,
          "run-length mask must look like HxW:runs, got '" + text + "'");
  int h = 0, w = 0;
  try {
    std::size_t used = 0;
    h = std::stoi(text.substr(0, x), &used);
    require(used == x, Errc::ParseError, "bad mask height");
    w = std::stoi(text.substr(x + 1, colon - x - 1), &used);
    require(used == colon - x - 1, Errc::ParseError, "bad mask width");
  } catch (const std::logic_error&) {
    fail(Errc::ParseError, "bad run-length mask size in '" + text + "'");
  }
  require(h >= 1 && w >= 1, Errc::ParseError, "run-length mask size must be positive");
  Tensor out = Tensor::chw(1, h, w);
  std::istringstream is(text.substr(colon + 1));
  std::string tok;
  std::size_t pos = 0;
  bool value = false;
  while (is >> tok) {
    require(tok.find_first_not_of("0123456789") == std::string::npos, Errc::ParseError, "bad run '" + tok + "'");
    const std::size_t run = std::stoul(tok);
    require(pos + run <= out.size(), Errc::ParseError, "runs exceed the mask size");
    for (std::size_t i = 0; i < run; ++i) out[pos + i] = value ? 1.0 : 0.0;
    pos += run;
    value = !value;
  }
  require(pos == out.size(), Errc::ParseError, "runs do not cover the mask");
  return out;
}

}  // namespace neuropipe
