#include <omp.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "neuropipe/error.hpp"
#include "neuropipe/gradcheck.hpp"
#include "neuropipe/harness.hpp"
#include "neuropipe/ops.hpp"
#include "neuropipe/volume_io.hpp"

using namespace neuropipe;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string f3(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", v);
  return buf;
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2e", v);
  return buf;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("neuropipe_acceptance_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// ---------------------------------------------------------------- 1

Outcome gradients() {
  const auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  double worst_op = 0, worst_net = 0;
  const std::size_t n_ops = operator_gradient_checks(1).size();
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    const auto results = run_gradient_suite(seed);
    for (std::size_t i = 0; i < results.size(); ++i) {
      ok = ok && results[i].passed();
      (i < n_ops ? worst_op : worst_net) = std::max(i < n_ops ? worst_op : worst_net, results[i].max_rel_error);
    }
  }
  const double secs = seconds_since(t0);
  return {ok && secs < 120.0, "operators max rel err " + sci(worst_op) + " (eps 1e-3, tol 1e-4), networks " +
                                  sci(worst_net) + " (eps 1e-5, tol 1e-3), seeds 1-3, " + f3(secs) + " s"};
}

// ---------------------------------------------------------------- 2

Outcome l2pool_algebra() {
  Rng rng(77);
  double worst = 0;
  bool ok = true;
  for (int t = 0; t < 1000; ++t) {
    const int c = rng.integer(1, 3), h = rng.integer(1, 12), w = rng.integer(1, 12);
    Tensor x = Tensor::chw(c, h, w);
    for (double& v : x.storage()) v = rng.uniform(-5.0, 5.0);
    const PoolSpec spec{rng.integer(1, h), rng.integer(1, w), rng.integer(1, 3), rng.integer(1, 3)};
    const Tensor y = l2pool_forward(x, spec);

    Tensor neg = x;
    for (double& v : neg.storage()) v = -v;
    const Tensor yn = l2pool_forward(neg, spec);
    const double a = rng.uniform(0.01, 100.0);
    Tensor scaled = x;
    for (double& v : scaled.storage()) v *= a;
    const Tensor ys = l2pool_forward(scaled, spec);
    for (std::size_t i = 0; i < y.size(); ++i) {
      worst = std::max(worst, std::abs(yn[i] - y[i]));
      worst = std::max(worst, std::abs(ys[i] - a * y[i]) / std::max(1.0, a * y[i]));
    }
    const Tensor ident = l2pool_forward(x, {1, 1, 1, 1});
    for (std::size_t i = 0; i < x.size(); ++i) ok = ok && ident[i] == std::abs(x[i]);
  }
  return {ok && worst <= 1e-12, "1000 maps, worst deviation " + sci(worst) + ", 1x1 window equals |x| exactly"};
}

// ---------------------------------------------------------------- 3

Outcome dice_oracle() {
  Rng rng(303);
  bool ok = true;
  for (int t = 0; t < 100; ++t) {
    std::vector<std::uint8_t> a(256), b(256);
    const double pa = rng.uniform(), pb = rng.uniform();
    for (int i = 0; i < 256; ++i) {
      a[static_cast<std::size_t>(i)] = rng.uniform() < pa;
      b[static_cast<std::size_t>(i)] = rng.uniform() < pb;
    }
    long na = 0, nb = 0, both = 0;
    for (int r = 0; r < 16; ++r)
      for (int col = 0; col < 16; ++col) {
        const std::size_t i = static_cast<std::size_t>(16 * r + col);
        na += a[i];
        nb += b[i];
        both += a[i] & b[i];
      }
    const double expect = na + nb == 0 ? 1.0 : static_cast<double>(2 * both) / static_cast<double>(na + nb);
    ok = ok && dice(a, b) == expect;
  }
  const std::vector<std::uint8_t> empty(256, 0);
  std::vector<std::uint8_t> one = empty;
  one[5] = 1;
  const bool conventions = dice(empty, empty) == 1.0 && dice(one, empty) == 0.0 &&
                           pooled_dice({{Tensor::chw(1, 4, 4), Tensor::chw(1, 4, 4)}}) == 1.0;
  return {ok && conventions, std::string("100 random 16x16 pairs ") + (ok ? "exact" : "MISMATCH") +
                                 ", empty/empty = 1 " + (conventions ? "holds" : "FAILS")};
}

// ---------------------------------------------------------------- 4 and 10

struct ClassifierJob {
  TrainHistory history;
  double seconds = 0;
};

ClassifierJob classifier_job() {
  omp_set_num_threads(1);
  SyntheticSpec spec;
  spec.seed = 404;
  std::vector<ClassifierSample> data;
  for (int i = 0; i < 50; ++i)
    data.push_back(classifier_sample(generate_case(spec, static_cast<std::uint64_t>(i)), Modality::FLAIR, 32));
  ClassifierConfig cfg;
  cfg.input_side = 32;
  cfg.channels = {4, 8, 8, 16, 16, 16, 16};
  cfg.fc_width = 32;
  cfg.dropout = 0.0;
  cfg.seed = 4;
  Classifier model(cfg);
  TrainOptions opt;
  opt.iterations = 600;
  opt.batch_size = 10;
  opt.log_every = 100;
  opt.seed = 4;
  const auto t0 = std::chrono::steady_clock::now();
  ClassifierJob job;
  job.history = train_classifier(model, data, {}, opt);
  job.seconds = seconds_since(t0);
  return job;
}

ClassifierJob* first_run = nullptr;

Outcome classifier_overfit() {
  static ClassifierJob job = classifier_job();
  first_run = &job;
  long reached = -1;
  for (const auto& r : job.history.rows)
    if (r.accuracy >= 0.95) {
      reached = r.iteration;
      break;
    }
  const double final_acc = job.history.rows.back().accuracy;
  return {reached > 0 && job.seconds < 600.0,
          "50 cases, train accuracy first >= 0.95 at iteration " + (reached > 0 ? std::to_string(reached) : "never") +
              ", final " + f3(final_acc) + ", " + f3(job.seconds) + " s"};
}

Outcome determinism() {
  if (!first_run) classifier_overfit();
  const ClassifierJob again = classifier_job();
  const bool same = again.history == first_run->history;
  return {same, "two single-threaded runs of the classifier job: " +
                    std::string(same ? "bit-identical" : "DIFFERENT") + " histories (" +
                    std::to_string(again.history.rows.size()) + " rows)"};
}

// ---------------------------------------------------------------- 5, 6

SyntheticSpec slice_spec(std::uint64_t seed) {
  SyntheticSpec spec;
  spec.dims = {9, 64, 64};
  spec.radius = {{{2, 3}, {5, 11}, {5, 11}}};
  spec.center_fraction = {{{0.5, 0.5}, {0.3, 0.7}, {0.3, 0.7}}};
  spec.seed = seed;
  return spec;
}

Outcome detector_overfit() {
  SyntheticSpec spec = slice_spec(21);
  std::vector<DetectionSample> data;
  for (int i = 0; i < 20; ++i) {
    spec.force_class = i % 2 ? LesionClass::TumorLGG : LesionClass::TumorHGG;
    data.push_back(detection_sample(lesion_slice(generate_case(spec, static_cast<std::uint64_t>(i))), 1));
  }
  DetectorConfig c;
  c.backbone.channels = {8, 16, 16};
  c.backbone.pool_after = {true, true, false};
  c.spp_h = c.spp_w = 3;
  c.roi_feat_width = 48;
  c.global_channels = 8;
  c.global_grid = 2;
  c.fusion_width = 48;
  c.proposals.grid_scales = {12, 16, 20, 24, 28};
  c.proposals.grid_strides = {4, 4, 4, 4, 4};
  Detector d(c);
  TrainOptions opt;
  opt.iterations = 300;
  opt.batch_size = 2;
  opt.log_every = 300;
  opt.optimizer.learning_rate = 2e-3;
  const auto t0 = std::chrono::steady_clock::now();
  train_detector(d, data, {}, opt);
  const double secs = seconds_since(t0);
  const DetectorEval e = evaluate_detector(d, data);
  return {e.hit_rate >= 0.9 && secs < 600.0,
          "20 slices, top IoU >= 0.5 on " + f3(100.0 * e.hit_rate) + "% of slices, " + f3(secs) + " s"};
}

Outcome segmenter_overfit() {
  SyntheticSpec spec = slice_spec(31);
  std::vector<SegmentationSample> data;
  for (int i = 0; i < 10; ++i) {
    spec.force_class = i % 2 ? LesionClass::TumorLGG : LesionClass::TumorHGG;
    data.push_back(segmentation_sample(lesion_slice(generate_case(spec, static_cast<std::uint64_t>(i))), 1));
  }
  SegmenterConfig c;
  c.backbone.channels = {8, 16, 16};
  c.backbone.pool_after = {true, false, false};
  c.rpn_width = 16;
  c.box_width = 32;
  c.mask_width = 64;
  c.cls_width = 32;
  c.num_categories = 1;
  c.anchors.kmeans_k = 3;
  Segmenter s(c);
  TrainOptions opt;
  opt.iterations = 400;
  opt.batch_size = 2;
  opt.log_every = 400;
  opt.optimizer.learning_rate = 2e-3;
  const auto t0 = std::chrono::steady_clock::now();
  train_segmenter(s, data, {}, opt);
  const double secs = seconds_since(t0);
  const SegmenterEval e = evaluate_segmenter(s, data);
  return {e.mean_instance_dice >= 0.9 && secs < 900.0,
          "10 images, mean instance Dice " + f3(e.mean_instance_dice) + ", " + f3(secs) + " s"};
}

// ---------------------------------------------------------------- 7

Outcome ablation() {
  const fs::path dir = scratch("ablation");
  Config cfg = Config::parse(R"(
task = detect
synthetic.dims = 9,64,64
synthetic.cases = 32
synthetic.fractions = 0.75,0.25
synthetic.radius0 = 2,3
synthetic.radius1 = 5,11
synthetic.radius2 = 5,11
synthetic.center0 = 0.5,0.5
synthetic.center1 = 0.2,0.8
synthetic.center2 = 0.2,0.8
synthetic.lesion_contrast = 0,0,0,0.3,0,0
synthetic.force_class = TumorHGG
synthetic.seed = 7
detector.num_categories = 1
detector.backbone.channels = 8,16,16
detector.backbone.pool_after = 1,1,0
detector.spp = 3
detector.roi_width = 48
detector.global_channels = 8
detector.global_grid = 2
detector.fusion_width = 48
detector.grid_scales = 12,16,20,24,28
detector.grid_strides = 4,4,4,4,4
train.iterations = 300
train.batch_size = 2
optimizer.learning_rate = 0.002
)");
  cfg.set("output.dir", dir.string());
  ::unsetenv("NEUROPIPE_OUT");
  RunConfig rc = resolve_run_config(cfg);
  cfg.set("data.manifest", run_generate_data(rc).string());
  rc = resolve_run_config(cfg);
  const auto t0 = std::chrono::steady_clock::now();
  const AblationTable table = run_ablation(rc, table3_subsets());
  const double secs = seconds_since(t0);
  std::ostringstream os;
  table.write(os);
  std::printf("%s", os.str().c_str());
  double min_with = 1.0, max_without = 0.0;
  for (const auto& r : table.rows) {
    if (r.subset.count(Modality::FLAIR))
      min_with = std::min(min_with, r.dice_pooled);
    else
      max_without = std::max(max_without, r.dice_pooled);
  }
  const bool ok = table.rows.size() == 9 && min_with - max_without >= 0.1;
  return {ok, std::to_string(table.rows.size()) + " rows, FLAIR planted; worst pooled Dice with FLAIR " + f3(min_with) +
                  ", best without " + f3(max_without) + ", margin " + f3(min_with - max_without) + ", " + f3(secs) +
                  " s"};
}

// ---------------------------------------------------------------- 8

Outcome dual_path() {
  DetectorConfig c;
  c.backbone.channels = {8, 16, 16};
  c.backbone.pool_after = {true, true, false};
  c.global_channels = 8;
  c.seed = 808;
  Detector dual(c);
  for (auto* p : dual.global_parameters()) p->value.fill(0.0);
  Detector single = local_path_reduction(dual);
  const std::vector<BoundingBox> rois{{0, 0, 20, 20}, {10, 5, 50, 40}, {30, 30, 64, 64}};
  Rng rng(8);
  bool ok = !single.config().global_path;
  for (int i = 0; i < 10; ++i) {
    Tensor img = Tensor::chw(4, 64, 64);
    for (double& v : img.storage()) v = rng.uniform();
    const DetectorOutput a = dual.forward(img, rois), b = single.forward(img, rois);
    ok = ok && a.scores == b.scores && a.deltas == b.deltas;
  }
  return {ok, std::string("10 random inputs, scores and deltas ") + (ok ? "bit-identical" : "DIFFER")};
}

// ---------------------------------------------------------------- 9

Outcome io_round_trips() {
  const fs::path dir = scratch("io");
  std::vector<std::string> failed;
  Rng rng(909);
  VolumeImage v = VolumeImage::zeros({5, 6, 7}, Modality::T2, "rt");
  v.spacing = {1.0, 0.75, 2.5};
  for (double& x : v.voxels) x = rng.normal() * 100.0;
  for (auto [fmt, ext] : {std::pair{VolumeFormat::Nifti, ".nii"}, {VolumeFormat::MetaImage, ".mha"},
                          {VolumeFormat::Analyze, ".hdr"}}) {
    write_volume(v, dir / (std::string("v") + ext), fmt);
    if (!same_grid_and_values(v, read_volume(dir / (std::string("v") + ext)))) failed.push_back(ext);
  }
  const fs::path fixtures = fs::path(NEUROPIPE_SOURCE_DIR) / "tests" / "fixtures";
  for (const char* name : {"ramp_nibabel.nii", "ramp_sitk.mha", "ramp_nibabel.hdr"}) {
    const VolumeImage f = read_volume(fixtures / name);
    const fs::path copy = dir / (std::string("copy_") + name);
    write_volume(f, copy, *format_from_extension(copy));
    if (!same_grid_and_values(f, read_volume(copy))) failed.push_back(name);
  }

  std::vector<DetectionRecord> dets;
  std::vector<InstanceRecord> inst;
  for (int i = 0; i < 20; ++i) {
    const BoundingBox b{rng.uniform(0, 30), rng.uniform(0, 30), rng.uniform(31, 64), rng.uniform(31, 64)};
    dets.push_back({"case_" + std::to_string(i), i, i % 3, 1 + i % 4, rng.uniform(), b});
    Tensor m = Tensor::chw(1, 1 + rng.integer(0, 20), 1 + rng.integer(0, 20));
    for (double& x : m.storage()) x = rng.uniform() < 0.3 ? 1.0 : 0.0;
    inst.push_back({"case_" + std::to_string(i), i, i % 2, "edema", rng.uniform(), b, encode_rle(m)});
    if (decode_rle(inst.back().rle) != m) failed.push_back("rle");
  }
  write_detection_records(dets, dir / "d.csv");
  write_instance_records(inst, dir / "i.csv");
  if (read_detection_records(dir / "d.csv") != dets) failed.push_back("detections");
  if (read_instance_records(dir / "i.csv") != inst) failed.push_back("instances");
  std::string what;
  for (const auto& f : failed) what += " " + f;
  return {failed.empty(), failed.empty() ? "NIfTI, MetaImage, Analyze, fixtures, detection and instance records, RLE "
                                           "all read back equal"
                                         : "mismatch:" + what};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> only;
  app.add_option("--only", only, "criteria to run (default all)");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria{
      {"gradient suite", gradients},         {"l2-pool algebra", l2pool_algebra},
      {"dice oracle", dice_oracle},          {"classifier overfit", classifier_overfit},
      {"detector overfit", detector_overfit}, {"segmenter overfit", segmenter_overfit},
      {"modality ablation", ablation},        {"dual-path reduction", dual_path},
      {"i/o round trips", io_round_trips},    {"determinism", determinism},
  };
  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    std::printf("%s %2d %s: %s\n", o.pass ? "PASS" : "FAIL", id, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
    all = all && o.pass;
  }
  return all ? 0 : 1;
}
