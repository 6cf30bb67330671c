#include "neuropipe/harness.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>

#include "neuropipe/error.hpp"

namespace neuropipe {

namespace fs = std::filesystem;

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(trim(cur));
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    if constexpr (std::is_same_v<T, std::string>)
      out += v[i];
    else if constexpr (std::is_floating_point_v<T>)
      out += fmt(v[i]);
    else
      out += std::to_string(v[i]);
  }
  return out;
}

double parse_real(const std::string& s, const std::string& what) {
  const char* b = s.c_str();
  char* e = nullptr;
  errno = 0;
  const double v = std::strtod(b, &e);
  require(!s.empty() && e == b + s.size() && errno == 0, Errc::ParseError, "bad number '" + s + "' for " + what);
  return v;
}

long parse_long(const std::string& s, const std::string& what) {
  long v = 0;
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  require(!s.empty() && ec == std::errc() && p == s.data() + s.size(), Errc::ParseError,
          "bad integer '" + s + "' for " + what);
  return v;
}

}  // namespace

// ---------------------------------------------------------------- Config

Config Config::parse(std::string_view text, const std::string& origin) {
  Config c;
  std::istringstream is{std::string(text)};
  std::string line;
  int n = 0;
  while (std::getline(is, line)) {
    ++n;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string t = trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    const std::string where = origin + ":" + std::to_string(n);
    require(eq != std::string::npos, Errc::ParseError, where + ": expected 'key = value'");
    const std::string key = trim(std::string_view(t).substr(0, eq));
    require(!key.empty() && key.find_first_of(" \t") == std::string::npos, Errc::ParseError,
            where + ": bad key '" + key + "'");
    require(!c.has(key), Errc::ParseError, where + ": duplicate key '" + key + "'");
    c.entries_[key] = trim(std::string_view(t).substr(eq + 1));
  }
  return c;
}

Config Config::load(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), Errc::IoFailure, "cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void Config::set(const std::string& key, const std::string& value) {
  require(!key.empty(), Errc::ParseError, "empty config key");
  entries_[key] = value;
}

void Config::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  require(eq != std::string::npos, Errc::ParseError, "override must look like key=value: '" + assignment + "'");
  set(trim(std::string_view(assignment).substr(0, eq)), trim(std::string_view(assignment).substr(eq + 1)));
}

const std::string* Config::find(const std::string& key) const {
  used_.insert(key);
  const auto it = entries_.find(key);
  return it == entries_.end() ? nullptr : &it->second;
}

std::string Config::str(const std::string& key, const std::string& fallback) const {
  const auto* v = find(key);
  return v ? *v : fallback;
}

int Config::integer(const std::string& key, int fallback) const {
  const auto* v = find(key);
  return v ? static_cast<int>(parse_long(*v, key)) : fallback;
}

double Config::real(const std::string& key, double fallback) const {
  const auto* v = find(key);
  return v ? parse_real(*v, key) : fallback;
}

bool Config::flag(const std::string& key, bool fallback) const {
  const auto* v = find(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes") return true;
  if (*v == "false" || *v == "0" || *v == "no") return false;
  fail(Errc::ParseError, "bad boolean '" + *v + "' for " + key);
}

std::vector<int> Config::integers(const std::string& key, const std::vector<int>& fallback) const {
  const auto* v = find(key);
  if (!v) return fallback;
  std::vector<int> out;
  for (const auto& s : split(*v, ',')) out.push_back(static_cast<int>(parse_long(s, key)));
  return out;
}

std::vector<double> Config::reals(const std::string& key, const std::vector<double>& fallback) const {
  const auto* v = find(key);
  if (!v) return fallback;
  std::vector<double> out;
  for (const auto& s : split(*v, ',')) out.push_back(parse_real(s, key));
  return out;
}

std::vector<std::string> Config::strings(const std::string& key, const std::vector<std::string>& fallback) const {
  const auto* v = find(key);
  return v ? split(*v, ',') : fallback;
}

void Config::check_all_used() const {
  std::string unknown;
  for (const auto& [k, v] : entries_)
    if (!used_.count(k)) unknown += (unknown.empty() ? "" : ", ") + k;
  require(unknown.empty(), Errc::BadConfig, "unknown config keys: " + unknown);
}

std::string Config::text() const {
  std::string out;
  for (const auto& [k, v] : entries_) out += k + " = " + v + "\n";
  return out;
}

// ---------------------------------------------------------------- RunConfig

std::string_view task_name(Task t) {
  switch (t) {
    case Task::Classify: return "classify";
    case Task::Detect: return "detect";
    case Task::Segment: return "segment";
  }
  return "?";
}

void RunConfig::validate() const {
  require(train.iterations >= 1, Errc::BadConfig, "train.iterations must be >= 1");
  train.validate();
  require(!modalities.empty(), Errc::BadConfig, "data.modalities is empty");
  switch (task) {
    case Task::Classify: classifier.validate(); break;
    case Task::Detect: detector.validate(); break;
    case Task::Segment: segmenter.validate(); break;
  }
  synthetic.validate();
  require(synthetic_cases >= 1, Errc::BadConfig, "synthetic.cases must be >= 1");
}

namespace {

Interval interval(const Config& c, const std::string& key, Interval fallback) {
  const auto v = c.reals(key, {fallback.lo, fallback.hi});
  require(v.size() == 2, Errc::BadConfig, key + " needs two values");
  return {v[0], v[1]};
}

template <std::size_t N>
std::array<int, N> int_array(const Config& c, const std::string& key, const std::array<int, N>& fallback) {
  const auto v = c.integers(key, std::vector<int>(fallback.begin(), fallback.end()));
  require(v.size() == N, Errc::BadConfig, key + " needs " + std::to_string(N) + " values");
  std::array<int, N> out{};
  std::copy(v.begin(), v.end(), out.begin());
  return out;
}

template <std::size_t N>
std::array<double, N> real_array(const Config& c, const std::string& key, const std::array<double, N>& fallback) {
  const auto v = c.reals(key, std::vector<double>(fallback.begin(), fallback.end()));
  require(v.size() == N, Errc::BadConfig, key + " needs " + std::to_string(N) + " values");
  std::array<double, N> out{};
  std::copy(v.begin(), v.end(), out.begin());
  return out;
}

Modality modality_key(const std::string& s, const std::string& key) {
  const auto m = parse_modality(s);
  require(m.has_value(), Errc::BadConfig, "unknown modality '" + s + "' in " + key);
  return *m;
}

std::vector<bool> bools(const Config& c, const std::string& key, const std::vector<bool>& fallback) {
  std::vector<int> f(fallback.begin(), fallback.end());
  std::vector<bool> out;
  for (int v : c.integers(key, f)) out.push_back(v != 0);
  return out;
}

BackboneSpec backbone(const Config& c, const std::string& prefix, const BackboneSpec& fallback) {
  BackboneSpec b;
  b.channels = c.integers(prefix + ".channels", fallback.channels);
  b.pool_after = bools(c, prefix + ".pool_after", fallback.pool_after);
  return b;
}

std::string head_name(ClassifierHead h) {
  switch (h) {
    case ClassifierHead::Margin: return "margin";
    case ClassifierHead::Softmax: return "softmax";
    case ClassifierHead::SvmPosthoc: return "svm-posthoc";
  }
  return "?";
}

}  // namespace

RunConfig resolve_run_config(const Config& c) {
  RunConfig rc;
  const std::string task = c.str("task", "classify");
  if (task == "classify") rc.task = Task::Classify;
  else if (task == "detect") rc.task = Task::Detect;
  else if (task == "segment") rc.task = Task::Segment;
  else fail(Errc::BadConfig, "task must be classify, detect or segment, got '" + task + "'");

  rc.manifest = c.str("data.manifest", "");
  rc.train_split = c.str("data.train_split", rc.train_split);
  rc.eval_split = c.str("data.eval_split", rc.eval_split);
  std::vector<std::string> mods;
  for (Modality m : rc.modalities) mods.emplace_back(modality_name(m));
  rc.modalities.clear();
  for (const auto& s : c.strings("data.modalities", mods)) rc.modalities.push_back(modality_key(s, "data.modalities"));
  rc.output_dir = c.str("output.dir", rc.output_dir.string());
  if (const char* env = std::getenv("NEUROPIPE_OUT"); env && *env) rc.output_dir = env;
  rc.plot = c.flag("output.plot", rc.plot);

  TrainOptions& t = rc.train;
  t.iterations = c.integer("train.iterations", t.iterations);
  t.batch_size = c.integer("train.batch_size", t.batch_size);
  t.log_every = c.integer("train.log_every", t.log_every);
  t.seed = static_cast<std::uint64_t>(c.integer("train.seed", static_cast<int>(t.seed)));
  const std::string kind = c.str("optimizer.kind", "adam");
  require(kind == "adam" || kind == "sgd", Errc::BadConfig, "optimizer.kind must be adam or sgd");
  t.optimizer.kind = kind == "adam" ? OptimizerKind::Adam : OptimizerKind::Sgd;
  t.optimizer.learning_rate = c.real("optimizer.learning_rate", t.optimizer.learning_rate);
  t.optimizer.momentum = c.real("optimizer.momentum", t.optimizer.momentum);
  t.optimizer.weight_decay = c.real("optimizer.weight_decay", t.optimizer.weight_decay);
  t.augment.flip_h_prob = c.real("augment.flip_h", t.augment.flip_h_prob);
  t.augment.flip_v_prob = c.real("augment.flip_v", t.augment.flip_v_prob);
  t.augment.contrast = interval(c, "augment.contrast", t.augment.contrast);
  t.augment.scale = interval(c, "augment.scale", t.augment.scale);
  t.augment.seed = static_cast<std::uint64_t>(c.integer("augment.seed", static_cast<int>(t.augment.seed)));

  ClassifierConfig& k = rc.classifier;
  k.input_side = c.integer("classifier.input_side", k.input_side);
  k.channels = int_array(c, "classifier.channels", k.channels);
  k.kernels = int_array(c, "classifier.kernels", k.kernels);
  k.flatten_grid = c.integer("classifier.flatten_grid", k.flatten_grid);
  k.fc_width = c.integer("classifier.fc_width", k.fc_width);
  k.dropout = c.real("classifier.dropout", k.dropout);
  const std::string head = c.str("classifier.head", head_name(k.head));
  if (head == "margin") k.head = ClassifierHead::Margin;
  else if (head == "softmax") k.head = ClassifierHead::Softmax;
  else if (head == "svm-posthoc") k.head = ClassifierHead::SvmPosthoc;
  else fail(Errc::BadConfig, "classifier.head must be margin, softmax or svm-posthoc");
  k.margin = c.real("classifier.margin", k.margin);
  k.posthoc_epochs = c.integer("classifier.posthoc_epochs", k.posthoc_epochs);
  k.modality = modality_key(c.str("classifier.modality", std::string(modality_name(k.modality))), "classifier.modality");
  k.seed = static_cast<std::uint64_t>(c.integer("classifier.seed", static_cast<int>(k.seed)));

  DetectorConfig& d = rc.detector;
  d.in_channels = static_cast<int>(rc.modalities.size());
  d.num_categories = c.integer("detector.num_categories", d.num_categories);
  d.backbone = backbone(c, "detector.backbone", d.backbone);
  d.spp_h = d.spp_w = c.integer("detector.spp", d.spp_h);
  d.roi_feat_width = c.integer("detector.roi_width", d.roi_feat_width);
  d.global_path = c.flag("detector.global_path", d.global_path);
  d.global_kernel = c.integer("detector.global_kernel", d.global_kernel);
  d.global_channels = c.integer("detector.global_channels", d.global_channels);
  d.global_grid = c.integer("detector.global_grid", d.global_grid);
  d.fusion_width = c.integer("detector.fusion_width", d.fusion_width);
  d.loss_weights = real_array(c, "detector.loss_weights", d.loss_weights);
  d.proposals.jitter = c.real("detector.jitter", d.proposals.jitter);
  d.proposals.jitter_per_truth = c.integer("detector.jitter_per_truth", d.proposals.jitter_per_truth);
  d.proposals.background = c.integer("detector.background", d.proposals.background);
  d.proposals.grid_scales = c.integers("detector.grid_scales", d.proposals.grid_scales);
  d.proposals.grid_strides = c.integers("detector.grid_strides", d.proposals.grid_strides);
  d.grid_samples = c.integer("detector.grid_samples", d.grid_samples);
  d.score_threshold = c.real("detector.score_threshold", d.score_threshold);
  d.nms_threshold = c.real("detector.nms", d.nms_threshold);
  d.seed = static_cast<std::uint64_t>(c.integer("detector.seed", static_cast<int>(d.seed)));

  SegmenterConfig& s = rc.segmenter;
  s.in_channels = static_cast<int>(rc.modalities.size());
  s.num_categories = c.integer("segmenter.num_categories", s.num_categories);
  s.backbone = backbone(c, "segmenter.backbone", s.backbone);
  s.anchors.use_kmeans = c.flag("segmenter.anchors.kmeans", s.anchors.use_kmeans);
  s.anchors.kmeans_k = c.integer("segmenter.anchors.k", s.anchors.kmeans_k);
  s.anchors.scales = c.reals("segmenter.anchors.scales", s.anchors.scales);
  s.anchors.aspects = c.reals("segmenter.anchors.aspects", s.anchors.aspects);
  s.anchors.seed = static_cast<std::uint64_t>(c.integer("segmenter.anchors.seed", static_cast<int>(s.anchors.seed)));
  s.rpn_width = c.integer("segmenter.rpn_width", s.rpn_width);
  s.box_pool = c.integer("segmenter.box_pool", s.box_pool);
  s.box_width = c.integer("segmenter.box_width", s.box_width);
  s.mask_pool = c.integer("segmenter.mask_pool", s.mask_pool);
  s.mask_size = c.integer("segmenter.mask_size", s.mask_size);
  s.mask_width = c.integer("segmenter.mask_width", s.mask_width);
  s.cls_pool = c.integer("segmenter.cls_pool", s.cls_pool);
  s.cls_width = c.integer("segmenter.cls_width", s.cls_width);
  s.objectness_threshold = c.real("segmenter.objectness_threshold", s.objectness_threshold);
  s.proposals = c.integer("segmenter.proposals", s.proposals);
  s.score_threshold = c.real("segmenter.score_threshold", s.score_threshold);
  s.nms_threshold = c.real("segmenter.nms", s.nms_threshold);
  s.loss_weights = real_array(c, "segmenter.loss_weights", s.loss_weights);
  s.seed = static_cast<std::uint64_t>(c.integer("segmenter.seed", static_cast<int>(s.seed)));

  SyntheticSpec& y = rc.synthetic;
  y.dims = int_array(c, "synthetic.dims", y.dims);
  y.noise_amplitude = c.real("synthetic.noise_amplitude", y.noise_amplitude);
  y.noise_scale = c.real("synthetic.noise_scale", y.noise_scale);
  for (int a = 0; a < 3; ++a) {
    y.center_fraction[a] = interval(c, "synthetic.center" + std::to_string(a), y.center_fraction[a]);
    y.radius[a] = interval(c, "synthetic.radius" + std::to_string(a), y.radius[a]);
  }
  y.lesion_contrast = real_array(c, "synthetic.lesion_contrast", y.lesion_contrast);
  std::vector<std::string> ymods;
  for (Modality m : y.modalities) ymods.emplace_back(modality_name(m));
  y.modalities.clear();
  for (const auto& m : c.strings("synthetic.modalities", ymods)) y.modalities.push_back(modality_key(m, "synthetic.modalities"));
  y.seed = static_cast<std::uint64_t>(c.integer("synthetic.seed", static_cast<int>(y.seed)));
  const std::string forced = c.str("synthetic.force_class", y.force_class ? std::string(class_name(*y.force_class)) : "");
  y.force_class.reset();
  if (!forced.empty()) {
    y.force_class = parse_class(forced);
    require(y.force_class.has_value(), Errc::BadConfig, "unknown class '" + forced + "' in synthetic.force_class");
  }
  rc.synthetic_cases = c.integer("synthetic.cases", rc.synthetic_cases);
  rc.synthetic_fractions = c.reals("synthetic.fractions", rc.synthetic_fractions);

  c.check_all_used();
  rc.validate();
  return rc;
}

Config echo_config(const RunConfig& rc) {
  Config c;
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  auto iv = [](Interval i) { return fmt(i.lo) + "," + fmt(i.hi); };
  auto bl = [](const std::vector<bool>& v) { return join(std::vector<int>(v.begin(), v.end())); };
  auto u = [](std::uint64_t v) { return std::to_string(v); };
  c.set("task", std::string(task_name(rc.task)));
  c.set("data.manifest", rc.manifest.string());
  c.set("data.train_split", rc.train_split);
  c.set("data.eval_split", rc.eval_split);
  std::vector<std::string> mods;
  for (Modality m : rc.modalities) mods.emplace_back(modality_name(m));
  c.set("data.modalities", join(mods));
  c.set("output.dir", rc.output_dir.string());
  c.set("output.plot", b(rc.plot));

  const TrainOptions& t = rc.train;
  c.set("train.iterations", std::to_string(t.iterations));
  c.set("train.batch_size", std::to_string(t.batch_size));
  c.set("train.log_every", std::to_string(t.log_every));
  c.set("train.seed", u(t.seed));
  c.set("optimizer.kind", t.optimizer.kind == OptimizerKind::Adam ? "adam" : "sgd");
  c.set("optimizer.learning_rate", fmt(t.optimizer.learning_rate));
  c.set("optimizer.momentum", fmt(t.optimizer.momentum));
  c.set("optimizer.weight_decay", fmt(t.optimizer.weight_decay));
  c.set("augment.flip_h", fmt(t.augment.flip_h_prob));
  c.set("augment.flip_v", fmt(t.augment.flip_v_prob));
  c.set("augment.contrast", iv(t.augment.contrast));
  c.set("augment.scale", iv(t.augment.scale));
  c.set("augment.seed", u(t.augment.seed));

  const ClassifierConfig& k = rc.classifier;
  c.set("classifier.input_side", std::to_string(k.input_side));
  c.set("classifier.channels", join(std::vector<int>(k.channels.begin(), k.channels.end())));
  c.set("classifier.kernels", join(std::vector<int>(k.kernels.begin(), k.kernels.end())));
  c.set("classifier.flatten_grid", std::to_string(k.flatten_grid));
  c.set("classifier.fc_width", std::to_string(k.fc_width));
  c.set("classifier.dropout", fmt(k.dropout));
  c.set("classifier.head", head_name(k.head));
  c.set("classifier.margin", fmt(k.margin));
  c.set("classifier.posthoc_epochs", std::to_string(k.posthoc_epochs));
  c.set("classifier.modality", std::string(modality_name(k.modality)));
  c.set("classifier.seed", u(k.seed));

  const DetectorConfig& d = rc.detector;
  c.set("detector.num_categories", std::to_string(d.num_categories));
  c.set("detector.backbone.channels", join(d.backbone.channels));
  c.set("detector.backbone.pool_after", bl(d.backbone.pool_after));
  c.set("detector.spp", std::to_string(d.spp_h));
  c.set("detector.roi_width", std::to_string(d.roi_feat_width));
  c.set("detector.global_path", b(d.global_path));
  c.set("detector.global_kernel", std::to_string(d.global_kernel));
  c.set("detector.global_channels", std::to_string(d.global_channels));
  c.set("detector.global_grid", std::to_string(d.global_grid));
  c.set("detector.fusion_width", std::to_string(d.fusion_width));
  c.set("detector.loss_weights", join(std::vector<double>(d.loss_weights.begin(), d.loss_weights.end())));
  c.set("detector.jitter", fmt(d.proposals.jitter));
  c.set("detector.jitter_per_truth", std::to_string(d.proposals.jitter_per_truth));
  c.set("detector.background", std::to_string(d.proposals.background));
  c.set("detector.grid_scales", join(d.proposals.grid_scales));
  c.set("detector.grid_strides", join(d.proposals.grid_strides));
  c.set("detector.grid_samples", std::to_string(d.grid_samples));
  c.set("detector.score_threshold", fmt(d.score_threshold));
  c.set("detector.nms", fmt(d.nms_threshold));
  c.set("detector.seed", u(d.seed));

  const SegmenterConfig& s = rc.segmenter;
  c.set("segmenter.num_categories", std::to_string(s.num_categories));
  c.set("segmenter.backbone.channels", join(s.backbone.channels));
  c.set("segmenter.backbone.pool_after", bl(s.backbone.pool_after));
  c.set("segmenter.anchors.kmeans", b(s.anchors.use_kmeans));
  c.set("segmenter.anchors.k", std::to_string(s.anchors.kmeans_k));
  c.set("segmenter.anchors.scales", join(s.anchors.scales));
  c.set("segmenter.anchors.aspects", join(s.anchors.aspects));
  c.set("segmenter.anchors.seed", u(s.anchors.seed));
  c.set("segmenter.rpn_width", std::to_string(s.rpn_width));
  c.set("segmenter.box_pool", std::to_string(s.box_pool));
  c.set("segmenter.box_width", std::to_string(s.box_width));
  c.set("segmenter.mask_pool", std::to_string(s.mask_pool));
  c.set("segmenter.mask_size", std::to_string(s.mask_size));
  c.set("segmenter.mask_width", std::to_string(s.mask_width));
  c.set("segmenter.cls_pool", std::to_string(s.cls_pool));
  c.set("segmenter.cls_width", std::to_string(s.cls_width));
  c.set("segmenter.objectness_threshold", fmt(s.objectness_threshold));
  c.set("segmenter.proposals", std::to_string(s.proposals));
  c.set("segmenter.score_threshold", fmt(s.score_threshold));
  c.set("segmenter.nms", fmt(s.nms_threshold));
  c.set("segmenter.loss_weights", join(std::vector<double>(s.loss_weights.begin(), s.loss_weights.end())));
  c.set("segmenter.seed", u(s.seed));

  const SyntheticSpec& y = rc.synthetic;
  c.set("synthetic.dims", join(std::vector<int>(y.dims.begin(), y.dims.end())));
  c.set("synthetic.noise_amplitude", fmt(y.noise_amplitude));
  c.set("synthetic.noise_scale", fmt(y.noise_scale));
  for (int a = 0; a < 3; ++a) {
    c.set("synthetic.center" + std::to_string(a), iv(y.center_fraction[a]));
    c.set("synthetic.radius" + std::to_string(a), iv(y.radius[a]));
  }
  c.set("synthetic.lesion_contrast", join(std::vector<double>(y.lesion_contrast.begin(), y.lesion_contrast.end())));
  std::vector<std::string> ymods;
  for (Modality m : y.modalities) ymods.emplace_back(modality_name(m));
  c.set("synthetic.modalities", join(ymods));
  c.set("synthetic.seed", u(y.seed));
  c.set("synthetic.force_class", y.force_class ? std::string(class_name(*y.force_class)) : "");
  c.set("synthetic.cases", std::to_string(rc.synthetic_cases));
  c.set("synthetic.fractions", join(rc.synthetic_fractions));
  return c;
}

// ---------------------------------------------------------------- history

HistoryLogger::HistoryLogger(const fs::path& path) : path_(path) {
  std::ofstream out(path_, std::ios::trunc);
  require(static_cast<bool>(out), Errc::IoFailure, "cannot write history file " + path_.string());
  out << "iteration,train_loss,test_loss,accuracy\n";
  out.flush();
}

void HistoryLogger::append(const HistoryRow& row) {
  std::ofstream out(path_, std::ios::app);
  out << row.iteration << ',' << fmt(row.train_loss) << ',' << fmt(row.test_loss) << ',' << fmt(row.accuracy) << '\n';
  out.flush();
  require(static_cast<bool>(out), Errc::IoFailure, "cannot append to history file " + path_.string());
}

TrainHistory read_history(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), Errc::IoFailure, "cannot read history file " + path.string());
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && trim(line) == "iteration,train_loss,test_loss,accuracy",
          Errc::ParseError, "history file lacks its header: " + path.string());
  TrainHistory h;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    const auto f = split(trim(line), ',');
    require(f.size() == 4, Errc::ParseError, "history row needs 4 fields: '" + line + "'");
    h.add({parse_long(f[0], "iteration"), parse_real(f[1], "train_loss"), parse_real(f[2], "test_loss"),
           parse_real(f[3], "accuracy")});
  }
  return h;
}

void write_history_plot(const TrainHistory& history, const fs::path& svg_path) {
  const double W = 640, H = 360, pad = 40;
  double max_it = 1, max_loss = 1e-12;
  for (const auto& r : history.rows) {
    max_it = std::max(max_it, static_cast<double>(r.iteration));
    max_loss = std::max({max_loss, r.train_loss, r.test_loss});
  }
  auto px = [&](double it) { return pad + (W - 2 * pad) * it / max_it; };
  auto py = [&](double v, double top) { return H - pad - (H - 2 * pad) * v / top; };
  auto line = [&](auto value, double top, const char* colour) {
    std::string pts;
    for (const auto& r : history.rows) pts += fmt(px(static_cast<double>(r.iteration))) + "," + fmt(py(value(r), top)) + " ";
    return "<polyline fill=\"none\" stroke=\"" + std::string(colour) + "\" points=\"" + pts + "\"/>\n";
  };
  std::ofstream out(svg_path);
  require(static_cast<bool>(out), Errc::IoFailure, "cannot write plot " + svg_path.string());
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  out << "<rect x=\"" << pad << "\" y=\"" << pad << "\" width=\"" << W - 2 * pad << "\" height=\"" << H - 2 * pad
      << "\" fill=\"none\" stroke=\"#888\"/>\n";
  out << line([](const HistoryRow& r) { return r.train_loss; }, max_loss, "#1f77b4");
  out << line([](const HistoryRow& r) { return r.test_loss; }, max_loss, "#ff7f0e");
  out << line([](const HistoryRow& r) { return r.accuracy; }, 1.0, "#2ca02c");
  out << "<text x=\"" << pad << "\" y=\"" << pad - 10 << "\" font-size=\"12\">train loss (blue), test loss (orange), "
      << "accuracy (green, 0..1); max loss " << fmt(max_loss) << ", iterations " << max_it << "</text>\n</svg>\n";
}

// ---------------------------------------------------------------- checkpoints

void write_checkpoint(const Checkpoint& ckpt, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), Errc::IoFailure, "cannot write checkpoint " + path.string());
  out << "neuropipe-checkpoint 1\n";
  for (const auto& [k, v] : ckpt.meta) {
    require(k.find_first_of(" \n") == std::string::npos && v.find('\n') == std::string::npos, Errc::BadConfig,
            "checkpoint metadata must be single-line");
    out << "meta " << k << ' ' << v << '\n';
  }
  for (const auto& [name, t] : ckpt.tensors) {
    out << "tensor " << name << ' ' << t.rank();
    for (int d : t.shape()) out << ' ' << d;
    out << '\n';
    for (double v : t.storage()) {
      unsigned char bytes[8];
      std::uint64_t bits;
      std::memcpy(&bits, &v, 8);
      for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(bits >> (8 * i));
      out.write(reinterpret_cast<const char*>(bytes), 8);
    }
    out << '\n';
  }
  out << "end\n";
  require(static_cast<bool>(out), Errc::IoFailure, "failed writing checkpoint " + path.string());
}

Checkpoint read_checkpoint(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), Errc::IoFailure, "cannot read checkpoint " + path.string());
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && line == "neuropipe-checkpoint 1", Errc::ParseError,
          "not a checkpoint: " + path.string());
  Checkpoint ck;
  while (std::getline(in, line)) {
    if (line == "end") return ck;
    std::istringstream is(line);
    std::string word;
    is >> word;
    if (word == "meta") {
      std::string key;
      is >> key;
      std::string value;
      std::getline(is, value);
      ck.meta[key] = value.empty() ? value : value.substr(1);
    } else if (word == "tensor") {
      std::string name;
      int rank = -1;
      is >> name >> rank;
      require(static_cast<bool>(is) && rank >= 0 && rank <= 8, Errc::ParseError, "bad tensor line '" + line + "'");
      Shape shape(static_cast<std::size_t>(rank));
      for (int& d : shape) {
        is >> d;
        require(static_cast<bool>(is) && d >= 0, Errc::ParseError, "bad tensor shape in '" + line + "'");
      }
      Tensor t(shape);
      for (double& v : t.storage()) {
        unsigned char bytes[8];
        in.read(reinterpret_cast<char*>(bytes), 8);
        require(static_cast<bool>(in), Errc::ParseError, "checkpoint truncated in tensor " + name);
        std::uint64_t bits = 0;
        for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
        std::memcpy(&v, &bits, 8);
      }
      require(in.get() == '\n', Errc::ParseError, "checkpoint tensor " + name + " is not terminated");
      ck.tensors.emplace_back(name, std::move(t));
    } else {
      fail(Errc::ParseError, "unexpected checkpoint line '" + line + "'");
    }
  }
  fail(Errc::ParseError, "checkpoint lacks its end marker: " + path.string());
}

Checkpoint snapshot(const std::vector<Parameter*>& params, std::map<std::string, std::string> meta) {
  Checkpoint ck{std::move(meta), {}};
  for (const auto* p : params) ck.tensors.emplace_back(p->name, p->value);
  return ck;
}

void restore(const Checkpoint& ckpt, const std::vector<Parameter*>& params) {
  require(ckpt.tensors.size() == params.size(), Errc::BadConfig,
          "checkpoint holds " + std::to_string(ckpt.tensors.size()) + " tensors, model has " +
              std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, t] = ckpt.tensors[i];
    require(name == params[i]->name && t.shape() == params[i]->value.shape(), Errc::BadConfig,
            "checkpoint tensor " + name + " " + shape_string(t.shape()) + " does not match model parameter " +
                params[i]->name + " " + shape_string(params[i]->value.shape()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = ckpt.tensors[i].second;
}

// ---------------------------------------------------------------- records

namespace {

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  require(static_cast<bool>(out), Errc::IoFailure, "cannot write " + path.string());
  return out;
}

std::vector<std::vector<std::string>> read_rows(const fs::path& path, const std::string& header) {
  std::ifstream in(path);
  require(static_cast<bool>(in), Errc::IoFailure, "cannot read " + path.string());
  std::string line;
  require(static_cast<bool>(std::getline(in, line)) && trim(line) == header, Errc::ParseError,
          path.string() + " lacks the header '" + header + "'");
  const std::size_t n = split(header, ',').size();
  std::vector<std::vector<std::string>> rows;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    auto f = split(trim(line), ',');
    require(f.size() == n, Errc::ParseError, "row needs " + std::to_string(n) + " fields: '" + line + "'");
    rows.push_back(std::move(f));
  }
  return rows;
}

void check_id(const std::string& s) {
  require(s.find_first_of(",\n") == std::string::npos, Errc::BadConfig, "identifier contains a delimiter: " + s);
}

std::string box_fields(const BoundingBox& b) {
  return fmt(b.x_min) + "," + fmt(b.y_min) + "," + fmt(b.x_max) + "," + fmt(b.y_max);
}

BoundingBox parse_box(const std::vector<std::string>& f, std::size_t at) {
  return {parse_real(f[at], "x_min"), parse_real(f[at + 1], "y_min"), parse_real(f[at + 2], "x_max"),
          parse_real(f[at + 3], "y_max")};
}

const char* kDetectionHeader = "subject_id,slice_index,rank,category,score,x_min,y_min,x_max,y_max";
const char* kInstanceHeader = "subject_id,slice_index,instance,region,score,x_min,y_min,x_max,y_max,rle";

}  // namespace

void write_detection_records(const std::vector<DetectionRecord>& records, const fs::path& path) {
  auto out = open_out(path);
  out << kDetectionHeader << '\n';
  for (const auto& r : records) {
    check_id(r.subject_id);
    out << r.subject_id << ',' << r.slice_index << ',' << r.rank << ',' << r.category << ',' << fmt(r.score) << ','
        << box_fields(r.box) << '\n';
  }
}

std::vector<DetectionRecord> read_detection_records(const fs::path& path) {
  std::vector<DetectionRecord> out;
  for (const auto& f : read_rows(path, kDetectionHeader))
    out.push_back({f[0], static_cast<int>(parse_long(f[1], "slice_index")), static_cast<int>(parse_long(f[2], "rank")),
                   static_cast<int>(parse_long(f[3], "category")), parse_real(f[4], "score"), parse_box(f, 5)});
  return out;
}

void write_instance_records(const std::vector<InstanceRecord>& records, const fs::path& path) {
  auto out = open_out(path);
  out << kInstanceHeader << '\n';
  for (const auto& r : records) {
    check_id(r.subject_id);
    check_id(r.region);
    check_id(r.rle);
    out << r.subject_id << ',' << r.slice_index << ',' << r.instance << ',' << r.region << ',' << fmt(r.score) << ','
        << box_fields(r.box) << ',' << r.rle << '\n';
  }
}

std::vector<InstanceRecord> read_instance_records(const fs::path& path) {
  std::vector<InstanceRecord> out;
  for (const auto& f : read_rows(path, kInstanceHeader)) {
    decode_rle(f[9]);
    out.push_back({f[0], static_cast<int>(parse_long(f[1], "slice_index")),
                   static_cast<int>(parse_long(f[2], "instance")), f[3], parse_real(f[4], "score"), parse_box(f, 5),
                   f[9]});
  }
  return out;
}

// ---------------------------------------------------------------- data

namespace {

std::vector<SyntheticCase> cases_of(const RunConfig& rc, const std::string& split) {
  require(!rc.manifest.empty(), Errc::BadConfig, "data.manifest is not set");
  const Manifest m = read_manifest(rc.manifest);
  return load_cases(m, split.empty() ? std::nullopt : std::optional<std::string>(split));
}

std::set<Modality> modality_set(const std::vector<Modality>& v) { return {v.begin(), v.end()}; }

LesionSlice model_slice(const SyntheticCase& c, const std::vector<Modality>& mods) {
  LesionSlice s = lesion_slice(c);
  s.stack = modality_subset(s.stack, modality_set(mods));
  return s;
}

}  // namespace

std::vector<ClassifierSample> classifier_samples(const RunConfig& rc, const std::string& split) {
  std::vector<ClassifierSample> out;
  for (const auto& c : cases_of(rc, split))
    out.push_back(classifier_sample(c, rc.classifier.modality, rc.classifier.input_side));
  return out;
}

std::vector<DetectionSample> detection_samples(const RunConfig& rc, const std::string& split) {
  std::vector<DetectionSample> out;
  for (const auto& c : cases_of(rc, split))
    out.push_back(detection_sample(model_slice(c, rc.modalities), rc.detector.num_categories));
  return out;
}

std::vector<SegmentationSample> segmentation_samples(const RunConfig& rc, const std::string& split) {
  std::vector<SegmentationSample> out;
  for (const auto& c : cases_of(rc, split))
    out.push_back(segmentation_sample(model_slice(c, rc.modalities), rc.segmenter.num_categories));
  return out;
}

Tensor box_mask(const std::vector<BoundingBox>& boxes, int height, int width) {
  Tensor m = Tensor::chw(1, height, width);
  for (const auto& b : boxes)
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x)
        if (x + 0.5 >= b.x_min && x + 0.5 <= b.x_max && y + 0.5 >= b.y_min && y + 0.5 <= b.y_max) m.at(0, y, x) = 1.0;
  return m;
}

// ---------------------------------------------------------------- runs

namespace {

std::string anchors_text(const std::vector<AnchorShape>& shapes) {
  std::string out;
  for (const auto& [w, h] : shapes) out += (out.empty() ? "" : ";") + fmt(w) + "," + fmt(h);
  return out;
}

std::vector<AnchorShape> parse_anchors(const std::string& text) {
  std::vector<AnchorShape> out;
  for (const auto& item : split(text, ';')) {
    const auto f = split(item, ',');
    require(f.size() == 2, Errc::ParseError, "bad anchor shape '" + item + "'");
    out.emplace_back(parse_real(f[0], "anchor width"), parse_real(f[1], "anchor height"));
  }
  return out;
}

template <class Sample>
std::vector<Sample> eval_or_train(const std::vector<Sample>& eval, const std::vector<Sample>& train) {
  return eval.empty() ? train : eval;
}

std::vector<std::string> category_names(int k) {
  if (k == kNumSubRegions) {
    std::vector<std::string> out;
    for (SubRegion r : kAllSubRegions) out.emplace_back(subregion_name(r));
    return out;
  }
  std::vector<std::string> out;
  for (int i = 1; i <= k; ++i) out.push_back(k == 1 ? "lesion" : "category" + std::to_string(i));
  return out;
}

ConfusionCounts mask_counts(const Tensor& pred, const Tensor& truth) {
  const auto p = binarize(pred), t = binarize(truth);
  return confusion(p, t);
}

Tensor union_of(const std::vector<Tensor>& masks, int h, int w) {
  Tensor u = Tensor::chw(1, h, w);
  for (const auto& m : masks)
    for (std::size_t i = 0; i < u.size(); ++i) u[i] = std::max(u[i], m[i] > 0.5 ? 1.0 : 0.0);
  return u;
}

std::pair<Tensor, Tensor> detection_pair(Detector& model, const DetectionSample& s) {
  std::vector<BoundingBox> boxes;
  for (const auto& d : detect(model, s.stack)) boxes.push_back(d.box);
  return {box_mask(boxes, s.stack.height(), s.stack.width()), box_mask(s.boxes, s.stack.height(), s.stack.width())};
}

std::pair<Tensor, Tensor> segmentation_pair(Segmenter& model, const SegmentationSample& s) {
  std::vector<Tensor> pred;
  for (auto& i : segment_instances(model, s.stack)) pred.push_back(std::move(i.mask));
  return {union_of(pred, s.stack.height(), s.stack.width()), union_of(s.masks, s.stack.height(), s.stack.width())};
}

fs::path prepare_dir(const RunConfig& rc) {
  std::error_code ec;
  fs::create_directories(rc.output_dir, ec);
  require(!ec && fs::is_directory(rc.output_dir), Errc::IoFailure, "cannot create output directory " + rc.output_dir.string());
  std::ofstream out(rc.output_dir / "config.txt");
  require(static_cast<bool>(out), Errc::IoFailure, "cannot write " + (rc.output_dir / "config.txt").string());
  out << echo_config(rc).text();
  return rc.output_dir;
}

Checkpoint load_model_checkpoint(const RunConfig& rc) {
  const Checkpoint ck = read_checkpoint(rc.output_dir / "model.ckpt");
  const auto it = ck.meta.find("task");
  require(it != ck.meta.end() && it->second == task_name(rc.task), Errc::BadConfig,
          "checkpoint in " + rc.output_dir.string() + " was not trained for task " + std::string(task_name(rc.task)));
  return ck;
}

Segmenter restored_segmenter(const RunConfig& rc) {
  const Checkpoint ck = load_model_checkpoint(rc);
  Segmenter m(rc.segmenter);
  restore(ck, m.parameters());
  const auto it = ck.meta.find("anchors");
  require(it != ck.meta.end(), Errc::ParseError, "segmenter checkpoint lacks anchor shapes");
  m.set_anchor_shapes(parse_anchors(it->second));
  return m;
}

}  // namespace

RunOutputs run_train(const RunConfig& rc) {
  rc.validate();
  RunOutputs out;
  out.dir = prepare_dir(rc);
  out.config = out.dir / "config.txt";
  out.history = out.dir / "history.csv";
  out.checkpoint = out.dir / "model.ckpt";
  HistoryLogger logger(out.history);
  TrainOptions opt = rc.train;
  opt.on_row = [&](const HistoryRow& r) { logger.append(r); };
  std::map<std::string, std::string> meta{{"task", std::string(task_name(rc.task))}};
  Checkpoint ck;
  switch (rc.task) {
    case Task::Classify: {
      Classifier m(rc.classifier);
      out.history_rows = train_classifier(m, classifier_samples(rc, rc.train_split), classifier_samples(rc, rc.eval_split), opt);
      ck = snapshot(m.parameters(), meta);
      break;
    }
    case Task::Detect: {
      Detector m(rc.detector);
      out.history_rows = train_detector(m, detection_samples(rc, rc.train_split), detection_samples(rc, rc.eval_split), opt);
      ck = snapshot(m.parameters(), meta);
      break;
    }
    case Task::Segment: {
      Segmenter m(rc.segmenter);
      out.history_rows =
          train_segmenter(m, segmentation_samples(rc, rc.train_split), segmentation_samples(rc, rc.eval_split), opt);
      meta["anchors"] = anchors_text(m.anchor_shapes());
      ck = snapshot(m.parameters(), meta);
      break;
    }
  }
  write_checkpoint(ck, out.checkpoint);
  if (rc.plot) {
    out.plot = out.dir / "history.svg";
    write_history_plot(out.history_rows, out.plot);
  }
  return out;
}

MetricsReport run_evaluate(const RunConfig& rc) {
  rc.validate();
  prepare_dir(rc);
  MetricsReport report;
  switch (rc.task) {
    case Task::Classify: {
      Classifier m(rc.classifier);
      restore(load_model_checkpoint(rc), m.parameters());
      const auto data = eval_or_train(classifier_samples(rc, rc.eval_split), classifier_samples(rc, rc.train_split));
      const ClassifierEval e = evaluate_classifier(m, data);
      std::vector<int> truth;
      for (const auto& s : data) truth.push_back(static_cast<int>(s.label));
      std::vector<std::string> names;
      for (LesionClass c : kAllClasses) names.emplace_back(class_name(c));
      report = classification_report(e.predicted, truth, names);
      break;
    }
    case Task::Detect: {
      Detector m(rc.detector);
      restore(load_model_checkpoint(rc), m.parameters());
      const auto data = eval_or_train(detection_samples(rc, rc.eval_split), detection_samples(rc, rc.train_split));
      const auto names = category_names(rc.detector.num_categories);
      std::vector<std::pair<std::string, ConfusionCounts>> counts;
      for (const auto& n : names) counts.emplace_back(n, ConfusionCounts{});
      std::vector<std::pair<Tensor, Tensor>> pairs;
      for (const auto& s : data) {
        const auto dets = detect(m, s.stack);
        for (std::size_t k = 0; k < names.size(); ++k) {
          std::vector<BoundingBox> p, t;
          for (const auto& d : dets)
            if (d.category == static_cast<int>(k) + 1) p.push_back(d.box);
          for (std::size_t j = 0; j < s.boxes.size(); ++j)
            if (s.categories[j] == static_cast<int>(k) + 1) t.push_back(s.boxes[j]);
          counts[k].second += mask_counts(box_mask(p, s.stack.height(), s.stack.width()),
                                          box_mask(t, s.stack.height(), s.stack.width()));
        }
        pairs.push_back(detection_pair(m, s));
      }
      report = summarize(counts);
      report.extras.emplace_back("hit_rate", evaluate_detector(m, data).hit_rate);
      report.extras.emplace_back("dice_pooled", pooled_dice(pairs));
      report.extras.emplace_back("dice_mean_slice", mean_dice(pairs));
      break;
    }
    case Task::Segment: {
      Segmenter m = restored_segmenter(rc);
      const auto data = eval_or_train(segmentation_samples(rc, rc.eval_split), segmentation_samples(rc, rc.train_split));
      const auto names = category_names(rc.segmenter.num_categories);
      std::vector<std::pair<std::string, ConfusionCounts>> counts;
      for (const auto& n : names) counts.emplace_back(n, ConfusionCounts{});
      for (const auto& s : data) {
        const auto inst = segment_instances(m, s.stack);
        for (std::size_t k = 0; k < names.size(); ++k) {
          std::vector<Tensor> p, t;
          for (const auto& i : inst)
            if (i.category == static_cast<int>(k) + 1) p.push_back(i.mask);
          for (std::size_t j = 0; j < s.masks.size(); ++j)
            if (s.categories[j] == static_cast<int>(k) + 1) t.push_back(s.masks[j]);
          counts[k].second += mask_counts(union_of(p, s.stack.height(), s.stack.width()),
                                          union_of(t, s.stack.height(), s.stack.width()));
        }
      }
      const SegmenterEval e = evaluate_segmenter(m, data);
      report = summarize(counts);
      report.extras.emplace_back("mean_instance_dice", e.mean_instance_dice);
      report.extras.emplace_back("dice_pooled", pooled_dice(e.union_pairs));
      report.extras.emplace_back("dice_mean_slice", mean_dice(e.union_pairs));
      break;
    }
  }
  std::ofstream out(rc.output_dir / "metrics.csv");
  require(static_cast<bool>(out), Errc::IoFailure, "cannot write metrics.csv");
  report.write(out);
  return report;
}

fs::path run_predict(const RunConfig& rc) {
  rc.validate();
  prepare_dir(rc);
  switch (rc.task) {
    case Task::Classify: {
      Classifier m(rc.classifier);
      restore(load_model_checkpoint(rc), m.parameters());
      const fs::path path = rc.output_dir / "predictions.csv";
      auto out = open_out(path);
      out << "subject_id,predicted,truth\n";
      for (const auto& s : eval_or_train(classifier_samples(rc, rc.eval_split), classifier_samples(rc, rc.train_split)))
        out << s.subject_id << ',' << class_name(predict_class(m, s.input).label) << ',' << class_name(s.label) << '\n';
      return path;
    }
    case Task::Detect: {
      Detector m(rc.detector);
      restore(load_model_checkpoint(rc), m.parameters());
      std::vector<DetectionRecord> records;
      for (const auto& s : eval_or_train(detection_samples(rc, rc.eval_split), detection_samples(rc, rc.train_split))) {
        int rank = 0;
        for (const auto& d : detect(m, s.stack)) records.push_back({s.subject_id, s.slice_index, rank++, d.category, d.score, d.box});
      }
      const fs::path path = rc.output_dir / "detections.csv";
      write_detection_records(records, path);
      return path;
    }
    case Task::Segment: {
      Segmenter m = restored_segmenter(rc);
      std::vector<InstanceRecord> records;
      for (const auto& s :
           eval_or_train(segmentation_samples(rc, rc.eval_split), segmentation_samples(rc, rc.train_split))) {
        int n = 0;
        for (const auto& i : segment_instances(m, s.stack))
          records.push_back({s.subject_id, s.slice_index, n++, std::string(subregion_name(i.region)), i.score, i.box,
                             encode_rle(i.mask)});
      }
      const fs::path path = rc.output_dir / "instances.csv";
      write_instance_records(records, path);
      return path;
    }
  }
  return {};
}

fs::path run_generate_data(const RunConfig& rc) {
  rc.synthetic.validate();
  prepare_dir(rc);
  return generate_dataset(rc.synthetic, rc.synthetic_cases, rc.synthetic_fractions, rc.output_dir / "data");
}

// ---------------------------------------------------------------- ablation

std::vector<std::set<Modality>> table3_subsets() {
  using M = Modality;
  return {{M::T1},
          {M::T1c},
          {M::T2},
          {M::FLAIR},
          {M::T1c, M::T2, M::FLAIR},
          {M::T1, M::T1c, M::FLAIR},
          {M::T1, M::T2, M::FLAIR},
          {M::T1, M::T1c, M::T2},
          {M::T1, M::T1c, M::T2, M::FLAIR}};
}

void AblationTable::write(std::ostream& out) const {
  out << "T1,T1c,T2,F/D,dice_pooled,dice_mean_slice\n";
  for (const auto& r : rows) {
    auto mark = [&](std::initializer_list<Modality> ms) {
      for (Modality m : ms)
        if (r.subset.count(m)) return "x";
      return "-";
    };
    out << mark({Modality::T1}) << ',' << mark({Modality::T1c}) << ',' << mark({Modality::T2}) << ','
        << mark({Modality::FLAIR, Modality::DWI}) << ',' << fmt(r.dice_pooled) << ',' << fmt(r.dice_mean_slice) << '\n';
  }
}

AblationTable run_ablation(const RunConfig& rc, const std::vector<std::set<Modality>>& subsets) {
  require(rc.task != Task::Classify, Errc::BadConfig, "ablation needs the detect or segment task");
  require(!subsets.empty(), Errc::EmptySubset, "no ablation subsets given");
  for (const auto& s : subsets) require(!s.empty(), Errc::EmptySubset, "ablation subset is empty");
  rc.validate();
  prepare_dir(rc);
  AblationTable table;
  for (const auto& subset : subsets) {
    RunConfig sub = rc;
    sub.modalities.assign(subset.begin(), subset.end());
    sub.detector.in_channels = sub.segmenter.in_channels = static_cast<int>(subset.size());
    std::vector<std::pair<Tensor, Tensor>> pairs;
    if (rc.task == Task::Detect) {
      Detector m(sub.detector);
      const auto train = detection_samples(sub, sub.train_split);
      train_detector(m, train, {}, sub.train);
      for (const auto& s : eval_or_train(detection_samples(sub, sub.eval_split), train)) pairs.push_back(detection_pair(m, s));
    } else {
      Segmenter m(sub.segmenter);
      const auto train = segmentation_samples(sub, sub.train_split);
      train_segmenter(m, train, {}, sub.train);
      for (const auto& s : eval_or_train(segmentation_samples(sub, sub.eval_split), train))
        pairs.push_back(segmentation_pair(m, s));
    }
    table.rows.push_back({subset, pooled_dice(pairs), mean_dice(pairs)});
  }
  std::ofstream out(rc.output_dir / "ablation.csv");
  require(static_cast<bool>(out), Errc::IoFailure, "cannot write ablation.csv");
  table.write(out);
  return table;
}

}  // namespace neuropipe
