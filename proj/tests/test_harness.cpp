#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "neuropipe/error.hpp"
#include "neuropipe/harness.hpp"

using namespace neuropipe;
namespace fs = std::filesystem;

namespace {

template <class F>
Errc error_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return Errc::UnknownFormat;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("neuropipe_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Config small_classify(const fs::path& dir) {
  Config c = Config::parse(R"(
task = classify
output.dir = )" + dir.string() + R"(
synthetic.dims = 12,32,32
synthetic.cases = 10
synthetic.fractions = 0.6,0.4
synthetic.radius0 = 2,3
synthetic.radius1 = 3,6
synthetic.radius2 = 3,6
classifier.input_side = 32
classifier.channels = 2,2,2,2,2,2,2
classifier.fc_width = 8
classifier.dropout = 0
train.iterations = 6
train.batch_size = 2
train.log_every = 2
)");
  return c;
}

}  // namespace

TEST_CASE("config parsing and overrides") {
  Config c = Config::parse("# comment\n a.b = 3  \n\nname = x # tail\nlist = 1, 2,3\n");
  CHECK(c.integer("a.b", 0) == 3);
  CHECK(c.str("name", "") == "x");
  CHECK(c.integers("list", {}) == std::vector<int>{1, 2, 3});
  CHECK(c.real("missing", 2.5) == 2.5);
  c.apply_override("a.b=7");
  CHECK(c.integer("a.b", 0) == 7);
  CHECK(error_of([] { Config::parse("novalue\n"); }) == Errc::ParseError);
  CHECK(error_of([] { Config::parse("a = 1\na = 2\n"); }) == Errc::ParseError);
  CHECK(error_of([&] { c.apply_override("nothing"); }) == Errc::ParseError);
  CHECK(error_of([] { Config::parse("x = abc").integer("x", 0); }) == Errc::ParseError);

  try {
    Config::load("/nonexistent/run.cfg");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::IoFailure);
    CHECK(std::string(e.what()).find("/nonexistent/run.cfg") != std::string::npos);
  }

  const Config unknown = Config::parse("task = detect\ndetector.typo = 1\n");
  try {
    resolve_run_config(unknown);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::BadConfig);
    CHECK(std::string(e.what()).find("detector.typo") != std::string::npos);
  }
  CHECK(error_of([] { resolve_run_config(Config::parse("task = cluster")); }) == Errc::BadConfig);
  CHECK(error_of([] { resolve_run_config(Config::parse("data.modalities = T1,XYZ")); }) == Errc::BadConfig);
}

TEST_CASE("resolved config echoes and re-resolves identically") {
  ::unsetenv("NEUROPIPE_OUT");
  Config c = Config::parse("task = segment\ndata.modalities = flair,t2\noptimizer.learning_rate = 0.1\n");
  const RunConfig rc = resolve_run_config(c);
  CHECK(rc.segmenter.in_channels == 2);
  CHECK(rc.modalities == std::vector<Modality>{Modality::FLAIR, Modality::T2});
  const Config echo = echo_config(rc);
  const RunConfig again = resolve_run_config(Config::parse(echo.text()));
  CHECK(echo_config(again).text() == echo.text());
  CHECK(again.train.optimizer.learning_rate == 0.1);

  ::setenv("NEUROPIPE_OUT", "/tmp/elsewhere", 1);
  CHECK(resolve_run_config(Config::parse("output.dir = here")).output_dir == "/tmp/elsewhere");
  ::unsetenv("NEUROPIPE_OUT");
}

TEST_CASE("history rows are flushed and parse back") {
  const fs::path dir = scratch("history");
  HistoryLogger log(dir / "h.csv");
  TrainHistory h;
  for (long i = 1; i <= 3; ++i) {
    const HistoryRow r{i * 10, 1.0 / 3 + i, 0.1 * i, 0.25 * i};
    log.append(r);
    h.add(r);
    // readable before the logger goes away
    CHECK(read_history(dir / "h.csv").rows.size() == static_cast<std::size_t>(i));
  }
  CHECK(read_history(dir / "h.csv") == h);
  write_history_plot(h, dir / "h.svg");
  CHECK(fs::file_size(dir / "h.svg") > 0);
  std::ofstream(dir / "bad.csv") << "iteration,train_loss\n";
  CHECK(error_of([&] { read_history(dir / "bad.csv"); }) == Errc::ParseError);
}

TEST_CASE("checkpoint round trip") {
  const fs::path dir = scratch("ckpt");
  DetectorConfig cfg;
  cfg.backbone.channels = {4, 8};
  cfg.backbone.pool_after = {true, false};
  Detector a(cfg);
  const Checkpoint ck = snapshot(a.parameters(), {{"task", "detect"}, {"note", "two words"}});
  write_checkpoint(ck, dir / "m.ckpt");
  const Checkpoint back = read_checkpoint(dir / "m.ckpt");
  CHECK(back == ck);
  cfg.seed = 99;
  Detector b(cfg);
  restore(back, b.parameters());
  for (std::size_t i = 0; i < a.parameters().size(); ++i) CHECK(b.parameters()[i]->value == a.parameters()[i]->value);

  cfg.backbone.channels = {4, 6};
  Detector other(cfg);
  CHECK(error_of([&] { restore(back, other.parameters()); }) == Errc::BadConfig);

  std::string bytes;
  {
    std::ifstream in(dir / "m.ckpt", std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  std::ofstream(dir / "cut.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() / 2);
  CHECK(error_of([&] { read_checkpoint(dir / "cut.ckpt"); }) == Errc::ParseError);
}

TEST_CASE("detection and instance records round trip") {
  const fs::path dir = scratch("records");
  const std::vector<DetectionRecord> d{{"case_0001", 7, 0, 1, 0.123456789012345678, {1.5, 2.25, 30.125, 40}},
                                       {"case_0002", 3, 1, 2, 1.0 / 3.0, {0, 0, 1e-9, 64}}};
  write_detection_records(d, dir / "d.csv");
  CHECK(read_detection_records(dir / "d.csv") == d);

  Tensor m = Tensor::chw(1, 4, 5);
  m.at(0, 1, 2) = m.at(0, 2, 2) = 1;
  const std::vector<InstanceRecord> r{{"case_0001", 7, 0, "edema", 0.75, {2, 1, 3, 3}, encode_rle(m)}};
  write_instance_records(r, dir / "i.csv");
  const auto back = read_instance_records(dir / "i.csv");
  CHECK(back == r);
  CHECK(decode_rle(back[0].rle) == m);
  CHECK(error_of([&] { write_detection_records({{"a,b", 0, 0, 1, 0, {}}}, dir / "x.csv"); }) == Errc::BadConfig);
}

TEST_CASE("box rasterization") {
  const Tensor m = box_mask({{1, 1, 3, 2}}, 4, 4);
  double sum = 0;
  for (double v : m.storage()) sum += v;
  CHECK(sum == 2.0);
  CHECK(m.at(0, 1, 1) == 1.0);
  CHECK(m.at(0, 1, 2) == 1.0);
}

TEST_CASE("ablation table structure") {
  const auto subsets = table3_subsets();
  REQUIRE(subsets.size() == 9);
  CHECK(subsets[3] == std::set<Modality>{Modality::FLAIR});
  CHECK(subsets[8].size() == 4);
  AblationTable t;
  for (const auto& s : subsets) t.rows.push_back({s, 0.5, 0.25});
  std::ostringstream os;
  t.write(os);
  std::istringstream is(os.str());
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(is, line)) lines.push_back(line);
  REQUIRE(lines.size() == 10);
  CHECK(lines[0] == "T1,T1c,T2,F/D,dice_pooled,dice_mean_slice");
  CHECK(lines[1] == "x,-,-,-,0.5,0.25");
  CHECK(lines[5] == "-,x,x,x,0.5,0.25");
  CHECK(lines[9] == "x,x,x,x,0.5,0.25");

  RunConfig rc;
  rc.task = Task::Detect;
  CHECK(error_of([&] { run_ablation(rc, {}); }) == Errc::EmptySubset);
  CHECK(error_of([&] { run_ablation(rc, {{}}); }) == Errc::EmptySubset);
  rc.task = Task::Classify;
  CHECK(error_of([&] { run_ablation(rc, {{Modality::T1}}); }) == Errc::BadConfig);
}

TEST_CASE("generate, train and evaluate a classifier") {
  ::unsetenv("NEUROPIPE_OUT");
  const fs::path dir = scratch("pipeline");
  Config c = small_classify(dir);
  RunConfig rc = resolve_run_config(c);
  const fs::path manifest = run_generate_data(rc);
  CHECK(fs::exists(manifest));
  c.set("data.manifest", manifest.string());
  c.set("output.plot", "true");
  rc = resolve_run_config(c);
  const RunOutputs out = run_train(rc);
  CHECK(fs::exists(out.checkpoint));
  CHECK(fs::exists(out.plot));
  CHECK(read_history(out.history) == out.history_rows);
  CHECK(out.history_rows.rows.back().iteration == 6);
  CHECK(resolve_run_config(Config::load(out.config)).classifier.fc_width == 8);

  const MetricsReport rep = run_evaluate(rc);
  CHECK(rep.rows.size() == 5);
  CHECK(fs::exists(dir / "metrics.csv"));
  const fs::path pred = run_predict(rc);
  CHECK(fs::exists(pred));

  rc.task = Task::Detect;
  CHECK(error_of([&] { run_evaluate(rc); }) == Errc::BadConfig);
}

TEST_CASE("ablation on a single subset gives one row") {
  ::unsetenv("NEUROPIPE_OUT");
  const fs::path dir = scratch("ablation");
  Config c = Config::parse(R"(
task = detect
synthetic.dims = 9,32,32
synthetic.cases = 4
synthetic.fractions = 1
synthetic.radius0 = 2,3
synthetic.radius1 = 3,6
synthetic.radius2 = 3,6
detector.num_categories = 1
detector.backbone.channels = 4,8
detector.backbone.pool_after = 1,0
detector.roi_width = 16
detector.global_channels = 4
detector.fusion_width = 16
train.iterations = 3
train.batch_size = 2
)");
  c.set("output.dir", dir.string());
  RunConfig rc = resolve_run_config(c);
  c.set("data.manifest", run_generate_data(rc).string());
  rc = resolve_run_config(c);
  const auto all = std::set<Modality>{Modality::T1, Modality::T1c, Modality::T2, Modality::FLAIR};
  const AblationTable t = run_ablation(rc, {all});
  REQUIRE(t.rows.size() == 1);
  CHECK(t.rows[0].subset == all);
  CHECK(t.rows[0].dice_pooled >= 0.0);
  CHECK(t.rows[0].dice_pooled <= 1.0);
  CHECK(fs::exists(dir / "ablation.csv"));
}
