#include <chrono>
#include <cmath>

#include "doctest.h"
#include "neuropipe/classifier.hpp"
#include "neuropipe/error.hpp"

using namespace neuropipe;

namespace {

ClassifierConfig tiny(int side = 32) {
  ClassifierConfig c;
  c.input_side = side;
  c.channels = {2, 2, 2, 2, 2, 2, 2};
  c.fc_width = 8;
  c.dropout = 0.0;
  return c;
}

ClassifierConfig small(int side = 32) {
  ClassifierConfig c;
  c.input_side = side;
  c.channels = {4, 8, 8, 16, 16, 16, 16};
  c.fc_width = 32;
  c.dropout = 0.0;
  return c;
}

std::vector<ClassifierSample> synthetic_samples(int n, int side, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.seed = seed;
  std::vector<ClassifierSample> out;
  for (int i = 0; i < n; ++i)
    out.push_back(classifier_sample(generate_case(spec, static_cast<std::uint64_t>(i)), Modality::FLAIR, side));
  return out;
}

SliceStack plane_input(int side, double value) {
  return SliceStack(Tensor({3, side, side}, value), {Plane::Axial, Plane::Coronal, Plane::Sagittal});
}

template <class F>
Errc error_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  return Errc::ParseError;
}

}  // namespace

TEST_CASE("parameter count") {
  // conv1 (3*9+1)*2, conv2..7 (2*9+1)*2 each, fc1 (2*4+1)*8, fc2/fc3 (8+1)*8, head (8+1)*5
  const std::size_t expect = 56 + 6 * 38 + 72 + 2 * 72 + 45;
  CHECK(expect == 545);
  CHECK(classifier_parameter_count(tiny()) == expect);
  Classifier m(tiny());
  CHECK(parameter_count(m.parameters()) == expect);

  Classifier s(small(64));
  CHECK(parameter_count(s.parameters()) == classifier_parameter_count(small(64)));
  // default widths 64,128,256,256,512,512,512 with 3x3 kernels, 2x2 flatten grid, fc 4096
  CHECK(classifier_parameter_count(ClassifierConfig{}) == 48836485u);
}

TEST_CASE("configuration errors") {
  ClassifierConfig c = small();
  c.input_side = 8;
  CHECK(error_of([&] { Classifier m(c); }) == Errc::BadConfig);
  c = small();
  c.fc_width = 0;
  CHECK(error_of([&] { Classifier m(c); }) == Errc::BadConfig);
}

TEST_CASE("shape contract over input sides") {
  for (int side : {32, 64, 128, 256}) {
    Classifier m(small(side));
    const auto scores = m.forward(plane_input(side, 0.3));
    CHECK(scores.size() == 5);
    for (double s : scores) CHECK(std::isfinite(s));
  }
}

TEST_CASE("default configuration at 256") {
  Classifier m(ClassifierConfig{});
  const auto t0 = std::chrono::steady_clock::now();
  const auto scores = m.forward(plane_input(256, 0.5));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  MESSAGE("default S=256 forward took " << secs << " s");
  CHECK(scores.size() == 5);
}

TEST_CASE("forward input checks and determinism") {
  Classifier m(small());
  CHECK(error_of([&] { m.forward(SliceStack(Tensor({3, 32, 32}, 0.0), {Modality::T1, Modality::T2, Modality::FLAIR})); }) ==
        Errc::WrongChannels);
  CHECK(error_of([&] { m.forward(plane_input(48, 0.0)); }) == Errc::WrongSize);
  const SliceStack x = synthetic_samples(1, 32, 3)[0].input;
  CHECK(m.forward(x) == m.forward(x));

  fill_parameters(m.parameters(), 0.0);
  for (double s : m.forward(plane_input(32, 0.0))) CHECK(s == 0.0);
}

TEST_CASE("prediction rules") {
  CHECK(argmax_class(std::vector<double>{0.1, 0.9, 0, 0, 0}) == LesionClass::TumorHGG);
  CHECK(argmax_class(std::vector<double>{0.5, 0.5, 0, 0, 0}) == LesionClass::Healthy);
  const std::vector<double> s{0.3, -1.0, 2.5, 2.4, 0.0};
  std::vector<double> t;
  for (double v : s) t.push_back(std::exp(3.0 * v) + 7.0);
  CHECK(argmax_class(s) == argmax_class(t));
}

TEST_CASE("satisfied margins give zero loss") {
  Classifier m(small());
  const std::vector<double> scores{0, 0, 5, 0, 0};
  const LossGrad lg = m.loss(scores, 2);
  CHECK(lg.loss == 0.0);
}

TEST_CASE("training behaviour") {
  const auto data = synthetic_samples(5, 32, 4);
  SUBCASE("empty dataset") {
    Classifier m(small());
    CHECK(error_of([&] { train_classifier(m, {}, {}, TrainOptions{}); }) == Errc::EmptyDataset);
  }
  SUBCASE("zero learning rate keeps parameters") {
    Classifier m(small());
    std::vector<Tensor> before;
    for (auto* p : m.parameters()) before.push_back(p->value);
    TrainOptions opt;
    opt.iterations = 3;
    opt.batch_size = 2;
    opt.optimizer.learning_rate = 0.0;
    train_classifier(m, data, {}, opt);
    const auto after = m.parameters();
    for (std::size_t i = 0; i < before.size(); ++i) CHECK(after[i]->value == before[i]);
  }
  SUBCASE("loss on a fixed batch decreases") {
    Classifier m(small());
    TrainOptions opt;
    opt.iterations = 10;
    opt.batch_size = 5;
    opt.log_every = 1;
    opt.optimizer.kind = OptimizerKind::Sgd;
    opt.optimizer.momentum = 0.0;
    opt.optimizer.learning_rate = 1e-3;
    const TrainHistory h = train_classifier(m, data, {}, opt);
    REQUIRE(h.rows.size() == 10);
    for (std::size_t i = 1; i < h.rows.size(); ++i) CHECK(h.rows[i].test_loss < h.rows[i - 1].test_loss);
  }
  SUBCASE("posthoc svm head") {
    ClassifierConfig c = small();
    c.head = ClassifierHead::SvmPosthoc;
    c.posthoc_epochs = 5;
    Classifier m(c);
    TrainOptions opt;
    opt.iterations = 4;
    opt.batch_size = 5;
    const TrainHistory h = train_classifier(m, data, {}, opt);
    CHECK(h.rows.size() == 1);
  }
}

TEST_CASE("overfits a small synthetic set") {
  const auto data = synthetic_samples(10, 32, 5);
  Classifier m(small());
  TrainOptions opt;
  opt.iterations = 150;
  opt.batch_size = 5;
  opt.log_every = 50;
  const TrainHistory h = train_classifier(m, data, {}, opt);
  MESSAGE("final accuracy " << h.rows.back().accuracy);
  CHECK(h.rows.back().accuracy >= 0.9);
  for (const auto& s : data) CHECK(predict_class(m, s.input).label == s.label);
}
