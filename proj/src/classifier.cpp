#include "neuropipe/classifier.hpp"

#include "neuropipe/error.hpp"

namespace neuropipe {

void ClassifierConfig::validate() const {
  require(input_side >= 32, Errc::BadConfig,
          "classifier input side must be >= 32, got " + std::to_string(input_side));
  for (int i = 0; i < 7; ++i) {
    require(channels[i] >= 1, Errc::BadConfig, "conv widths must be >= 1");
    require(kernels[i] >= 1 && kernels[i] % 2 == 1, Errc::BadConfig, "conv kernels must be odd and >= 1");
  }
  require(fc_width >= 1, Errc::BadConfig, "fc width must be >= 1");
  require(flatten_grid >= 1, Errc::BadConfig, "flatten grid must be >= 1");
  require(dropout >= 0 && dropout < 1, Errc::BadConfig, "dropout rate must be in [0, 1)");
  require(margin > 0, Errc::BadConfig, "margin must be positive");
  // three 2x2 pools before conv7, then the adaptive grid
  require(input_side / 8 >= flatten_grid, Errc::BadConfig,
          "input side " + std::to_string(input_side) + " collapses below the flatten grid before conv7");
}

std::size_t classifier_parameter_count(const ClassifierConfig& cfg) {
  std::size_t n = 0;
  std::size_t prev = 3;
  for (int i = 0; i < 7; ++i) {
    const std::size_t k = static_cast<std::size_t>(cfg.kernels[i]);
    const std::size_t c = static_cast<std::size_t>(cfg.channels[i]);
    n += (prev * k * k + 1) * c;
    prev = c;
  }
  const std::size_t f = static_cast<std::size_t>(cfg.fc_width);
  const std::size_t g = static_cast<std::size_t>(cfg.flatten_grid);
  n += (prev * g * g + 1) * f;  // fc1
  n += 2 * (f + 1) * f;         // fc2, fc3
  n += (f + 1) * kNumClasses;   // head
  return n;
}

Classifier::Classifier(ClassifierConfig cfg) : cfg_(cfg) {
  cfg_.validate();
  Rng init(cfg_.seed);
  int prev = 3;
  auto conv = [&](int i) {
    net_.add<Conv2d>("conv" + std::to_string(i + 1), prev, cfg_.channels[i], cfg_.kernels[i], 1,
                     cfg_.kernels[i] / 2, init);
    net_.add<Relu>();
    prev = cfg_.channels[i];
  };
  const PoolSpec two{2, 2, 2, 2};
  conv(0), conv(1), conv(2);
  net_.add<Pool2d>(PoolKind::Average, two);
  conv(3), conv(4);
  net_.add<Pool2d>(PoolKind::Max, two);
  conv(5);
  net_.add<Pool2d>(PoolKind::Max, two);
  conv(6);
  net_.add<AdaptiveAvgPool>(cfg_.flatten_grid, cfg_.flatten_grid);
  net_.add<Flatten>();
  int width = prev * cfg_.flatten_grid * cfg_.flatten_grid;
  for (int i = 1; i <= 3; ++i) {
    net_.add<Linear>("fc" + std::to_string(i), width, cfg_.fc_width, init);
    net_.add<Relu>();
    width = cfg_.fc_width;
  }
  net_.add<Dropout>(cfg_.dropout, mix64(cfg_.seed ^ 0xd0d0));
  net_.add<Linear>("head", width, kNumClasses, init);
  net_.output_shape({3, cfg_.input_side, cfg_.input_side});
}

void check_classifier_input(const ClassifierConfig& cfg, const SliceStack& input) {
  const auto& tags = input.tags();
  bool planes = tags.size() == 3;
  for (std::size_t i = 0; planes && i < 3; ++i)
    planes = std::holds_alternative<Plane>(tags[i]) && std::get<Plane>(tags[i]) == kAllPlanes[i];
  require(planes, Errc::WrongChannels, "classifier input must be the (axial, coronal, sagittal) planes");
  require(input.height() == cfg.input_side && input.width() == cfg.input_side, Errc::WrongSize,
          "classifier input must be " + std::to_string(cfg.input_side) + "x" + std::to_string(cfg.input_side) +
              ", got " + std::to_string(input.height()) + "x" + std::to_string(input.width()));
}

std::vector<double> Classifier::forward(const SliceStack& input, bool training) {
  check_classifier_input(cfg_, input);
  return forward_tensor(input.pixels(), training);
}

std::vector<double> Classifier::forward_tensor(const Tensor& x, bool training) {
  require(x.shape() == Shape{3, cfg_.input_side, cfg_.input_side}, Errc::WrongSize,
          "classifier input shape " + shape_string(x.shape()));
  return net_.forward(x, training).storage();
}

Tensor Classifier::backward(std::span<const double> grad_scores) {
  return net_.backward(Tensor({kNumClasses}, std::vector<double>(grad_scores.begin(), grad_scores.end())));
}

LossGrad Classifier::loss(std::span<const double> scores, int label) const {
  if (cfg_.head == ClassifierHead::Margin) return multiclass_hinge_loss(scores, label, cfg_.margin);
  return softmax_ce(scores, label);
}

LesionClass argmax_class(std::span<const double> scores) {
  require(scores.size() == kNumClasses, Errc::ShapeMismatch, "expected 5 class scores");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return kAllClasses[best];
}

ClassPrediction predict_class(Classifier& model, const SliceStack& input) {
  ClassPrediction p;
  p.scores = model.forward(input, false);
  p.label = argmax_class(p.scores);
  return p;
}

ClassifierEval evaluate_classifier(Classifier& model, const std::vector<ClassifierSample>& samples) {
  ClassifierEval e;
  if (samples.empty()) return e;
  long hits = 0;
  for (const auto& s : samples) {
    const auto scores = model.forward(s.input, false);
    e.loss += model.loss(scores, static_cast<int>(s.label)).loss;
    const int p = static_cast<int>(argmax_class(scores));
    e.predicted.push_back(p);
    hits += p == static_cast<int>(s.label);
  }
  e.loss /= static_cast<double>(samples.size());
  e.accuracy = static_cast<double>(hits) / static_cast<double>(samples.size());
  return e;
}

namespace {

// Refits the final layer with the hinge loss on frozen penultimate features.
void refit_head_posthoc(Classifier& model, const std::vector<ClassifierSample>& train, const TrainOptions& opt) {
  Sequential& net = model.network();
  std::vector<Tensor> feats;
  for (const auto& s : train) {
    Tensor x = s.input.pixels();
    for (std::size_t i = 0; i < model.head_index(); ++i) x = net.layer(i).forward(x, false);
    feats.push_back(std::move(x));
  }
  Layer& head = net.layer(model.head_index());
  std::vector<Parameter*> params;
  head.collect_parameters(params);
  Optimizer optim(opt.optimizer, params);
  BatchSampler sampler(train.size(), mix64(opt.seed ^ 0x5e5e));
  const long steps = static_cast<long>(model.config().posthoc_epochs) *
                     static_cast<long>((train.size() + opt.batch_size - 1) / opt.batch_size);
  for (long t = 0; t < steps; ++t) {
    optim.zero_grad();
    const auto batch = sampler.next(opt.batch_size);
    for (std::size_t i : batch) {
      const Tensor scores = head.forward(feats[i], true);
      LossGrad lg = multiclass_hinge_loss(scores.storage(), static_cast<int>(train[i].label), model.config().margin);
      for (double& g : lg.grad) g /= static_cast<double>(batch.size());
      head.backward(Tensor({kNumClasses}, lg.grad));
    }
    optim.step();
  }
}

}  // namespace

TrainHistory train_classifier(Classifier& model, const std::vector<ClassifierSample>& train,
                              const std::vector<ClassifierSample>& test, const TrainOptions& opt) {
  opt.validate();
  require(!train.empty(), Errc::EmptyDataset, "classifier training set is empty");
  for (const auto& s : train) check_classifier_input(model.config(), s.input);
  for (const auto& s : test) check_classifier_input(model.config(), s.input);

  Optimizer optim(opt.optimizer, model.parameters());
  BatchSampler sampler(train.size(), opt.seed);
  TrainHistory history;
  const double inv = 1.0 / opt.batch_size;
  for (long t = 1; t <= opt.iterations; ++t) {
    optim.zero_grad();
    double batch_loss = 0;
    const auto batch = sampler.next(opt.batch_size);
    for (std::size_t b = 0; b < batch.size(); ++b) {
      const auto& s = train[batch[b]];
      const std::uint64_t draw = static_cast<std::uint64_t>(t - 1) * opt.batch_size + b;
      const SliceStack x = apply_policy(s.input, opt.augment, draw);
      Tensor px = x.pixels();
      if (x.height() != model.config().input_side || x.width() != model.config().input_side)
        px = fit_to_size(x, model.config().input_side, model.config().input_side).pixels();
      const auto scores = model.forward_tensor(px, true);
      LossGrad lg = model.loss(scores, static_cast<int>(s.label));
      batch_loss += lg.loss * inv;
      for (double& g : lg.grad) g *= inv;
      model.backward(lg.grad);
    }
    check_loss(batch_loss, t, "classifier");
    optim.step();
    if (should_log(t, opt)) {
      if (t == opt.iterations && model.config().head == ClassifierHead::SvmPosthoc)
        refit_head_posthoc(model, train, opt);
      const ClassifierEval e = evaluate_classifier(model, test.empty() ? train : test);
      HistoryRow row{t, batch_loss, e.loss, e.accuracy};
      history.add(row);
      if (opt.on_row) opt.on_row(row);
    }
  }
  return history;
}

}  // namespace neuropipe
