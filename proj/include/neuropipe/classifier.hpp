#pragma once

#include <array>
#include <span>
#include <vector>

#include "neuropipe/labels.hpp"
#include "neuropipe/layers.hpp"
#include "neuropipe/synthetic.hpp"
#include "neuropipe/training.hpp"

namespace neuropipe {

// margin: hinge loss trained end to end. softmax: cross-entropy. svm_posthoc:
// cross-entropy training, then the last layer is refit with the hinge loss on
// frozen features.
enum class ClassifierHead { Margin, Softmax, SvmPosthoc };

struct ClassifierConfig {
  int input_side = 256;
  std::array<int, 7> channels{64, 128, 256, 256, 512, 512, 512};
  std::array<int, 7> kernels{3, 3, 3, 3, 3, 3, 3};
  // conv7 output is average-pooled to flatten_grid x flatten_grid before fc1.
  int flatten_grid = 2;
  int fc_width = 4096;
  double dropout = 0.5;
  ClassifierHead head = ClassifierHead::Margin;
  double margin = 1.0;
  int posthoc_epochs = 50;
  Modality modality = Modality::FLAIR;  // which volume the three planes come from
  std::uint64_t seed = 1;

  void validate() const;  // BadConfig
};

std::size_t classifier_parameter_count(const ClassifierConfig& cfg);

class Classifier {
 public:
  explicit Classifier(ClassifierConfig cfg);

  const ClassifierConfig& config() const { return cfg_; }
  // Requires an (axial, coronal, sagittal) stack of side input_side.
  std::vector<double> forward(const SliceStack& input, bool training = false);
  std::vector<double> forward_tensor(const Tensor& x, bool training = false);
  // Gradient of the last forward w.r.t. its input; parameter gradients accumulate.
  Tensor backward(std::span<const double> grad_scores);
  LossGrad loss(std::span<const double> scores, int label) const;

  std::vector<Parameter*> parameters() { return net_.parameters(); }
  Sequential& network() { return net_; }
  // Index of the final linear layer inside network().
  std::size_t head_index() const { return net_.size() - 1; }

 private:
  ClassifierConfig cfg_;
  Sequential net_;
};

inline Classifier build_classifier(const ClassifierConfig& cfg) { return Classifier(cfg); }

// Throws WrongChannels / WrongSize.
void check_classifier_input(const ClassifierConfig& cfg, const SliceStack& input);

LesionClass argmax_class(std::span<const double> scores);  // ties go to the lowest ordinal

struct ClassPrediction {
  LesionClass label = LesionClass::Healthy;
  std::vector<double> scores;
};
ClassPrediction predict_class(Classifier& model, const SliceStack& input);

// test may be empty; test_loss and accuracy then use the training set in eval mode.
TrainHistory train_classifier(Classifier& model, const std::vector<ClassifierSample>& train,
                              const std::vector<ClassifierSample>& test, const TrainOptions& opt);

struct ClassifierEval {
  double loss = 0;
  double accuracy = 0;
  std::vector<int> predicted;
};
ClassifierEval evaluate_classifier(Classifier& model, const std::vector<ClassifierSample>& samples);

}  // namespace neuropipe
