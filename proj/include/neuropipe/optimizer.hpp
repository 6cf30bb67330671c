#pragma once

#include <string>
#include <vector>

#include "neuropipe/layers.hpp"

namespace neuropipe {

enum class OptimizerKind { Sgd, Adam };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Adam;
  double learning_rate = 1e-3;
  double momentum = 0.9;  // SGD only
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.0;  // L2 penalty added to every gradient
};

class Optimizer {
 public:
  Optimizer(OptimizerConfig cfg, std::vector<Parameter*> params);

  void zero_grad() { zero_gradients(params_); }
  void step();
  const std::vector<Parameter*>& parameters() const { return params_; }

 private:
  OptimizerConfig cfg_;
  std::vector<Parameter*> params_;
  std::vector<Tensor> first_, second_;
  long steps_ = 0;
};

}  // namespace neuropipe
