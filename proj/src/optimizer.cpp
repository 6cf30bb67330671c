#include "neuropipe/optimizer.hpp"

#include <cmath>

#include "neuropipe/error.hpp"

namespace neuropipe {

Optimizer::Optimizer(OptimizerConfig cfg, std::vector<Parameter*> params)
    : cfg_(cfg), params_(std::move(params)) {
  require(cfg_.learning_rate >= 0.0 && cfg_.weight_decay >= 0.0, Errc::BadConfig,
          "learning rate and weight decay must be non-negative");
  for (const Parameter* p : params_) {
    first_.emplace_back(p->value.shape());
    if (cfg_.kind == OptimizerKind::Adam) second_.emplace_back(p->value.shape());
  }
}

void Optimizer::step() {
  ++steps_;
  const double lr = cfg_.learning_rate;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& w = params_[k]->value;
    const Tensor& g = params_[k]->grad;
    Tensor& m = first_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] + cfg_.weight_decay * w[i];
      if (cfg_.kind == OptimizerKind::Sgd) {
        m[i] = cfg_.momentum * m[i] + gi;
        w[i] -= lr * m[i];
      } else {
        Tensor& v = second_[k];
        m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
        v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
        w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.epsilon);
      }
    }
  }
}

}  // namespace neuropipe
