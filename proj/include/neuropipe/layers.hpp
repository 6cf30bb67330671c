#pragma once

#include <memory>
#include <string>
#include <vector>

#include "neuropipe/kernels.hpp"
#include "neuropipe/ops.hpp"
#include "neuropipe/rng.hpp"
#include "neuropipe/tensor.hpp"

namespace neuropipe {

struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter(std::string n, Shape shape) : name(std::move(n)), value(shape), grad(shape) {}
};

void zero_gradients(const std::vector<Parameter*>& params);
void fill_parameters(const std::vector<Parameter*>& params, double value);
std::size_t parameter_count(const std::vector<Parameter*>& params);

// A layer caches what its backward pass needs from the latest forward call,
// so one instance serves one forward/backward pair at a time.
class Layer {
 public:
  virtual ~Layer() = default;

  virtual Tensor forward(const Tensor& x, bool training) = 0;
  // Returns the gradient w.r.t. the last forward input; parameter gradients accumulate.
  virtual Tensor backward(const Tensor& grad_out) = 0;
  // Throws BadConfig when the input cannot produce a non-empty output.
  virtual Shape output_shape(const Shape& in) const = 0;
  virtual void collect_parameters(std::vector<Parameter*>&) {}
  virtual std::unique_ptr<Layer> clone() const = 0;
};

class Conv2d final : public Layer {
 public:
  Conv2d(const std::string& name, int in_channels, int out_channels, int kernel, int stride, int pad,
         Rng& init);

  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  Shape output_shape(const Shape& in) const override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv2d>(*this); }

  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }

 private:
  kernels::ConvGeometry geometry(const Shape& in) const;

  int in_channels_, out_channels_, kernel_, stride_, pad_;
  Parameter weight_, bias_;
  Tensor input_;
};

// Accepts (in) or (n, in); returns (out) or (n, out).
class Linear final : public Layer {
 public:
  Linear(const std::string& name, int in_features, int out_features, Rng& init);

  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  Shape output_shape(const Shape& in) const override;
  void collect_parameters(std::vector<Parameter*>& out) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Linear>(*this); }

  int in_features() const { return in_; }
  int out_features() const { return out_; }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }

 private:
  int in_, out_;
  Parameter weight_, bias_;
  Tensor input_;
};

class Relu final : public Layer {
 public:
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  Shape output_shape(const Shape& in) const override { return in; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Relu>(*this); }

 private:
  Tensor input_;
};

enum class PoolKind { Max, Average, L2 };

class Pool2d final : public Layer {
 public:
  Pool2d(PoolKind kind, PoolSpec spec) : kind_(kind), spec_(spec) {}

  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  Shape output_shape(const Shape& in) const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Pool2d>(*this); }

 private:
  kernels::PoolGeometry geometry(const Shape& in) const;

  PoolKind kind_;
  PoolSpec spec_;
  Tensor input_, output_;
  std::vector<int> argmax_;
};

// Averages each of grid_h x grid_w floor-partitioned bins.
class AdaptiveAvgPool final : public Layer {
 public:
  AdaptiveAvgPool(int grid_h, int grid_w) : grid_h_(grid_h), grid_w_(grid_w) {}

  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  Shape output_shape(const Shape& in) const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<AdaptiveAvgPool>(*this); }

 private:
  int grid_h_, grid_w_;
  Shape in_shape_;
};

class Flatten final : public Layer {
 public:
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  Shape output_shape(const Shape& in) const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Flatten>(*this); }

 private:
  Shape in_shape_;
};

// Inverted dropout; identity outside training.
class Dropout final : public Layer {
 public:
  Dropout(double rate, std::uint64_t seed) : rate_(rate), rng_(seed) {}

  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  Shape output_shape(const Shape& in) const override { return in; }
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Dropout>(*this); }

 private:
  double rate_;
  Rng rng_;
  std::vector<double> mask_;
};

class Sequential {
 public:
  Sequential() = default;
  Sequential(const Sequential& other);
  Sequential& operator=(const Sequential& other);
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  template <typename L, typename... Args>
  L& add(Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers_.push_back(std::move(layer));
    return ref;
  }

  Tensor forward(const Tensor& x, bool training);
  Tensor backward(const Tensor& grad_out);
  Shape output_shape(const Shape& in) const;
  std::vector<Parameter*> parameters();
  std::size_t size() const { return layers_.size(); }
  Layer& layer(std::size_t i) { return *layers_[i]; }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

}  // namespace neuropipe
