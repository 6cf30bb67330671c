#include "neuropipe/layers.hpp"

#include <cmath>

#include "neuropipe/error.hpp"

namespace neuropipe {

namespace {

void he_init(Tensor& w, int fan_in, Rng& rng) {
  const double std_dev = std::sqrt(2.0 / fan_in);
  for (double& v : w.storage()) v = std_dev * rng.normal();
}

void require_chw(const Shape& in, const char* who) {
  require(in.size() == 3, Errc::ShapeMismatch, std::string(who) + " expects (C, H, W) input");
}

}  // namespace

void zero_gradients(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) p->grad.fill(0.0);
}

void fill_parameters(const std::vector<Parameter*>& params, double value) {
  for (Parameter* p : params) p->value.fill(value);
}

std::size_t parameter_count(const std::vector<Parameter*>& params) {
  std::size_t n = 0;
  for (const Parameter* p : params) n += p->value.size();
  return n;
}

Conv2d::Conv2d(const std::string& name, int in_channels, int out_channels, int kernel, int stride,
               int pad, Rng& init)
    : in_channels_(in_channels),
      out_channels_(out_channels),
      kernel_(kernel),
      stride_(stride),
      pad_(pad),
      weight_(name + ".weight", {out_channels, in_channels, kernel, kernel}),
      bias_(name + ".bias", {out_channels}) {
  require(in_channels >= 1 && out_channels >= 1 && kernel >= 1 && stride >= 1 && pad >= 0,
          Errc::BadConfig, "invalid convolution " + name);
  he_init(weight_.value, in_channels * kernel * kernel, init);
}

kernels::ConvGeometry Conv2d::geometry(const Shape& in) const {
  require_chw(in, "conv2d");
  require(in[0] == in_channels_, Errc::ShapeMismatch,
          "conv2d expects " + std::to_string(in_channels_) + " channels, got " + std::to_string(in[0]));
  kernels::ConvGeometry g{in_channels_, in[1], in[2], out_channels_, kernel_, kernel_, stride_, pad_};
  require(in[1] + 2 * pad_ >= kernel_ && in[2] + 2 * pad_ >= kernel_, Errc::BadConfig,
          "conv2d kernel larger than padded input " + shape_string(in));
  return g;
}

Shape Conv2d::output_shape(const Shape& in) const {
  const auto g = geometry(in);
  return {out_channels_, g.out_height(), g.out_width()};
}

Tensor Conv2d::forward(const Tensor& x, bool) {
  const auto g = geometry(x.shape());
  input_ = x;
  Tensor y = Tensor::chw(out_channels_, g.out_height(), g.out_width());
  kernels::parallel::conv2d_forward(g, x.values(), weight_.value.values(), bias_.value.values(), y.values());
  return y;
}

Tensor Conv2d::backward(const Tensor& grad_out) {
  const auto g = geometry(input_.shape());
  Tensor dx(input_.shape());
  kernels::parallel::conv2d_backward(g, input_.values(), weight_.value.values(), grad_out.values(),
                                     dx.values(), weight_.grad.values(), bias_.grad.values());
  return dx;
}

void Conv2d::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

Linear::Linear(const std::string& name, int in_features, int out_features, Rng& init)
    : in_(in_features),
      out_(out_features),
      weight_(name + ".weight", {out_features, in_features}),
      bias_(name + ".bias", {out_features}) {
  require(in_features >= 1 && out_features >= 1, Errc::BadConfig, "invalid linear layer " + name);
  he_init(weight_.value, in_features, init);
}

Shape Linear::output_shape(const Shape& in) const {
  const bool batched = in.size() == 2;
  require((in.size() == 1 || batched) && in.back() == in_, Errc::ShapeMismatch,
          "linear expects " + std::to_string(in_) + " features, got " + shape_string(in));
  return batched ? Shape{in[0], out_} : Shape{out_};
}

Tensor Linear::forward(const Tensor& x, bool) {
  Tensor y(output_shape(x.shape()));
  input_ = x;
  const int n = x.rank() == 2 ? x.dim(0) : 1;
  kernels::parallel::linear_forward(n, in_, out_, x.values(), weight_.value.values(),
                                    bias_.value.values(), y.values());
  return y;
}

Tensor Linear::backward(const Tensor& grad_out) {
  Tensor dx(input_.shape());
  const int n = input_.rank() == 2 ? input_.dim(0) : 1;
  kernels::parallel::linear_backward(n, in_, out_, input_.values(), weight_.value.values(),
                                     grad_out.values(), dx.values(), weight_.grad.values(),
                                     bias_.grad.values());
  return dx;
}

void Linear::collect_parameters(std::vector<Parameter*>& out) {
  out.push_back(&weight_);
  out.push_back(&bias_);
}

Tensor Relu::forward(const Tensor& x, bool) {
  input_ = x;
  Tensor y = x;
  for (double& v : y.storage()) v = v > 0.0 ? v : 0.0;
  return y;
}

Tensor Relu::backward(const Tensor& grad_out) {
  Tensor dx = grad_out;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (!(input_[i] > 0.0)) dx[i] = 0.0;
  return dx;
}

kernels::PoolGeometry Pool2d::geometry(const Shape& in) const {
  require_chw(in, "pool2d");
  require(spec_.window_h <= in[1] && spec_.window_w <= in[2], Errc::BadConfig,
          "pooling window larger than feature map " + shape_string(in));
  return {in[0], in[1], in[2], spec_.window_h, spec_.window_w, spec_.stride_h, spec_.stride_w};
}

Shape Pool2d::output_shape(const Shape& in) const {
  const auto g = geometry(in);
  return {in[0], g.out_height(), g.out_width()};
}

Tensor Pool2d::forward(const Tensor& x, bool) {
  const auto g = geometry(x.shape());
  input_ = x;
  Tensor y = Tensor::chw(g.channels, g.out_height(), g.out_width());
  switch (kind_) {
    case PoolKind::Max:
      argmax_.resize(y.size());
      kernels::parallel::maxpool_forward(g, x.values(), y.values(), argmax_);
      break;
    case PoolKind::Average: kernels::parallel::avgpool_forward(g, x.values(), y.values()); break;
    case PoolKind::L2:
      kernels::parallel::l2pool_forward(g, x.values(), y.values());
      output_ = y;
      break;
  }
  return y;
}

Tensor Pool2d::backward(const Tensor& grad_out) {
  const auto g = geometry(input_.shape());
  Tensor dx(input_.shape());
  switch (kind_) {
    case PoolKind::Max: kernels::parallel::maxpool_backward(g, argmax_, grad_out.values(), dx.values()); break;
    case PoolKind::Average: kernels::parallel::avgpool_backward(g, grad_out.values(), dx.values()); break;
    case PoolKind::L2:
      kernels::parallel::l2pool_backward(g, input_.values(), output_.values(), grad_out.values(), dx.values());
      break;
  }
  return dx;
}

Shape AdaptiveAvgPool::output_shape(const Shape& in) const {
  require_chw(in, "adaptive pool");
  require(in[1] >= grid_h_ && in[2] >= grid_w_, Errc::BadConfig,
          "feature map " + shape_string(in) + " smaller than pooling grid");
  return {in[0], grid_h_, grid_w_};
}

Tensor AdaptiveAvgPool::forward(const Tensor& x, bool) {
  const Shape out_shape = output_shape(x.shape());
  in_shape_ = x.shape();
  const int h = x.dim(1), w = x.dim(2);
  Tensor y(out_shape);
  for (int c = 0; c < x.dim(0); ++c)
    for (int by = 0; by < grid_h_; ++by)
      for (int bx = 0; bx < grid_w_; ++bx) {
        const int r0 = bin_start(by, h, grid_h_), r1 = bin_start(by + 1, h, grid_h_);
        const int c0 = bin_start(bx, w, grid_w_), c1 = bin_start(bx + 1, w, grid_w_);
        double s = 0.0;
        for (int r = r0; r < r1; ++r)
          for (int cc = c0; cc < c1; ++cc) s += x.at(c, r, cc);
        y.at(c, by, bx) = s / ((r1 - r0) * (c1 - c0));
      }
  return y;
}

Tensor AdaptiveAvgPool::backward(const Tensor& grad_out) {
  Tensor dx(in_shape_);
  const int h = in_shape_[1], w = in_shape_[2];
  for (int c = 0; c < in_shape_[0]; ++c)
    for (int by = 0; by < grid_h_; ++by)
      for (int bx = 0; bx < grid_w_; ++bx) {
        const int r0 = bin_start(by, h, grid_h_), r1 = bin_start(by + 1, h, grid_h_);
        const int c0 = bin_start(bx, w, grid_w_), c1 = bin_start(bx + 1, w, grid_w_);
        const double g = grad_out.at(c, by, bx) / ((r1 - r0) * (c1 - c0));
        for (int r = r0; r < r1; ++r)
          for (int cc = c0; cc < c1; ++cc) dx.at(c, r, cc) += g;
      }
  return dx;
}

Shape Flatten::output_shape(const Shape& in) const {
  return {static_cast<int>(shape_volume(in))};
}

Tensor Flatten::forward(const Tensor& x, bool) {
  in_shape_ = x.shape();
  return x.reshaped(output_shape(x.shape()));
}

Tensor Flatten::backward(const Tensor& grad_out) { return grad_out.reshaped(in_shape_); }

Tensor Dropout::forward(const Tensor& x, bool training) {
  if (!training || rate_ <= 0.0) {
    mask_.clear();
    return x;
  }
  const double keep = 1.0 - rate_;
  mask_.resize(x.size());
  Tensor y = x;
  for (std::size_t i = 0; i < y.size(); ++i) {
    mask_[i] = rng_.uniform() < keep ? 1.0 / keep : 0.0;
    y[i] *= mask_[i];
  }
  return y;
}

Tensor Dropout::backward(const Tensor& grad_out) {
  if (mask_.empty()) return grad_out;
  Tensor dx = grad_out;
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] *= mask_[i];
  return dx;
}

Sequential::Sequential(const Sequential& other) {
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Sequential& Sequential::operator=(const Sequential& other) {
  if (this != &other) {
    Sequential copy(other);
    layers_ = std::move(copy.layers_);
  }
  return *this;
}

Tensor Sequential::forward(const Tensor& x, bool training) {
  Tensor h = x;
  for (auto& l : layers_) h = l->forward(h, training);
  return h;
}

Tensor Sequential::backward(const Tensor& grad_out) {
  Tensor g = grad_out;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

Shape Sequential::output_shape(const Shape& in) const {
  Shape s = in;
  for (const auto& l : layers_) s = l->output_shape(s);
  return s;
}

std::vector<Parameter*> Sequential::parameters() {
  std::vector<Parameter*> out;
  for (auto& l : layers_) l->collect_parameters(out);
  return out;
}

}  // namespace neuropipe
