#include "neuropipe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "neuropipe/error.hpp"

namespace neuropipe {

std::string shape_string(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

std::size_t shape_volume(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    require(d >= 0, Errc::ShapeMismatch, "negative extent in " + shape_string(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), values_(shape_volume(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
  require(values_.size() == shape_volume(shape_), Errc::ShapeMismatch,
          "value count does not match shape " + shape_string(shape_));
}

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor copy = *this;
  return std::move(copy).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
  require(shape_volume(shape) == values_.size(), Errc::ShapeMismatch,
          "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  shape_ = std::move(shape);
  return std::move(*this);
}

void Tensor::fill(double value) { std::fill(values_.begin(), values_.end(), value); }

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

double max_abs_difference(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), Errc::ShapeMismatch,
          shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = std::abs(a[i] - b[i]);
    if (std::isnan(d)) return std::numeric_limits<double>::infinity();
    worst = std::max(worst, d);
  }
  return worst;
}

}  // namespace neuropipe
