#include <algorithm>
#include <cmath>

#include "neuropipe/gradcheck.hpp"
#include "neuropipe/layers.hpp"
#include "neuropipe/ops.hpp"
#include "neuropipe/rng.hpp"

namespace neuropipe {

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = rng.uniform(-1.0, 1.0);
  return t;
}

GradCheckResult compare(std::string name, std::span<const double> analytic,
                        std::span<const double> numeric, double tolerance) {
  GradCheckResult r{std::move(name), 0.0, tolerance, static_cast<int>(analytic.size())};
  for (std::size_t i = 0; i < analytic.size(); ++i)
    r.max_rel_error = std::max(r.max_rel_error, relative_error(analytic[i], numeric[i]));
  return r;
}

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Scores near a hinge point make the loss non-differentiable within eps; redraw.
std::vector<double> hinge_safe_scores(Rng& rng, int label, double margin) {
  for (;;) {
    std::vector<double> s(5);
    for (double& v : s) v = rng.uniform(-2.0, 2.0);
    bool safe = true;
    for (std::size_t j = 0; j < s.size(); ++j)
      if (static_cast<int>(j) != label &&
          std::abs(margin + s[j] - s[static_cast<std::size_t>(label)]) < 10 * kGradEps)
        safe = false;
    if (safe) return s;
  }
}

}  // namespace

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

std::vector<double> numeric_gradient(const std::function<double()>& loss, std::span<double> x,
                                     double eps, std::span<const std::size_t> which) {
  std::vector<std::size_t> idx(which.begin(), which.end());
  if (idx.empty())
    for (std::size_t i = 0; i < x.size(); ++i) idx.push_back(i);
  std::vector<double> g;
  g.reserve(idx.size());
  for (std::size_t i : idx) {
    const double saved = x[i];
    x[i] = saved + eps;
    const double up = loss();
    x[i] = saved - eps;
    const double down = loss();
    x[i] = saved;
    g.push_back((up - down) / (2.0 * eps));
  }
  return g;
}

std::vector<GradCheckResult> operator_gradient_checks(std::uint64_t seed) {
  Rng rng(seed);
  std::vector<GradCheckResult> out;

  {  // l2pool: L = <w, y(x)> with overlapping windows
    Tensor x = random_tensor({2, 6, 6}, rng);
    const PoolSpec spec{3, 2, 2, 1};
    const Tensor weight = random_tensor(l2pool_forward(x, spec).shape(), rng);
    const Tensor analytic = l2pool_backward(x, spec, weight);
    const auto numeric = numeric_gradient(
        [&] { return dot(l2pool_forward(x, spec).values(), weight.values()); }, x.values(), kGradEps);
    out.push_back(compare("l2pool", analytic.values(), numeric, kOperatorTolerance));
  }
  {  // hinge
    const double margin = 1.0;
    double worst = 0.0;
    int n = 0;
    for (int trial = 0; trial < 20; ++trial) {
      const int label = trial % 5;
      std::vector<double> s = hinge_safe_scores(rng, label, margin);
      const auto analytic = multiclass_hinge_loss(s, label, margin).grad;
      const auto numeric = numeric_gradient(
          [&] { return multiclass_hinge_loss(s, label, margin).loss; }, s, kGradEps);
      const auto r = compare("", analytic, numeric, kOperatorTolerance);
      worst = std::max(worst, r.max_rel_error);
      n += r.checked;
    }
    out.push_back({"multiclass_hinge", worst, kOperatorTolerance, n});
  }
  {  // softmax cross-entropy
    double worst = 0.0;
    int n = 0;
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> s(5);
      for (double& v : s) v = rng.uniform(-3.0, 3.0);
      const int label = trial % 5;
      const auto analytic = softmax_ce(s, label).grad;
      const auto numeric = numeric_gradient([&] { return softmax_ce(s, label).loss; }, s, kGradEps);
      const auto r = compare("", analytic, numeric, kOperatorTolerance);
      worst = std::max(worst, r.max_rel_error);
      n += r.checked;
    }
    out.push_back({"softmax_ce", worst, kOperatorTolerance, n});
  }
  {  // smooth-l1 away from |u| = 1
    double worst = 0.0;
    int n = 0;
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> p(4), t(4);
      for (std::size_t d = 0; d < 4; ++d) {
        double u;
        do u = rng.uniform(-3.0, 3.0);
        while (std::abs(std::abs(u) - 1.0) < 10 * kGradEps);
        t[d] = rng.uniform(-1.0, 1.0);
        p[d] = t[d] + u;
      }
      const auto analytic = smooth_l1(p, t).grad;
      const auto numeric = numeric_gradient([&] { return smooth_l1(p, t).loss; }, p, kGradEps);
      const auto r = compare("", analytic, numeric, kOperatorTolerance);
      worst = std::max(worst, r.max_rel_error);
      n += r.checked;
    }
    out.push_back({"smooth_l1", worst, kOperatorTolerance, n});
  }
  {  // sigmoid BCE
    std::vector<double> z(12), t(12);
    for (std::size_t i = 0; i < z.size(); ++i) {
      z[i] = rng.uniform(-4.0, 4.0);
      t[i] = rng.uniform() < 0.5 ? 0.0 : 1.0;
    }
    const auto analytic = sigmoid_bce(z, t).grad;
    const auto numeric = numeric_gradient([&] { return sigmoid_bce(z, t).loss; }, z, kGradEps);
    out.push_back(compare("sigmoid_bce", analytic, numeric, kOperatorTolerance));
  }
  {  // roi pooling: distinct values keep every bin's winner stable under eps
    Tensor x({2, 7, 9});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = 0.01 * static_cast<double>((i * 37) % x.size());
    const Roi roi{{1.2, 0.6, 8.4, 6.3}, 3, 2};
    const auto fwd = roi_spp_pool_indexed(x, roi);
    const Tensor weight = random_tensor(fwd.values.shape(), rng);
    Tensor analytic(x.shape());
    roi_spp_pool_backward(fwd, weight, analytic);
    const auto numeric = numeric_gradient(
        [&] { return dot(roi_spp_pool(x, roi).values(), weight.values()); }, x.values(), kGradEps);
    out.push_back(compare("roi_spp_pool", analytic.values(), numeric, kOperatorTolerance));
  }
  {  // conv2d input and weight gradients, stride 2 with padding
    Rng init(seed + 1);
    Conv2d conv("conv", 2, 3, 3, 2, 1, init);
    Tensor x = random_tensor({2, 7, 6}, rng);
    const Tensor weight = random_tensor(conv.output_shape(x.shape()), rng);
    conv.forward(x, true);
    conv.weight().grad.fill(0.0);
    const Tensor dx = conv.backward(weight);
    auto loss = [&] { return dot(conv.forward(x, false).values(), weight.values()); };
    const auto num_x = numeric_gradient(loss, x.values(), kGradEps);
    const Tensor dw = conv.weight().grad;
    const auto num_w = numeric_gradient(loss, conv.weight().value.values(), kGradEps);
    auto r = compare("conv2d", dx.values(), num_x, kOperatorTolerance);
    const auto rw = compare("", dw.values(), num_w, kOperatorTolerance);
    r.max_rel_error = std::max(r.max_rel_error, rw.max_rel_error);
    r.checked += rw.checked;
    out.push_back(r);
  }
  {  // linear on a batch
    Rng init(seed + 2);
    Linear fc("fc", 5, 4, init);
    Tensor x = random_tensor({3, 5}, rng);
    const Tensor weight = random_tensor({3, 4}, rng);
    fc.forward(x, true);
    const Tensor dx = fc.backward(weight);
    auto loss = [&] { return dot(fc.forward(x, false).values(), weight.values()); };
    const auto num_x = numeric_gradient(loss, x.values(), kGradEps);
    const Tensor dw = fc.weight().grad;
    const auto num_w = numeric_gradient(loss, fc.weight().value.values(), kGradEps);
    auto r = compare("linear", dx.values(), num_x, kOperatorTolerance);
    const auto rw = compare("", dw.values(), num_w, kOperatorTolerance);
    r.max_rel_error = std::max(r.max_rel_error, rw.max_rel_error);
    r.checked += rw.checked;
    out.push_back(r);
  }
  return out;
}

}  // namespace neuropipe
