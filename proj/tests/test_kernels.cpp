#include <algorithm>
#include <cmath>
#include <vector>

#include "doctest.h"
#include "neuropipe/kernels.hpp"
#include "neuropipe/rng.hpp"

using namespace neuropipe;
using namespace neuropipe::kernels;

namespace {

std::vector<double> random_vec(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(-1.0, 1.0);
  return v;
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
  REQUIRE(a.size() == b.size());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

constexpr double kTol = 1e-10;

}  // namespace

TEST_CASE("conv2d parallel agrees with reference") {
  const ConvGeometry geoms[] = {
      {3, 17, 13, 5, 3, 3, 1, 1},
      {4, 20, 20, 6, 5, 5, 2, 2},
      {2, 9, 31, 3, 7, 7, 1, 3},
      {1, 8, 8, 2, 1, 1, 1, 0},
  };
  std::uint64_t seed = 100;
  for (const auto& g : geoms) {
    const auto x = random_vec(static_cast<std::size_t>(g.in_channels) * g.in_height * g.in_width, ++seed);
    const auto w = random_vec(g.patch() * g.out_channels, ++seed);
    const auto b = random_vec(static_cast<std::size_t>(g.out_channels), ++seed);
    const std::size_t ny = static_cast<std::size_t>(g.out_channels) * g.out_height() * g.out_width();
    std::vector<double> y1(ny), y2(ny);
    reference::conv2d_forward(g, x, w, b, y1);
    parallel::conv2d_forward(g, x, w, b, y2);
    CHECK(max_diff(y1, y2) < kTol);

    const auto dy = random_vec(ny, ++seed);
    std::vector<double> dx1(x.size()), dx2(x.size()), dw1(w.size()), dw2(w.size()), db1(b.size()),
        db2(b.size());
    reference::conv2d_backward(g, x, w, dy, dx1, dw1, db1);
    parallel::conv2d_backward(g, x, w, dy, dx2, dw2, db2);
    CHECK(max_diff(dx1, dx2) < kTol);
    CHECK(max_diff(dw1, dw2) < kTol);
    CHECK(max_diff(db1, db2) < kTol);
  }
}

TEST_CASE("linear parallel agrees with reference") {
  const int n = 3, in = 37, out = 11;
  const auto x = random_vec(static_cast<std::size_t>(n) * in, 1);
  const auto w = random_vec(static_cast<std::size_t>(in) * out, 2);
  const auto b = random_vec(out, 3);
  std::vector<double> y1(n * out), y2(n * out);
  reference::linear_forward(n, in, out, x, w, b, y1);
  parallel::linear_forward(n, in, out, x, w, b, y2);
  CHECK(max_diff(y1, y2) < kTol);

  const auto dy = random_vec(y1.size(), 4);
  std::vector<double> dx1(x.size()), dx2(x.size()), dw1(w.size()), dw2(w.size()), db1(out), db2(out);
  reference::linear_backward(n, in, out, x, w, dy, dx1, dw1, db1);
  parallel::linear_backward(n, in, out, x, w, dy, dx2, dw2, db2);
  CHECK(max_diff(dx1, dx2) < kTol);
  CHECK(max_diff(dw1, dw2) < kTol);
  CHECK(max_diff(db1, db2) < kTol);
}

TEST_CASE("pooling kernels agree with reference") {
  const PoolGeometry geoms[] = {{3, 12, 10, 2, 2, 2, 2}, {2, 9, 11, 3, 2, 2, 1}, {1, 5, 5, 1, 1, 1, 1}};
  std::uint64_t seed = 50;
  for (const auto& g : geoms) {
    const auto x = random_vec(static_cast<std::size_t>(g.channels) * g.in_height * g.in_width, ++seed);
    const std::size_t ny = static_cast<std::size_t>(g.channels) * g.out_height() * g.out_width();
    const auto dy = random_vec(ny, ++seed);

    std::vector<double> y1(ny), y2(ny), dx1(x.size()), dx2(x.size());
    reference::l2pool_forward(g, x, y1);
    parallel::l2pool_forward(g, x, y2);
    CHECK(max_diff(y1, y2) < kTol);
    reference::l2pool_backward(g, x, y1, dy, dx1);
    parallel::l2pool_backward(g, x, y2, dy, dx2);
    CHECK(max_diff(dx1, dx2) < kTol);

    std::vector<int> a1(ny), a2(ny);
    reference::maxpool_forward(g, x, y1, a1);
    parallel::maxpool_forward(g, x, y2, a2);
    CHECK(max_diff(y1, y2) == 0.0);
    CHECK(a1 == a2);
    std::fill(dx1.begin(), dx1.end(), 0.0);
    std::fill(dx2.begin(), dx2.end(), 0.0);
    reference::maxpool_backward(g, a1, dy, dx1);
    parallel::maxpool_backward(g, a2, dy, dx2);
    CHECK(max_diff(dx1, dx2) < kTol);

    reference::avgpool_forward(g, x, y1);
    parallel::avgpool_forward(g, x, y2);
    CHECK(max_diff(y1, y2) < kTol);
    std::fill(dx1.begin(), dx1.end(), 0.0);
    std::fill(dx2.begin(), dx2.end(), 0.0);
    reference::avgpool_backward(g, dy, dx1);
    parallel::avgpool_backward(g, dy, dx2);
    CHECK(max_diff(dx1, dx2) < kTol);
  }
}

TEST_CASE("conv2d reference matches a hand example") {
  // 1x3x3 input, single 2x2 kernel of ones, no padding
  const ConvGeometry g{1, 3, 3, 1, 2, 2, 1, 0};
  const std::vector<double> x{1, 2, 3, 4, 5, 6, 7, 8, 9}, w{1, 1, 1, 1}, b{0.5};
  std::vector<double> y(4);
  reference::conv2d_forward(g, x, w, b, y);
  CHECK(y == std::vector<double>{12.5, 16.5, 24.5, 28.5});
}
