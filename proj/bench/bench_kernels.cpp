#include <omp.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <vector>

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

double best_ms(const std::function<void()>& f, int reps) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    best = std::min(best, std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
  }
  return best;
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void row(const char* name, double ref, double par, double diff) {
  std::printf("%-22s %10.2f %10.2f %8.2fx %10.1e\n", name, ref, par, ref / par, diff);
}

}  // namespace

int main() {
  std::printf("threads: %d\n", omp_get_max_threads());
  std::printf("%-22s %10s %10s %9s %10s\n", "kernel", "serial ms", "omp ms", "speedup", "max diff");
  const int reps = 5;

  const ConvGeometry cg{32, 64, 64, 64, 3, 3, 1, 1};
  const auto x = random_vec(cg.in_channels * cg.in_height * cg.in_width, 1);
  const auto w = random_vec(cg.out_channels * cg.patch(), 2);
  const auto b = random_vec(cg.out_channels, 3);
  const std::size_t ny = static_cast<std::size_t>(cg.out_channels) * cg.out_height() * cg.out_width();
  std::vector<double> y1(ny), y2(ny);
  const double cr = best_ms([&] { reference::conv2d_forward(cg, x, w, b, y1); }, reps);
  const double cp = best_ms([&] { parallel::conv2d_forward(cg, x, w, b, y2); }, reps);
  row("conv2d forward", cr, cp, max_diff(y1, y2));

  const auto dy = random_vec(ny, 4);
  std::vector<double> dx1(x.size()), dx2(x.size()), dw1(w.size()), dw2(w.size()), db1(b.size()), db2(b.size());
  const double br = best_ms([&] { std::fill(dw1.begin(), dw1.end(), 0.0); std::fill(db1.begin(), db1.end(), 0.0);
                                  reference::conv2d_backward(cg, x, w, dy, dx1, dw1, db1); }, reps);
  const double bp = best_ms([&] { std::fill(dw2.begin(), dw2.end(), 0.0); std::fill(db2.begin(), db2.end(), 0.0);
                                  parallel::conv2d_backward(cg, x, w, dy, dx2, dw2, db2); }, reps);
  row("conv2d backward", br, bp, std::max({max_diff(dx1, dx2), max_diff(dw1, dw2), max_diff(db1, db2)}));

  const int n = 64, in = 4096, out = 512;
  const auto lx = random_vec(static_cast<std::size_t>(n) * in, 5);
  const auto lw = random_vec(static_cast<std::size_t>(out) * in, 6);
  const auto lb = random_vec(out, 7);
  std::vector<double> ly1(static_cast<std::size_t>(n) * out), ly2(ly1.size());
  const double lr = best_ms([&] { reference::linear_forward(n, in, out, lx, lw, lb, ly1); }, reps);
  const double lp = best_ms([&] { parallel::linear_forward(n, in, out, lx, lw, lb, ly2); }, reps);
  row("linear forward", lr, lp, max_diff(ly1, ly2));

  const PoolGeometry pg{64, 128, 128, 3, 3, 2, 2};
  const auto px = random_vec(static_cast<std::size_t>(pg.channels) * pg.in_height * pg.in_width, 8);
  std::vector<double> py1(static_cast<std::size_t>(pg.channels) * pg.out_height() * pg.out_width()), py2(py1.size());
  const double pr = best_ms([&] { reference::l2pool_forward(pg, px, py1); }, reps);
  const double pp = best_ms([&] { parallel::l2pool_forward(pg, px, py2); }, reps);
  row("l2pool forward", pr, pp, max_diff(py1, py2));

  std::vector<int> a1(py1.size()), a2(py1.size());
  const double mr = best_ms([&] { reference::maxpool_forward(pg, px, py1, a1); }, reps);
  const double mp = best_ms([&] { parallel::maxpool_forward(pg, px, py2, a2); }, reps);
  row("maxpool forward", mr, mp, max_diff(py1, py2));
  return 0;
}
