#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "neuropipe/kernels.hpp"

namespace neuropipe::kernels::parallel {

namespace {

constexpr int kTile = 256;  // output pixels per im2col tile

// Fills col (patch x tile) for output pixels [p0, p0 + n).
void im2col_tile(const ConvGeometry& g, In x, int p0, int n, double* col) {
  const int ow = g.out_width();
  for (int ci = 0; ci < g.in_channels; ++ci)
    for (int ky = 0; ky < g.kernel_h; ++ky)
      for (int kx = 0; kx < g.kernel_w; ++kx) {
        double* row = col + (static_cast<std::size_t>(ci * g.kernel_h + ky) * g.kernel_w + kx) * n;
        for (int j = 0; j < n; ++j) {
          const int p = p0 + j;
          const int iy = (p / ow) * g.stride - g.pad + ky;
          const int ix = (p % ow) * g.stride - g.pad + kx;
          row[j] = (iy < 0 || iy >= g.in_height || ix < 0 || ix >= g.in_width)
                       ? 0.0
                       : x[(static_cast<std::size_t>(ci) * g.in_height + iy) * g.in_width + ix];
        }
      }
}

}  // namespace

void conv2d_forward(const ConvGeometry& g, In x, In w, In b, Out y) {
  // Tiles of kFwdTile pixels; the patch dimension is walked in blocks that
  // stay in cache while four output channels accumulate from each block.
  constexpr int kFwdTile = 64;
  constexpr std::size_t kBlock = 128;
  const int pixels = g.out_height() * g.out_width();
  const std::size_t patch = g.patch();
  const int tiles = (pixels + kFwdTile - 1) / kFwdTile;
  const int outs = g.out_channels;
#pragma omp parallel
  {
    std::vector<double> col(patch * kFwdTile);
    std::vector<double> acc(static_cast<std::size_t>(outs) * kFwdTile);
#pragma omp for schedule(static)
    for (int t = 0; t < tiles; ++t) {
      const int p0 = t * kFwdTile;
      const int n = std::min(kFwdTile, pixels - p0);
      im2col_tile(g, x, p0, n, col.data());
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t k0 = 0; k0 < patch; k0 += kBlock) {
        const std::size_t k1 = std::min(patch, k0 + kBlock);
        int o = 0;
        for (; o + 4 <= outs; o += 4) {
          double* a0 = acc.data() + static_cast<std::size_t>(o) * kFwdTile;
          double* a1 = a0 + kFwdTile;
          double* a2 = a1 + kFwdTile;
          double* a3 = a2 + kFwdTile;
          const double* w0 = w.data() + static_cast<std::size_t>(o) * patch;
          const double* w1 = w0 + patch;
          const double* w2 = w1 + patch;
          const double* w3 = w2 + patch;
          for (std::size_t k = k0; k < k1; ++k) {
            const double* crow = col.data() + k * n;
            const double c0 = w0[k], c1 = w1[k], c2 = w2[k], c3 = w3[k];
            for (int j = 0; j < n; ++j) {
              const double v = crow[j];
              a0[j] += c0 * v;
              a1[j] += c1 * v;
              a2[j] += c2 * v;
              a3[j] += c3 * v;
            }
          }
        }
        for (; o < outs; ++o) {
          double* a = acc.data() + static_cast<std::size_t>(o) * kFwdTile;
          const double* wr = w.data() + static_cast<std::size_t>(o) * patch;
          for (std::size_t k = k0; k < k1; ++k) {
            const double* crow = col.data() + k * n;
            const double c = wr[k];
            for (int j = 0; j < n; ++j) a[j] += c * crow[j];
          }
        }
      }
      for (int o = 0; o < outs; ++o) {
        const double* a = acc.data() + static_cast<std::size_t>(o) * kFwdTile;
        double* yrow = y.data() + static_cast<std::size_t>(o) * pixels + p0;
        for (int j = 0; j < n; ++j) yrow[j] = a[j] + b[static_cast<std::size_t>(o)];
      }
    }
  }
}

void conv2d_backward(const ConvGeometry& g, In x, In w, In dy, Out dx, Out dw, Out db) {
  const int pixels = g.out_height() * g.out_width();
  const std::size_t patch = g.patch();
  const int khw = g.kernel_h * g.kernel_w;

#pragma omp parallel for schedule(static)
  for (int o = 0; o < g.out_channels; ++o) {
    const double* grow = dy.data() + static_cast<std::size_t>(o) * pixels;
    double s = 0.0;
    for (int p = 0; p < pixels; ++p) s += grow[p];
    db[static_cast<std::size_t>(o)] += s;
  }

  std::vector<double> col(patch * kTile);
  for (int p0 = 0; p0 < pixels; p0 += kTile) {
    const int n = std::min(kTile, pixels - p0);
    im2col_tile(g, x, p0, n, col.data());
#pragma omp parallel for schedule(static)
    for (int o = 0; o < g.out_channels; ++o) {
      const double* grow = dy.data() + static_cast<std::size_t>(o) * pixels + p0;
      double* dwrow = dw.data() + static_cast<std::size_t>(o) * patch;
      for (std::size_t k = 0; k < patch; ++k) {
        const double* crow = col.data() + k * n;
        double s = 0.0;
        for (int j = 0; j < n; ++j) s += grow[j] * crow[j];
        dwrow[k] += s;
      }
    }
  }

  if (dx.empty()) return;
  std::fill(dx.begin(), dx.end(), 0.0);
  const int ow = g.out_width();
#pragma omp parallel
  {
    std::vector<double> dcol(static_cast<std::size_t>(pixels));
#pragma omp for schedule(static)
    for (int ci = 0; ci < g.in_channels; ++ci) {
      double* dxc = dx.data() + static_cast<std::size_t>(ci) * g.in_height * g.in_width;
      for (int kk = 0; kk < khw; ++kk) {
        const int ky = kk / g.kernel_w, kx = kk % g.kernel_w;
        const std::size_t k = static_cast<std::size_t>(ci) * khw + kk;
        std::fill(dcol.begin(), dcol.end(), 0.0);
        for (int o = 0; o < g.out_channels; ++o) {
          const double wk = w[static_cast<std::size_t>(o) * patch + k];
          const double* grow = dy.data() + static_cast<std::size_t>(o) * pixels;
          for (int p = 0; p < pixels; ++p) dcol[static_cast<std::size_t>(p)] += wk * grow[p];
        }
        for (int p = 0; p < pixels; ++p) {
          const int iy = (p / ow) * g.stride - g.pad + ky;
          const int ix = (p % ow) * g.stride - g.pad + kx;
          if (iy < 0 || iy >= g.in_height || ix < 0 || ix >= g.in_width) continue;
          dxc[static_cast<std::size_t>(iy) * g.in_width + ix] += dcol[static_cast<std::size_t>(p)];
        }
      }
    }
  }
}

void linear_forward(int n, int in, int out, In x, In w, In b, Out y) {
  const long total = static_cast<long>(n) * out;
#pragma omp parallel for schedule(static)
  for (long so = 0; so < total; ++so) {
    const long s = so / out, o = so % out;
    const double* wrow = w.data() + o * in;
    const double* xrow = x.data() + s * in;
    double acc = 0.0;
    for (int i = 0; i < in; ++i) acc += wrow[i] * xrow[i];
    y[static_cast<std::size_t>(so)] = acc + b[static_cast<std::size_t>(o)];
  }
}

void linear_backward(int n, int in, int out, In x, In w, In dy, Out dx, Out dw, Out db) {
#pragma omp parallel for schedule(static)
  for (int o = 0; o < out; ++o) {
    double* dwrow = dw.data() + static_cast<std::size_t>(o) * in;
    for (int s = 0; s < n; ++s) {
      const double gy = dy[static_cast<std::size_t>(s) * out + o];
      db[static_cast<std::size_t>(o)] += gy;
      const double* xrow = x.data() + static_cast<std::size_t>(s) * in;
      for (int i = 0; i < in; ++i) dwrow[i] += gy * xrow[i];
    }
  }
  if (dx.empty()) return;
#pragma omp parallel for schedule(static)
  for (int s = 0; s < n; ++s) {
    double* dxrow = dx.data() + static_cast<std::size_t>(s) * in;
    std::fill_n(dxrow, in, 0.0);
    for (int o = 0; o < out; ++o) {
      const double gy = dy[static_cast<std::size_t>(s) * out + o];
      const double* wrow = w.data() + static_cast<std::size_t>(o) * in;
      for (int i = 0; i < in; ++i) dxrow[i] += gy * wrow[i];
    }
  }
}

void l2pool_forward(const PoolGeometry& g, In x, Out y) {
  const int oh = g.out_height(), ow = g.out_width();
#pragma omp parallel for schedule(static)
  for (int ch = 0; ch < g.channels; ++ch) {
    const double* xc = x.data() + static_cast<std::size_t>(ch) * g.in_height * g.in_width;
    double* yc = y.data() + static_cast<std::size_t>(ch) * oh * ow;
    for (int r = 0; r < oh; ++r)
      for (int c = 0; c < ow; ++c) {
        double ss = 0.0;
        for (int ky = 0; ky < g.window_h; ++ky) {
          const double* xr = xc + static_cast<std::size_t>(r * g.stride_h + ky) * g.in_width + c * g.stride_w;
          for (int kx = 0; kx < g.window_w; ++kx) ss += xr[kx] * xr[kx];
        }
        yc[r * ow + c] = std::sqrt(ss);
      }
  }
}

void l2pool_backward(const PoolGeometry& g, In x, In y, In dy, Out dx) {
  const int oh = g.out_height(), ow = g.out_width();
#pragma omp parallel for schedule(static)
  for (int ch = 0; ch < g.channels; ++ch) {
    const std::size_t in_off = static_cast<std::size_t>(ch) * g.in_height * g.in_width;
    const std::size_t out_off = static_cast<std::size_t>(ch) * oh * ow;
    for (int r = 0; r < oh; ++r)
      for (int c = 0; c < ow; ++c) {
        const double yv = y[out_off + static_cast<std::size_t>(r) * ow + c];
        if (yv == 0.0) continue;
        const double scale = dy[out_off + static_cast<std::size_t>(r) * ow + c] / yv;
        for (int ky = 0; ky < g.window_h; ++ky) {
          const std::size_t row = in_off + static_cast<std::size_t>(r * g.stride_h + ky) * g.in_width + c * g.stride_w;
          for (int kx = 0; kx < g.window_w; ++kx) dx[row + kx] += scale * x[row + kx];
        }
      }
  }
}

void maxpool_forward(const PoolGeometry& g, In x, Out y, Index argmax) {
  const int oh = g.out_height(), ow = g.out_width();
#pragma omp parallel for schedule(static)
  for (int ch = 0; ch < g.channels; ++ch)
    for (int r = 0; r < oh; ++r)
      for (int c = 0; c < ow; ++c) {
        double best = -std::numeric_limits<double>::infinity();
        int best_i = -1;
        for (int ky = 0; ky < g.window_h; ++ky)
          for (int kx = 0; kx < g.window_w; ++kx) {
            const int xi = (ch * g.in_height + r * g.stride_h + ky) * g.in_width + c * g.stride_w + kx;
            const double v = x[static_cast<std::size_t>(xi)];
            if (best_i < 0 || v > best) {
              best = v;
              best_i = xi;
            }
          }
        const std::size_t oi = (static_cast<std::size_t>(ch) * oh + r) * ow + c;
        y[oi] = best;
        argmax[oi] = best_i;
      }
}

void maxpool_backward(const PoolGeometry& g, std::span<const int> argmax, In dy, Out dx) {
  const std::size_t per = static_cast<std::size_t>(g.out_height()) * g.out_width();
#pragma omp parallel for schedule(static)
  for (int ch = 0; ch < g.channels; ++ch)
    for (std::size_t i = 0; i < per; ++i) {
      const std::size_t oi = static_cast<std::size_t>(ch) * per + i;
      dx[static_cast<std::size_t>(argmax[oi])] += dy[oi];
    }
}

void avgpool_forward(const PoolGeometry& g, In x, Out y) {
  const int oh = g.out_height(), ow = g.out_width();
  const double inv = 1.0 / (g.window_h * g.window_w);
#pragma omp parallel for schedule(static)
  for (int ch = 0; ch < g.channels; ++ch)
    for (int r = 0; r < oh; ++r)
      for (int c = 0; c < ow; ++c) {
        double s = 0.0;
        for (int ky = 0; ky < g.window_h; ++ky)
          for (int kx = 0; kx < g.window_w; ++kx)
            s += x[(static_cast<std::size_t>(ch) * g.in_height + r * g.stride_h + ky) * g.in_width + c * g.stride_w + kx];
        y[(static_cast<std::size_t>(ch) * oh + r) * ow + c] = s * inv;
      }
}

void avgpool_backward(const PoolGeometry& g, In dy, Out dx) {
  const int oh = g.out_height(), ow = g.out_width();
  const double inv = 1.0 / (g.window_h * g.window_w);
#pragma omp parallel for schedule(static)
  for (int ch = 0; ch < g.channels; ++ch)
    for (int r = 0; r < oh; ++r)
      for (int c = 0; c < ow; ++c) {
        const double gy = dy[(static_cast<std::size_t>(ch) * oh + r) * ow + c] * inv;
        for (int ky = 0; ky < g.window_h; ++ky)
          for (int kx = 0; kx < g.window_w; ++kx)
            dx[(static_cast<std::size_t>(ch) * g.in_height + r * g.stride_h + ky) * g.in_width + c * g.stride_w + kx] += gy;
      }
}

}  // namespace neuropipe::kernels::parallel
