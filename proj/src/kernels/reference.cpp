#include <algorithm>
#include <cmath>
#include <limits>

#include "neuropipe/kernels.hpp"

namespace neuropipe::kernels::reference {

void conv2d_forward(const ConvGeometry& g, In x, In w, In b, Out y) {
  const int oh = g.out_height(), ow = g.out_width();
  for (int o = 0; o < g.out_channels; ++o)
    for (int r = 0; r < oh; ++r)
      for (int c = 0; c < ow; ++c) {
        double acc = 0.0;
        for (int ci = 0; ci < g.in_channels; ++ci)
          for (int ky = 0; ky < g.kernel_h; ++ky)
            for (int kx = 0; kx < g.kernel_w; ++kx) {
              const int iy = r * g.stride - g.pad + ky;
              const int ix = c * g.stride - g.pad + kx;
              if (iy < 0 || iy >= g.in_height || ix < 0 || ix >= g.in_width) continue;
              acc += w[((static_cast<std::size_t>(o) * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx] *
                     x[(static_cast<std::size_t>(ci) * g.in_height + iy) * g.in_width + ix];
            }
        y[(static_cast<std::size_t>(o) * oh + r) * ow + c] = acc + b[static_cast<std::size_t>(o)];
      }
}

void conv2d_backward(const ConvGeometry& g, In x, In w, In dy, Out dx, Out dw, Out db) {
  const int oh = g.out_height(), ow = g.out_width();
  if (!dx.empty()) std::fill(dx.begin(), dx.end(), 0.0);
  for (int o = 0; o < g.out_channels; ++o)
    for (int r = 0; r < oh; ++r)
      for (int c = 0; c < ow; ++c) {
        const double gy = dy[(static_cast<std::size_t>(o) * oh + r) * ow + c];
        db[static_cast<std::size_t>(o)] += gy;
        for (int ci = 0; ci < g.in_channels; ++ci)
          for (int ky = 0; ky < g.kernel_h; ++ky)
            for (int kx = 0; kx < g.kernel_w; ++kx) {
              const int iy = r * g.stride - g.pad + ky;
              const int ix = c * g.stride - g.pad + kx;
              if (iy < 0 || iy >= g.in_height || ix < 0 || ix >= g.in_width) continue;
              const std::size_t wi =
                  ((static_cast<std::size_t>(o) * g.in_channels + ci) * g.kernel_h + ky) * g.kernel_w + kx;
              const std::size_t xi = (static_cast<std::size_t>(ci) * g.in_height + iy) * g.in_width + ix;
              dw[wi] += gy * x[xi];
              if (!dx.empty()) dx[xi] += gy * w[wi];
            }
      }
}

void linear_forward(int n, int in, int out, In x, In w, In b, Out y) {
  for (int s = 0; s < n; ++s)
    for (int o = 0; o < out; ++o) {
      double acc = 0.0;
      for (int i = 0; i < in; ++i)
        acc += w[static_cast<std::size_t>(o) * in + i] * x[static_cast<std::size_t>(s) * in + i];
      y[static_cast<std::size_t>(s) * out + o] = acc + b[static_cast<std::size_t>(o)];
    }
}

void linear_backward(int n, int in, int out, In x, In w, In dy, Out dx, Out dw, Out db) {
  if (!dx.empty()) std::fill(dx.begin(), dx.end(), 0.0);
  for (int s = 0; s < n; ++s)
    for (int o = 0; o < out; ++o) {
      const double gy = dy[static_cast<std::size_t>(s) * out + o];
      db[static_cast<std::size_t>(o)] += gy;
      for (int i = 0; i < in; ++i) {
        dw[static_cast<std::size_t>(o) * in + i] += gy * x[static_cast<std::size_t>(s) * in + i];
        if (!dx.empty()) dx[static_cast<std::size_t>(s) * in + i] += gy * w[static_cast<std::size_t>(o) * in + i];
      }
    }
}

void l2pool_forward(const PoolGeometry& g, In x, Out y) {
  const int oh = g.out_height(), ow = g.out_width();
  for (int ch = 0; ch < g.channels; ++ch)
    for (int r = 0; r < oh; ++r)
      for (int c = 0; c < ow; ++c) {
        double ss = 0.0;
        for (int ky = 0; ky < g.window_h; ++ky)
          for (int kx = 0; kx < g.window_w; ++kx) {
            const double v = x[(static_cast<std::size_t>(ch) * g.in_height + r * g.stride_h + ky) * g.in_width +
                               c * g.stride_w + kx];
            ss += v * v;
          }
        y[(static_cast<std::size_t>(ch) * oh + r) * ow + c] = std::sqrt(ss);
      }
}

void l2pool_backward(const PoolGeometry& g, In x, In y, In dy, Out dx) {
  const int oh = g.out_height(), ow = g.out_width();
  for (int ch = 0; ch < g.channels; ++ch)
    for (int r = 0; r < oh; ++r)
      for (int c = 0; c < ow; ++c) {
        const std::size_t oi = (static_cast<std::size_t>(ch) * oh + r) * ow + c;
        if (y[oi] == 0.0) continue;
        const double scale = dy[oi] / y[oi];
        for (int ky = 0; ky < g.window_h; ++ky)
          for (int kx = 0; kx < g.window_w; ++kx) {
            const std::size_t xi =
                (static_cast<std::size_t>(ch) * g.in_height + r * g.stride_h + ky) * g.in_width + c * g.stride_w + kx;
            dx[xi] += scale * x[xi];
          }
      }
}

void maxpool_forward(const PoolGeometry& g, In x, Out y, Index argmax) {
  const int oh = g.out_height(), ow = g.out_width();
  for (int ch = 0; ch < g.channels; ++ch)
    for (int r = 0; r < oh; ++r)
      for (int c = 0; c < ow; ++c) {
        double best = -std::numeric_limits<double>::infinity();
        int best_i = -1;
        for (int ky = 0; ky < g.window_h; ++ky)
          for (int kx = 0; kx < g.window_w; ++kx) {
            const int xi = (ch * g.in_height + r * g.stride_h + ky) * g.in_width + c * g.stride_w + kx;
            if (best_i < 0 || x[static_cast<std::size_t>(xi)] > best) {
              best = x[static_cast<std::size_t>(xi)];
              best_i = xi;
            }
          }
        const std::size_t oi = (static_cast<std::size_t>(ch) * oh + r) * ow + c;
        y[oi] = best;
        argmax[oi] = best_i;
      }
}

void maxpool_backward(const PoolGeometry& g, std::span<const int> argmax, In dy, Out dx) {
  const std::size_t n = static_cast<std::size_t>(g.channels) * g.out_height() * g.out_width();
  for (std::size_t oi = 0; oi < n; ++oi) dx[static_cast<std::size_t>(argmax[oi])] += dy[oi];
}

void avgpool_forward(const PoolGeometry& g, In x, Out y) {
  const int oh = g.out_height(), ow = g.out_width();
  const double inv = 1.0 / (g.window_h * g.window_w);
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
  for (int ch = 0; ch < g.channels; ++ch)
    for (int r = 0; r < oh; ++r)
      for (int c = 0; c < ow; ++c) {
        const double gy = dy[(static_cast<std::size_t>(ch) * oh + r) * ow + c] * inv;
        for (int ky = 0; ky < g.window_h; ++ky)
          for (int kx = 0; kx < g.window_w; ++kx)
            dx[(static_cast<std::size_t>(ch) * g.in_height + r * g.stride_h + ky) * g.in_width + c * g.stride_w + kx] += gy;
      }
}

}  // namespace neuropipe::kernels::reference
