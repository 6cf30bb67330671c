#pragma once

#include <cstddef>
#include <span>

// Dense feature-map kernels on (C, H, W) buffers. Every kernel exists twice:
// `reference` is a plain serial loop nest used as the test oracle, `parallel`
// is the OpenMP version the layers run. Each output element is produced by a
// single thread with a fixed summation order, so results do not depend on the
// thread count.

namespace neuropipe::kernels {

struct ConvGeometry {
  int in_channels = 1, in_height = 1, in_width = 1;
  int out_channels = 1, kernel_h = 1, kernel_w = 1;
  int stride = 1, pad = 0;

  int out_height() const { return (in_height + 2 * pad - kernel_h) / stride + 1; }
  int out_width() const { return (in_width + 2 * pad - kernel_w) / stride + 1; }
  std::size_t patch() const { return static_cast<std::size_t>(in_channels) * kernel_h * kernel_w; }
};

struct PoolGeometry {
  int channels = 1, in_height = 1, in_width = 1;
  int window_h = 1, window_w = 1, stride_h = 1, stride_w = 1;

  int out_height() const { return (in_height - window_h) / stride_h + 1; }
  int out_width() const { return (in_width - window_w) / stride_w + 1; }
};

using In = std::span<const double>;
using Out = std::span<double>;
using Index = std::span<int>;

#define NEUROPIPE_KERNEL_SET                                                                     \
  /* y = conv(x, w) + b; w is (O, C, kh, kw). */                                                 \
  void conv2d_forward(const ConvGeometry& g, In x, In w, In b, Out y);                           \
  /* dx is overwritten (may be empty); dw and db accumulate. */                                  \
  void conv2d_backward(const ConvGeometry& g, In x, In w, In dy, Out dx, Out dw, Out db);        \
  /* Rows of x (n, in) map to rows of y (n, out); w is (out, in). */                             \
  void linear_forward(int n, int in, int out, In x, In w, In b, Out y);                          \
  void linear_backward(int n, int in, int out, In x, In w, In dy, Out dx, Out dw, Out db);      \
  void l2pool_forward(const PoolGeometry& g, In x, Out y);                                       \
  /* Accumulates g * x_i / y into dx; zero-norm windows contribute nothing. */                   \
  void l2pool_backward(const PoolGeometry& g, In x, In y, In dy, Out dx);                        \
  /* argmax receives the flat input index of each output's winner. */                            \
  void maxpool_forward(const PoolGeometry& g, In x, Out y, Index argmax);                        \
  void maxpool_backward(const PoolGeometry& g, std::span<const int> argmax, In dy, Out dx);      \
  void avgpool_forward(const PoolGeometry& g, In x, Out y);                                      \
  void avgpool_backward(const PoolGeometry& g, In dy, Out dx);

namespace reference {
NEUROPIPE_KERNEL_SET
}

namespace parallel {
NEUROPIPE_KERNEL_SET
}

#undef NEUROPIPE_KERNEL_SET

}  // namespace neuropipe::kernels
