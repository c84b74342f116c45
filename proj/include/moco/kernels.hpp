#pragma once

// Raw numeric kernels on tensors. No gradient bookkeeping here; the tape in
// tape.hpp/ops.hpp wraps these with their adjoints.

#include <Eigen/Core>
#include <cmath>
#include <optional>
#include <type_traits>
#include <algorithm>
#include <memory>

#include "moco/tensor.hpp"

namespace moco::kernels {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct ConvGeometry {
  std::size_t in_channels = 0, out_channels = 0, kernel = 3;
  int stride = 1, padding = 1;
  Extent3 in, out;

  std::size_t patch() const { return in_channels * kernel * kernel * kernel; }
};

inline std::size_t conv_out_extent(std::size_t n, std::size_t k, int stride, int pad) {
  const long long span = static_cast<long long>(n) + 2LL * pad - static_cast<long long>(k);
  if (span < 0) throw DimensionError("convolution input extent smaller than kernel");
  return static_cast<std::size_t>(span / stride + 1);
}

template <class T>
ConvGeometry conv_geometry(const Tensor<T>& x, const Tensor<T>& w, int stride, int padding) {
  if (x.rank() != 4) throw DimensionError("conv3d input must be [C,D,H,W], got " + shape_str(x.shape()));
  if (w.rank() != 5) throw DimensionError("conv3d kernels must be [Co,Ci,k,k,k], got " + shape_str(w.shape()));
  const std::size_t k = w.dim(2);
  if (w.dim(3) != k || w.dim(4) != k || k % 2 == 0)
    throw DimensionError("conv3d kernels must be cubic with odd extent, got " + shape_str(w.shape()));
  if (w.dim(1) != x.dim(0))
    throw DimensionError("conv3d channel mismatch: input " + shape_str(x.shape()) + ", kernels " +
                         shape_str(w.shape()));
  if (stride != 1 && stride != 2) throw DimensionError("conv3d stride must be 1 or 2");
  if (padding < 0 || padding > static_cast<int>(k / 2)) throw DimensionError("conv3d padding out of range");
  ConvGeometry g;
  g.in_channels = x.dim(0);
  g.out_channels = w.dim(0);
  g.kernel = k;
  g.stride = stride;
  g.padding = padding;
  g.in = spatial_extent(x);
  g.out = {conv_out_extent(g.in.d, k, stride, padding), conv_out_extent(g.in.h, k, stride, padding),
           conv_out_extent(g.in.w, k, stride, padding)};
  return g;
}

// Output positions [lo, hi) along one axis whose input index o*stride - pad + k
// falls inside [0, n).
inline void valid_range(std::size_t n_out, long long n_in, int stride, int pad, std::size_t k, std::size_t& lo,
                        std::size_t& hi) {
  const long long off = static_cast<long long>(k) - pad;
  long long a = off >= 0 ? 0 : (-off + stride - 1) / stride;
  long long b = (n_in - 1 - off) >= 0 ? (n_in - 1 - off) / stride + 1 : 0;
  a = std::min<long long>(a, static_cast<long long>(n_out));
  b = std::clamp<long long>(b, a, static_cast<long long>(n_out));
  lo = static_cast<std::size_t>(a);
  hi = static_cast<std::size_t>(b);
}

// Unfolds receptive fields into a [Ci*k^3, Dout*Hout*Wout] matrix.
template <class T>
void im2col(const T* x, const ConvGeometry& g, T* cols) {
  const std::size_t k = g.kernel, P = g.out.voxels(), Wo = g.out.w;
  const long long D = g.in.d, H = g.in.h, W = g.in.w;
  const int s = g.stride;
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    const T* xc = x + c * g.in.voxels();
    for (std::size_t kz = 0; kz < k; ++kz)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx, ++row) {
          T* out = cols + row * P;
          std::size_t lo, hi;
          valid_range(Wo, W, s, g.padding, kx, lo, hi);
          const long long ix0 = static_cast<long long>(lo) * s - g.padding + static_cast<long long>(kx);
          for (std::size_t oz = 0; oz < g.out.d; ++oz) {
            const long long iz = static_cast<long long>(oz) * s - g.padding + kz;
            for (std::size_t oy = 0; oy < g.out.h; ++oy) {
              const long long iy = static_cast<long long>(oy) * s - g.padding + ky;
              T* dst = out + (oz * g.out.h + oy) * Wo;
              if (iz < 0 || iz >= D || iy < 0 || iy >= H) {
                std::fill(dst, dst + Wo, T{0});
                continue;
              }
              const T* src = xc + (iz * H + iy) * W + ix0;
              std::fill(dst, dst + lo, T{0});
              if (s == 1) {
                std::copy(src, src + (hi - lo), dst + lo);
              } else {
                for (std::size_t i = 0; i < hi - lo; ++i) dst[lo + i] = src[i * s];
              }
              std::fill(dst + hi, dst + Wo, T{0});
            }
          }
        }
  }
}

// Adjoint of im2col: scatters (accumulates) columns back onto the input grid.
template <class T>
void col2im(const T* cols, const ConvGeometry& g, T* x) {
  const std::size_t k = g.kernel, P = g.out.voxels(), Wo = g.out.w;
  const long long D = g.in.d, H = g.in.h, W = g.in.w;
  const int s = g.stride;
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    T* xc = x + c * g.in.voxels();
    for (std::size_t kz = 0; kz < k; ++kz)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx, ++row) {
          const T* in = cols + row * P;
          std::size_t lo, hi;
          valid_range(Wo, W, s, g.padding, kx, lo, hi);
          const long long ix0 = static_cast<long long>(lo) * s - g.padding + static_cast<long long>(kx);
          for (std::size_t oz = 0; oz < g.out.d; ++oz) {
            const long long iz = static_cast<long long>(oz) * s - g.padding + kz;
            if (iz < 0 || iz >= D) continue;
            for (std::size_t oy = 0; oy < g.out.h; ++oy) {
              const long long iy = static_cast<long long>(oy) * s - g.padding + ky;
              if (iy < 0 || iy >= H) continue;
              const T* src = in + (oz * g.out.h + oy) * Wo + lo;
              T* dst = xc + (iz * H + iy) * W + ix0;
              if (s == 1) {
                for (std::size_t i = 0; i < hi - lo; ++i) dst[i] += src[i];
              } else {
                for (std::size_t i = 0; i < hi - lo; ++i) dst[i * s] += src[i];
              }
            }
          }
        }
  }
}

// Per-thread buffer for unfolded patches, reused across calls so large
// unfoldings do not fault in fresh pages every time. Not reentrant: at most one
// live use per thread.
template <class T>
T* scratch(std::size_t n) {
  thread_local std::vector<T> buf;
  if (buf.size() < n) buf.resize(n);
  return buf.data();
}

template <class T>
Tensor<T> conv3d(const Tensor<T>& x, const Tensor<T>& w, const std::type_identity_t<Tensor<T>>* bias, int stride, int padding) {
  const auto g = conv_geometry(x, w, stride, padding);
  if (bias && (bias->rank() != 1 || bias->dim(0) != g.out_channels))
    throw DimensionError("conv3d bias must have one entry per output channel");
  require_finite(x, "conv3d");
  const std::size_t P = g.out.voxels(), K = g.patch();
  auto cols = scratch<T>(K * P);
  im2col(x.ptr(), g, cols);
  Tensor<T> y(g.out.shape(g.out_channels));
  MatMap<T> Y(y.ptr(), g.out_channels, P);
  Y.noalias() = ConstMatMap<T>(w.ptr(), g.out_channels, K) * ConstMatMap<T>(cols, K, P);
  if (bias)
    for (std::size_t c = 0; c < g.out_channels; ++c) Y.row(c).array() += (*bias)[c];
  return y;
}

template <class T>
struct ConvGrads {
  Tensor<T> dx, dw, db;
};

// Gradients of conv3d w.r.t. input, kernels and bias given dL/dy.
template <class T>
ConvGrads<T> conv3d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, int stride,
                             int padding, bool need_dx = true) {
  const auto g = conv_geometry(x, w, stride, padding);
  if (dy.shape() != g.out.shape(g.out_channels)) throw InternalError("conv3d backward: gradient shape mismatch");
  const std::size_t P = g.out.voxels(), K = g.patch();
  auto cols = scratch<T>(K * P);
  im2col(x.ptr(), g, cols);
  ConstMatMap<T> dY(dy.ptr(), g.out_channels, P);
  ConvGrads<T> r;
  r.dw = Tensor<T>(w.shape());
  MatMap<T>(r.dw.ptr(), g.out_channels, K).noalias() = dY * ConstMatMap<T>(cols, K, P).transpose();
  r.db = Tensor<T>(Shape{g.out_channels});
  for (std::size_t c = 0; c < g.out_channels; ++c) {
    double s = 0.0;
    const T* row = dy.ptr() + c * P;
    for (std::size_t i = 0; i < P; ++i) s += row[i];
    r.db[c] = static_cast<T>(s);
  }
  if (need_dx) {
    MatMap<T>(cols, K, P).noalias() = ConstMatMap<T>(w.ptr(), g.out_channels, K).transpose() * dY;
    r.dx = Tensor<T>(x.shape());
    col2im(cols, g, r.dx.ptr());
  }
  return r;
}

// Geometry of the stride-2 convolution whose adjoint maps `y` ([Co,n,n,n]) to
// [Ci,2n,2n,2n]; kernels are laid out [Co,Ci,k,k,k] exactly as for conv3d.
template <class T>
ConvGeometry transpose_geometry(const Tensor<T>& y, const Tensor<T>& w, int stride) {
  if (stride != 2) throw DimensionError("conv3d_transpose supports stride 2 only");
  if (y.rank() != 4 || w.rank() != 5) throw DimensionError("conv3d_transpose expects [C,D,H,W] input and rank-5 kernels");
  if (w.dim(0) != y.dim(0))
    throw DimensionError("conv3d_transpose channel mismatch: input " + shape_str(y.shape()) + ", kernels " +
                         shape_str(w.shape()));
  const std::size_t k = w.dim(2);
  if (k != 3 || w.dim(3) != k || w.dim(4) != k) throw DimensionError("conv3d_transpose kernels must be 3x3x3");
  ConvGeometry g;
  g.in_channels = w.dim(1);
  g.out_channels = w.dim(0);
  g.kernel = k;
  g.stride = 2;
  g.padding = 1;
  const Extent3 e = spatial_extent(y);
  g.in = {2 * e.d, 2 * e.h, 2 * e.w};
  g.out = e;
  return g;
}

// Upsampling convolution: the exact adjoint of conv3d(stride 2, padding 1) on an
// even-extent grid, plus bias. Output extents are twice the input extents.
template <class T>
Tensor<T> conv3d_transpose(const Tensor<T>& y, const Tensor<T>& w, const std::type_identity_t<Tensor<T>>* bias, int stride = 2) {
  const auto g = transpose_geometry(y, w, stride);
  if (bias && (bias->rank() != 1 || bias->dim(0) != g.in_channels))
    throw DimensionError("conv3d_transpose bias must have one entry per output channel");
  require_finite(y, "conv3d_transpose");
  const std::size_t P = g.out.voxels(), K = g.patch();
  auto cols = scratch<T>(K * P);
  MatMap<T>(cols, K, P).noalias() =
      ConstMatMap<T>(w.ptr(), g.out_channels, K).transpose() * ConstMatMap<T>(y.ptr(), g.out_channels, P);
  Tensor<T> x(g.in.shape(g.in_channels));
  col2im(cols, g, x.ptr());
  if (bias) {
    const std::size_t V = g.in.voxels();
    for (std::size_t c = 0; c < g.in_channels; ++c)
      for (std::size_t i = 0; i < V; ++i) x[c * V + i] += (*bias)[c];
  }
  return x;
}

template <class T>
ConvGrads<T> conv3d_transpose_backward(const Tensor<T>& y, const Tensor<T>& w, const Tensor<T>& dout, int stride = 2,
                                       bool need_dy = true) {
  const auto g = transpose_geometry(y, w, stride);
  const std::size_t P = g.out.voxels(), K = g.patch();
  auto cols = scratch<T>(K * P);
  im2col(dout.ptr(), g, cols);
  ConstMatMap<T> C(cols, K, P);
  ConvGrads<T> r;
  r.dw = Tensor<T>(w.shape());
  MatMap<T>(r.dw.ptr(), g.out_channels, K).noalias() = ConstMatMap<T>(y.ptr(), g.out_channels, P) * C.transpose();
  const std::size_t V = g.in.voxels();
  r.db = Tensor<T>(Shape{g.in_channels});
  for (std::size_t c = 0; c < g.in_channels; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < V; ++i) s += dout[c * V + i];
    r.db[c] = static_cast<T>(s);
  }
  if (need_dy) {
    r.dx = Tensor<T>(y.shape());
    MatMap<T>(r.dx.ptr(), g.out_channels, P).noalias() = ConstMatMap<T>(w.ptr(), g.out_channels, K) * C;
  }
  return r;
}

// 2x2x2 max pooling on even extents. Ties resolve to the first element in scan order.
template <class T>
Tensor<T> maxpool2(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("maxpool2 expects [C,D,H,W]");
  const Extent3 e = spatial_extent(x);
  if (e.d % 2 || e.h % 2 || e.w % 2) throw DimensionError("maxpool2 needs even extents, got " + extent_str(e));
  const Extent3 o{e.d / 2, e.h / 2, e.w / 2};
  Tensor<T> y(o.shape(x.dim(0)));
  for (std::size_t c = 0; c < x.dim(0); ++c)
    for (std::size_t z = 0; z < o.d; ++z)
      for (std::size_t yy = 0; yy < o.h; ++yy)
        for (std::size_t xx = 0; xx < o.w; ++xx) {
          T m = x.at(c, 2 * z, 2 * yy, 2 * xx);
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) m = std::max(m, x.at(c, 2 * z + dz, 2 * yy + dy, 2 * xx + dx));
          y.at(c, z, yy, xx) = m;
        }
  return y;
}

template <class T>
Tensor<T> maxpool2_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  const Extent3 o = spatial_extent(dy);
  Tensor<T> dx(x.shape());
  for (std::size_t c = 0; c < x.dim(0); ++c)
    for (std::size_t z = 0; z < o.d; ++z)
      for (std::size_t yy = 0; yy < o.h; ++yy)
        for (std::size_t xx = 0; xx < o.w; ++xx) {
          std::size_t bz = 2 * z, by = 2 * yy, bx = 2 * xx;
          T m = x.at(c, bz, by, bx);
          for (int dz = 0; dz < 2; ++dz)
            for (int dyy = 0; dyy < 2; ++dyy)
              for (int dxx = 0; dxx < 2; ++dxx) {
                const T v = x.at(c, 2 * z + dz, 2 * yy + dyy, 2 * xx + dxx);
                if (v > m) {
                  m = v;
                  bz = 2 * z + dz;
                  by = 2 * yy + dyy;
                  bx = 2 * xx + dxx;
                }
              }
          dx.at(c, bz, by, bx) += dy.at(c, z, yy, xx);
        }
  return dx;
}

// Nearest-neighbour x2 upsampling.
template <class T>
Tensor<T> upsample2(const Tensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("upsample2 expects [C,D,H,W]");
  const Extent3 e = spatial_extent(x);
  const Extent3 o{2 * e.d, 2 * e.h, 2 * e.w};
  Tensor<T> y(o.shape(x.dim(0)));
  for (std::size_t c = 0; c < x.dim(0); ++c)
    for (std::size_t z = 0; z < o.d; ++z)
      for (std::size_t yy = 0; yy < o.h; ++yy)
        for (std::size_t xx = 0; xx < o.w; ++xx) y.at(c, z, yy, xx) = x.at(c, z / 2, yy / 2, xx / 2);
  return y;
}

template <class T>
Tensor<T> upsample2_backward(const Tensor<T>& dy, const Shape& x_shape) {
  Tensor<T> dx(x_shape);
  const Extent3 o = spatial_extent(dy);
  for (std::size_t c = 0; c < dy.dim(0); ++c)
    for (std::size_t z = 0; z < o.d; ++z)
      for (std::size_t yy = 0; yy < o.h; ++yy)
        for (std::size_t xx = 0; xx < o.w; ++xx) dx.at(c, z / 2, yy / 2, xx / 2) += dy.at(c, z, yy, xx);
  return dx;
}

}  // namespace moco::kernels
