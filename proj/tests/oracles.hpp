#pragma once

// Independent straight-loop reference implementations used only by tests.

#include <cmath>
#include <random>
#include <utility>
#include <vector>

#include "moco/tensor.hpp"

namespace oracle {

using moco::Shape;
using moco::Tensor;

// Element list of a tensor, for whole-tensor EXPECT_EQ.
template <class T>
std::vector<T> values(const Tensor<T>& t) {
  return {t.data().begin(), t.data().end()};
}


inline Tensor<double> random_tensor(const Shape& s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<double> t(s);
  for (auto& v : t.data()) v = u(rng);
  return t;
}

inline double dot(const Tensor<double>& a, const Tensor<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Direct 7-loop correlation with zero padding.
inline Tensor<double> conv3d(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>* b, int stride,
                             int pad) {
  const long C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3);
  const long O = w.dim(0), K = w.dim(2);
  const long Do = (D + 2 * pad - K) / stride + 1, Ho = (H + 2 * pad - K) / stride + 1,
             Wo = (W + 2 * pad - K) / stride + 1;
  Tensor<double> y(Shape{size_t(O), size_t(Do), size_t(Ho), size_t(Wo)});
  for (long o = 0; o < O; ++o)
    for (long z = 0; z < Do; ++z)
      for (long r = 0; r < Ho; ++r)
        for (long q = 0; q < Wo; ++q) {
          double s = b ? (*b)[o] : 0.0;
          for (long c = 0; c < C; ++c)
            for (long kz = 0; kz < K; ++kz)
              for (long ky = 0; ky < K; ++ky)
                for (long kx = 0; kx < K; ++kx) {
                  const long iz = z * stride + kz - pad, iy = r * stride + ky - pad, ix = q * stride + kx - pad;
                  if (iz < 0 || iy < 0 || ix < 0 || iz >= D || iy >= H || ix >= W) continue;
                  s += w[(((o * C + c) * K + kz) * K + ky) * K + kx] * x.at(c, iz, iy, ix);
                }
          y.at(o, z, r, q) = s;
        }
  return y;
}

inline double sig(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Scalar ConvLSTM step; gate arrays indexed i, f, c, o.
struct ScalarLstm {
  std::vector<Tensor<double>> W, U, b;
};

inline void convlstm_step(const ScalarLstm& p, const Tensor<double>& x, const Tensor<double>& h0,
                          const Tensor<double>& c0, Tensor<double>& h1, Tensor<double>& c1) {
  const long C = x.dim(0), D = x.dim(1), H = x.dim(2), W = x.dim(3), F = h0.dim(0);
  h1 = Tensor<double>(h0.shape());
  c1 = Tensor<double>(c0.shape());
  for (long f = 0; f < F; ++f)
    for (long z = 0; z < D; ++z)
      for (long y = 0; y < H; ++y)
        for (long q = 0; q < W; ++q) {
          double pre[4];
          for (int g = 0; g < 4; ++g) {
            double s = p.b[g][f];
            for (int dz = -1; dz <= 1; ++dz)
              for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                  const long iz = z + dz, iy = y + dy, ix = q + dx;
                  if (iz < 0 || iy < 0 || ix < 0 || iz >= D || iy >= H || ix >= W) continue;
                  const long k = ((dz + 1) * 3 + (dy + 1)) * 3 + (dx + 1);
                  for (long c = 0; c < C; ++c) s += p.W[g][(f * C + c) * 27 + k] * x.at(c, iz, iy, ix);
                  for (long c = 0; c < F; ++c) s += p.U[g][(f * F + c) * 27 + k] * h0.at(c, iz, iy, ix);
                }
            pre[g] = s;
          }
          const double i = sig(pre[0]), fg = sig(pre[1]), cand = std::tanh(pre[2]), o = sig(pre[3]);
          const double c = i * cand + fg * c0.at(f, z, y, q);
          c1.at(f, z, y, q) = c;
          h1.at(f, z, y, q) = o * std::tanh(c);
        }
}

// Fraction of (positive, negative) pairs ordered correctly, ties counting half.
inline double mann_whitney(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = 0; j < s.size(); ++j)
      if (y[i] == 1 && y[j] == 0) {
        pairs += 1.0;
        num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
      }
  return num / pairs;
}

// Weighted least squares of y = a*x1 + b*x2 from the 2x2 normal equations by
// Cramer's rule in extended precision.
inline std::pair<double, double> wls2(const std::vector<double>& x1, const std::vector<double>& x2,
                                      const std::vector<double>& w, const std::vector<double>& y) {
  long double s11 = 0, s12 = 0, s22 = 0, t1 = 0, t2 = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    s11 += (long double)w[i] * x1[i] * x1[i];
    s12 += (long double)w[i] * x1[i] * x2[i];
    s22 += (long double)w[i] * x2[i] * x2[i];
    t1 += (long double)w[i] * x1[i] * y[i];
    t2 += (long double)w[i] * x2[i] * y[i];
  }
  const long double det = s11 * s22 - s12 * s12;
  return {double((t1 * s22 - s12 * t2) / det), double((s11 * t2 - s12 * t1) / det)};
}

// Ordinary least-squares line y = slope*x + intercept.
inline std::pair<double, double> ols_line(const std::vector<double>& x, const std::vector<double>& y) {
  long double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= x.size();
  my /= y.size();
  long double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  const long double slope = sxy / sxx;
  return {double(slope), double(my - slope * mx)};
}

}  // namespace oracle
