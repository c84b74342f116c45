#pragma once

// Spatial transformer (pull warping), displacement-field resampling, and the
// registration objective: windowed NCC plus a displacement-gradient penalty.

#include <array>
#include <cmath>
#include <vector>

#include "moco/ops.hpp"

namespace moco {

// Displacement fields are [3,D,H,W] tensors; channel a holds the displacement
// along axis a (d, h, w) in voxels of the field's own grid.
template <class T>
void validate_field(const Tensor<T>& field, const char* what) {
  if (field.rank() != 4 || field.dim(0) != 3)
    throw DimensionError(std::string(what) + ": displacement field must be [3,D,H,W], got " + shape_str(field.shape()));
  require_finite(field, what);
}

struct LossConfig {
  double lambda = 1.0;
  int ncc_window = 9;
  double ncc_epsilon = 1e-5;

  void validate() const {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("loss lambda must be a nonnegative number");
    if (ncc_window < 1 || ncc_window % 2 == 0) throw ConfigError("ncc_window must be odd and positive");
    if (!(ncc_epsilon > 0.0)) throw ConfigError("ncc_epsilon must be positive");
  }
};

namespace kernels {

// Trilinear sample of `vol` at `vol` + `field`, zero outside the volume.
template <class T>
Tensor<T> warp(const Tensor<T>& vol, const Tensor<T>& field) {
  if (vol.rank() != 3) throw DimensionError("warp: volume must be [D,H,W], got " + shape_str(vol.shape()));
  validate_field(field, "warp");
  if (spatial_extent(field) != spatial_extent(vol))
    throw DimensionError("warp: field grid " + extent_str(spatial_extent(field)) + " does not match volume " +
                         extent_str(spatial_extent(vol)));
  const auto e = spatial_extent(vol);
  const long D = e.d, H = e.h, W = e.w;
  const std::size_t n = e.voxels();
  Tensor<T> out(vol.shape());
  const T* fz = field.ptr();
  const T* fy = fz + n;
  const T* fx = fy + n;
  std::size_t v = 0;
  for (long z = 0; z < D; ++z)
    for (long y = 0; y < H; ++y)
      for (long x = 0; x < W; ++x, ++v) {
        const double pz = z + static_cast<double>(fz[v]), py = y + static_cast<double>(fy[v]),
                     px = x + static_cast<double>(fx[v]);
        const double z0f = std::floor(pz), y0f = std::floor(py), x0f = std::floor(px);
        const long z0 = static_cast<long>(z0f), y0 = static_cast<long>(y0f), x0 = static_cast<long>(x0f);
        const double tz = pz - z0f, ty = py - y0f, tx = px - x0f;
        double acc = 0.0;
        for (int a = 0; a < 2; ++a) {
          const long iz = z0 + a;
          if (iz < 0 || iz >= D) continue;
          const double wz = a ? tz : 1.0 - tz;
          for (int b = 0; b < 2; ++b) {
            const long iy = y0 + b;
            if (iy < 0 || iy >= H) continue;
            const double wy = b ? ty : 1.0 - ty;
            for (int c = 0; c < 2; ++c) {
              const long ix = x0 + c;
              if (ix < 0 || ix >= W) continue;
              const double wx = c ? tx : 1.0 - tx;
              acc += wz * wy * wx * static_cast<double>(vol[(iz * H + iy) * W + ix]);
            }
          }
        }
        out[v] = static_cast<T>(acc);
      }
  return out;
}

template <class T>
struct WarpGrads {
  Tensor<T> dvol, dfield;
};

template <class T>
WarpGrads<T> warp_backward(const Tensor<T>& vol, const Tensor<T>& field, const Tensor<T>& dout, bool need_dvol,
                           bool need_dfield) {
  const auto e = spatial_extent(vol);
  const long D = e.d, H = e.h, W = e.w;
  const std::size_t n = e.voxels();
  WarpGrads<T> r;
  std::vector<double> dvol(need_dvol ? n : 0, 0.0);
  if (need_dfield) r.dfield = Tensor<T>(field.shape());
  const T* fz = field.ptr();
  const T* fy = fz + n;
  const T* fx = fy + n;
  std::size_t v = 0;
  for (long z = 0; z < D; ++z)
    for (long y = 0; y < H; ++y)
      for (long x = 0; x < W; ++x, ++v) {
        const double g = dout[v];
        if (g == 0.0) continue;
        const double pz = z + static_cast<double>(fz[v]), py = y + static_cast<double>(fy[v]),
                     px = x + static_cast<double>(fx[v]);
        const double z0f = std::floor(pz), y0f = std::floor(py), x0f = std::floor(px);
        const long z0 = static_cast<long>(z0f), y0 = static_cast<long>(y0f), x0 = static_cast<long>(x0f);
        const double t[3] = {pz - z0f, py - y0f, px - x0f};
        double dz = 0.0, dy = 0.0, dx = 0.0;
        for (int a = 0; a < 2; ++a) {
          const long iz = z0 + a;
          if (iz < 0 || iz >= D) continue;
          const double wz = a ? t[0] : 1.0 - t[0], sz = a ? 1.0 : -1.0;
          for (int b = 0; b < 2; ++b) {
            const long iy = y0 + b;
            if (iy < 0 || iy >= H) continue;
            const double wy = b ? t[1] : 1.0 - t[1], sy = b ? 1.0 : -1.0;
            for (int c = 0; c < 2; ++c) {
              const long ix = x0 + c;
              if (ix < 0 || ix >= W) continue;
              const double wx = c ? t[2] : 1.0 - t[2], sx = c ? 1.0 : -1.0;
              const std::size_t idx = (iz * H + iy) * W + ix;
              const double val = vol[idx];
              if (need_dvol) dvol[idx] += g * wz * wy * wx;
              dz += sz * wy * wx * val;
              dy += wz * sy * wx * val;
              dx += wz * wy * sx * val;
            }
          }
        }
        if (need_dfield) {
          r.dfield[v] = static_cast<T>(g * dz);
          r.dfield[n + v] = static_cast<T>(g * dy);
          r.dfield[2 * n + v] = static_cast<T>(g * dx);
        }
      }
  if (need_dvol) {
    r.dvol = Tensor<T>(vol.shape());
    for (std::size_t i = 0; i < n; ++i) r.dvol[i] = static_cast<T>(dvol[i]);
  }
  return r;
}

// Zero-padded centered box sum of width 2r+1 along every axis. Symmetric, so it
// is its own adjoint.
inline std::vector<double> box_sum(const std::vector<double>& in, const Extent3& e, int r) {
  std::vector<double> a = in, b(in.size());
  const std::size_t dims[3] = {e.d, e.h, e.w};
  const std::size_t strides[3] = {e.h * e.w, e.w, 1};
  std::vector<double> prefix;
  for (int axis = 0; axis < 3; ++axis) {
    const std::size_t len = dims[axis], st = strides[axis];
    prefix.assign(len + 1, 0.0);
    for (std::size_t base = 0; base < in.size(); ++base) {
      // visit each line once, from its first element
      if ((base / st) % len != 0) continue;
      for (std::size_t i = 0; i < len; ++i) prefix[i + 1] = prefix[i] + a[base + i * st];
      for (std::size_t i = 0; i < len; ++i) {
        const long lo = std::max<long>(0, static_cast<long>(i) - r);
        const long hi = std::min<long>(static_cast<long>(len) - 1, static_cast<long>(i) + r);
        b[base + i * st] = prefix[hi + 1] - prefix[lo];
      }
    }
    std::swap(a, b);
  }
  return a;
}

struct NccParts {
  std::vector<double> cc;  // per-voxel cross^2 / (var_a var_b + eps)
  std::vector<double> sa, sb, saa, sbb, sab;
  double cross(std::size_t v, double win) const { return sab[v] - sa[v] * sb[v] / win; }
  double var_a(std::size_t v, double win) const { return saa[v] - sa[v] * sa[v] / win; }
  double var_b(std::size_t v, double win) const { return sbb[v] - sb[v] * sb[v] / win; }
};

template <class T>
NccParts ncc_parts(const Tensor<T>& a, const Tensor<T>& b, const LossConfig& cfg) {
  cfg.validate();
  a.require_same_shape(b, "local_ncc");
  const auto e = spatial_extent(a);
  if (a.rank() != 3) throw DimensionError("local_ncc: expected [D,H,W] volumes, got " + shape_str(a.shape()));
  if (static_cast<std::size_t>(cfg.ncc_window) > std::min({e.d, e.h, e.w}))
    throw DimensionError("local_ncc: window " + std::to_string(cfg.ncc_window) + " exceeds volume " + extent_str(e));
  const std::size_t n = a.size();
  std::vector<double> A(n), B(n), AA(n), BB(n), AB(n);
  for (std::size_t i = 0; i < n; ++i) {
    A[i] = a[i];
    B[i] = b[i];
    AA[i] = A[i] * A[i];
    BB[i] = B[i] * B[i];
    AB[i] = A[i] * B[i];
  }
  const int r = cfg.ncc_window / 2;
  NccParts p{std::vector<double>(n), box_sum(A, e, r), box_sum(B, e, r), box_sum(AA, e, r), box_sum(BB, e, r),
             box_sum(AB, e, r)};
  const double win = std::pow(static_cast<double>(cfg.ncc_window), 3);
  for (std::size_t v = 0; v < n; ++v) {
    const double cr = p.cross(v, win);
    p.cc[v] = cr * cr / (p.var_a(v, win) * p.var_b(v, win) + cfg.ncc_epsilon);
  }
  return p;
}

// Gradients of mean(cc) with respect to both volumes.
template <class T>
std::pair<Tensor<T>, Tensor<T>> local_ncc_backward(const Tensor<T>& a, const Tensor<T>& b, const LossConfig& cfg,
                                                   double dmetric) {
  const auto p = ncc_parts(a, b, cfg);
  const auto e = spatial_extent(a);
  const std::size_t n = a.size();
  const double win = std::pow(static_cast<double>(cfg.ncc_window), 3);
  const double scale = dmetric / static_cast<double>(n);
  std::vector<double> ga(n), gb(n), gaa(n), gbb(n), gab(n);
  for (std::size_t v = 0; v < n; ++v) {
    const double cr = p.cross(v, win), va = p.var_a(v, win), vb = p.var_b(v, win);
    const double den = va * vb + cfg.ncc_epsilon;
    const double d_cross = scale * 2.0 * cr / den;
    const double d_va = -scale * cr * cr * vb / (den * den);
    const double d_vb = -scale * cr * cr * va / (den * den);
    gab[v] = d_cross;
    gaa[v] = d_va;
    gbb[v] = d_vb;
    ga[v] = -d_cross * p.sb[v] / win - 2.0 * d_va * p.sa[v] / win;
    gb[v] = -d_cross * p.sa[v] / win - 2.0 * d_vb * p.sb[v] / win;
  }
  const int r = cfg.ncc_window / 2;
  const auto Ga = box_sum(ga, e, r), Gb = box_sum(gb, e, r), Gaa = box_sum(gaa, e, r), Gbb = box_sum(gbb, e, r),
             Gab = box_sum(gab, e, r);
  Tensor<T> da(a.shape()), db(b.shape());
  for (std::size_t u = 0; u < n; ++u) {
    const double av = a[u], bv = b[u];
    da[u] = static_cast<T>(Ga[u] + 2.0 * av * Gaa[u] + bv * Gab[u]);
    db[u] = static_cast<T>(Gb[u] + 2.0 * bv * Gbb[u] + av * Gab[u]);
  }
  return {da, db};
}

// Mean over axes (with extent > 1) of the mean squared forward difference over
// all channels and valid positions.
template <class T>
double smoothness(const Tensor<T>& field) {
  validate_field(field, "smoothness");
  const auto e = spatial_extent(field);
  const std::size_t dims[3] = {e.d, e.h, e.w}, strides[3] = {e.h * e.w, e.w, 1};
  const std::size_t n = e.voxels();
  double total = 0.0;
  int axes = 0;
  for (int ax = 0; ax < 3; ++ax) {
    if (dims[ax] < 2) continue;
    double s = 0.0;
    std::size_t count = 0;
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t v = 0; v < n; ++v) {
        if ((v / strides[ax]) % dims[ax] == dims[ax] - 1) continue;
        const double d = static_cast<double>(field[c * n + v + strides[ax]]) - static_cast<double>(field[c * n + v]);
        s += d * d;
        ++count;
      }
    total += s / static_cast<double>(count);
    ++axes;
  }
  return axes ? total / axes : 0.0;
}

template <class T>
Tensor<T> smoothness_backward(const Tensor<T>& field, double dloss) {
  const auto e = spatial_extent(field);
  const std::size_t dims[3] = {e.d, e.h, e.w}, strides[3] = {e.h * e.w, e.w, 1};
  const std::size_t n = e.voxels();
  int axes = 0;
  for (auto d : dims) axes += d >= 2;
  std::vector<double> g(field.size(), 0.0);
  for (int ax = 0; ax < 3; ++ax) {
    if (dims[ax] < 2) continue;
    const double count = 3.0 * static_cast<double>(n / dims[ax] * (dims[ax] - 1));
    const double k = dloss * 2.0 / (count * axes);
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t v = 0; v < n; ++v) {
        if ((v / strides[ax]) % dims[ax] == dims[ax] - 1) continue;
        const std::size_t i = c * n + v, j = i + strides[ax];
        const double d = static_cast<double>(field[j]) - static_cast<double>(field[i]);
        g[j] += k * d;
        g[i] -= k * d;
      }
  }
  Tensor<T> out(field.shape());
  for (std::size_t i = 0; i < g.size(); ++i) out[i] = static_cast<T>(g[i]);
  return out;
}

}  // namespace kernels

template <class T>
Tensor<T> warp(const Tensor<T>& vol, const Tensor<T>& field) {
  return kernels::warp(vol, field);
}

// Mean windowed squared correlation, in [0, 1]; the similarity the loss negates.
template <class T>
double local_ncc(const Tensor<T>& a, const Tensor<T>& b, const LossConfig& cfg = {}) {
  const auto p = kernels::ncc_parts(a, b, cfg);
  double s = 0.0;
  for (double v : p.cc) s += v;
  return s / static_cast<double>(p.cc.size());
}

template <class T>
Tensor<double> local_ncc_map(const Tensor<T>& a, const Tensor<T>& b, const LossConfig& cfg = {}) {
  auto p = kernels::ncc_parts(a, b, cfg);
  return Tensor<double>(a.shape(), std::move(p.cc));
}

template <class T>
double smoothness(const Tensor<T>& field) {
  return kernels::smoothness(field);
}

enum class ResampleDirection { Up, Down };

// Cell-centred trilinear resampling of each channel with edge clamping; values
// are multiplied by `factor` going up and divided going down so displacements
// stay in voxels of the new grid.
template <class T>
Tensor<T> resample_field(const Tensor<T>& field, int factor, ResampleDirection dir) {
  validate_field(field, "resample_field");
  if (factor < 2) throw ConfigError("resample_field: factor must be >= 2");
  const auto e = spatial_extent(field);
  const std::size_t f = static_cast<std::size_t>(factor);
  Extent3 o;
  if (dir == ResampleDirection::Up) {
    o = {e.d * f, e.h * f, e.w * f};
  } else {
    if (e.d % f || e.h % f || e.w % f)
      throw DimensionError("resample_field: extents " + extent_str(e) + " not divisible by " + std::to_string(factor));
    o = {e.d / f, e.h / f, e.w / f};
  }
  const double ratio = dir == ResampleDirection::Up ? 1.0 / factor : static_cast<double>(factor);
  auto source = [&](std::size_t i, std::size_t len, long& i0, double& t) {
    double s = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    s = std::clamp(s, 0.0, static_cast<double>(len - 1));
    i0 = std::min<long>(static_cast<long>(std::floor(s)), static_cast<long>(len) - 2);
    if (len == 1) i0 = 0;
    t = s - static_cast<double>(i0);
  };
  Tensor<T> out(o.shape(3));
  const std::size_t n_in = e.voxels(), n_out = o.voxels();
  for (std::size_t z = 0; z < o.d; ++z) {
    long z0;
    double tz;
    source(z, e.d, z0, tz);
    for (std::size_t y = 0; y < o.h; ++y) {
      long y0;
      double ty;
      source(y, e.h, y0, ty);
      for (std::size_t x = 0; x < o.w; ++x) {
        long x0;
        double tx;
        source(x, e.w, x0, tx);
        for (std::size_t c = 0; c < 3; ++c) {
          const T* src = field.ptr() + c * n_in;
          auto at = [&](long a, long b, long d) -> double {
            a = std::min<long>(a, e.d - 1);
            b = std::min<long>(b, e.h - 1);
            d = std::min<long>(d, e.w - 1);
            return src[(a * e.h + b) * e.w + d];
          };
          // nested lerps return equal corners exactly, so constant fields survive
          auto lerp = [](double lo, double hi, double t) { return lo + t * (hi - lo); };
          auto row = [&](long a, long b) { return lerp(at(a, b, x0), at(a, b, x0 + 1), tx); };
          auto plane = [&](long a) { return lerp(row(a, y0), row(a, y0 + 1), ty); };
          const double acc = lerp(plane(z0), plane(z0 + 1), tz);
          out[c * n_out + (z * o.h + y) * o.w + x] =
              static_cast<T>(dir == ResampleDirection::Up ? acc * factor : acc / factor);
        }
      }
    }
  }
  return out;
}

namespace ops {

template <class T>
Var<T> warp(const Var<T>& vol, const Var<T>& field) {
  auto& tape = detail::same_tape(vol, field);
  if (tape.tracking_branches()) {
    // interpolation cell of every sample point
    const auto& f = field.value();
    const auto e = spatial_extent(f);
    const std::size_t n = e.voxels();
    BranchHash bh;
    std::size_t v = 0;
    for (std::size_t z = 0; z < e.d; ++z)
      for (std::size_t y = 0; y < e.h; ++y)
        for (std::size_t x = 0; x < e.w; ++x, ++v) {
          bh.add(static_cast<std::uint64_t>(std::floor(z + static_cast<double>(f[v]))));
          bh.add(static_cast<std::uint64_t>(std::floor(y + static_cast<double>(f[n + v]))));
          bh.add(static_cast<std::uint64_t>(std::floor(x + static_cast<double>(f[2 * n + v]))));
        }
    tape.note_branch(bh.h);
  }
  return tape.record(
      "warp", {vol.id(), field.id()}, [](const auto& in) { return kernels::warp(*in[0], *in[1]); },
      [](const auto& in, const auto&, const Tensor<T>& g, auto& sink) {
        auto r = kernels::warp_backward(*in[0], *in[1], g, sink.wants(0), sink.wants(1));
        if (sink.wants(0)) sink.add(0, r.dvol);
        if (sink.wants(1)) sink.add(1, r.dfield);
      });
}

template <class T>
Var<T> local_ncc(const Var<T>& a, const Var<T>& b, const LossConfig& cfg) {
  auto& tape = detail::same_tape(a, b);
  return tape.record(
      "local_ncc", {a.id(), b.id()},
      [cfg](const auto& in) { return Tensor<T>::scalar(static_cast<T>(moco::local_ncc(*in[0], *in[1], cfg))); },
      [cfg](const auto& in, const auto&, const Tensor<T>& g, auto& sink) {
        auto [da, db] = kernels::local_ncc_backward(*in[0], *in[1], cfg, static_cast<double>(g.item()));
        sink.add(0, da);
        sink.add(1, db);
      });
}

template <class T>
Var<T> smoothness(const Var<T>& field) {
  return field.tape().record(
      "smoothness", {field.id()},
      [](const auto& in) { return Tensor<T>::scalar(static_cast<T>(kernels::smoothness(*in[0]))); },
      [](const auto& in, const auto&, const Tensor<T>& g, auto& sink) {
        sink.add(0, kernels::smoothness_backward(*in[0], static_cast<double>(g.item())));
      });
}

// Selects channel `c` of a [C,D,H,W] tensor as a [D,H,W] volume.
template <class T>
Var<T> channel(const Var<T>& x, std::size_t c) {
  return x.tape().record(
      "channel", {x.id()},
      [c](const auto& in) {
        const auto& t = *in[0];
        if (t.rank() != 4 || c >= t.dim(0)) throw DimensionError("channel index out of range");
        const auto n = spatial_extent(t).voxels();
        return Tensor<T>(spatial_extent(t).shape(), std::vector<T>(t.ptr() + c * n, t.ptr() + (c + 1) * n));
      },
      [c](const auto& in, const auto&, const Tensor<T>& g, auto& sink) {
        Tensor<T> d(in[0]->shape());
        std::copy(g.data().begin(), g.data().end(), d.ptr() + c * g.size());
        sink.add(0, d);
      });
}

}  // namespace ops

template <class T>
struct LossTerms {
  Var<T> total;
  std::vector<Var<T>> similarity;  // local NCC per frame
  std::vector<Var<T>> smoothness;
};

// sum_j ( -ncc(reference, warped_j) + lambda * smoothness(field_j) )
template <class T>
LossTerms<T> total_loss(const Var<T>& reference, const std::vector<Var<T>>& warped, const std::vector<Var<T>>& fields,
                        const LossConfig& cfg) {
  cfg.validate();
  if (warped.size() != fields.size() || warped.empty())
    throw DimensionError("total_loss: " + std::to_string(warped.size()) + " warped frames vs " +
                         std::to_string(fields.size()) + " fields");
  LossTerms<T> t;
  std::vector<Var<T>> parts;
  for (std::size_t j = 0; j < warped.size(); ++j) {
    t.similarity.push_back(ops::local_ncc(reference, warped[j], cfg));
    t.smoothness.push_back(ops::smoothness(fields[j]));
    parts.push_back(ops::add(ops::affine(t.similarity.back(), -1.0), ops::affine(t.smoothness.back(), cfg.lambda)));
  }
  t.total = ops::add_n(parts);
  return t;
}

// Plain-tensor evaluation of the same objective.
template <class T>
double total_loss(const Tensor<T>& reference, const std::vector<Tensor<T>>& warped,
                  const std::vector<Tensor<T>>& fields, const LossConfig& cfg) {
  cfg.validate();
  if (warped.size() != fields.size() || warped.empty())
    throw DimensionError("total_loss: " + std::to_string(warped.size()) + " warped frames vs " +
                         std::to_string(fields.size()) + " fields");
  double s = 0.0;
  for (std::size_t j = 0; j < warped.size(); ++j)
    s += -local_ncc(reference, warped[j], cfg) + cfg.lambda * smoothness(fields[j]);
  return s;
}

}  // namespace moco
