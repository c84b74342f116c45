#pragma once

// Patlak graphical analysis per voxel, its normalised fitting error, and the
// image-agreement metrics used to judge alignment of the parametric maps.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <optional>
#include <vector>

#include "moco/series.hpp"

namespace moco {

// Plasma curve sampled from time zero; linear between samples.
struct InputFunction {
  std::vector<double> times;   // minutes, strictly increasing, times[0] == 0
  std::vector<double> values;  // >= 0

  void validate() const {
    if (times.size() < 2 || times.size() != values.size())
      throw ConfigError("input function needs at least two (time, value) samples");
    if (times.front() != 0.0) throw ConfigError("input function must start at time 0");
    for (std::size_t i = 0; i < times.size(); ++i) {
      if (!std::isfinite(values[i]) || values[i] < 0.0) throw ConfigError("input function values must be >= 0");
      if (i > 0 && !(times[i] > times[i - 1])) throw ConfigError("input function times must be strictly increasing");
    }
  }

  void require_in_range(double t) const {
    if (!(t >= times.front() && t <= times.back()))
      throw RangeError("time " + std::to_string(t) + " outside input function range [0, " +
                       std::to_string(times.back()) + "]");
  }

  double value_at(double t) const {
    require_in_range(t);
    auto it = std::upper_bound(times.begin(), times.end(), t);
    if (it == times.end()) return values.back();
    const std::size_t i = static_cast<std::size_t>(it - times.begin());
    const double a = (t - times[i - 1]) / (times[i] - times[i - 1]);
    return values[i - 1] + a * (values[i] - values[i - 1]);
  }
};

// Trapezoidal integral of the plasma curve from 0 to t; the partial last
// interval uses the interpolated end value, so the rule is exact on linear curves.
inline double cumulative_input(const InputFunction& ifn, double t) {
  ifn.require_in_range(t);
  double s = 0.0;
  std::size_t i = 1;
  for (; i < ifn.times.size() && ifn.times[i] <= t; ++i)
    s += 0.5 * (ifn.values[i] + ifn.values[i - 1]) * (ifn.times[i] - ifn.times[i - 1]);
  if (i < ifn.times.size() && t > ifn.times[i - 1]) s += 0.5 * (ifn.value_at(t) + ifn.values[i - 1]) * (t - ifn.times[i - 1]);
  return s;
}

struct TimeActivityCurve {
  std::vector<double> mid_times;
  std::vector<double> durations;
  std::vector<double> activity;
};

// w_k = duration_k * exp(-decay * t_k); decay defaults to F-18.
struct WeightModel {
  double half_life_min = 109.77;
  bool decay = true;

  double weight(double mid_time, double duration) const {
    const double lambda = decay ? std::numbers::ln2 / half_life_min : 0.0;
    return duration * std::exp(-lambda * mid_time);
  }
};

// Design of the fit: frames at or after t*, with their regressors precomputed.
struct PatlakDesign {
  std::vector<std::size_t> frames;  // indices into the series
  std::vector<double> integral;     // int_0^t C_P
  std::vector<double> plasma;       // C_P(t)
  std::vector<double> weights;      // w_k > 0

  std::size_t n() const { return frames.size(); }
};

inline PatlakDesign patlak_design(const std::vector<double>& mid_times, const std::vector<double>& durations,
                                  const InputFunction& ifn, double t_star, const WeightModel& wm) {
  ifn.validate();
  PatlakDesign d;
  for (std::size_t k = 0; k < mid_times.size(); ++k) {
    if (mid_times[k] < t_star) continue;
    d.frames.push_back(k);
    d.integral.push_back(cumulative_input(ifn, mid_times[k]));
    d.plasma.push_back(ifn.value_at(mid_times[k]));
    d.weights.push_back(wm.weight(mid_times[k], durations.at(k)));
  }
  if (d.n() < 2) throw ConfigError("Patlak fit needs at least two frames at or after t*");
  for (std::size_t i = 0; i < d.n(); ++i) {
    if (!(d.plasma[i] > 0.0)) throw ConfigError("plasma input must be positive at fitted frames");
    if (!(d.weights[i] > 0.0)) throw ConfigError("fit weights must be positive");
  }
  return d;
}

// Same design with caller-supplied weights (one per fitted frame).
inline PatlakDesign with_weights(PatlakDesign d, const std::vector<double>& w) {
  if (w.size() != d.n()) throw DimensionError("expected one weight per fitted frame");
  for (double x : w)
    if (!(x > 0.0)) throw ConfigError("fit weights must be positive");
  d.weights = w;
  return d;
}

enum class FitStatus : std::uint8_t { Ok = 0, Degenerate = 1 };

struct PatlakFit {
  double ki = 0.0, vb = 0.0;
  FitStatus status = FitStatus::Ok;
};

// Weighted least squares of C_T = Ki * int C_P + Vb * C_P, solved by
// Gram-Schmidt on the sqrt(w)-scaled columns.
inline PatlakFit patlak_fit(const PatlakDesign& d, const double* activity) {
  const std::size_t n = d.n();
  double a11 = 0.0;
  for (std::size_t i = 0; i < n; ++i) a11 += d.weights[i] * d.integral[i] * d.integral[i];
  double a22 = 0.0, a12 = 0.0, b2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double w = d.weights[i];
    a22 += w * d.plasma[i] * d.plasma[i];
    a12 += w * d.integral[i] * d.plasma[i];
    b2 += w * d.plasma[i] * activity[i];
  }
  const double n1 = std::sqrt(a11);
  // Residual of the plasma column after removing its integral-column component.
  double r22sq = 0.0;
  if (n1 > 0.0) {
    const double r12 = a12 / n1;
    for (std::size_t i = 0; i < n; ++i) {
      const double q1 = d.integral[i] / n1;
      const double e = d.plasma[i] - r12 * q1;
      r22sq += d.weights[i] * e * e;
    }
  }
  PatlakFit f;
  if (!(n1 > 0.0) || r22sq <= 1e-20 * a22) {
    f.status = FitStatus::Degenerate;
    f.ki = 0.0;
    f.vb = a22 > 0.0 ? b2 / a22 : 0.0;
    return f;
  }
  const double r12 = a12 / n1;
  // Project the data on the orthonormal pair (q1, q2) and back-substitute.
  double c1 = 0.0, c2 = 0.0;
  const double r22 = std::sqrt(r22sq);
  for (std::size_t i = 0; i < n; ++i) {
    const double sw = std::sqrt(d.weights[i]);
    const double q1 = sw * d.integral[i] / n1;
    const double q2 = (sw * d.plasma[i] - r12 * q1) / r22;
    c1 += q1 * sw * activity[i];
    c2 += q2 * sw * activity[i];
  }
  f.vb = c2 / r22;
  f.ki = (c1 - r12 * f.vb) / n1;
  return f;
}

inline PatlakFit patlak_fit(const TimeActivityCurve& tac, const InputFunction& ifn, double t_star,
                            const WeightModel& wm = {}) {
  const auto d = patlak_design(tac.mid_times, tac.durations, ifn, t_star, wm);
  std::vector<double> y;
  for (auto k : d.frames) y.push_back(tac.activity.at(k));
  return patlak_fit(d, y.data());
}

struct Flagged {
  double value = 0.0;
  bool defined = true;
};

// sum w (fit - C_T)^2 / ((n - 2) * sum (w C_T / n)^2); undefined when n <= 2 or
// every activity is zero.
inline Flagged nfe(const PatlakDesign& d, const double* activity, const PatlakFit& fit) {
  const std::size_t n = d.n();
  double num = 0.0, den = 0.0;
  const double nn = static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double pred = fit.ki * d.integral[i] + fit.vb * d.plasma[i];
    const double r = pred - activity[i];
    num += d.weights[i] * r * r;
    const double s = d.weights[i] * activity[i] / nn;
    den += s * s;
  }
  den *= nn - 2.0;
  if (n <= 2 || !(den > 0.0)) return {0.0, false};
  return {num / den, true};
}

inline Flagged nfe(const TimeActivityCurve& tac, const PatlakFit& fit, const InputFunction& ifn, double t_star,
                   const WeightModel& wm = {}) {
  const auto d = patlak_design(tac.mid_times, tac.durations, ifn, t_star, wm);
  std::vector<double> y;
  for (auto k : d.frames) y.push_back(tac.activity.at(k));
  return nfe(d, y.data(), fit);
}

// ---------------------------------------------------------------------------
// Voxel-wise maps

struct ParametricMaps {
  Tensor<double> ki, vb, nfe;
  Tensor<std::uint8_t> degenerate;  // 1 where the voxel was not fitted or the fit is unusable

  std::size_t valid_count() const {
    return static_cast<std::size_t>(std::count(degenerate.data().begin(), degenerate.data().end(), 0));
  }
};

// Voxels whose mean activity over fitted frames is at most `min_activity` times
// the series maximum are masked before fitting.
inline ParametricMaps parametric_maps(const FrameSeries& s, const InputFunction& ifn, double t_star,
                                      const WeightModel& wm = {}, double min_activity = 1e-6) {
  s.validate();
  const auto d = patlak_design(s.mid_times, s.durations, ifn, t_star, wm);
  const auto shape = s.extent.shape();
  ParametricMaps m{Tensor<double>(shape), Tensor<double>(shape), Tensor<double>(shape),
                   Tensor<std::uint8_t>(shape, 1)};
  double vmax = 0.0;
  for (const auto& f : s.frames)
    for (double v : f.data()) vmax = std::max(vmax, v);
  const double floor = min_activity * vmax;
  std::vector<double> y(d.n());
  for (std::size_t v = 0; v < s.extent.voxels(); ++v) {
    double mean = 0.0;
    for (std::size_t i = 0; i < d.n(); ++i) {
      y[i] = s.frames[d.frames[i]][v];
      mean += y[i];
    }
    mean /= static_cast<double>(d.n());
    if (!(vmax > 0.0) || !(mean > floor)) continue;
    const auto fit = patlak_fit(d, y.data());
    const auto e = nfe(d, y.data(), fit);
    m.ki[v] = fit.ki;
    m.vb[v] = fit.vb;
    m.nfe[v] = e.value;
    m.degenerate[v] = (fit.status == FitStatus::Ok && e.defined) ? 0 : 1;
  }
  return m;
}

// ---------------------------------------------------------------------------
// Agreement metrics

namespace detail {

inline void require_same(const Shape& a, const Shape& b, const char* what) {
  if (a != b) throw DimensionError(std::string(what) + ": shape " + shape_str(a) + " vs " + shape_str(b));
}

inline bool selected(const Tensor<std::uint8_t>* include, std::size_t i) { return !include || (*include)[i] != 0; }

}  // namespace detail

// (H(A) + H(B)) / H(A,B) from a bins x bins joint histogram, each axis spanning
// that image's min..max over the selected voxels. Undefined if either image is
// constant there.
template <class T>
Flagged nmi(const Tensor<T>& a, const Tensor<T>& b, int bins = 64, const Tensor<std::uint8_t>* include = nullptr) {
  detail::require_same(a.shape(), b.shape(), "nmi");
  if (include) detail::require_same(a.shape(), include->shape(), "nmi mask");
  if (bins < 2) throw ConfigError("nmi needs at least 2 bins");
  double amin = std::numeric_limits<double>::infinity(), amax = -amin, bmin = amin, bmax = -amin;
  std::size_t count = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!detail::selected(include, i)) continue;
    amin = std::min(amin, double(a[i]));
    amax = std::max(amax, double(a[i]));
    bmin = std::min(bmin, double(b[i]));
    bmax = std::max(bmax, double(b[i]));
    ++count;
  }
  if (count == 0 || !(amax > amin) || !(bmax > bmin)) return {0.0, false};
  const auto nb = static_cast<std::size_t>(bins);
  auto bin = [nb](double v, double lo, double hi) {
    return std::min(nb - 1, static_cast<std::size_t>((v - lo) / (hi - lo) * static_cast<double>(nb)));
  };
  std::vector<double> joint(nb * nb, 0.0), pa(nb, 0.0), pb(nb, 0.0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!detail::selected(include, i)) continue;
    const auto ia = bin(a[i], amin, amax), ib = bin(b[i], bmin, bmax);
    joint[ia * nb + ib] += 1.0;
    pa[ia] += 1.0;
    pb[ib] += 1.0;
  }
  auto entropy = [count](const std::vector<double>& h) {
    double e = 0.0;
    for (double c : h)
      if (c > 0.0) {
        const double p = c / static_cast<double>(count);
        e -= p * std::log(p);
      }
    return e;
  };
  const double hab = entropy(joint);
  return {(entropy(pa) + entropy(pb)) / hab, true};
}

// Pearson correlation over the selected voxels; undefined for constant input.
template <class T>
Flagged global_ncc(const Tensor<T>& a, const Tensor<T>& b, const Tensor<std::uint8_t>* include = nullptr) {
  detail::require_same(a.shape(), b.shape(), "global_ncc");
  if (include) detail::require_same(a.shape(), include->shape(), "global_ncc mask");
  double ma = 0.0, mb = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (detail::selected(include, i)) {
      ma += a[i];
      mb += b[i];
      ++n;
    }
  if (n == 0) return {0.0, false};
  ma /= static_cast<double>(n);
  mb /= static_cast<double>(n);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (detail::selected(include, i)) {
      const double da = a[i] - ma, db = b[i] - mb;
      sab += da * db;
      saa += da * da;
      sbb += db * db;
    }
  if (!(saa > 0.0) || !(sbb > 0.0)) return {0.0, false};
  return {std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0), true};
}

struct RoiStats {
  double mean = 0.0, max = 0.0, std = 0.0;  // std is the population deviation
};

template <class T>
RoiStats roi_stats(const Tensor<T>& ki, const Tensor<std::uint8_t>& mask) {
  detail::require_same(ki.shape(), mask.shape(), "roi_stats");
  RoiStats r;
  std::size_t n = 0;
  r.max = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < ki.size(); ++i)
    if (mask[i]) {
      r.mean += ki[i];
      r.max = std::max(r.max, double(ki[i]));
      ++n;
    }
  if (n == 0) throw ConfigError("roi_stats: empty mask");
  r.mean /= static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < ki.size(); ++i)
    if (mask[i]) ss += (ki[i] - r.mean) * (ki[i] - r.mean);
  r.std = std::sqrt(ss / static_cast<double>(n));
  return r;
}

}  // namespace moco
