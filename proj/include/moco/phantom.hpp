#pragma once

// Synthetic dynamic phantom with known kinetics, injected inter-frame motion
// with known fields, and the comparison of motion-free, motion and corrected
// conditions.

#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "moco/patlak.hpp"
#include "moco/warp.hpp"

namespace moco {

// ---------------------------------------------------------------------------
// Input function

// Three-exponential plasma model with a linear-rise peak term:
//   C_P(t) = scale * [(a1 t - a2 - a3) e^{-l1 t} + a2 e^{-l2 t} + a3 e^{-l3 t}],  t >= 0.
// It is 0 at t = 0, peaks within the first minute and then decreases.
struct InputFunctionModel {
  double a1 = 851.1225, a2 = 21.8798, a3 = 20.8113;  // per min, -, -
  double l1 = 4.133859, l2 = 0.01043449, l3 = 0.1190996;  // 1/min
  double scale = 0.2;  // brings tissue activities to the SUV range
  double sample_step = 0.02;  // min, for the sampled curve used by fitting

  double operator()(double t) const {
    if (t <= 0.0) return 0.0;
    return scale * ((a1 * t - a2 - a3) * std::exp(-l1 * t) + a2 * std::exp(-l2 * t) + a3 * std::exp(-l3 * t));
  }

  // Samples on [0, t_end] at sample_step (the last sample lands on t_end).
  InputFunction sampled(double t_end) const {
    if (!(t_end > 0.0) || !(sample_step > 0.0)) throw ConfigError("input function sampling needs positive range");
    InputFunction f;
    const auto n = static_cast<std::size_t>(std::ceil(t_end / sample_step));
    for (std::size_t i = 0; i <= n; ++i) {
      const double t = std::min(t_end, static_cast<double>(i) * sample_step);
      f.times.push_back(t);
      f.values.push_back((*this)(t));
    }
    return f;
  }
};

inline double analytic_input_function(double t) { return InputFunctionModel{}(t); }

// ---------------------------------------------------------------------------
// Phantom geometry and kinetics

enum class RegionShape { Ellipsoid, Box };

struct Region {
  std::string name;
  RegionShape shape = RegionShape::Ellipsoid;
  std::array<double, 3> centre{};  // voxels (d, h, w)
  std::array<double, 3> radii{};   // voxels; half-widths for boxes
  double ki = 0.0, vb = 0.0;
  bool tumour = false;

  bool contains(double z, double y, double x) const {
    const double dz = (z - centre[0]) / radii[0], dy = (y - centre[1]) / radii[1], dx = (x - centre[2]) / radii[2];
    if (shape == RegionShape::Ellipsoid) return dz * dz + dy * dy + dx * dx <= 1.0;
    return std::abs(dz) <= 1.0 && std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0;
  }
};

struct PhantomSpec {
  Extent3 extent{16, 16, 32};
  std::array<double, 3> voxel_mm{4.0, 4.0, 4.0};
  double background_ki = 0.0, background_vb = 0.02;
  std::vector<Region> regions;  // later regions override earlier ones

  // Body with a liver-like organ and one tumour.
  static PhantomSpec desk_default() {
    PhantomSpec s;
    s.regions.push_back({"body", RegionShape::Ellipsoid, {7.5, 7.5, 15.5}, {6.5, 6.0, 14.0}, 0.003, 0.15, false});
    s.regions.push_back({"organ", RegionShape::Ellipsoid, {7.0, 8.5, 9.0}, {4.0, 3.5, 5.0}, 0.006, 0.35, false});
    s.regions.push_back({"tumour", RegionShape::Ellipsoid, {8.0, 7.0, 21.0}, {2.6, 2.6, 3.2}, 0.0146, 0.25, true});
    return s;
  }

  void validate() const {
    if (extent.voxels() == 0) throw ConfigError("phantom grid is empty");
    if (background_ki < 0.0 || background_vb < 0.0) throw ConfigError("background kinetics must be non-negative");
    for (const auto& r : regions) {
      if (r.ki < 0.0 || r.vb < 0.0) throw ConfigError("region " + r.name + " has negative kinetics");
      for (int a = 0; a < 3; ++a) {
        const double n = a == 0 ? extent.d : a == 1 ? extent.h : extent.w;
        if (!(r.radii[a] > 0.0) || r.centre[a] - r.radii[a] < -0.5 || r.centre[a] + r.radii[a] > n - 0.5)
          throw ConfigError("region " + r.name + " does not fit inside the grid");
      }
    }
  }
};

struct PhantomTruth {
  Tensor<double> ki, vb;
  Tensor<std::uint8_t> label;  // 0 background, i+1 for regions[i]
  Tensor<std::uint8_t> tumour, body;
};

// Each voxel takes the kinetics of the last region containing its centre.
inline PhantomTruth phantom_truth(const PhantomSpec& spec) {
  spec.validate();
  const auto sh = spec.extent.shape();
  PhantomTruth t{Tensor<double>(sh, spec.background_ki), Tensor<double>(sh, spec.background_vb),
                 Tensor<std::uint8_t>(sh), Tensor<std::uint8_t>(sh), Tensor<std::uint8_t>(sh)};
  for (std::size_t z = 0; z < spec.extent.d; ++z)
    for (std::size_t y = 0; y < spec.extent.h; ++y)
      for (std::size_t x = 0; x < spec.extent.w; ++x)
        for (std::size_t r = 0; r < spec.regions.size(); ++r) {
          const auto& reg = spec.regions[r];
          if (!reg.contains(double(z), double(y), double(x))) continue;
          t.ki.at(z, y, x) = reg.ki;
          t.vb.at(z, y, x) = reg.vb;
          t.label.at(z, y, x) = static_cast<std::uint8_t>(r + 1);
          t.tumour.at(z, y, x) = reg.tumour ? 1 : 0;
          t.body.at(z, y, x) = 1;
        }
  return t;
}

// Voxels whose whole 3x3x3 neighbourhood has the same label.
inline Tensor<std::uint8_t> interior_mask(const Tensor<std::uint8_t>& label) {
  const auto e = spatial_extent(label);
  Tensor<std::uint8_t> m(label.shape());
  for (std::size_t z = 1; z + 1 < e.d; ++z)
    for (std::size_t y = 1; y + 1 < e.h; ++y)
      for (std::size_t x = 1; x + 1 < e.w; ++x) {
        bool same = true;
        for (int a = -1; a <= 1 && same; ++a)
          for (int b = -1; b <= 1 && same; ++b)
            for (int c = -1; c <= 1 && same; ++c)
              same = label.at(z + a, y + b, x + c) == label.at(z, y, x);
        m.at(z, y, x) = same ? 1 : 0;
      }
  return m;
}

struct FrameTiming {
  std::vector<double> mid_times, durations;

  // n late frames of equal length starting at `start` minutes.
  static FrameTiming uniform(std::size_t n, double start = 20.0, double duration = 5.0) {
    FrameTiming f;
    for (std::size_t k = 0; k < n; ++k) {
      f.mid_times.push_back(start + duration * (static_cast<double>(k) + 0.5));
      f.durations.push_back(duration);
    }
    return f;
  }
};

// C_T(t_k) = Ki * int C_P + Vb * C_P(t_k), times (1 + noise * N(0,1)) when
// noise > 0. Each frame draws from its own stream seeded by (seed, k).
inline FrameSeries simulate_frames(const PhantomSpec& spec, const InputFunction& ifn, const FrameTiming& timing,
                                   double noise_sigma, std::uint64_t seed) {
  spec.validate();
  if (noise_sigma < 0.0) throw ConfigError("noise_sigma must be non-negative");
  const auto truth = phantom_truth(spec);
  FrameSeries s;
  s.extent = spec.extent;
  s.voxel_mm = spec.voxel_mm;
  s.mid_times = timing.mid_times;
  s.durations = timing.durations;
  for (std::size_t k = 0; k < timing.mid_times.size(); ++k) {
    const double t = timing.mid_times[k];
    const double integral = cumulative_input(ifn, t), plasma = ifn.value_at(t);
    std::seed_seq ss{seed, static_cast<std::uint64_t>(k)};
    std::mt19937_64 rng(ss);
    std::normal_distribution<double> nd(0.0, 1.0);
    Tensor<double> f(spec.extent.shape());
    for (std::size_t v = 0; v < f.size(); ++v) {
      double c = truth.ki[v] * integral + truth.vb[v] * plasma;
      if (noise_sigma > 0.0) c *= 1.0 + noise_sigma * nd(rng);
      f[v] = c;
    }
    s.frames.push_back(std::move(f));
  }
  s.validate();
  return s;
}

// ---------------------------------------------------------------------------
// Motion

// Displacement that a frame is resampled with: moved(x) = frame(x + u(x)),
//   u(x) = g(x) * (t + (1/s - 1) (x - c)),
// with g a Gaussian envelope about c (g = 1 when envelope_sigma is 0). s > 1
// expands the frame about c, s < 1 contracts it.
struct FrameMotion {
  std::array<double, 3> translation_mm{};
  double scale = 1.0;
};

struct MotionSpec {
  std::vector<FrameMotion> frames;
  std::array<double, 3> centre{};  // voxels
  double envelope_sigma = 0.0;     // voxels; 0 = global
  double bound_mm = 16.0;          // |u| cap in mm
  std::uint64_t seed = 0;

  void validate(const FrameSeries& s) const {
    if (frames.size() != s.size())
      throw ConfigError("motion has " + std::to_string(frames.size()) + " frames, series has " +
                        std::to_string(s.size()));
    if (envelope_sigma < 0.0 || !(bound_mm > 0.0)) throw ConfigError("invalid motion envelope or bound");
    for (const auto& f : frames) {
      if (!(f.scale > 0.0)) throw ConfigError("expansion factor must be positive");
      const double n = std::hypot(f.translation_mm[0], f.translation_mm[1], f.translation_mm[2]);
      if (n > bound_mm) throw ConfigError("translation of " + std::to_string(n) + " mm exceeds the bound");
    }
  }
};

// Random local shift and expansion/contraction for every frame except the
// reference: translation uniform in the ball of radius `max_shift_vox`
// (voxels), scale uniform in [1 - max_strain, 1 + max_strain].
inline MotionSpec random_motion(const FrameSeries& s, std::size_t reference, double max_shift_vox, double max_strain,
                                const std::array<double, 3>& centre, double envelope_sigma, std::uint64_t seed) {
  MotionSpec m;
  m.centre = centre;
  m.envelope_sigma = envelope_sigma;
  m.seed = seed;
  const double max_mm = std::max({s.voxel_mm[0], s.voxel_mm[1], s.voxel_mm[2]});
  // Largest |u| this draw can produce: the shift plus the strain term at the
  // grid corner farthest from the centre.
  double reach2 = 0.0;
  const double ext[3] = {double(s.extent.d), double(s.extent.h), double(s.extent.w)};
  for (int a = 0; a < 3; ++a) {
    const double r = std::max(std::abs(centre[a]), std::abs(ext[a] - 1.0 - centre[a])) * s.voxel_mm[a];
    reach2 += r * r;
  }
  m.bound_mm = max_shift_vox * max_mm + max_strain / (1.0 - max_strain) * std::sqrt(reach2) + 1e-9;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (std::size_t k = 0; k < s.size(); ++k) {
    FrameMotion f;
    if (k != reference) {
      std::array<double, 3> dir;
      do {
        dir = {u(rng), u(rng), u(rng)};
      } while (dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2] > 1.0);
      for (int a = 0; a < 3; ++a) f.translation_mm[a] = dir[a] * max_shift_vox * s.voxel_mm[a];
      f.scale = 1.0 + max_strain * u(rng);
    }
    m.frames.push_back(f);
  }
  return m;
}

inline std::array<double, 3> motion_at(const MotionSpec& m, const FrameMotion& f, const std::array<double, 3>& vox_mm,
                                       double z, double y, double x) {
  const double p[3] = {z, y, x};
  double g = 1.0;
  if (m.envelope_sigma > 0.0) {
    double r2 = 0.0;
    for (int a = 0; a < 3; ++a) r2 += (p[a] - m.centre[a]) * (p[a] - m.centre[a]);
    g = std::exp(-0.5 * r2 / (m.envelope_sigma * m.envelope_sigma));
  }
  std::array<double, 3> u;
  for (int a = 0; a < 3; ++a) u[a] = g * (f.translation_mm[a] / vox_mm[a] + (1.0 / f.scale - 1.0) * (p[a] - m.centre[a]));
  return u;
}

struct MotionResult {
  FrameSeries moved;
  std::vector<Tensor<double>> motion_fields;   // u_k: moved_k(x) = frame_k(x + u_k(x))
  std::vector<Tensor<double>> correct_fields;  // phi_k with moved_k(v + phi_k(v)) = frame_k(v)
};

// phi solves phi(v) = -u(v + phi(v)) by fixed-point iteration, which converges
// while u is a contraction.
inline MotionResult inject_motion(const FrameSeries& s, const MotionSpec& m, int iterations = 60) {
  s.validate();
  m.validate(s);
  MotionResult r{s, {}, {}};
  const auto e = s.extent;
  const std::size_t n = e.voxels();
  for (std::size_t k = 0; k < s.size(); ++k) {
    const auto& fm = m.frames[k];
    Tensor<double> u(e.shape(3)), phi(e.shape(3));
    const bool still = fm.translation_mm == std::array<double, 3>{} && fm.scale == 1.0;
    if (!still) {
      std::size_t v = 0;
      double umax = 0.0;
      for (std::size_t z = 0; z < e.d; ++z)
        for (std::size_t y = 0; y < e.h; ++y)
          for (std::size_t x = 0; x < e.w; ++x, ++v) {
            const auto d = motion_at(m, fm, s.voxel_mm, double(z), double(y), double(x));
            double mm2 = 0.0;
            for (int a = 0; a < 3; ++a) {
              u[a * n + v] = d[a];
              mm2 += d[a] * s.voxel_mm[a] * d[a] * s.voxel_mm[a];
            }
            umax = std::max(umax, std::sqrt(mm2));
            std::array<double, 3> p{};
            for (int it = 0; it < iterations; ++it) {
              const auto q = motion_at(m, fm, s.voxel_mm, z + p[0], y + p[1], x + p[2]);
              p = {-q[0], -q[1], -q[2]};
            }
            for (int a = 0; a < 3; ++a) phi[a * n + v] = p[a];
          }
      if (umax > m.bound_mm)
        throw ConfigError("frame " + std::to_string(k) + " displacement " + std::to_string(umax) +
                          " mm exceeds the bound of " + std::to_string(m.bound_mm) + " mm");
      r.moved.frames[k] = warp(s.frames[k], u);
    }
    r.motion_fields.push_back(std::move(u));
    r.correct_fields.push_back(std::move(phi));
  }
  return r;
}

// ---------------------------------------------------------------------------
// Evaluation

struct ConditionMetrics {
  std::string name;
  double mean_nfe = 0.0, max_nfe = 0.0;  // over fitted body voxels
  double tumour_nfe = 0.0;
  RoiStats tumour_ki;  // over the true tumour mask
  Flagged ki_vb_nmi, ki_vb_ncc;
  std::size_t fitted_voxels = 0;
};

struct KineticsSetup {
  InputFunction ifn;
  double t_star = 20.0;
  WeightModel weights;
};

inline ConditionMetrics condition_metrics(const std::string& name, const FrameSeries& s, const KineticsSetup& k,
                                          const PhantomTruth& truth, ParametricMaps* keep = nullptr) {
  auto maps = parametric_maps(s, k.ifn, k.t_star, k.weights);
  ConditionMetrics c;
  c.name = name;
  Tensor<std::uint8_t> use(truth.body.shape());
  double tn = 0.0;
  std::size_t tcount = 0;
  for (std::size_t v = 0; v < use.size(); ++v) {
    use[v] = truth.body[v] && !maps.degenerate[v];
    if (!use[v]) continue;
    c.mean_nfe += maps.nfe[v];
    c.max_nfe = std::max(c.max_nfe, maps.nfe[v]);
    ++c.fitted_voxels;
    if (truth.tumour[v]) {
      tn += maps.nfe[v];
      ++tcount;
    }
  }
  if (c.fitted_voxels) c.mean_nfe /= static_cast<double>(c.fitted_voxels);
  if (tcount) c.tumour_nfe = tn / static_cast<double>(tcount);
  c.tumour_ki = roi_stats(maps.ki, truth.tumour);
  c.ki_vb_nmi = nmi(maps.ki, maps.vb, 64, &use);
  c.ki_vb_ncc = global_ncc(maps.ki, maps.vb, &use);
  if (keep) *keep = std::move(maps);
  return c;
}

struct CorrectionReport {
  std::vector<ConditionMetrics> conditions;  // motion-free, motion, corrected
  double endpoint_error = 0.0;  // mean |est - true| in voxels over body voxels of moved frames
  bool has_endpoint_error = false;
};

inline double endpoint_error(const std::vector<Tensor<double>>& truth, const std::vector<Tensor<double>>& est,
                             const Tensor<std::uint8_t>& mask, std::size_t skip_frame) {
  if (truth.size() != est.size()) throw DimensionError("endpoint_error: field counts differ");
  double s = 0.0;
  std::size_t cnt = 0;
  const std::size_t n = mask.size();
  for (std::size_t k = 0; k < truth.size(); ++k) {
    if (k == skip_frame) continue;
    if (truth[k].shape() != est[k].shape()) throw DimensionError("endpoint_error: field shapes differ");
    for (std::size_t v = 0; v < n; ++v) {
      if (!mask[v]) continue;
      double d2 = 0.0;
      for (std::size_t a = 0; a < 3; ++a) {
        const double d = double(est[k][a * n + v]) - double(truth[k][a * n + v]);
        d2 += d * d;
      }
      s += std::sqrt(d2);
      ++cnt;
    }
  }
  return cnt ? s / static_cast<double>(cnt) : 0.0;
}

inline CorrectionReport evaluate_correction(const FrameSeries& motion_free, const FrameSeries& motion,
                                            const FrameSeries& corrected, const KineticsSetup& k,
                                            const PhantomTruth& truth, const std::vector<Tensor<double>>* true_fields,
                                            const std::vector<Tensor<double>>* est_fields, std::size_t reference) {
  CorrectionReport r;
  r.conditions.push_back(condition_metrics("motion-free", motion_free, k, truth));
  r.conditions.push_back(condition_metrics("motion", motion, k, truth));
  r.conditions.push_back(condition_metrics("corrected", corrected, k, truth));
  if (true_fields && est_fields) {
    r.endpoint_error = endpoint_error(*true_fields, *est_fields, truth.body, reference);
    r.has_endpoint_error = true;
  }
  return r;
}

}  // namespace moco
