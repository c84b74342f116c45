#pragma once

// Input preparation, window construction, Adam training and application of a
// trained network to a full-resolution series.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "moco/net.hpp"
#include "moco/series.hpp"
#include "moco/warp.hpp"

namespace moco {

struct TrainConfig {
  double learning_rate = 1e-4;
  int batch_size = 1;
  int epochs = 1;
  double lambda = 1.0;
  std::uint64_t seed = 0;
  int downsample_factor = 4;
  double cutoff = 2.5;        // SUV
  double noise_sigma = 0.01;  // added above the cutoff
  int window_length = 5;
  int reference_index = 0;
  // Correctable frames are [first_frame, last_frame]; -1 means the last frame.
  int first_frame = 0;
  int last_frame = -1;
  int ncc_window = 9;
  NetVariant variant = NetVariant::B_ConvLSTM;

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
    if (batch_size != 1) throw ConfigError("batch_size is fixed at 1");
    if (epochs < 0) throw ConfigError("epochs must be non-negative");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be non-negative");
    if (downsample_factor < 1) throw ConfigError("downsample_factor must be at least 1");
    if (!(cutoff > 0.0)) throw ConfigError("cutoff must be positive");
    if (!(noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be non-negative");
    if (window_length < 1) throw ConfigError("window_length must be at least 1");
    if (reference_index < 0 || first_frame < 0) throw ConfigError("frame indices must be non-negative");
    if (ncc_window < 1 || ncc_window % 2 == 0) throw ConfigError("ncc_window must be a positive odd number");
  }

  LossConfig loss() const {
    LossConfig c;
    c.lambda = lambda;
    c.ncc_window = ncc_window;
    return c;
  }
};

struct FrameRange {
  std::size_t first = 0, last = 0;  // inclusive
  std::size_t count() const { return last - first + 1; }
};

inline FrameRange correctable_frames(std::size_t n_frames, const TrainConfig& cfg) {
  const std::size_t last = cfg.last_frame < 0 ? n_frames - 1 : static_cast<std::size_t>(cfg.last_frame);
  const auto first = static_cast<std::size_t>(cfg.first_frame);
  if (n_frames == 0 || last >= n_frames || first > last)
    throw ConfigError("correctable frame range [" + std::to_string(cfg.first_frame) + ", " +
                      std::to_string(cfg.last_frame) + "] is invalid for " + std::to_string(n_frames) + " frames");
  if (static_cast<std::size_t>(cfg.reference_index) >= n_frames)
    throw ConfigError("reference_index " + std::to_string(cfg.reference_index) + " is out of range");
  return {first, last};
}

// ---------------------------------------------------------------------------
// Preprocessing

// Voxels above the cutoff become cutoff + N(0, sigma^2); others are untouched.
template <class T>
Tensor<T> preprocess(const Tensor<T>& frame, const TrainConfig& cfg, std::mt19937_64& rng) {
  if (!(cfg.noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be non-negative");
  Tensor<T> out = frame;
  std::normal_distribution<double> nd(0.0, cfg.noise_sigma > 0.0 ? cfg.noise_sigma : 1.0);
  for (auto& v : out.data())
    if (v > cfg.cutoff) v = static_cast<T>(cfg.cutoff + (cfg.noise_sigma > 0.0 ? nd(rng) : 0.0));
  return out;
}

// Mean over factor^3 blocks.
template <class T>
Tensor<T> downsample(const Tensor<T>& vol, int factor) {
  if (factor < 1) throw ConfigError("downsample factor must be at least 1");
  const auto e = spatial_extent(vol);
  const auto f = static_cast<std::size_t>(factor);
  if (vol.rank() != 3) throw DimensionError("downsample expects a [D,H,W] volume");
  if (e.d % f || e.h % f || e.w % f)
    throw DimensionError("grid " + extent_str(e) + " is not divisible by " + std::to_string(factor));
  if (f == 1) return vol;
  const Extent3 o{e.d / f, e.h / f, e.w / f};
  Tensor<T> out(o.shape());
  const double inv = 1.0 / static_cast<double>(f * f * f);
  for (std::size_t z = 0; z < o.d; ++z)
    for (std::size_t y = 0; y < o.h; ++y)
      for (std::size_t x = 0; x < o.w; ++x) {
        double s = 0.0;
        for (std::size_t a = 0; a < f; ++a)
          for (std::size_t b = 0; b < f; ++b)
            for (std::size_t c = 0; c < f; ++c) s += vol.at(z * f + a, y * f + b, x * f + c);
        out.at(z, y, x) = static_cast<T>(s * inv);
      }
  return out;
}

// Offset of a centred `inner` box inside `outer`.
inline Extent3 centre_offset(const Extent3& inner, const Extent3& outer) {
  if (inner.d > outer.d || inner.h > outer.h || inner.w > outer.w)
    throw DimensionError("cannot place " + extent_str(inner) + " inside " + extent_str(outer));
  return {(outer.d - inner.d) / 2, (outer.h - inner.h) / 2, (outer.w - inner.w) / 2};
}

// Zero-pads every channel of a volume or channel stack to `target`, centred.
template <class T>
Tensor<T> pad_centred(const Tensor<T>& t, const Extent3& target) {
  const auto e = spatial_extent(t);
  const auto o = centre_offset(e, target);
  const std::size_t C = t.rank() == 4 ? t.dim(0) : 1;
  Tensor<T> out(t.rank() == 4 ? target.shape(C) : target.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t z = 0; z < e.d; ++z)
      for (std::size_t y = 0; y < e.h; ++y) {
        const T* src = t.ptr() + ((c * e.d + z) * e.h + y) * e.w;
        T* dst = out.ptr() + ((c * target.d + z + o.d) * target.h + y + o.h) * target.w + o.w;
        std::copy(src, src + e.w, dst);
      }
  return out;
}

template <class T>
Tensor<T> crop_centred(const Tensor<T>& t, const Extent3& target) {
  const auto e = spatial_extent(t);
  const auto o = centre_offset(target, e);
  const std::size_t C = t.rank() == 4 ? t.dim(0) : 1;
  Tensor<T> out(t.rank() == 4 ? target.shape(C) : target.shape());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t z = 0; z < target.d; ++z)
      for (std::size_t y = 0; y < target.h; ++y) {
        const T* src = t.ptr() + ((c * e.d + z + o.d) * e.h + y + o.h) * e.w + o.w;
        std::copy(src, src + target.w, out.ptr() + ((c * target.d + z) * target.h + y) * target.w);
      }
  return out;
}

// Downsampled grid rounded up to the network's divisibility.
inline Extent3 working_extent(const Extent3& full, int factor) {
  const auto f = static_cast<std::size_t>(factor);
  const std::size_t m = std::size_t{1} << NetConfig::kLevels;
  auto up = [&](std::size_t n) { return (n / f + m - 1) / m * m; };
  if (full.d % f || full.h % f || full.w % f)
    throw DimensionError("grid " + extent_str(full) + " is not divisible by " + std::to_string(factor));
  return {up(full.d), up(full.h), up(full.w)};
}

// Network inputs: downsample, intensity cutoff with noise, centred zero-pad.
// One seeded noise stream per series, consumed frame by frame.
inline std::vector<Tensor<float>> working_frames(const FrameSeries& s, const TrainConfig& cfg, std::uint64_t seed) {
  s.validate();
  const auto we = working_extent(s.extent, cfg.downsample_factor);
  std::mt19937_64 rng(seed);
  std::vector<Tensor<float>> out;
  for (const auto& f : s.frames)
    out.push_back(pad_centred(preprocess(downsample(f, cfg.downsample_factor).cast<float>(), cfg, rng), we));
  return out;
}

// ---------------------------------------------------------------------------
// Windows

// All consecutive windows of window_length over the correctable frames, each
// paired with the reference. The reference may appear as a moving slot.
template <class T>
std::vector<FramePairSequence<T>> make_windows(const std::vector<Tensor<T>>& frames, const TrainConfig& cfg) {
  cfg.validate();
  const auto r = correctable_frames(frames.size(), cfg);
  const auto n = static_cast<std::size_t>(cfg.window_length);
  if (r.count() < n)
    throw ConfigError(std::to_string(r.count()) + " correctable frames cannot fill a window of " + std::to_string(n));
  std::vector<FramePairSequence<T>> out;
  for (std::size_t s = r.first; s + n <= r.last + 1; ++s) {
    FramePairSequence<T> w;
    w.reference = frames[static_cast<std::size_t>(cfg.reference_index)];
    for (std::size_t j = s; j < s + n; ++j) {
      w.moving.push_back(frames[j]);
      w.frame_indices.push_back(j);
    }
    out.push_back(std::move(w));
  }
  return out;
}

// Consecutive non-overlapping chunks of at most window_length covering the
// correctable frames; used when every frame needs exactly one field.
template <class T>
std::vector<FramePairSequence<T>> make_chunks(const std::vector<Tensor<T>>& frames, const TrainConfig& cfg) {
  cfg.validate();
  const auto r = correctable_frames(frames.size(), cfg);
  const auto n = static_cast<std::size_t>(cfg.window_length);
  std::vector<FramePairSequence<T>> out;
  for (std::size_t s = r.first; s <= r.last; s += n) {
    FramePairSequence<T> w;
    w.reference = frames[static_cast<std::size_t>(cfg.reference_index)];
    for (std::size_t j = s; j <= std::min(r.last, s + n - 1); ++j) {
      w.moving.push_back(frames[j]);
      w.frame_indices.push_back(j);
    }
    out.push_back(std::move(w));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimiser

template <class T>
struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8;
  std::uint64_t step = 0;
  std::map<std::string, Tensor<T>> m, v;

  explicit AdamState(const NetParams<T>& p) {
    for (const auto& [k, t] : p.tensors) {
      m.emplace(k, Tensor<T>(t.shape()));
      v.emplace(k, Tensor<T>(t.shape()));
    }
  }
};

template <class T>
void adam_update(NetParams<T>& p, const Gradients<T>& g, AdamState<T>& s, double lr) {
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (auto& [k, t] : p.tensors) {
    auto it = g.find(k);
    if (it == g.end()) continue;
    auto& m = s.m.at(k);
    auto& v = s.v.at(k);
    if (m.shape() != t.shape() || it->second.shape() != t.shape())
      throw DimensionError("adam: moment or gradient shape differs for " + k);
    const T* gp = it->second.ptr();
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double gi = gp[i];
      const double mi = s.beta1 * m[i] + (1.0 - s.beta1) * gi;
      const double vi = s.beta2 * v[i] + (1.0 - s.beta2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      t[i] = static_cast<T>(t[i] - lr * (mi / c1) / (std::sqrt(vi / c2) + s.epsilon));
    }
  }
}

// ---------------------------------------------------------------------------
// Training

template <class T>
struct WindowLoss {
  LossTerms<T> terms;
  std::vector<Var<T>> fields;
};

// Records network plus loss for one window; the pairwise variant runs each
// moving frame through its own forward pass.
template <class T>
WindowLoss<T> record_window(Tape<T>& tape, const NetConfig& net, const ParamVars<T>& pv,
                            const FramePairSequence<T>& w, const LossConfig& lc) {
  const auto ref = tape.constant(w.reference);
  std::vector<Var<T>> moving;
  for (const auto& m : w.moving) moving.push_back(tape.constant(m));
  WindowLoss<T> out;
  if (net.variant == NetVariant::Pairwise) {
    for (const auto& m : moving) out.fields.push_back(forward(net, pv, {m}, ref).front());
  } else {
    out.fields = forward(net, pv, moving, ref);
  }
  std::vector<Var<T>> warped;
  for (std::size_t j = 0; j < moving.size(); ++j) warped.push_back(ops::warp(moving[j], out.fields[j]));
  out.terms = total_loss(ref, warped, out.fields, lc);
  return out;
}

struct EpochLoss {
  int epoch = 0;
  double mean_loss = 0.0, similarity = 0.0, smoothness = 0.0;
};

template <class T>
struct TrainResult {
  NetParams<T> params;
  std::vector<EpochLoss> trace;
  std::uint64_t steps = 0;
};

inline std::string nan_diagnostic(std::uint64_t step, std::size_t window, const std::vector<double>& sim,
                                  const std::vector<double>& smooth) {
  std::ostringstream os;
  os << "non-finite loss at step " << step << " (window " << window << ")";
  for (std::size_t j = 0; j < sim.size(); ++j) {
    if (!std::isfinite(sim[j])) os << "; similarity term of slot " << j << " is " << sim[j];
    if (!std::isfinite(smooth[j])) os << "; smoothness term of slot " << j << " is " << smooth[j];
  }
  return os.str();
}

// Adam at batch size 1. An epoch is one pass over the windows of every series,
// visited in a seeded shuffled order.
template <class T>
TrainResult<T> train(NetParams<T> params, const std::vector<FrameSeries>& series, const TrainConfig& cfg) {
  cfg.validate();
  if (params.config.variant != cfg.variant)
    throw ConfigError(std::string("model variant ") + variant_name(params.config.variant) + " but config asks for " +
                      variant_name(cfg.variant));
  std::vector<FramePairSequence<T>> windows;
  for (std::size_t s = 0; s < series.size(); ++s) {
    std::vector<Tensor<T>> frames;
    for (auto& f : working_frames(series[s], cfg, cfg.seed + 1 + s)) frames.push_back(f.template cast<T>());
    for (auto& w : make_windows(frames, cfg)) windows.push_back(std::move(w));
  }
  if (windows.empty()) throw ConfigError("no training windows");
  params.config.validate_extent(spatial_extent(windows.front().reference));

  const auto lc = cfg.loss();
  AdamState<T> adam(params);
  TrainResult<T> r;
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(windows.size());
  for (int e = 0; e < cfg.epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    EpochLoss el{e, 0.0, 0.0, 0.0};
    for (std::size_t wi : order) {
      Tape<T> tape;
      const auto pv = register_params(tape, params);
      const auto wl = record_window(tape, params.config, pv, windows[wi], lc);
      const double loss = wl.terms.total.value().item();
      std::vector<double> sim, smooth;
      for (std::size_t j = 0; j < wl.fields.size(); ++j) {
        sim.push_back(wl.terms.similarity[j].value().item());
        smooth.push_back(wl.terms.smoothness[j].value().item());
      }
      if (!std::isfinite(loss)) throw TrainingError(nan_diagnostic(r.steps, wi, sim, smooth));
      const auto grads = tape.backward(wl.terms.total);
      for (const auto& [k, g] : grads)
        if (!g.all_finite()) throw TrainingError("non-finite gradient for " + k + " at step " + std::to_string(r.steps));
      adam_update(params, grads, adam, cfg.learning_rate);
      ++r.steps;
      el.mean_loss += loss;
      for (std::size_t j = 0; j < sim.size(); ++j) {
        el.similarity += -sim[j];
        el.smoothness += lc.lambda * smooth[j];
      }
    }
    const double n = static_cast<double>(windows.size());
    el.mean_loss /= n;
    el.similarity /= n;
    el.smoothness /= n;
    r.trace.push_back(el);
  }
  r.params = std::move(params);
  return r;
}

// ---------------------------------------------------------------------------
// Application

struct Correction {
  FrameSeries corrected;
  std::vector<Tensor<double>> fields;  // full-resolution [3,D,H,W] per frame, in full-grid voxels
};

// Estimates at the working grid, crops the padding, resamples up by the
// downsample factor and warps the original frames. Frames outside the
// correctable range and the reference frame pass through untouched.
template <class T>
Correction apply(const NetParams<T>& params, const FrameSeries& series, const TrainConfig& cfg) {
  cfg.validate();
  series.validate();
  const auto frames_w = working_frames(series, cfg, cfg.seed + 1);
  const auto we = spatial_extent(frames_w.front());
  params.config.validate_extent(we);
  if (params.config.extent != we)
    throw DimensionError("model was built for working grid " + extent_str(params.config.extent) + ", series pads to " +
                         extent_str(we));
  const auto f = static_cast<std::size_t>(cfg.downsample_factor);
  const Extent3 de{series.extent.d / f, series.extent.h / f, series.extent.w / f};

  std::vector<Tensor<T>> frames;
  for (const auto& fw : frames_w) frames.push_back(fw.template cast<T>());
  Correction out;
  out.corrected = series;
  out.fields.assign(series.size(), Tensor<double>(series.extent.shape(3)));
  const auto ref = static_cast<std::size_t>(cfg.reference_index);
  for (const auto& chunk : make_chunks(frames, cfg)) {
    const auto est = estimate_displacements(params, chunk);
    for (std::size_t j = 0; j < est.size(); ++j) {
      const std::size_t k = chunk.frame_indices[j];
      if (k == ref) continue;
      auto field = crop_centred(est[j], de).template cast<double>();
      if (f > 1) field = resample_field(field, cfg.downsample_factor, ResampleDirection::Up);
      if (spatial_extent(field) != series.extent)
        throw DimensionError("upsampled field " + shape_str(field.shape()) + " does not match series grid " +
                             extent_str(series.extent));
      out.corrected.frames[k] = warp(series.frames[k], field);
      out.fields[k] = std::move(field);
    }
  }
  return out;
}

}  // namespace moco
