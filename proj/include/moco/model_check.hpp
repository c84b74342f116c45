#pragma once

// End-to-end gradient check of network + warp + loss against central
// differences, in double precision.

#include <chrono>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "moco/gradcheck.hpp"
#include "moco/net.hpp"
#include "moco/warp.hpp"

namespace moco {

// Smooth test volume: sin/cos ridges plus a ramp along w; `phase` shifts the
// ridges so consecutive phases look like moving frames.
inline Tensor<double> test_pattern(const Extent3& e, double phase) {
  Tensor<double> t(e.shape());
  for (std::size_t z = 0; z < e.d; ++z)
    for (std::size_t y = 0; y < e.h; ++y)
      for (std::size_t x = 0; x < e.w; ++x)
        t.at(z, y, x) = std::sin(0.4 * double(z) + phase) * std::cos(0.3 * double(y) - phase) + 0.05 * double(x);
  return t;
}

// The instance is rescaled away from the small-signal regime of a fresh
// initialisation: flow-head weights are uniform(+-flow_scale) so fields move
// samples across voxels, and the other kernels are multiplied by kernel_gain so
// gradients through the deep layers stay well above the finite-difference
// roundoff floor.
struct ModelCheckConfig {
  NetVariant variant = NetVariant::B_ConvLSTM;
  Extent3 extent{16, 16, 32};
  std::size_t frames = 2;
  double flow_scale = 0.3;
  double kernel_gain = 1.5;
  int ncc_window = 5;
  double lambda = 1.0;
  double h = 1e-4;
  std::size_t samples = 200;
  std::uint64_t seed = 21;         // parameters
  std::uint64_t sample_seed = 5;   // which coordinates are probed
};

struct ModelCheckReport {
  GradCheckResult result;
  std::size_t parameters = 0;
  double seconds = 0.0;
};

inline NetParams<double> model_check_params(const ModelCheckConfig& c) {
  NetConfig nc;
  nc.variant = c.variant;
  nc.extent = c.extent;
  auto p = init_params<double>(nc, c.seed);
  std::mt19937_64 rng(c.seed + 1);
  std::uniform_real_distribution<double> u(-c.flow_scale, c.flow_scale);
  for (auto& v : p.tensors.at("flow.w").data()) v = u(rng);
  for (auto& [k, t] : p.tensors)
    if (t.rank() == 5 && k != "flow.w")
      for (auto& v : t.data()) v *= c.kernel_gain;
  return p;
}

inline ModelCheckReport model_grad_check(const ModelCheckConfig& c) {
  const auto t0 = std::chrono::steady_clock::now();
  if (c.frames == 0) throw ConfigError("gradient check needs at least one moving frame");
  if (c.variant == NetVariant::Pairwise && c.frames != 1)
    throw ConfigError("pairwise gradient check takes exactly one moving frame");
  const auto base = model_check_params(c);
  const auto ref = test_pattern(c.extent, 0.0);
  std::vector<Tensor<double>> moving;
  for (std::size_t j = 0; j < c.frames; ++j) moving.push_back(test_pattern(c.extent, 0.4 * double(j + 1)));
  LossConfig lc;
  lc.ncc_window = c.ncc_window;
  lc.lambda = c.lambda;
  lc.validate();

  std::vector<std::string> names;
  std::vector<double> flat;
  for (const auto& [k, t] : base.tensors) {
    names.push_back(k);
    flat.insert(flat.end(), t.data().begin(), t.data().end());
  }

  PiecewiseFunction f = [&](std::span<const double> v, std::span<double> g) {
    auto q = base;
    std::size_t off = 0;
    for (const auto& k : names) {
      auto& t = q.tensors.at(k);
      std::copy(v.begin() + off, v.begin() + off + t.size(), t.ptr());
      off += t.size();
    }
    Tape<double> tape;
    tape.track_branches(true);
    const auto pv = register_params(tape, q);
    const auto r = tape.constant(ref);
    std::vector<Var<double>> mv;
    for (const auto& m : moving) mv.push_back(tape.constant(m));
    const auto fields = forward(q.config, pv, mv, r);
    std::vector<Var<double>> warped;
    for (std::size_t j = 0; j < mv.size(); ++j) warped.push_back(ops::warp(mv[j], fields[j]));
    const auto L = total_loss(r, warped, fields, lc);
    if (!g.empty()) {
      const auto gr = tape.backward(L.total);
      off = 0;
      for (const auto& k : names) {
        const auto& t = gr.at(k);
        std::copy(t.data().begin(), t.data().end(), g.begin() + off);
        off += t.size();
      }
    }
    return Evaluation{L.total.value().item(), tape.branch_signature()};
  };

  ModelCheckReport rep;
  rep.parameters = flat.size();
  rep.result = grad_check(f, std::move(flat), c.h, c.samples, c.sample_seed);
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace moco
