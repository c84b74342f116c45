#pragma once

// Displacement-estimation network: a four-level 3-D U-Net over (moving,
// reference) pairs with optional recurrence across the frame window.
//
// Encoder level l: conv3 + LeakyReLU (kept as skip l), then 2x max-pool.
// Decoder level l: conv3 + LeakyReLU, nearest 2x upsampling, concat with skip.
// Head: three full-resolution conv3 + LeakyReLU, then a linear 3-channel conv3.

#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "moco/convlstm.hpp"
#include "moco/warp.hpp"

namespace moco {

enum class NetVariant { Pairwise, MultiFrame, B_LSTM, S_ConvLSTM, B_ConvLSTM };

inline const char* variant_name(NetVariant v) {
  switch (v) {
    case NetVariant::Pairwise: return "pairwise";
    case NetVariant::MultiFrame: return "multi-frame";
    case NetVariant::B_LSTM: return "b-lstm";
    case NetVariant::S_ConvLSTM: return "s-convlstm";
    case NetVariant::B_ConvLSTM: return "b-convlstm";
  }
  return "?";
}

inline NetVariant parse_variant(const std::string& s) {
  for (auto v : {NetVariant::Pairwise, NetVariant::MultiFrame, NetVariant::B_LSTM, NetVariant::S_ConvLSTM,
                 NetVariant::B_ConvLSTM})
    if (s == variant_name(v)) return v;
  throw ConfigError("unknown network variant '" + s + "'");
}

inline bool is_recurrent(NetVariant v) {
  return v == NetVariant::B_LSTM || v == NetVariant::S_ConvLSTM || v == NetVariant::B_ConvLSTM;
}

// Frames fed per window: 1 for Pairwise, the window length otherwise.
inline std::size_t frames_per_sample(NetVariant v, std::size_t window_length) {
  return v == NetVariant::Pairwise ? 1 : window_length;
}

struct NetConfig {
  NetVariant variant = NetVariant::B_ConvLSTM;
  Extent3 extent{16, 16, 32};  // working grid; sizes the dense bottleneck of B_LSTM
  double slope = 0.2;          // LeakyReLU negative slope
  double flow_init_std = 1e-5;

  static constexpr std::size_t kLevels = 4;
  static constexpr std::size_t kEnc[kLevels] = {16, 32, 32, 32};
  static constexpr std::size_t kDec[kLevels] = {32, 32, 32, 32};
  static constexpr std::size_t kFinal[3] = {32, 16, 16};
  static constexpr std::size_t kBottleneckFilters = 32;

  void validate_extent(const Extent3& e) const {
    const std::size_t m = std::size_t{1} << kLevels;
    if (e.d % m || e.h % m || e.w % m)
      throw DimensionError("network input extents " + extent_str(e) + " must be divisible by " + std::to_string(m));
  }
  Extent3 bottleneck() const {
    const std::size_t m = std::size_t{1} << kLevels;
    return {extent.d / m, extent.h / m, extent.w / m};
  }
};

using Layout = std::vector<std::pair<std::string, Shape>>;

namespace detail {
inline void add_conv(Layout& l, const std::string& name, std::size_t in, std::size_t out) {
  l.push_back({name + ".w", Shape{out, in, 3, 3, 3}});
  l.push_back({name + ".b", Shape{out}});
}
inline void add_lstm(Layout& l, const std::string& prefix, const Shape& w, const Shape& u, std::size_t units) {
  for (auto g : kGateNames) {
    l.push_back({prefix + "W_" + g, w});
    l.push_back({prefix + "U_" + g, u});
    l.push_back({prefix + "b_" + g, Shape{units}});
  }
}
}  // namespace detail

// Names and shapes of every learnable tensor, in a fixed order.
inline Layout net_layout(const NetConfig& cfg) {
  Layout l;
  std::size_t ch = 2;
  for (std::size_t i = 0; i < NetConfig::kLevels; ++i) {
    detail::add_conv(l, "enc" + std::to_string(i), ch, NetConfig::kEnc[i]);
    ch = NetConfig::kEnc[i];
  }
  const std::size_t F = NetConfig::kBottleneckFilters;
  if (cfg.variant == NetVariant::B_ConvLSTM) {
    detail::add_lstm(l, "lstm.", Shape{F, ch, 3, 3, 3}, Shape{F, F, 3, 3, 3}, F);
    ch = F;
  } else if (cfg.variant == NetVariant::B_LSTM) {
    cfg.validate_extent(cfg.extent);
    const std::size_t v = cfg.bottleneck().voxels();
    detail::add_lstm(l, "dlstm.", Shape{v, ch * v}, Shape{v, v}, v);
    detail::add_conv(l, "lstm_proj", 1, F);
    ch = F;
  }
  for (std::size_t i = 0; i < NetConfig::kLevels; ++i) {
    detail::add_conv(l, "dec" + std::to_string(i), ch, NetConfig::kDec[i]);
    ch = NetConfig::kDec[i] + NetConfig::kEnc[NetConfig::kLevels - 1 - i];
  }
  for (std::size_t i = 0; i < 3; ++i) {
    detail::add_conv(l, "final" + std::to_string(i), ch, NetConfig::kFinal[i]);
    ch = NetConfig::kFinal[i];
  }
  if (cfg.variant == NetVariant::S_ConvLSTM) {
    detail::add_conv(l, "pre_lstm", ch, ch);
    detail::add_lstm(l, "lstm.", Shape{F, ch, 3, 3, 3}, Shape{F, F, 3, 3, 3}, F);
    ch = F;
  }
  detail::add_conv(l, "flow", ch, 3);
  return l;
}

inline std::size_t count_params(const Layout& l) {
  std::size_t n = 0;
  for (const auto& [name, s] : l) n += shape_size(s);
  return n;
}

inline std::size_t count_params(const NetConfig& cfg) { return count_params(net_layout(cfg)); }

template <class T>
struct NetParams {
  NetConfig config;
  std::map<std::string, Tensor<T>> tensors;

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [k, t] : tensors) n += t.size();
    return n;
  }

  // Parameters must match the variant's layout exactly.
  void validate() const {
    const auto layout = net_layout(config);
    if (layout.size() != tensors.size())
      throw ConfigError(std::string("parameter set does not match variant ") + variant_name(config.variant));
    for (const auto& [name, shape] : layout) {
      auto it = tensors.find(name);
      if (it == tensors.end())
        throw ConfigError(std::string("variant ") + variant_name(config.variant) + " needs parameter " + name);
      if (it->second.shape() != shape)
        throw ConfigError("parameter " + name + " has shape " + shape_str(it->second.shape()) + ", expected " +
                          shape_str(shape));
    }
  }

  template <class U>
  NetParams<U> cast() const {
    NetParams<U> p;
    p.config = config;
    for (const auto& [k, t] : tensors) p.tensors[k] = t.template cast<U>();
    return p;
  }
};

// Glorot-uniform convolutions, zero biases, LSTM gates per init_convlstm, and a
// small-normal flow head with zero bias.
template <class T>
NetParams<T> init_params(const NetConfig& cfg, std::uint64_t seed) {
  NetParams<T> p;
  p.config = cfg;
  std::mt19937_64 rng(seed);
  for (const auto& [name, shape] : net_layout(cfg)) {
    Tensor<T> t(shape);
    const bool bias = shape.size() == 1;
    const bool lstm = name.rfind("lstm.", 0) == 0 || name.rfind("dlstm.", 0) == 0;
    if (lstm) {
      const bool forget = name.back() == 'f' && name[name.size() - 3] == 'b';
      if (bias) {
        t.fill(forget ? T{1} : T{0});
      } else {
        const std::size_t fan_in = shape_size(shape) / shape[0];
        const double lim = std::sqrt(1.0 / static_cast<double>(fan_in));
        std::uniform_real_distribution<double> u(-lim, lim);
        for (auto& v : t.data()) v = static_cast<T>(u(rng));
      }
    } else if (!bias) {
      const std::size_t k3 = shape_size(shape) / (shape[0] * shape[1]);
      if (name == "flow.w") {
        std::normal_distribution<double> nd(0.0, cfg.flow_init_std);
        for (auto& v : t.data()) v = static_cast<T>(nd(rng));
      } else {
        const double lim = std::sqrt(6.0 / static_cast<double>((shape[0] + shape[1]) * k3));
        std::uniform_real_distribution<double> u(-lim, lim);
        for (auto& v : t.data()) v = static_cast<T>(u(rng));
      }
    }
    p.tensors.emplace(name, std::move(t));
  }
  return p;
}

template <class T>
void zero_flow_head(NetParams<T>& p) {
  p.tensors.at("flow.w").fill(T{0});
  p.tensors.at("flow.b").fill(T{0});
}

template <class T>
using ParamVars = std::map<std::string, Var<T>>;

template <class T>
ParamVars<T> register_params(Tape<T>& tape, const NetParams<T>& p) {
  p.validate();
  ParamVars<T> v;
  for (const auto& [name, t] : p.tensors) v.emplace(name, tape.param(name, t));
  return v;
}

namespace detail {

template <class T>
Var<T> conv_act(const ParamVars<T>& pv, const std::string& name, const Var<T>& x, double slope) {
  return ops::leaky_relu(ops::conv3d(x, pv.at(name + ".w"), std::optional<Var<T>>(pv.at(name + ".b"))), slope);
}

template <class T>
ConvLstmVars<T> lstm_vars(const ParamVars<T>& pv, const std::string& prefix) {
  ConvLstmVars<T> v;
  for (std::size_t g = 0; g < 4; ++g) {
    v.W[g] = pv.at(prefix + "W_" + kGateNames[g]);
    v.U[g] = pv.at(prefix + "U_" + kGateNames[g]);
    v.b[g] = pv.at(prefix + "b_" + kGateNames[g]);
  }
  return v;
}

}  // namespace detail

// Records the network on `tape` for one window. Each moving frame and the
// reference are [D,H,W]; returns one [3,D,H,W] field per moving frame.
template <class T>
std::vector<Var<T>> forward(const NetConfig& cfg, const ParamVars<T>& pv, const std::vector<Var<T>>& moving,
                            const Var<T>& reference) {
  if (moving.empty()) throw DimensionError("forward: empty frame window");
  const auto e = spatial_extent(reference.value());
  if (reference.value().rank() != 3) throw DimensionError("forward: reference must be [D,H,W]");
  cfg.validate_extent(e);
  for (const auto& m : moving)
    if (m.shape() != reference.shape())
      throw DimensionError("forward: moving frame " + shape_str(m.shape()) + " vs reference " +
                           shape_str(reference.shape()));
  if (cfg.variant == NetVariant::Pairwise && moving.size() != 1)
    throw ConfigError("pairwise variant takes exactly one moving frame per sample");
  if (cfg.variant == NetVariant::B_LSTM && !(e == cfg.extent))
    throw DimensionError("b-lstm network built for " + extent_str(cfg.extent) + " but input is " + extent_str(e));

  auto& tape = reference.tape();
  const Shape one_ch = e.shape(1);
  const auto ref4 = ops::reshape(reference, one_ch);
  const std::size_t L = NetConfig::kLevels;

  struct Encoded {
    std::vector<Var<T>> skips;
    Var<T> bottom;
  };
  std::vector<Encoded> enc;
  for (const auto& m : moving) {
    Encoded en;
    Var<T> x = ops::concat(ops::reshape(m, one_ch), ref4);
    for (std::size_t l = 0; l < L; ++l) {
      x = detail::conv_act(pv, "enc" + std::to_string(l), x, cfg.slope);
      en.skips.push_back(x);
      x = ops::maxpool2(x);
    }
    en.bottom = x;
    enc.push_back(std::move(en));
  }

  if (cfg.variant == NetVariant::B_ConvLSTM) {
    const auto lv = detail::lstm_vars(pv, "lstm.");
    std::vector<Var<T>> xs;
    for (const auto& en : enc) xs.push_back(en.bottom);
    const auto hs = convlstm_unroll(lv, xs, zero_state(tape, spatial_extent(xs[0].value()).shape(
                                                                  NetConfig::kBottleneckFilters)));
    for (std::size_t j = 0; j < enc.size(); ++j) enc[j].bottom = hs[j];
  } else if (cfg.variant == NetVariant::B_LSTM) {
    const auto lv = detail::lstm_vars(pv, "dlstm.");
    const auto be = spatial_extent(enc[0].bottom.value());
    const std::size_t units = be.voxels();
    auto state = zero_state(tape, Shape{units});
    for (auto& en : enc) {
      state = dense_lstm_step(lv, ops::reshape(en.bottom, Shape{en.bottom.value().size()}), state);
      en.bottom = detail::conv_act(pv, "lstm_proj", ops::reshape(state.h, be.shape(1)), cfg.slope);
    }
  }

  std::vector<Var<T>> feats;
  for (auto& en : enc) {
    Var<T> x = en.bottom;
    for (std::size_t l = 0; l < L; ++l) {
      x = detail::conv_act(pv, "dec" + std::to_string(l), x, cfg.slope);
      x = ops::concat(ops::upsample2(x), en.skips[L - 1 - l]);
    }
    for (std::size_t i = 0; i < 3; ++i) x = detail::conv_act(pv, "final" + std::to_string(i), x, cfg.slope);
    feats.push_back(x);
  }

  if (cfg.variant == NetVariant::S_ConvLSTM) {
    const auto lv = detail::lstm_vars(pv, "lstm.");
    std::vector<Var<T>> xs;
    for (const auto& f : feats) xs.push_back(detail::conv_act(pv, "pre_lstm", f, cfg.slope));
    feats = convlstm_unroll(lv, xs, zero_state(tape, e.shape(NetConfig::kBottleneckFilters)));
  }

  std::vector<Var<T>> fields;
  for (const auto& f : feats)
    fields.push_back(ops::conv3d(f, pv.at("flow.w"), std::optional<Var<T>>(pv.at("flow.b"))));
  return fields;
}

// Input for one window: the fixed reference and N moving frames.
template <class T>
struct FramePairSequence {
  Tensor<T> reference;
  std::vector<Tensor<T>> moving;
  std::vector<std::size_t> frame_indices;  // source frame of each moving slot
};

template <class T>
std::vector<Tensor<T>> estimate_displacements(const NetParams<T>& params, const FramePairSequence<T>& input) {
  Tape<T> tape;
  const auto pv = register_params(tape, params);
  const auto ref = tape.constant(input.reference);
  std::vector<Tensor<T>> out;
  auto run = [&](const std::vector<Var<T>>& moving) {
    for (const auto& f : forward(params.config, pv, moving, ref)) out.push_back(f.value());
  };
  if (params.config.variant == NetVariant::Pairwise) {
    for (const auto& m : input.moving) run({tape.constant(m)});
  } else {
    std::vector<Var<T>> moving;
    for (const auto& m : input.moving) moving.push_back(tape.constant(m));
    run(moving);
  }
  return out;
}

}  // namespace moco
