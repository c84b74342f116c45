#pragma once

// Convolutional LSTM cell (gates are 3-D convolutions) and its fully connected
// counterpart. Gate order everywhere is input, forget, candidate, output.

#include <array>
#include <cmath>
#include <random>
#include <string>

#include "moco/ops.hpp"

namespace moco {

inline constexpr std::array<const char*, 4> kGateNames{"i", "f", "c", "o"};
enum Gate : std::size_t { kInput = 0, kForget = 1, kCandidate = 2, kOutput = 3 };

template <class T>
struct ConvLstmParams {
  std::array<Tensor<T>, 4> W;  // input-to-state  [F, C, k, k, k]
  std::array<Tensor<T>, 4> U;  // state-to-state  [F, F, k, k, k]
  std::array<Tensor<T>, 4> b;  // [F]

  std::size_t filters() const { return W[0].dim(0); }
  std::size_t in_channels() const { return W[0].dim(1); }

  void validate() const {
    const std::size_t F = filters(), C = in_channels(), k = W[0].dim(2);
    for (std::size_t g = 0; g < 4; ++g) {
      if (W[g].shape() != Shape{F, C, k, k, k} || U[g].shape() != Shape{F, F, k, k, k} || b[g].shape() != Shape{F})
        throw DimensionError("ConvLSTM gate tensors have inconsistent shapes");
      if (!W[g].all_finite() || !U[g].all_finite() || !b[g].all_finite())
        throw NumericError("ConvLSTM parameters must be finite");
    }
  }
};

template <class T>
struct ConvLstmState {
  Tensor<T> h, c;
};

// Uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) kernels, zero biases except the
// forget gate.
template <class T>
ConvLstmParams<T> init_convlstm(std::size_t in_channels, std::size_t filters, std::size_t kernel,
                                std::mt19937_64& rng, double forget_bias = 1.0) {
  ConvLstmParams<T> p;
  const auto k3 = kernel * kernel * kernel;
  std::uniform_real_distribution<double> uw(-std::sqrt(1.0 / (in_channels * k3)), std::sqrt(1.0 / (in_channels * k3)));
  std::uniform_real_distribution<double> uu(-std::sqrt(1.0 / (filters * k3)), std::sqrt(1.0 / (filters * k3)));
  for (std::size_t g = 0; g < 4; ++g) {
    p.W[g] = Tensor<T>(Shape{filters, in_channels, kernel, kernel, kernel});
    for (auto& v : p.W[g].data()) v = static_cast<T>(uw(rng));
    p.U[g] = Tensor<T>(Shape{filters, filters, kernel, kernel, kernel});
    for (auto& v : p.U[g].data()) v = static_cast<T>(uu(rng));
    p.b[g] = Tensor<T>(Shape{filters}, g == kForget ? static_cast<T>(forget_bias) : T{0});
  }
  return p;
}

// Tape-side handles of the gate parameters.
template <class T>
struct ConvLstmVars {
  std::array<Var<T>, 4> W, U, b;
};

template <class T>
struct ConvLstmStateVars {
  Var<T> h, c;
};

template <class T>
ConvLstmVars<T> register_convlstm(Tape<T>& tape, const ConvLstmParams<T>& p, const std::string& prefix) {
  ConvLstmVars<T> v;
  for (std::size_t g = 0; g < 4; ++g) {
    v.W[g] = tape.param(prefix + "W_" + kGateNames[g], p.W[g]);
    v.U[g] = tape.param(prefix + "U_" + kGateNames[g], p.U[g]);
    v.b[g] = tape.param(prefix + "b_" + kGateNames[g], p.b[g]);
  }
  return v;
}

// One step: gates from zero-padded convolutions of x_t and h_{t-1}, then
//   c_t = i * c~ + f * c_{t-1},  h_t = o * tanh(c_t).
template <class T>
ConvLstmStateVars<T> convlstm_step(const ConvLstmVars<T>& p, const Var<T>& x, const ConvLstmStateVars<T>& prev) {
  const auto& w0 = p.W[0].value();
  const std::size_t F = w0.dim(0), pad = w0.dim(2) / 2;
  if (x.value().rank() != 4 || x.value().dim(0) != w0.dim(1))
    throw DimensionError("convlstm_step: input " + shape_str(x.shape()) + " does not match kernels " +
                         shape_str(w0.shape()));
  const Shape state_shape = spatial_extent(x.value()).shape(F);
  if (prev.h.shape() != state_shape || prev.c.shape() != state_shape)
    throw DimensionError("convlstm_step: state shape " + shape_str(prev.h.shape()) + " expected " +
                         shape_str(state_shape));
  std::array<Var<T>, 4> pre;
  for (std::size_t g = 0; g < 4; ++g)
    pre[g] = ops::add(ops::conv3d(x, p.W[g], std::optional<Var<T>>(p.b[g]), 1, static_cast<int>(pad)),
                      ops::conv3d(prev.h, p.U[g], std::optional<Var<T>>{}, 1, static_cast<int>(pad)));
  const auto i = ops::sigmoid(pre[kInput]);
  const auto f = ops::sigmoid(pre[kForget]);
  const auto cand = ops::tanh(pre[kCandidate]);
  const auto o = ops::sigmoid(pre[kOutput]);
  const auto c = ops::add(ops::mul(i, cand), ops::mul(f, prev.c));
  const auto h = ops::mul(o, ops::tanh(c));
  return {h, c};
}

template <class T>
std::vector<Var<T>> convlstm_unroll(const ConvLstmVars<T>& p, const std::vector<Var<T>>& xs,
                                    ConvLstmStateVars<T> state) {
  if (xs.empty()) throw DimensionError("convlstm_unroll: empty sequence");
  std::vector<Var<T>> hs;
  for (const auto& x : xs) {
    if (x.shape() != xs.front().shape()) throw DimensionError("convlstm_unroll: non-uniform input shapes");
    state = convlstm_step(p, x, state);
    hs.push_back(state.h);
  }
  return hs;
}

template <class T>
ConvLstmStateVars<T> zero_state(Tape<T>& tape, const Shape& shape) {
  return {tape.constant(Tensor<T>(shape)), tape.constant(Tensor<T>(shape))};
}

// Plain-tensor conveniences (forward only).
template <class T>
ConvLstmState<T> convlstm_step(const ConvLstmParams<T>& p, const Tensor<T>& x, const ConvLstmState<T>& prev) {
  p.validate();
  Tape<T> tape;
  const auto vars = register_convlstm(tape, p, "");
  const auto s = convlstm_step(vars, tape.constant(x), {tape.constant(prev.h), tape.constant(prev.c)});
  return {s.h.value(), s.c.value()};
}

template <class T>
std::vector<Tensor<T>> convlstm_unroll(const ConvLstmParams<T>& p, const std::vector<Tensor<T>>& xs,
                                       const ConvLstmState<T>& init) {
  p.validate();
  Tape<T> tape;
  const auto vars = register_convlstm(tape, p, "");
  std::vector<Var<T>> in;
  for (const auto& x : xs) in.push_back(tape.constant(x));
  const auto hs = convlstm_unroll(vars, in, {tape.constant(init.h), tape.constant(init.c)});
  std::vector<Tensor<T>> out;
  for (const auto& h : hs) out.push_back(h.value());
  return out;
}

// ---------------------------------------------------------------------------
// Fully connected LSTM over a flattened feature vector.

template <class T>
struct DenseLstmParams {
  std::array<Tensor<T>, 4> W;  // [units, inputs]
  std::array<Tensor<T>, 4> U;  // [units, units]
  std::array<Tensor<T>, 4> b;  // [units]

  std::size_t units() const { return W[0].dim(0); }
  std::size_t inputs() const { return W[0].dim(1); }

  void validate() const {
    const std::size_t n = units(), m = inputs();
    for (std::size_t g = 0; g < 4; ++g)
      if (W[g].shape() != Shape{n, m} || U[g].shape() != Shape{n, n} || b[g].shape() != Shape{n})
        throw DimensionError("dense LSTM gate tensors have inconsistent shapes");
  }
};

template <class T>
struct DenseLstmState {
  Tensor<T> h, c;  // [units]
};

template <class T>
DenseLstmParams<T> init_dense_lstm(std::size_t inputs, std::size_t units, std::mt19937_64& rng,
                                   double forget_bias = 1.0) {
  DenseLstmParams<T> p;
  std::uniform_real_distribution<double> uw(-std::sqrt(1.0 / inputs), std::sqrt(1.0 / inputs));
  std::uniform_real_distribution<double> uu(-std::sqrt(1.0 / units), std::sqrt(1.0 / units));
  for (std::size_t g = 0; g < 4; ++g) {
    p.W[g] = Tensor<T>(Shape{units, inputs});
    for (auto& v : p.W[g].data()) v = static_cast<T>(uw(rng));
    p.U[g] = Tensor<T>(Shape{units, units});
    for (auto& v : p.U[g].data()) v = static_cast<T>(uu(rng));
    p.b[g] = Tensor<T>(Shape{units}, g == kForget ? static_cast<T>(forget_bias) : T{0});
  }
  return p;
}

template <class T>
using DenseLstmVars = ConvLstmVars<T>;

template <class T>
DenseLstmVars<T> register_dense_lstm(Tape<T>& tape, const DenseLstmParams<T>& p, const std::string& prefix) {
  DenseLstmVars<T> v;
  for (std::size_t g = 0; g < 4; ++g) {
    v.W[g] = tape.param(prefix + "W_" + kGateNames[g], p.W[g]);
    v.U[g] = tape.param(prefix + "U_" + kGateNames[g], p.U[g]);
    v.b[g] = tape.param(prefix + "b_" + kGateNames[g], p.b[g]);
  }
  return v;
}

template <class T>
ConvLstmStateVars<T> dense_lstm_step(const DenseLstmVars<T>& p, const Var<T>& x, const ConvLstmStateVars<T>& prev) {
  const std::size_t n = p.W[0].value().dim(0);
  if (x.value().rank() != 1 || x.value().dim(0) != p.W[0].value().dim(1))
    throw DimensionError("dense_lstm_step: input " + shape_str(x.shape()) + " does not match weights " +
                         shape_str(p.W[0].shape()));
  if (prev.h.shape() != Shape{n} || prev.c.shape() != Shape{n})
    throw DimensionError("dense_lstm_step: state must have " + std::to_string(n) + " units");
  std::array<Var<T>, 4> pre;
  for (std::size_t g = 0; g < 4; ++g)
    pre[g] = ops::add(ops::matvec(p.W[g], x, std::optional<Var<T>>(p.b[g])), ops::matvec(p.U[g], prev.h));
  const auto i = ops::sigmoid(pre[kInput]);
  const auto f = ops::sigmoid(pre[kForget]);
  const auto cand = ops::tanh(pre[kCandidate]);
  const auto o = ops::sigmoid(pre[kOutput]);
  const auto c = ops::add(ops::mul(i, cand), ops::mul(f, prev.c));
  return {ops::mul(o, ops::tanh(c)), c};
}

template <class T>
DenseLstmState<T> dense_lstm_step(const DenseLstmParams<T>& p, const Tensor<T>& x, const DenseLstmState<T>& prev) {
  p.validate();
  Tape<T> tape;
  const auto vars = register_dense_lstm(tape, p, "");
  const auto s = dense_lstm_step(vars, tape.constant(x), {tape.constant(prev.h), tape.constant(prev.c)});
  return {s.h.value(), s.c.value()};
}

}  // namespace moco
