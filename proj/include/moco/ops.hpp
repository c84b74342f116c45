#pragma once

// Differentiable primitives recorded on a Tape.

#include <cmath>
#include <optional>

#include "moco/kernels.hpp"
#include "moco/tape.hpp"

namespace moco {

enum class Activation { Sigmoid, Tanh, LeakyRelu };

template <class T>
T sigmoid(T x) {
  return T{1} / (T{1} + std::exp(-x));
}

// Elementwise activation on a plain tensor; `slope` applies to LeakyRelu only.
template <class T>
Tensor<T> activate(const Tensor<T>& x, Activation kind, double slope = 0.2) {
  Tensor<T> y(x.shape());
  const T s = static_cast<T>(slope);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T v = x[i];
    switch (kind) {
      case Activation::Sigmoid: y[i] = sigmoid(v); break;
      case Activation::Tanh: y[i] = std::tanh(v); break;
      case Activation::LeakyRelu: y[i] = v > T{0} ? v : s * v; break;
    }
  }
  return y;
}

namespace ops {

namespace detail {
template <class T>
Tape<T>& same_tape(const Var<T>& a, const Var<T>& b) {
  if (&a.tape() != &b.tape()) throw InternalError("operands recorded on different tapes");
  return a.tape();
}
}  // namespace detail

template <class T>
Var<T> conv3d(const Var<T>& x, const Var<T>& w, const std::optional<Var<T>>& b, int stride = 1, int padding = 1) {
  auto& tape = detail::same_tape(x, w);
  std::vector<std::size_t> parents{x.id(), w.id()};
  const bool has_bias = b.has_value();
  if (has_bias) parents.push_back(b->id());
  return tape.record(
      "conv3d", parents,
      [=](const auto& in) { return kernels::conv3d(*in[0], *in[1], has_bias ? in[2] : nullptr, stride, padding); },
      [=](const auto& in, const auto&, const Tensor<T>& g, auto& sink) {
        auto r = kernels::conv3d_backward(*in[0], *in[1], g, stride, padding, sink.wants(0));
        if (sink.wants(0)) sink.add(0, r.dx);
        sink.add(1, r.dw);
        if (has_bias) sink.add(2, r.db);
      });
}

template <class T>
Var<T> conv3d_transpose(const Var<T>& x, const Var<T>& w, const std::optional<Var<T>>& b, int stride = 2) {
  auto& tape = detail::same_tape(x, w);
  std::vector<std::size_t> parents{x.id(), w.id()};
  const bool has_bias = b.has_value();
  if (has_bias) parents.push_back(b->id());
  return tape.record(
      "conv3d_transpose", parents,
      [=](const auto& in) { return kernels::conv3d_transpose(*in[0], *in[1], has_bias ? in[2] : nullptr, stride); },
      [=](const auto& in, const auto&, const Tensor<T>& g, auto& sink) {
        auto r = kernels::conv3d_transpose_backward(*in[0], *in[1], g, stride, sink.wants(0));
        if (sink.wants(0)) sink.add(0, r.dx);
        sink.add(1, r.dw);
        if (has_bias) sink.add(2, r.db);
      });
}

template <class T>
Var<T> activation(const Var<T>& x, Activation kind, double slope = 0.2) {
  const char* name = kind == Activation::Sigmoid ? "sigmoid" : kind == Activation::Tanh ? "tanh" : "leaky_relu";
  return x.tape().record(
      name, {x.id()}, [=](const auto& in) { return activate(*in[0], kind, slope); },
      [=](const auto& in, const Tensor<T>& out, const Tensor<T>& g, auto& sink) {
        Tensor<T> d(g.shape());
        const T s = static_cast<T>(slope);
        for (std::size_t i = 0; i < g.size(); ++i) {
          const T y = out[i];
          switch (kind) {
            case Activation::Sigmoid: d[i] = g[i] * y * (T{1} - y); break;
            case Activation::Tanh: d[i] = g[i] * (T{1} - y * y); break;
            case Activation::LeakyRelu: d[i] = (*in[0])[i] > T{0} ? g[i] : s * g[i]; break;
          }
        }
        sink.add(0, d);
      });
}

template <class T>
Var<T> sigmoid(const Var<T>& x) {
  return activation(x, Activation::Sigmoid);
}
template <class T>
Var<T> tanh(const Var<T>& x) {
  return activation(x, Activation::Tanh);
}
// FNV-1a over a stream of small integers; used for branch signatures.
struct BranchHash {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  void add(std::uint64_t v) { h = (h ^ v) * 0x100000001b3ULL; }
};

template <class T>
Var<T> leaky_relu(const Var<T>& x, double slope = 0.2) {
  auto y = activation(x, Activation::LeakyRelu, slope);
  if (x.tape().tracking_branches()) {
    BranchHash bh;
    for (std::size_t i = 0; i < x.value().size(); ++i) bh.add(x.value()[i] > T{0});
    x.tape().note_branch(bh.h);
  }
  return y;
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  auto& tape = detail::same_tape(a, b);
  return tape.record(
      "add", {a.id(), b.id()},
      [](const auto& in) {
        Tensor<T> y = *in[0];
        y += *in[1];
        return y;
      },
      [](const auto&, const auto&, const Tensor<T>& g, auto& sink) {
        sink.add(0, g);
        sink.add(1, g);
      });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  auto& tape = detail::same_tape(a, b);
  return tape.record(
      "mul", {a.id(), b.id()},
      [](const auto& in) {
        in[0]->require_same_shape(*in[1], "mul");
        Tensor<T> y(in[0]->shape());
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = (*in[0])[i] * (*in[1])[i];
        return y;
      },
      [](const auto& in, const auto&, const Tensor<T>& g, auto& sink) {
        if (sink.wants(0)) {
          Tensor<T> d(g.shape());
          for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * (*in[1])[i];
          sink.add(0, d);
        }
        if (sink.wants(1)) {
          Tensor<T> d(g.shape());
          for (std::size_t i = 0; i < g.size(); ++i) d[i] = g[i] * (*in[0])[i];
          sink.add(1, d);
        }
      });
}

// y = a * x + b elementwise with scalar constants.
template <class T>
Var<T> affine(const Var<T>& x, double a, double b = 0.0) {
  return x.tape().record(
      "affine", {x.id()},
      [=](const auto& in) {
        Tensor<T> y(in[0]->shape());
        for (std::size_t i = 0; i < y.size(); ++i) y[i] = static_cast<T>(a) * (*in[0])[i] + static_cast<T>(b);
        return y;
      },
      [=](const auto&, const auto&, const Tensor<T>& g, auto& sink) {
        Tensor<T> d(g.shape());
        for (std::size_t i = 0; i < g.size(); ++i) d[i] = static_cast<T>(a) * g[i];
        sink.add(0, d);
      });
}

template <class T>
Var<T> sum(const Var<T>& x) {
  return x.tape().record(
      "sum", {x.id()}, [](const auto& in) { return Tensor<T>::scalar(static_cast<T>(sum64(in[0]->data()))); },
      [](const auto& in, const auto&, const Tensor<T>& g, auto& sink) { sink.add(0, Tensor<T>(in[0]->shape(), g[0])); });
}

template <class T>
Var<T> mean(const Var<T>& x) {
  return affine(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

// Sum of equally-shaped terms.
template <class T>
Var<T> add_n(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw DimensionError("add_n of an empty list");
  Var<T> acc = xs.front();
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return acc;
}

template <class T>
Var<T> reshape(const Var<T>& x, Shape shape) {
  if (shape_size(shape) != x.value().size())
    throw DimensionError("cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  return x.tape().record(
      "reshape", {x.id()}, [shape](const auto& in) { return in[0]->reshaped(shape); },
      [](const auto& in, const auto&, const Tensor<T>& g, auto& sink) { sink.add(0, g.reshaped(in[0]->shape())); });
}

// Channel concatenation of [C_i,D,H,W] tensors with equal spatial extents.
template <class T>
Var<T> concat(const Var<T>& a, const Var<T>& b) {
  auto& tape = detail::same_tape(a, b);
  return tape.record(
      "concat", {a.id(), b.id()},
      [](const auto& in) {
        const auto &x = *in[0], &y = *in[1];
        if (x.rank() != 4 || y.rank() != 4 || spatial_extent(x) != spatial_extent(y))
          throw DimensionError("concat needs [C,D,H,W] inputs with equal extents: " + shape_str(x.shape()) + " vs " +
                               shape_str(y.shape()));
        Tensor<T> out(spatial_extent(x).shape(x.dim(0) + y.dim(0)));
        std::copy(x.data().begin(), x.data().end(), out.ptr());
        std::copy(y.data().begin(), y.data().end(), out.ptr() + x.size());
        return out;
      },
      [](const auto& in, const auto&, const Tensor<T>& g, auto& sink) {
        const auto n0 = in[0]->size();
        if (sink.wants(0)) sink.add(0, Tensor<T>(in[0]->shape(), std::vector<T>(g.ptr(), g.ptr() + n0)));
        if (sink.wants(1)) sink.add(1, Tensor<T>(in[1]->shape(), std::vector<T>(g.ptr() + n0, g.ptr() + g.size())));
      });
}

template <class T>
Var<T> maxpool2(const Var<T>& x) {
  if (x.tape().tracking_branches()) {
    // the winner of each 2x2x2 block is where the backward pass routes gradient
    const auto ones = kernels::maxpool2_backward(x.value(), Tensor<T>(kernels::maxpool2(x.value()).shape(), T{1}));
    BranchHash bh;
    for (std::size_t i = 0; i < ones.size(); ++i) bh.add(ones[i] != T{0});
    x.tape().note_branch(bh.h);
  }
  return x.tape().record(
      "maxpool2", {x.id()}, [](const auto& in) { return kernels::maxpool2(*in[0]); },
      [](const auto& in, const auto&, const Tensor<T>& g, auto& sink) {
        sink.add(0, kernels::maxpool2_backward(*in[0], g));
      });
}

template <class T>
Var<T> upsample2(const Var<T>& x) {
  return x.tape().record(
      "upsample2", {x.id()}, [](const auto& in) { return kernels::upsample2(*in[0]); },
      [](const auto& in, const auto&, const Tensor<T>& g, auto& sink) {
        sink.add(0, kernels::upsample2_backward(g, in[0]->shape()));
      });
}

// y = W x (+ b) for W [m,n], x [n].
template <class T>
Var<T> matvec(const Var<T>& w, const Var<T>& x, const std::optional<Var<T>>& b = std::nullopt) {
  auto& tape = detail::same_tape(w, x);
  std::vector<std::size_t> parents{w.id(), x.id()};
  const bool has_bias = b.has_value();
  if (has_bias) parents.push_back(b->id());
  return tape.record(
      "matvec", parents,
      [=](const auto& in) {
        const auto &W = *in[0], &v = *in[1];
        if (W.rank() != 2 || v.rank() != 1 || W.dim(1) != v.dim(0))
          throw DimensionError("matvec shape mismatch: " + shape_str(W.shape()) + " x " + shape_str(v.shape()));
        if (has_bias && (in[2]->rank() != 1 || in[2]->dim(0) != W.dim(0)))
          throw DimensionError("matvec bias length mismatch");
        Tensor<T> y(Shape{W.dim(0)});
        Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> Y(y.ptr(), W.dim(0));
        Y.noalias() = kernels::ConstMatMap<T>(W.ptr(), W.dim(0), W.dim(1)) *
                      Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(v.ptr(), v.dim(0));
        if (has_bias)
          for (std::size_t i = 0; i < y.size(); ++i) y[i] += (*in[2])[i];
        return y;
      },
      [=](const auto& in, const auto&, const Tensor<T>& g, auto& sink) {
        const auto &W = *in[0], &v = *in[1];
        using Vec = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;
        Vec G(g.ptr(), g.size());
        if (sink.wants(0)) {
          Tensor<T> dW(W.shape());
          kernels::MatMap<T>(dW.ptr(), W.dim(0), W.dim(1)).noalias() = G * Vec(v.ptr(), v.size()).transpose();
          sink.add(0, dW);
        }
        if (sink.wants(1)) {
          Tensor<T> dv(v.shape());
          Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(dv.ptr(), dv.size()).noalias() =
              kernels::ConstMatMap<T>(W.ptr(), W.dim(0), W.dim(1)).transpose() * G;
          sink.add(1, dv);
        }
        if (has_bias) sink.add(2, g);
      });
}

}  // namespace ops
}  // namespace moco
