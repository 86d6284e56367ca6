#pragma once

// Dense numeric core shared by the models: row-major tensors, activations,
// softmax, first-order optimizers and a central-difference gradient checker.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>

#include "milscreen/errors.hpp"

namespace milscreen {

template <class Scalar>
using Tensor2D = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Tensor2Dd = Tensor2D<double>;
using Vectord = Vector<double>;

/// "(rows x cols)" for error messages.
template <class Derived>
std::string shape_str(const Eigen::EigenBase<Derived>& m) {
  return "(" + std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ")";
}

template <class Derived>
bool all_finite(const Eigen::DenseBase<Derived>& m) {
  return m.derived().array().isFinite().all();
}

/// Same shape and bitwise-equal entries.
template <class DerivedA, class DerivedB>
bool identical(const Eigen::DenseBase<DerivedA>& a, const Eigen::DenseBase<DerivedB>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) return false;
  return a.size() == 0 || (a.derived().array() == b.derived().array()).all();
}

inline constexpr double kActivationClamp = 40.0;

template <class Scalar>
Scalar sigmoid(Scalar x) {
  using std::exp;
  x = std::clamp(x, Scalar(-kActivationClamp), Scalar(kActivationClamp));
  return x >= Scalar(0) ? Scalar(1) / (Scalar(1) + exp(-x)) : exp(x) / (Scalar(1) + exp(x));
}

template <class Scalar>
Scalar clamped_tanh(Scalar x) {
  using std::tanh;
  return tanh(std::clamp(x, Scalar(-kActivationClamp), Scalar(kActivationClamp)));
}

/// Numerically stable softmax (max subtracted before exponentiating).
template <class Derived>
Vector<typename Derived::Scalar> softmax(const Eigen::MatrixBase<Derived>& v) {
  using Scalar = typename Derived::Scalar;
  if (v.size() == 0) throw DomainError("softmax: empty vector");
  if (!all_finite(v)) throw DomainError("softmax: non-finite input");
  const Scalar shift = v.maxCoeff();
  Vector<Scalar> e = (v.reshaped().array() - shift).exp().matrix();
  e /= e.sum();
  return e;
}

/// log(sum(exp(v))), stable.
template <class Derived>
typename Derived::Scalar log_sum_exp(const Eigen::MatrixBase<Derived>& v) {
  using std::exp;
  using std::log;
  const auto shift = v.maxCoeff();
  return shift + log((v.array() - shift).exp().sum());
}

enum class Activation { tanh, sigmoid };

/// Elementwise tanh or logistic sigmoid; shape preserved.
template <class Derived>
Tensor2D<typename Derived::Scalar> activate(const Eigen::MatrixBase<Derived>& t,
                                            Activation kind) {
  using Scalar = typename Derived::Scalar;
  Tensor2D<Scalar> out = t;
  if (!all_finite(out)) throw DomainError("activate: non-finite input");
  if (kind == Activation::tanh) {
    out = out.unaryExpr([](Scalar x) { return clamped_tanh(x); });
  } else {
    out = out.unaryExpr([](Scalar x) { return sigmoid(x); });
  }
  return out;
}

/// Checked matrix product.
template <class DerivedA, class DerivedB>
Tensor2D<typename DerivedA::Scalar> matmul(const Eigen::MatrixBase<DerivedA>& a,
                                           const Eigen::MatrixBase<DerivedB>& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: shape mismatch " + shape_str(a) + " x " + shape_str(b));
  }
  return a * b;
}

enum class OptimizerKind { sgd, adam };

/// Per-parameter optimizer state. Buffers are allocated lazily on the first
/// step so one setting can be copied to every tensor of a model.
template <class Scalar>
struct OptimState {
  OptimizerKind kind = OptimizerKind::sgd;
  Scalar learning_rate = Scalar(0.05);

  // sgd
  Scalar momentum = Scalar(0);
  Scalar decay_factor = Scalar(0.1);
  int decay_period = 0;  // epochs; 0 disables the step schedule

  // adam
  Scalar beta1 = Scalar(0.9);
  Scalar beta2 = Scalar(0.999);
  Scalar epsilon = Scalar(1e-8);

  std::int64_t step = 0;
  Tensor2D<Scalar> first_moment;   // momentum buffer for sgd
  Tensor2D<Scalar> second_moment;  // adam only

  static OptimState sgd(Scalar lr, Scalar momentum = Scalar(0), int decay_period = 0,
                        Scalar decay_factor = Scalar(0.1)) {
    OptimState s;
    s.kind = OptimizerKind::sgd;
    s.learning_rate = lr;
    s.momentum = momentum;
    s.decay_period = decay_period;
    s.decay_factor = decay_factor;
    return s;
  }

  static OptimState adam(Scalar lr) {
    OptimState s;
    s.kind = OptimizerKind::adam;
    s.learning_rate = lr;
    return s;
  }
};

/// Learning rate in effect during `epoch` (0-based): lr0 * factor^floor(epoch/period).
template <class Scalar>
Scalar effective_learning_rate(const OptimState<Scalar>& state, int epoch) {
  if (state.kind != OptimizerKind::sgd || state.decay_period <= 0) return state.learning_rate;
  using std::pow;
  return state.learning_rate * pow(state.decay_factor, Scalar(epoch / state.decay_period));
}

/// One in-place update of `params` from `grads`.
template <class Scalar>
void optimizer_step(Tensor2D<Scalar>& params, const Tensor2D<Scalar>& grads,
                    OptimState<Scalar>& state, int epoch = 0) {
  if (params.rows() != grads.rows() || params.cols() != grads.cols()) {
    throw ShapeError("optimizer_step: params " + shape_str(params) + " vs grads " +
                     shape_str(grads));
  }
  if (!all_finite(grads)) throw DomainError("optimizer_step: non-finite gradient");

  auto ensure = [&](Tensor2D<Scalar>& buf) {
    if (buf.size() == 0) {
      buf = Tensor2D<Scalar>::Zero(params.rows(), params.cols());
    } else if (buf.rows() != params.rows() || buf.cols() != params.cols()) {
      throw ShapeError("optimizer_step: state buffer " + shape_str(buf) + " vs params " +
                       shape_str(params));
    }
  };

  const Scalar lr = effective_learning_rate(state, epoch);
  ++state.step;
  if (state.kind == OptimizerKind::sgd) {
    if (state.momentum == Scalar(0)) {
      params.noalias() -= lr * grads;
      return;
    }
    ensure(state.first_moment);
    state.first_moment = state.momentum * state.first_moment + grads;
    params.noalias() -= lr * state.first_moment;
    return;
  }

  ensure(state.first_moment);
  ensure(state.second_moment);
  using std::pow;
  state.first_moment = state.beta1 * state.first_moment + (Scalar(1) - state.beta1) * grads;
  state.second_moment =
      state.beta2 * state.second_moment + (Scalar(1) - state.beta2) * grads.cwiseAbs2();
  const Scalar t = Scalar(state.step);
  const Scalar c1 = Scalar(1) - pow(state.beta1, t);
  const Scalar c2 = Scalar(1) - pow(state.beta2, t);
  params.array() -= lr * (state.first_moment.array() / c1) /
                    ((state.second_moment.array() / c2).sqrt() + state.epsilon);
}

/// Central-difference gradient of a scalar function of a tensor.
template <class Scalar, class F>
Tensor2D<Scalar> finite_diff_grad(F&& f, const Tensor2D<Scalar>& x, Scalar eps) {
  if (!(eps > Scalar(0))) throw DomainError("finite_diff_grad: eps must be positive");
  Tensor2D<Scalar> probe = x;
  Tensor2D<Scalar> grad(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const Scalar orig = probe.data()[i];
    probe.data()[i] = orig + eps;
    const Scalar up = f(static_cast<const Tensor2D<Scalar>&>(probe));
    probe.data()[i] = orig - eps;
    const Scalar down = f(static_cast<const Tensor2D<Scalar>&>(probe));
    probe.data()[i] = orig;
    using std::isfinite;
    if (!isfinite(up) || !isfinite(down)) {
      throw DomainError("finite_diff_grad: non-finite evaluation at coordinate " +
                        std::to_string(i));
    }
    grad.data()[i] = (up - down) / (Scalar(2) * eps);
  }
  return grad;
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor). The floor keeps coordinates
/// whose true gradient is ~0 from dominating through round-off.
template <class DerivedA, class DerivedB>
double max_relative_error(const Eigen::MatrixBase<DerivedA>& a,
                          const Eigen::MatrixBase<DerivedB>& b, double floor = 1e-6) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("max_relative_error: " + shape_str(a) + " vs " + shape_str(b));
  }
  double worst = 0.0;
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    for (Eigen::Index c = 0; c < a.cols(); ++c) {
      const double x = static_cast<double>(a(r, c));
      const double y = static_cast<double>(b(r, c));
      const double denom = std::max({std::abs(x), std::abs(y), floor});
      worst = std::max(worst, std::abs(x - y) / denom);
    }
  }
  return worst;
}

}  // namespace milscreen
