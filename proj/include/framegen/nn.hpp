#pragma once

// Parameter initialization helpers and small building blocks shared by the
// aggregator, backbone and head.

#include "framegen/autodiff.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <string>

namespace framegen {

using Rng = std::mt19937_64;

template <class T>
ad::Var<T> param_normal(Index rows, Index cols, double std, Rng& rng) {
  std::normal_distribution<double> n01;
  Mat<T> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(std * n01(rng));
  return ad::Var<T>(std::move(m), true);
}

template <class T>
ad::Var<T> param_fan_in(Index rows, Index cols, Rng& rng, double gain = 1.0) {
  return param_normal<T>(rows, cols, gain / std::sqrt(static_cast<double>(rows)), rng);
}

template <class T>
ad::Var<T> param_const(Index rows, Index cols, double v) {
  return ad::Var<T>(Mat<T>::Constant(rows, cols, static_cast<T>(v)), true);
}

// Visitor signature used by every component: f(name, var, decays).
template <class T>
using ParamVisitor = std::function<void(const std::string&, ad::Var<T>&, bool)>;

template <class T>
struct LinearLayer {
  ad::Var<T> w, b;

  LinearLayer() = default;
  LinearLayer(Index in, Index out, Rng& rng, double gain = 1.0, bool bias = true)
      : w(param_fan_in<T>(in, out, rng, gain)) {
    if (bias) b = param_const<T>(1, out, 0.0);
  }

  static LinearLayer zeros(Index in, Index out, bool bias = true) {
    LinearLayer l;
    l.w = param_const<T>(in, out, 0.0);
    if (bias) l.b = param_const<T>(1, out, 0.0);
    return l;
  }

  ad::Var<T> operator()(const ad::Var<T>& x) const { return b.defined() ? ad::linear(x, w, b) : ad::matmul(x, w); }

  void visit(const std::string& prefix, const ParamVisitor<T>& f) {
    f(prefix + ".w", w, true);
    if (b.defined()) f(prefix + ".b", b, false);
  }
};

}  // namespace framegen
