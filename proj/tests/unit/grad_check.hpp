#pragma once

#include "framegen/autodiff.hpp"

#include <functional>
#include <vector>

namespace testing_util {

using framegen::Index;
using framegen::Mat;
namespace ad = framegen::ad;

// Max relative error between analytic and central-difference gradients of a
// scalar function of several double parameters.
inline double grad_check(std::vector<ad::Var<double>> params,
                         const std::function<ad::Var<double>()>& f, double h = 1e-6) {
  for (auto& p : params) p.zero_grad();
  ad::backward(f());
  double worst = 0.0;
  for (auto& p : params) {
    Mat<double> g = p.grad().size() ? p.grad() : Mat<double>::Zero(p.rows(), p.cols());
    for (Index i = 0; i < p.value().size(); ++i) {
      double& x = p.mutable_value().data()[i];
      const double x0 = x;
      double fp, fm;
      {
        ad::NoGradGuard ng;
        x = x0 + h;
        fp = f().item();
        x = x0 - h;
        fm = f().item();
      }
      x = x0;
      const double num = (fp - fm) / (2 * h);
      const double err = std::abs(num - g.data()[i]) / std::max(1.0, std::abs(num) + std::abs(g.data()[i]));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

inline ad::Var<double> rand_param(Index r, Index c, unsigned seed, double s = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  Mat<double> m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = s * n(rng);
  return ad::Var<double>(std::move(m), true);
}

// Fixed random projection to a scalar so every output entry matters.
inline ad::Var<double> project(const ad::Var<double>& y, unsigned seed = 99) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n;
  Mat<double> w(y.rows(), y.cols());
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = n(rng);
  return ad::sum(ad::mul(y, ad::constant<double>(w)));
}

}  // namespace testing_util
