#pragma once

// Decoupled-weight-decay Adam with global-norm clipping, and parameter EMA.

#include "framegen/model.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace framegen {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.02;
  double clip = 1.0;  // global gradient-norm limit; <= 0 disables
};

template <class T>
struct ParamRef {
  std::string name;
  ad::Var<T>* var;
  bool decays;
};

template <class T>
std::vector<ParamRef<T>> param_refs(Model<T>& m) {
  std::vector<ParamRef<T>> out;
  m.visit([&out](const std::string& n, ad::Var<T>& v, bool d) { out.push_back({n, &v, d}); });
  return out;
}

template <class T>
class AdamW {
 public:
  AdamW() = default;
  explicit AdamW(const AdamWConfig& cfg) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  long steps() const { return t_; }
  std::vector<Mat<T>>& first_moments() { return m_; }
  std::vector<Mat<T>>& second_moments() { return v_; }
  void set_steps(long t) { t_ = t; }

  void init(const std::vector<ParamRef<T>>& ps) {
    m_.clear();
    v_.clear();
    for (const auto& p : ps) {
      m_.push_back(Mat<T>::Zero(p.var->rows(), p.var->cols()));
      v_.push_back(Mat<T>::Zero(p.var->rows(), p.var->cols()));
    }
    t_ = 0;
  }

  // Global L2 norm of the current gradients (missing gradients count as 0).
  static double grad_norm(const std::vector<ParamRef<T>>& ps) {
    double s = 0.0;
    for (const auto& p : ps)
      if (p.var->grad().size()) s += p.var->grad().template cast<double>().squaredNorm();
    return std::sqrt(s);
  }

  // Applies one update; returns the pre-clip gradient norm.
  double step(const std::vector<ParamRef<T>>& ps) {
    if (m_.size() != ps.size()) init(ps);
    const double norm = grad_norm(ps);
    if (!std::isfinite(norm)) throw std::runtime_error("optimizer: non-finite gradient norm");
    const double clip = (cfg_.clip > 0.0 && norm > cfg_.clip) ? cfg_.clip / norm : 1.0;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T step = static_cast<T>(cfg_.lr / bc1), eps = static_cast<T>(cfg_.eps);
    const T rbc2 = static_cast<T>(1.0 / std::sqrt(bc2));
    for (size_t i = 0; i < ps.size(); ++i) {
      if (!ps[i].var->grad().size()) continue;
      Mat<T>& w = ps[i].var->mutable_value();
      if (ps[i].decays && cfg_.weight_decay > 0.0) w *= static_cast<T>(1.0 - cfg_.lr * cfg_.weight_decay);
      const Mat<T> g = ps[i].var->grad() * static_cast<T>(clip);
      m_[i] = b1 * m_[i] + (T(1) - b1) * g;
      v_[i] = b2 * v_[i] + (T(1) - b2) * g.cwiseProduct(g);
      w.array() -= step * m_[i].array() / (v_[i].array().sqrt() * rbc2 + eps);
    }
    return norm;
  }

 private:
  AdamWConfig cfg_;
  std::vector<Mat<T>> m_, v_;
  long t_ = 0;
};

// target <- mu * target + (1 - mu) * source, elementwise.
template <class T>
void ema_update(Model<T>& target, Model<T>& source, double mu) {
  auto t = param_refs(target), s = param_refs(source);
  if (t.size() != s.size()) throw std::invalid_argument("ema_update: parameter count mismatch");
  const T a = static_cast<T>(mu), b = static_cast<T>(1.0 - mu);
  for (size_t i = 0; i < t.size(); ++i) {
    Mat<T>& tv = t[i].var->mutable_value();
    const Mat<T>& sv = s[i].var->value();
    if (tv.rows() != sv.rows() || tv.cols() != sv.cols())
      throw std::invalid_argument("ema_update: shape mismatch at " + t[i].name);
    if (mu == 1.0) continue;
    if (mu == 0.0) tv = sv;
    else tv = a * tv + b * sv;
  }
}

}  // namespace framegen
