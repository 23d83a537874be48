#pragma once

// Rotary position embedding with plain, position-interpolated (PI) and
// NTK-aware base-rescaled variants, plus the sliding-window setting used for
// generation beyond the training window.

#include "framegen/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace framegen {

enum class RopeMode { none, pi, ntk };

inline const char* to_string(RopeMode m) {
  switch (m) {
    case RopeMode::none: return "none";
    case RopeMode::pi: return "pi";
    case RopeMode::ntk: return "ntk";
  }
  return "?";
}

inline RopeMode rope_mode_from_string(const std::string& s) {
  if (s == "none") return RopeMode::none;
  if (s == "pi") return RopeMode::pi;
  if (s == "ntk") return RopeMode::ntk;
  throw std::invalid_argument("unknown rope mode '" + s + "' (expected none|pi|ntk)");
}

struct RopeConfig {
  double base = 10000.0;
  RopeMode mode = RopeMode::none;
  // Token positions seen in training and the budget requested at inference.
  long n_train = 481;
  long n_target = 481;
  // 0 disables the sliding window.
  long swa_window = 0;

  void validate() const {
    if (base <= 1.0) throw std::invalid_argument("rope base must exceed 1");
    if (n_train <= 0 || n_target <= 0) throw std::invalid_argument("rope lengths must be positive");
    if (mode != RopeMode::none && n_target < n_train)
      throw std::invalid_argument("rope: n_target must be >= n_train for PI/NTK");
    if (swa_window < 0) throw std::invalid_argument("rope: negative swa window");
  }

  // Longest sequence the configuration accepts.
  long capacity() const {
    if (swa_window > 0) return std::max(n_target, n_train);
    return mode == RopeMode::none ? n_train : n_target;
  }

  double scale_ratio() const { return static_cast<double>(n_target) / static_cast<double>(n_train); }

  double effective_base(int head_dim) const {
    if (mode != RopeMode::ntk) return base;
    const double d = head_dim;
    return base * std::pow(scale_ratio(), d / (d - 2.0));
  }

  double position_scale() const {
    return mode == RopeMode::pi ? static_cast<double>(n_train) / static_cast<double>(n_target) : 1.0;
  }
};

// phi_l = base^(-2l/d), l = 0 .. d/2-1.
inline std::vector<double> rope_frequencies(int head_dim, const RopeConfig& cfg) {
  if (head_dim % 2 != 0) throw std::invalid_argument("rope: head dim must be even");
  const double b = cfg.effective_base(head_dim);
  std::vector<double> f(static_cast<size_t>(head_dim / 2));
  for (int l = 0; l < head_dim / 2; ++l) f[l] = std::pow(b, -2.0 * l / head_dim);
  return f;
}

// Rotates consecutive pairs (2l, 2l+1) of a single head vector by position*phi_l.
template <class T>
Vec<T> rope_rotate(const Vec<T>& v, long position, const RopeConfig& cfg) {
  const int d = static_cast<int>(v.size());
  const auto f = rope_frequencies(d, cfg);
  const double pos = static_cast<double>(position) * cfg.position_scale();
  Vec<T> out(d);
  for (int l = 0; l < d / 2; ++l) {
    const double a = pos * f[l];
    const T c = static_cast<T>(std::cos(a)), s = static_cast<T>(std::sin(a));
    const T x0 = v(2 * l), x1 = v(2 * l + 1);
    out(2 * l) = c * x0 - s * x1;
    out(2 * l + 1) = s * x0 + c * x1;
  }
  return out;
}

// Per-row cos/sin table for a list of 1-based token positions.
template <class T>
struct RopeTable {
  Mat<T> cos;  // rows x d/2
  Mat<T> sin;

  RopeTable() = default;
  RopeTable(const std::vector<long>& positions, int head_dim, const RopeConfig& cfg) {
    const auto f = rope_frequencies(head_dim, cfg);
    const double ps = cfg.position_scale();
    const Index n = static_cast<Index>(positions.size()), h = head_dim / 2;
    cos.resize(n, h);
    sin.resize(n, h);
    for (Index r = 0; r < n; ++r) {
      const double pos = static_cast<double>(positions[r]) * ps;
      for (Index l = 0; l < h; ++l) {
        const double a = pos * f[l];
        cos(r, l) = static_cast<T>(std::cos(a));
        sin(r, l) = static_cast<T>(std::sin(a));
      }
    }
  }
};

// Rotates every head slice of each row in place; sign = -1 applies the inverse.
template <class T, class Derived>
void apply_rope_rows(Eigen::MatrixBase<Derived>& x, const RopeTable<T>& tab, Index table_row0, int heads,
                     int sign = 1) {
  const Index hd = x.cols() / heads, half = hd / 2;
  for (Index r = 0; r < x.rows(); ++r) {
    for (int h = 0; h < heads; ++h) {
      for (Index l = 0; l < half; ++l) {
        const T c = tab.cos(table_row0 + r, l), s = sign * tab.sin(table_row0 + r, l);
        const Index i0 = h * hd + 2 * l;
        const T x0 = x(r, i0), x1 = x(r, i0 + 1);
        x(r, i0) = c * x0 - s * x1;
        x(r, i0 + 1) = s * x0 + c * x1;
      }
    }
  }
}

namespace ad {

template <class T>
Var<T> rope(const Var<T>& x, std::shared_ptr<const RopeTable<T>> tab, int heads) {
  if (tab->cos.rows() != x.rows()) throw std::invalid_argument("rope: table/rows mismatch");
  Mat<T> v = x.value();
  apply_rope_rows(v, *tab, 0, heads, 1);
  return make_op<T>(std::move(v), {x}, [x, tab, heads](Node<T>& o) {
    Mat<T> g = o.grad;
    apply_rope_rows(g, *tab, 0, heads, -1);
    x.node()->accumulate(g);
  });
}

}  // namespace ad
}  // namespace framegen
