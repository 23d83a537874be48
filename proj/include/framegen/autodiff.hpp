#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major Eigen
// matrices. Every op computes its value eagerly and, when gradients are
// enabled and some input requires them, records a closure that pushes the
// output gradient back into its inputs.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace framegen {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Vec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
using Index = Eigen::Index;

namespace ad {

namespace detail {
inline thread_local bool grad_enabled = true;
}

inline bool grad_enabled() { return detail::grad_enabled; }

// Disables graph recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <class T>
struct Node {
  Mat<T> value;
  Mat<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  template <class E>
  void accumulate(const Eigen::MatrixBase<E>& g) {
    if (!requires_grad) return;
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Mat<T> value, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  static Var scalar(T v) {
    Mat<T> m(1, 1);
    m(0, 0) = v;
    return Var(std::move(m));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Mat<T>& value() const { return node_->value; }
  Mat<T>& mutable_value() { return node_->value; }
  const Mat<T>& grad() const { return node_->grad; }
  Mat<T>& mutable_grad() { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  T item() const { return node_->value(0, 0); }
  void zero_grad() { node_->grad.resize(0, 0); }

  const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Wraps a freshly computed value as an op output. `fn` receives the output
// node and must push its gradient into the parents it captured.
template <class T, class Fn>
Var<T> make_op(Mat<T> value, std::initializer_list<Var<T>> parents, Fn&& fn) {
  Var<T> out(std::move(value));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const auto& p : parents)
    if (p.requires_grad()) node.parents.push_back(p.node());
  node.backward_fn = std::forward<Fn>(fn);
  return out;
}

template <class T, class Fn>
Var<T> make_op_n(Mat<T> value, const std::vector<Var<T>>& parents, Fn&& fn) {
  Var<T> out(std::move(value));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& p : parents) any = any || p.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  for (const auto& p : parents)
    if (p.requires_grad()) node.parents.push_back(p.node());
  node.backward_fn = std::forward<Fn>(fn);
  return out;
}

// Runs reverse accumulation from a scalar (1x1) root.
template <class T>
void backward(const Var<T>& root) {
  if (root.rows() != 1 || root.cols() != 1)
    throw std::invalid_argument("backward: root must be a 1x1 scalar");
  if (!root.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<T>* p = n->parents[i++].get();
      if (seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  root.node()->accumulate(Mat<T>::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward_fn && n->grad.size() != 0) n->backward_fn(*n);
  }
  // Release the graph held by intermediates so repeated backward passes on
  // long-lived leaves do not retain it.
  for (Node<T>* n : order) {
    if (n->backward_fn) {
      n->backward_fn = nullptr;
      n->parents.clear();
      n->grad.resize(0, 0);
    }
  }
}

// ---------------------------------------------------------------------------
// Elementary ops

template <class T>
Var<T> constant(Mat<T> m) {
  return Var<T>(std::move(m));
}

template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: shape mismatch");
  Mat<T> v = a.value() * b.value();
  return make_op<T>(std::move(v), {a, b}, [a, b](Node<T>& o) {
    if (a.requires_grad()) a.node()->accumulate(o.grad * b.value().transpose());
    if (b.requires_grad()) b.node()->accumulate(a.value().transpose() * o.grad);
  });
}

// x * w + b with b a 1 x out row broadcast over rows.
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  if (x.cols() != w.rows() || b.cols() != w.cols() || b.rows() != 1)
    throw std::invalid_argument("linear: shape mismatch");
  Mat<T> v = x.value() * w.value();
  v.rowwise() += b.value().row(0);
  return make_op<T>(std::move(v), {x, w, b}, [x, w, b](Node<T>& o) {
    if (x.requires_grad()) x.node()->accumulate(o.grad * w.value().transpose());
    if (w.requires_grad()) w.node()->accumulate(x.value().transpose() * o.grad);
    if (b.requires_grad()) b.node()->accumulate(o.grad.colwise().sum());
  });
}

template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w) {
  return matmul(x, w);
}

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("add: shape mismatch");
  Mat<T> v = a.value() + b.value();
  return make_op<T>(std::move(v), {a, b}, [a, b](Node<T>& o) {
    a.node()->accumulate(o.grad);
    b.node()->accumulate(o.grad);
  });
}

template <class T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("sub: shape mismatch");
  Mat<T> v = a.value() - b.value();
  return make_op<T>(std::move(v), {a, b}, [a, b](Node<T>& o) {
    a.node()->accumulate(o.grad);
    b.node()->accumulate(-o.grad);
  });
}

template <class T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument("mul: shape mismatch");
  Mat<T> v = a.value().cwiseProduct(b.value());
  return make_op<T>(std::move(v), {a, b}, [a, b](Node<T>& o) {
    if (a.requires_grad()) a.node()->accumulate(o.grad.cwiseProduct(b.value()));
    if (b.requires_grad()) b.node()->accumulate(o.grad.cwiseProduct(a.value()));
  });
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  Mat<T> v = a.value() * s;
  return make_op<T>(std::move(v), {a}, [a, s](Node<T>& o) { a.node()->accumulate(o.grad * s); });
}

template <class T>
Var<T> add_scalar(const Var<T>& a, T s) {
  Mat<T> v = a.value().array() + s;
  return make_op<T>(std::move(v), {a}, [a](Node<T>& o) { a.node()->accumulate(o.grad); });
}

// Adds a 1 x cols row to every row.
template <class T>
Var<T> add_row(const Var<T>& a, const Var<T>& row) {
  if (row.rows() != 1 || row.cols() != a.cols())
    throw std::invalid_argument("add_row: shape mismatch");
  Mat<T> v = a.value();
  v.rowwise() += row.value().row(0);
  return make_op<T>(std::move(v), {a, row}, [a, row](Node<T>& o) {
    a.node()->accumulate(o.grad);
    if (row.requires_grad()) row.node()->accumulate(o.grad.colwise().sum());
  });
}

// Scales row r of `a` by col(r, 0).
template <class T>
Var<T> mul_col(const Var<T>& a, const Var<T>& col) {
  if (col.cols() != 1 || col.rows() != a.rows())
    throw std::invalid_argument("mul_col: shape mismatch");
  Mat<T> v = col.value().col(0).asDiagonal() * a.value();
  return make_op<T>(std::move(v), {a, col}, [a, col](Node<T>& o) {
    if (a.requires_grad()) a.node()->accumulate(col.value().col(0).asDiagonal() * o.grad);
    if (col.requires_grad())
      col.node()->accumulate(o.grad.cwiseProduct(a.value()).rowwise().sum());
  });
}

template <class T>
Var<T> silu(const Var<T>& a) {
  Mat<T> sig = (T(1) + (-a.value().array()).exp()).inverse().matrix();
  Mat<T> v = a.value().cwiseProduct(sig);
  return make_op<T>(std::move(v), {a}, [a, sig](Node<T>& o) {
    auto s = sig.array();
    auto x = a.value().array();
    a.node()->accumulate((o.grad.array() * (s * (T(1) + x * (T(1) - s)))).matrix());
  });
}

template <class T>
Var<T> exp(const Var<T>& a) {
  Mat<T> v = a.value().array().exp().matrix();
  return make_op<T>(Mat<T>(v), {a}, [a, v](Node<T>& o) {
    a.node()->accumulate(o.grad.cwiseProduct(v));
  });
}

template <class T>
Var<T> sqrt(const Var<T>& a) {
  Mat<T> v = a.value().array().sqrt().matrix();
  return make_op<T>(Mat<T>(v), {a}, [a, v](Node<T>& o) {
    a.node()->accumulate((o.grad.array() / (T(2) * v.array())).matrix());
  });
}

template <class T>
Var<T> square(const Var<T>& a) {
  Mat<T> v = a.value().array().square().matrix();
  return make_op<T>(std::move(v), {a}, [a](Node<T>& o) {
    a.node()->accumulate((T(2) * o.grad.array() * a.value().array()).matrix());
  });
}

// Per-row sum -> rows x 1.
template <class T>
Var<T> row_sum(const Var<T>& a) {
  Mat<T> v = a.value().rowwise().sum();
  return make_op<T>(std::move(v), {a}, [a](Node<T>& o) {
    Mat<T> g = o.grad.col(0).replicate(1, a.cols());
    a.node()->accumulate(g);
  });
}

template <class T>
Var<T> sum(const Var<T>& a) {
  Mat<T> v(1, 1);
  v(0, 0) = a.value().sum();
  return make_op<T>(std::move(v), {a}, [a](Node<T>& o) {
    a.node()->accumulate(Mat<T>::Constant(a.rows(), a.cols(), o.grad(0, 0)));
  });
}

template <class T>
Var<T> mean(const Var<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.value().size()));
}

// RMS normalization with learnable per-channel gain (1 x cols).
template <class T>
Var<T> rms_norm(const Var<T>& x, const Var<T>& gain, T eps) {
  const Index n = x.rows(), d = x.cols();
  Vec<T> inv(n);
  Mat<T> xhat(n, d);
  for (Index r = 0; r < n; ++r) {
    T ms = x.value().row(r).squaredNorm() / static_cast<T>(d);
    inv(r) = T(1) / std::sqrt(ms + eps);
    xhat.row(r) = x.value().row(r) * inv(r);
  }
  Mat<T> v = xhat * gain.value().row(0).asDiagonal();
  return make_op<T>(std::move(v), {x, gain}, [x, gain, xhat, inv, d](Node<T>& o) {
    if (gain.requires_grad())
      gain.node()->accumulate(o.grad.cwiseProduct(xhat).colwise().sum());
    if (x.requires_grad()) {
      Mat<T> gx = o.grad * gain.value().row(0).asDiagonal();
      Mat<T> out(gx.rows(), gx.cols());
      for (Index r = 0; r < gx.rows(); ++r) {
        T dot = gx.row(r).dot(xhat.row(r)) / static_cast<T>(d);
        out.row(r) = inv(r) * (gx.row(r) - xhat.row(r) * dot);
      }
      x.node()->accumulate(out);
    }
  });
}

// Layer normalization without affine parameters.
template <class T>
Var<T> layer_norm(const Var<T>& x, T eps) {
  const Index n = x.rows(), d = x.cols();
  Vec<T> inv(n);
  Mat<T> xhat(n, d);
  for (Index r = 0; r < n; ++r) {
    T mu = x.value().row(r).mean();
    auto c = x.value().row(r).array() - mu;
    T var = c.square().sum() / static_cast<T>(d);
    inv(r) = T(1) / std::sqrt(var + eps);
    xhat.row(r) = (c * inv(r)).matrix();
  }
  return make_op<T>(Mat<T>(xhat), {x}, [x, xhat, inv, d](Node<T>& o) {
    Mat<T> out(o.grad.rows(), o.grad.cols());
    for (Index r = 0; r < o.grad.rows(); ++r) {
      T gm = o.grad.row(r).mean();
      T dot = o.grad.row(r).dot(xhat.row(r)) / static_cast<T>(d);
      out.row(r) = inv(r) * ((o.grad.row(r).array() - gm) - xhat.row(r).array() * dot).matrix();
    }
    x.node()->accumulate(out);
  });
}

template <class T>
Var<T> concat_cols(const std::vector<Var<T>>& parts) {
  Index rows = parts.at(0).rows(), cols = 0;
  for (const auto& p : parts) {
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
    cols += p.cols();
  }
  Mat<T> v(rows, cols);
  Index c = 0;
  for (const auto& p : parts) {
    v.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return make_op_n<T>(std::move(v), parts, [parts](Node<T>& o) {
    Index c0 = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) p.node()->accumulate(o.grad.middleCols(c0, p.cols()));
      c0 += p.cols();
    }
  });
}

template <class T>
Var<T> concat_rows(const std::vector<Var<T>>& parts) {
  Index cols = parts.at(0).cols(), rows = 0;
  for (const auto& p : parts) {
    if (p.cols() != cols) throw std::invalid_argument("concat_rows: col mismatch");
    rows += p.rows();
  }
  Mat<T> v(rows, cols);
  Index r = 0;
  for (const auto& p : parts) {
    v.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return make_op_n<T>(std::move(v), parts, [parts](Node<T>& o) {
    Index r0 = 0;
    for (const auto& p : parts) {
      if (p.requires_grad()) p.node()->accumulate(o.grad.middleRows(r0, p.rows()));
      r0 += p.rows();
    }
  });
}

template <class T>
Var<T> slice_cols(const Var<T>& a, Index start, Index n) {
  if (start < 0 || start + n > a.cols()) throw std::out_of_range("slice_cols");
  Mat<T> v = a.value().middleCols(start, n);
  return make_op<T>(std::move(v), {a}, [a, start, n](Node<T>& o) {
    Mat<T> g = Mat<T>::Zero(a.rows(), a.cols());
    g.middleCols(start, n) = o.grad;
    a.node()->accumulate(g);
  });
}

// out.row(i) = a.row(idx[i]); gradient scatters back with accumulation.
template <class T>
Var<T> gather_rows(const Var<T>& a, std::vector<Index> idx) {
  Mat<T> v(static_cast<Index>(idx.size()), a.cols());
  for (size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= a.rows()) throw std::out_of_range("gather_rows");
    v.row(static_cast<Index>(i)) = a.value().row(idx[i]);
  }
  return make_op<T>(std::move(v), {a}, [a, idx = std::move(idx)](Node<T>& o) {
    Mat<T> g = Mat<T>::Zero(a.rows(), a.cols());
    for (size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += o.grad.row(static_cast<Index>(i));
    a.node()->accumulate(g);
  });
}

// Inverted dropout with an explicit mask; identity when p == 0.
template <class T, class Rng>
Var<T> dropout(const Var<T>& a, T p, Rng& rng) {
  if (p <= T(0)) return a;
  if (p >= T(1)) throw std::invalid_argument("dropout: p must be < 1");
  std::bernoulli_distribution keep(1.0 - static_cast<double>(p));
  Mat<T> mask(a.rows(), a.cols());
  const T s = T(1) / (T(1) - p);
  for (Index i = 0; i < mask.size(); ++i) mask.data()[i] = keep(rng) ? s : T(0);
  Mat<T> v = a.value().cwiseProduct(mask);
  return make_op<T>(std::move(v), {a}, [a, mask](Node<T>& o) {
    a.node()->accumulate(o.grad.cwiseProduct(mask));
  });
}

}  // namespace ad
}  // namespace framegen
