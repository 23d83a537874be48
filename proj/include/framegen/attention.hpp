#pragma once

// Fused multi-head scaled dot-product attention over a batch of equal-length
// sequences stored as consecutive row blocks.

#include "framegen/autodiff.hpp"

#include <limits>
#include <memory>
#include <vector>

namespace framegen {

struct AttentionMask {
  bool causal = true;
  long window = 0;  // keys with query - key >= window are excluded; 0 = unlimited

  bool allowed(Index q, Index k) const {
    if (causal && k > q) return false;
    if (window > 0 && q - k >= window) return false;
    if (!causal && window > 0 && k - q >= window) return false;
    return true;
  }
};

// Row-wise masked softmax. Masked entries are exactly zero and never enter
// the max, so a row depends only on its allowed logits.
// `s` holds the n logits of query q against keys 0..n-1.
template <class T>
void masked_softmax_row(T* s, Index n, Index q, const AttentionMask& m) {
  T mx = -std::numeric_limits<T>::infinity();
  for (Index k = 0; k < n; ++k)
    if (m.allowed(q, k)) mx = std::max(mx, s[k]);
  T den = 0;
  for (Index k = 0; k < n; ++k) {
    if (m.allowed(q, k)) {
      s[k] = std::exp(s[k] - mx);
      den += s[k];
    } else {
      s[k] = T(0);
    }
  }
  for (Index k = 0; k < n; ++k) s[k] /= den;
}

namespace ad {

// q, k, v: [batch*len, heads*head_dim]. Returns the same shape.
template <class T>
Var<T> attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, Index len, int heads,
                 const AttentionMask& mask) {
  const Index rows = q.rows(), d = q.cols();
  if (rows % len != 0 || k.rows() != rows || v.rows() != rows || k.cols() != d || v.cols() != d)
    throw std::invalid_argument("attention: shape mismatch");
  const Index batch = rows / len, hd = d / heads;
  const T sc = T(1) / std::sqrt(static_cast<T>(hd));

  auto probs = std::make_shared<std::vector<Mat<T>>>(static_cast<size_t>(batch * heads));
  Mat<T> out(rows, d);
  Mat<T> qb(len, hd), kb(len, hd), vb(len, hd);
  for (Index b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      qb = q.value().block(b * len, h * hd, len, hd);
      kb = k.value().block(b * len, h * hd, len, hd);
      vb = v.value().block(b * len, h * hd, len, hd);
      Mat<T>& p = (*probs)[static_cast<size_t>(b * heads + h)];
      p.noalias() = (qb * kb.transpose()) * sc;
      for (Index i = 0; i < len; ++i) masked_softmax_row<T>(p.data() + i * len, len, i, mask);
      out.block(b * len, h * hd, len, hd).noalias() = p * vb;
    }
  }

  return make_op<T>(std::move(out), {q, k, v}, [q, k, v, probs, len, heads, hd, sc](Node<T>& o) {
    const Index rows = q.rows(), d = q.cols(), batch = rows / len;
    Mat<T> gq = Mat<T>::Zero(rows, d), gk = Mat<T>::Zero(rows, d), gv = Mat<T>::Zero(rows, d);
    Mat<T> qb(len, hd), kb(len, hd), vb(len, hd), go(len, hd), dp(len, len);
    for (Index b = 0; b < batch; ++b) {
      for (int h = 0; h < heads; ++h) {
        const Mat<T>& p = (*probs)[static_cast<size_t>(b * heads + h)];
        qb = q.value().block(b * len, h * hd, len, hd);
        kb = k.value().block(b * len, h * hd, len, hd);
        vb = v.value().block(b * len, h * hd, len, hd);
        go = o.grad.block(b * len, h * hd, len, hd);
        gv.block(b * len, h * hd, len, hd).noalias() = p.transpose() * go;
        dp.noalias() = go * vb.transpose();
        // softmax backward: ds = p * (dp - rowsum(dp * p))
        Vec<T> rs = dp.cwiseProduct(p).rowwise().sum();
        dp = p.cwiseProduct(dp - rs.replicate(1, len)) * sc;
        gq.block(b * len, h * hd, len, hd).noalias() = dp * kb;
        gk.block(b * len, h * hd, len, hd).noalias() = dp.transpose() * qb;
      }
    }
    q.node()->accumulate(gq);
    k.node()->accumulate(gk);
    v.node()->accumulate(gv);
  });
}

}  // namespace ad
}  // namespace framegen
