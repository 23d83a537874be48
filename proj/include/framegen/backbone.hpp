#pragma once

// Causal decoder-only transformer over interleaved audio/vision tokens:
//   position 1 = BOS (x_0), position 2i = v_i, position 2i+1 = x_i.
// Pre-RMSNorm blocks with SwiGLU MLPs and rotary positions. Two independent
// evaluation paths: forward_full (whole sequence, differentiable) and
// step (one token per stream against a KV cache).

#include "framegen/attention.hpp"
#include "framegen/autodiff.hpp"
#include "framegen/nn.hpp"
#include "framegen/rope.hpp"

#include <algorithm>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace framegen {

struct BackboneConfig {
  int c_x = 32;
  int c_v = 64;
  int d_model = 128;
  int depth = 4;
  int heads = 4;
  double norm_eps = 1e-6;

  int head_dim() const { return d_model / heads; }
  // 8/3 * d_model rounded up to a multiple of 8.
  int mlp_hidden() const { return ((8 * d_model / 3 + 7) / 8) * 8; }

  void validate() const {
    if (d_model % heads) throw std::invalid_argument("backbone: d_model not divisible by heads");
    if (head_dim() % 2) throw std::invalid_argument("backbone: head dim must be even for rotary pairs");
    if (depth < 0) throw std::invalid_argument("backbone: negative depth");
  }
};

// Number of audio / vision tokens in an interleaved sequence of length L.
inline Index audio_tokens_in(Index len) { return (len - 1) / 2; }
inline Index vision_tokens_in(Index len) { return len / 2; }

template <class T>
struct BackboneLayer {
  ad::Var<T> attn_norm, mlp_norm;
  LinearLayer<T> wq, wk, wv, wo, w1, w3, w2;
};

// Per-stream cache: one K and one V history per layer.
template <class T>
struct KVCache {
  std::vector<Mat<T>> k, v;  // per layer, capacity x d_model
  Index length = 0;

  KVCache() = default;
  KVCache(int depth, Index capacity, int d_model) {
    for (int l = 0; l < depth; ++l) {
      k.emplace_back(capacity, d_model);
      v.emplace_back(capacity, d_model);
    }
  }
  Index capacity() const { return k.empty() ? 0 : k.front().rows(); }
  void reset() { length = 0; }
};

// Which rows of a batch of vision tokens get the null embedding.
enum class NullMode { none, all };

template <class T>
struct Backbone {
  BackboneConfig cfg;
  LinearLayer<T> audio_in, vision_in;
  ad::Var<T> bos, null_embedding, final_norm;
  std::vector<BackboneLayer<T>> layers;

  Backbone() = default;
  Backbone(const BackboneConfig& c, Rng& rng) : cfg(c) {
    c.validate();
    const int d = c.d_model, hid = c.mlp_hidden();
    const double out_gain = 1.0 / std::sqrt(2.0 * std::max(1, c.depth));
    audio_in = LinearLayer<T>(c.c_x, d, rng);
    vision_in = LinearLayer<T>(c.c_v, d, rng);
    bos = param_normal<T>(1, d, 0.02, rng);
    null_embedding = param_normal<T>(1, c.c_v, 0.02, rng);
    final_norm = param_const<T>(1, d, 1.0);
    for (int l = 0; l < c.depth; ++l) {
      BackboneLayer<T> L;
      L.attn_norm = param_const<T>(1, d, 1.0);
      L.mlp_norm = param_const<T>(1, d, 1.0);
      L.wq = LinearLayer<T>(d, d, rng, 1.0, false);
      L.wk = LinearLayer<T>(d, d, rng, 1.0, false);
      L.wv = LinearLayer<T>(d, d, rng, 1.0, false);
      L.wo = LinearLayer<T>(d, d, rng, out_gain, false);
      L.w1 = LinearLayer<T>(d, hid, rng, 1.0, false);
      L.w3 = LinearLayer<T>(d, hid, rng, 1.0, false);
      L.w2 = LinearLayer<T>(hid, d, rng, out_gain, false);
      layers.push_back(std::move(L));
    }
  }

  void visit(const ParamVisitor<T>& f) {
    audio_in.visit("bb.audio_in", f);
    vision_in.visit("bb.vision_in", f);
    f("bb.bos", bos, false);
    f("bb.null", null_embedding, false);
    f("bb.final_norm", final_norm, false);
    for (size_t l = 0; l < layers.size(); ++l) {
      auto& L = layers[l];
      const std::string p = "bb.l" + std::to_string(l);
      f(p + ".attn_norm", L.attn_norm, false);
      f(p + ".mlp_norm", L.mlp_norm, false);
      L.wq.visit(p + ".wq", f);
      L.wk.visit(p + ".wk", f);
      L.wv.visit(p + ".wv", f);
      L.wo.visit(p + ".wo", f);
      L.w1.visit(p + ".w1", f);
      L.w3.visit(p + ".w3", f);
      L.w2.visit(p + ".w2", f);
    }
  }

  // Replaces vision rows with the null embedding. `null_rows[r]` selects row r;
  // an empty mask means NullMode::all.
  ad::Var<T> substitute_null(const ad::Var<T>& vision, NullMode mode) const {
    if (mode == NullMode::none) return vision;
    std::vector<bool> all(static_cast<size_t>(vision.rows()), true);
    return substitute_null(vision, all);
  }

  ad::Var<T> substitute_null(const ad::Var<T>& vision, const std::vector<bool>& null_rows) const {
    bool any = false;
    for (bool b : null_rows) any = any || b;
    if (!any) return vision;
    const Index n = vision.rows();
    std::vector<Index> idx(static_cast<size_t>(n));
    for (Index r = 0; r < n; ++r) idx[static_cast<size_t>(r)] = null_rows[static_cast<size_t>(r)] ? n : r;
    return ad::gather_rows(ad::concat_rows<T>({vision, null_embedding}), std::move(idx));
  }

  // audio: [batch * audio_tokens_in(len), c_x] holding x_1.. per sequence;
  // vision: [batch * vision_tokens_in(len), c_v] holding v_1.. per sequence.
  // Returns outputs for every position, [batch * len, d_model].
  ad::Var<T> forward_full(const ad::Var<T>& audio, const ad::Var<T>& vision, Index batch, Index len,
                          const RopeConfig& rope, T dropout = T(0), Rng* rng = nullptr) const {
    if (len < 1) throw std::invalid_argument("forward_full: empty sequence");
    if (len > rope.capacity())
      throw std::length_error("forward_full: sequence of " + std::to_string(len) + " positions exceeds the limit of " +
                              std::to_string(rope.capacity()));
    const Index na = audio_tokens_in(len), nv = vision_tokens_in(len);
    if (audio.rows() != batch * na || vision.rows() != batch * nv)
      throw std::invalid_argument("forward_full: token counts do not match the sequence length");

    std::vector<ad::Var<T>> parts;
    if (na > 0) parts.push_back(audio_in(audio));
    if (nv > 0) parts.push_back(vision_in(vision));
    parts.push_back(bos);
    ad::Var<T> pool = ad::concat_rows<T>(parts);
    const Index a0 = 0, v0 = batch * na, b0 = batch * (na + nv);
    std::vector<Index> idx(static_cast<size_t>(batch * len));
    std::vector<long> positions(static_cast<size_t>(batch * len));
    for (Index b = 0; b < batch; ++b) {
      for (Index p = 1; p <= len; ++p) {
        Index src;
        if (p == 1) src = b0;
        else if (p % 2 == 0) src = v0 + b * nv + (p / 2 - 1);
        else src = a0 + b * na + ((p - 1) / 2 - 1);
        idx[static_cast<size_t>(b * len + p - 1)] = src;
        positions[static_cast<size_t>(b * len + p - 1)] = static_cast<long>(p);
      }
    }
    ad::Var<T> h = ad::gather_rows(pool, std::move(idx));
    auto tab = std::make_shared<const RopeTable<T>>(positions, cfg.head_dim(), rope);
    const T eps = static_cast<T>(cfg.norm_eps);
    AttentionMask mask{true, rope.swa_window};
    for (const auto& L : layers) {
      ad::Var<T> a = ad::rms_norm(h, L.attn_norm, eps);
      ad::Var<T> q = ad::rope(L.wq(a), tab, cfg.heads);
      ad::Var<T> k = ad::rope(L.wk(a), tab, cfg.heads);
      ad::Var<T> att = L.wo(ad::attention(q, k, L.wv(a), len, cfg.heads, mask));
      h = ad::add(h, rng ? ad::dropout(att, dropout, *rng) : att);
      ad::Var<T> m = ad::rms_norm(h, L.mlp_norm, eps);
      ad::Var<T> mlp = L.w2(ad::mul(ad::silu(L.w1(m)), L.w3(m)));
      h = ad::add(h, rng ? ad::dropout(mlp, dropout, *rng) : mlp);
    }
    return ad::rms_norm(h, final_norm, eps);
  }

  // Input embeddings for the step path, row-local like step().
  Mat<T> embed_audio(const Mat<T>& x) const { return embed_rows(x, audio_in); }
  Mat<T> embed_vision(const Mat<T>& v) const { return embed_rows(v, vision_in); }
  Mat<T> embed_null() const { return embed_vision(null_embedding.value()); }
  Mat<T> embed_bos() const { return bos.value(); }

  KVCache<T> make_cache(const RopeConfig& rope) const {
    return KVCache<T>(cfg.depth, rope.capacity(), cfg.d_model);
  }

  // Feeds one embedded token per stream (row s of `h` -> caches[s]) and
  // returns the outputs at those positions. Each stream's position is its
  // cache length + 1. Every stream is processed with row-local kernels, so a
  // stream's result does not depend on how many streams share the call.
  Mat<T> step(Mat<T> h, const std::vector<KVCache<T>*>& caches, const RopeConfig& rope) const {
    const Index S = h.rows();
    if (static_cast<Index>(caches.size()) != S) throw std::invalid_argument("step: one cache per stream required");
    std::vector<long> positions(static_cast<size_t>(S));
    for (Index s = 0; s < S; ++s) {
      const KVCache<T>& c = *caches[static_cast<size_t>(s)];
      if (c.length >= rope.capacity() || c.length >= c.capacity())
        throw std::length_error("step: KV cache full at " + std::to_string(c.length) +
                                " positions; enable pi, ntk or an swa window to extend the context");
      positions[static_cast<size_t>(s)] = static_cast<long>(c.length + 1);
    }
    const RopeTable<T> tab(positions, cfg.head_dim(), rope);
    const T eps = static_cast<T>(cfg.norm_eps);
    const int H = cfg.heads;
    const Index hd = cfg.head_dim(), d = cfg.d_model;
    const T sc = T(1) / std::sqrt(static_cast<T>(hd));
    Mat<T> a(S, d), q(S, d), k(S, d), v(S, d), att(S, d);
    std::vector<T> logits;
    for (size_t l = 0; l < layers.size(); ++l) {
      const auto& L = layers[l];
      rms_rows(h, L.attn_norm.value(), eps, a);
      for (Index s = 0; s < S; ++s) {
        q.row(s).noalias() = a.row(s) * L.wq.w.value();
        k.row(s).noalias() = a.row(s) * L.wk.w.value();
        v.row(s).noalias() = a.row(s) * L.wv.w.value();
      }
      apply_rope_rows(q, tab, 0, H);
      apply_rope_rows(k, tab, 0, H);
      for (Index s = 0; s < S; ++s) {
        KVCache<T>& c = *caches[static_cast<size_t>(s)];
        const Index pos = c.length;  // 0-based index of the new key
        c.k[l].row(pos) = k.row(s);
        c.v[l].row(pos) = v.row(s);
        Index first = 0;
        if (rope.swa_window > 0) first = std::max<Index>(0, pos - rope.swa_window + 1);
        const Index nk = pos - first + 1;
        logits.resize(static_cast<size_t>(nk));
        for (int hh = 0; hh < H; ++hh) {
          T mx = -std::numeric_limits<T>::infinity();
          for (Index j = 0; j < nk; ++j) {
            logits[static_cast<size_t>(j)] =
                q.row(s).segment(hh * hd, hd).dot(c.k[l].row(first + j).segment(hh * hd, hd)) * sc;
            mx = std::max(mx, logits[static_cast<size_t>(j)]);
          }
          T den = 0;
          for (Index j = 0; j < nk; ++j) {
            logits[static_cast<size_t>(j)] = std::exp(logits[static_cast<size_t>(j)] - mx);
            den += logits[static_cast<size_t>(j)];
          }
          auto o = att.row(s).segment(hh * hd, hd);
          o.setZero();
          for (Index j = 0; j < nk; ++j)
            o += (logits[static_cast<size_t>(j)] / den) * c.v[l].row(first + j).segment(hh * hd, hd);
        }
      }
      for (Index s = 0; s < S; ++s) h.row(s) += att.row(s) * L.wo.w.value();
      rms_rows(h, L.mlp_norm.value(), eps, a);
      for (Index s = 0; s < S; ++s) {
        Eigen::Matrix<T, 1, Eigen::Dynamic> g = a.row(s) * L.w1.w.value();
        Eigen::Matrix<T, 1, Eigen::Dynamic> u = a.row(s) * L.w3.w.value();
        for (Index j = 0; j < g.size(); ++j) g(j) = g(j) / (T(1) + std::exp(-g(j))) * u(j);
        h.row(s) += g * L.w2.w.value();
      }
    }
    for (auto* c : caches) ++c->length;
    Mat<T> out(S, d);
    rms_rows(h, final_norm.value(), eps, out);
    return out;
  }

 private:
  static Mat<T> embed_rows(const Mat<T>& x, const LinearLayer<T>& L) {
    Mat<T> out(x.rows(), L.w.cols());
    for (Index r = 0; r < x.rows(); ++r) out.row(r) = x.row(r) * L.w.value() + L.b.value();
    return out;
  }

  // Same arithmetic as ad::rms_norm, one row at a time.
  static void rms_rows(const Mat<T>& x, const Mat<T>& gain, T eps, Mat<T>& out) {
    const Index d = x.cols();
    for (Index r = 0; r < x.rows(); ++r) {
      const T inv = T(1) / std::sqrt(x.row(r).squaredNorm() / static_cast<T>(d) + eps);
      out.row(r) = (x.row(r) * inv).cwiseProduct(gain.row(0));
    }
  }
};

}  // namespace framegen
