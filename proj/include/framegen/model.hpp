#pragma once

// Full generator: vision aggregator -> interleaved causal backbone -> per-token
// denoising head.

#include "framegen/backbone.hpp"
#include "framegen/head.hpp"
#include "framegen/vision.hpp"

#include <map>
#include <stdexcept>
#include <string>
#include <vector>

namespace framegen {

struct ModelConfig {
  AggregatorConfig agg;
  BackboneConfig backbone;
  HeadConfig head;
  RopeConfig rope;

  // Keeps the shared dimensions consistent.
  void sync() {
    backbone.c_v = agg.out_dim;
    head.c_x = backbone.c_x;
    head.cond_dim = 2 * backbone.d_model;
  }
};

template <class T>
struct Model {
  ModelConfig cfg;
  Aggregator<T> agg;
  Backbone<T> bb;
  Head<T> head;

  Model() = default;
  Model(ModelConfig c, std::uint64_t seed) : cfg((c.sync(), c)) {
    Rng rng(seed);
    agg = Aggregator<T>(cfg.agg, rng);
    bb = Backbone<T>(cfg.backbone, rng);
    head = Head<T>(cfg.head, rng);
  }

  void visit(const ParamVisitor<T>& f) {
    agg.visit(f);
    bb.visit(f);
    head.visit(f);
  }

  std::vector<std::pair<std::string, ad::Var<T>*>> parameters() {
    std::vector<std::pair<std::string, ad::Var<T>*>> out;
    visit([&out](const std::string& n, ad::Var<T>& v, bool) { out.emplace_back(n, &v); });
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    visit([&n](const std::string&, ad::Var<T>& v, bool) { n += static_cast<std::size_t>(v.value().size()); });
    return n;
  }

  // Deep copy with fresh parameter nodes.
  Model clone() const {
    Model m(cfg, 0);
    m.copy_from(*this);
    return m;
  }

  template <class U>
  void copy_from(const Model<U>& other) {
    auto src = const_cast<Model<U>&>(other).parameters();
    auto dst = parameters();
    if (src.size() != dst.size()) throw std::invalid_argument("model copy: parameter count mismatch");
    for (size_t i = 0; i < dst.size(); ++i) {
      if (src[i].first != dst[i].first || src[i].second->value().rows() != dst[i].second->value().rows() ||
          src[i].second->value().cols() != dst[i].second->value().cols())
        throw std::invalid_argument("model copy: layout mismatch at " + dst[i].first);
      dst[i].second->mutable_value() = src[i].second->value().template cast<T>();
    }
  }

  template <class U>
  Model<U> cast() const {
    Model<U> m(cfg, 0);
    m.copy_from(*this);
    return m;
  }

  void zero_grad() {
    visit([](const std::string&, ad::Var<T>& v, bool) { v.zero_grad(); });
  }
};

}  // namespace framegen
