#include "grad_check.hpp"

#include "framegen/model.hpp"

#include <gtest/gtest.h>

using namespace framegen;
using namespace testing_util;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.agg = AggregatorConfig{4, 4, 6, 8, 2, 10};
  c.backbone.c_x = 6;
  c.backbone.d_model = 16;
  c.backbone.depth = 2;
  c.backbone.heads = 2;
  c.head.width = 12;
  c.head.blocks = 2;
  c.head.fourier = 8;
  c.rope.n_train = 64;
  c.rope.n_target = 64;
  c.sync();
  return c;
}

template <class T>
Mat<T> randn(Index r, Index c, unsigned seed) {
  Rng rng(seed);
  return standard_normal<T>(r, c, rng);
}

// Full-sequence outputs for one stream of n frames.
template <class T>
Mat<T> full_outputs(const Backbone<T>& bb, const Mat<T>& x, const Mat<T>& v, Index len, const RopeConfig& rope) {
  ad::NoGradGuard g;
  return bb.forward_full(ad::constant<T>(x.topRows(audio_tokens_in(len))),
                         ad::constant<T>(v.topRows(vision_tokens_in(len))), 1, len, rope)
      .value();
}

}  // namespace

TEST(Backbone, StepMatchesFullSequence) {
  auto cfg = tiny_config();
  Model<double> m(cfg, 1);
  const Index n = 6, len = 2 * n + 1;
  Mat<double> x = randn<double>(n, cfg.backbone.c_x, 2), v = randn<double>(n, cfg.backbone.c_v, 3);
  Mat<double> full = full_outputs(m.bb, x, v, len, cfg.rope);
  KVCache<double> cache = m.bb.make_cache(cfg.rope);
  std::vector<KVCache<double>*> cs{&cache};
  Mat<double> step(len, cfg.backbone.d_model);
  step.row(0) = m.bb.step(m.bb.embed_bos(), cs, cfg.rope);
  for (Index i = 0; i < n; ++i) {
    step.row(2 * i + 1) = m.bb.step(m.bb.embed_vision(v.row(i)), cs, cfg.rope);
    step.row(2 * i + 2) = m.bb.step(m.bb.embed_audio(x.row(i)), cs, cfg.rope);
  }
  EXPECT_LT((full - step).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Backbone, StepMatchesFullSequenceWithWindow) {
  auto cfg = tiny_config();
  cfg.rope.swa_window = 5;
  Model<double> m(cfg, 4);
  const Index n = 5, len = 2 * n + 1;
  Mat<double> x = randn<double>(n, cfg.backbone.c_x, 5), v = randn<double>(n, cfg.backbone.c_v, 6);
  Mat<double> full = full_outputs(m.bb, x, v, len, cfg.rope);
  KVCache<double> cache = m.bb.make_cache(cfg.rope);
  std::vector<KVCache<double>*> cs{&cache};
  Mat<double> step(len, cfg.backbone.d_model);
  step.row(0) = m.bb.step(m.bb.embed_bos(), cs, cfg.rope);
  for (Index i = 0; i < n; ++i) {
    step.row(2 * i + 1) = m.bb.step(m.bb.embed_vision(v.row(i)), cs, cfg.rope);
    step.row(2 * i + 2) = m.bb.step(m.bb.embed_audio(x.row(i)), cs, cfg.rope);
  }
  EXPECT_LT((full - step).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Backbone, PrefixOutputsIgnoreLaterTokens) {
  auto cfg = tiny_config();
  Model<float> m(cfg, 7);
  const Index n = 5, len = 2 * n + 1;
  Mat<float> x = randn<float>(n, cfg.backbone.c_x, 8), v = randn<float>(n, cfg.backbone.c_v, 9);
  Mat<float> a = full_outputs(m.bb, x, v, len, cfg.rope);
  Mat<float> x2 = x, v2 = v;
  x2.row(3).setConstant(50.f);
  v2.row(4).setConstant(-50.f);
  Mat<float> b = full_outputs(m.bb, x2, v2, len, cfg.rope);
  // x_4 sits at position 9 (row 8), v_5 at position 10 (row 9).
  EXPECT_TRUE(a.topRows(8) == b.topRows(8));
  EXPECT_FALSE(a.row(8) == b.row(8));
}

TEST(Backbone, RejectsOverlength) {
  auto cfg = tiny_config();
  cfg.rope.n_train = cfg.rope.n_target = 5;
  Model<float> m(cfg, 1);
  Mat<float> x = randn<float>(3, cfg.backbone.c_x, 1), v = randn<float>(3, cfg.backbone.c_v, 2);
  EXPECT_THROW(full_outputs(m.bb, x, v, 7, cfg.rope), std::length_error);
  KVCache<float> cache = m.bb.make_cache(cfg.rope);
  std::vector<KVCache<float>*> cs{&cache};
  for (int i = 0; i < 5; ++i) m.bb.step(m.bb.embed_bos(), cs, cfg.rope);
  EXPECT_THROW(m.bb.step(m.bb.embed_bos(), cs, cfg.rope), std::length_error);
}

TEST(Backbone, NullSubstitution) {
  auto cfg = tiny_config();
  Model<double> m(cfg, 3);
  ad::Var<double> v = ad::constant<double>(randn<double>(3, cfg.backbone.c_v, 4));
  Mat<double> s = m.bb.substitute_null(v, std::vector<bool>{false, true, false}).value();
  EXPECT_TRUE(s.row(0) == v.value().row(0));
  EXPECT_TRUE(s.row(1) == m.bb.null_embedding.value().row(0));
  EXPECT_TRUE(s.row(2) == v.value().row(2));
}

TEST(Backbone, GradientCheck) {
  auto cfg = tiny_config();
  cfg.backbone.depth = 1;
  Model<double> m(cfg, 11);
  const Index n = 2, len = 2 * n + 1;
  Mat<double> x = randn<double>(2 * n, cfg.backbone.c_x, 12), v = randn<double>(2 * n, cfg.backbone.c_v, 13);
  std::vector<ad::Var<double>> params;
  m.bb.visit([&](const std::string&, ad::Var<double>& p, bool) { params.push_back(p); });
  auto f = [&] {
    return project(m.bb.forward_full(ad::constant<double>(x), ad::constant<double>(v), 2, len, cfg.rope));
  };
  EXPECT_LT(grad_check(params, f), 1e-5);
}

TEST(Head, ZeroInitOutputIsSkipPath) {
  auto cfg = tiny_config();
  Model<double> m(cfg, 2);
  Mat<double> x = randn<double>(4, cfg.head.c_x, 3);
  Vec<double> t(4);
  t << 0.1, 1.0, 10.0, 0.0;
  ad::Var<double> zc = m.head.condition(ad::constant<double>(randn<double>(4, cfg.head.cond_dim, 4)));
  Mat<double> d = m.head.denoise(x, t, zc).value();
  for (Index r = 0; r < 4; ++r) EXPECT_LT((d.row(r) - precondition(t(r)).c_skip * x.row(r)).norm(), 1e-14);
}

TEST(Head, GradientCheck) {
  auto cfg = tiny_config();
  Model<double> m(cfg, 5);
  // Move off the zero init so every path carries gradient.
  Rng rng(6);
  m.head.visit([&](const std::string&, ad::Var<double>& p, bool) {
    p.mutable_value() += 0.2 * standard_normal<double>(p.rows(), p.cols(), rng);
  });
  std::vector<ad::Var<double>> params;
  m.head.visit([&](const std::string&, ad::Var<double>& p, bool) { params.push_back(p); });
  Mat<double> x = randn<double>(3, cfg.head.c_x, 7);
  Mat<double> z = randn<double>(3, cfg.head.cond_dim, 8);
  Vec<double> t(3);
  t << 0.05, 0.7, 20.0;
  auto f = [&] {
    ad::Var<double> d = m.head.denoise(x, t, m.head.condition(ad::constant<double>(z)));
    return ad::add(project(d), project(m.head.uncertainty(t), 3));
  };
  EXPECT_LT(grad_check(params, f), 1e-5);
}

TEST(Model, CloneAndCastCopyValues) {
  auto cfg = tiny_config();
  Model<float> m(cfg, 9);
  Model<float> c = m.clone();
  Model<double> d = m.cast<double>();
  auto pm = m.parameters(), pc = c.parameters();
  auto pd = d.parameters();
  ASSERT_EQ(pm.size(), pc.size());
  for (size_t i = 0; i < pm.size(); ++i) {
    EXPECT_TRUE(pm[i].second->value() == pc[i].second->value());
    EXPECT_NE(pm[i].second->node().get(), pc[i].second->node().get());
    EXPECT_TRUE(pm[i].second->value().cast<double>() == pd[i].second->value());
  }
}
