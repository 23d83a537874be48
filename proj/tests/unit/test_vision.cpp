#include "framegen/dataset.hpp"
#include "framegen/head.hpp"

#include <gtest/gtest.h>

using namespace framegen;

namespace {

SceneSpec one_emitter(double rate, int period = 0, std::uint64_t seed = 3) {
  SceneSpec s;
  s.seed = seed;
  s.n_frames = 40;
  Emitter e;
  e.pattern_id = 0;
  e.position = 0.3;
  e.rate = rate;
  e.period = period;
  e.phase = period ? 2 : 0;
  s.emitters.push_back(e);
  return s;
}

Frame noise_frame(unsigned seed) {
  Rng rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Frame f(64, 64);
  for (auto& v : f.rgb) v = u(rng);
  return f;
}

}  // namespace

TEST(Render, Deterministic) {
  DataConfig dc;
  SceneSpec s = random_scene(9, dc);
  RenderedClip a = render(s, dc.toy), b = render(s, dc.toy);
  for (size_t i = 0; i < a.frames.size(); ++i) EXPECT_TRUE(a.frames[i].rgb == b.frames[i].rgb);
  EXPECT_TRUE(a.latents == b.latents);
}

TEST(Render, SilentEmitterIsDark) {
  RenderedClip c = render(one_emitter(0.0), ToyProcess{});
  EXPECT_EQ(c.events.e.cast<int>().sum(), 0);
  for (const auto& f : c.frames)
    for (float v : f.rgb) EXPECT_EQ(v, 0.0f);
}

TEST(Render, PeriodicEventsSpacedByPeriod) {
  RenderedClip c = render(one_emitter(0.0, 7), ToyProcess{});
  std::vector<Index> on;
  for (Index i = 0; i < c.events.e.rows(); ++i)
    if (c.events.e(i, 0)) on.push_back(i);
  ASSERT_GE(on.size(), 4u);
  EXPECT_EQ(on.front(), 2);
  for (size_t k = 1; k < on.size(); ++k) EXPECT_EQ(on[k] - on[k - 1], 7);
}

TEST(Render, RejectsEmptyScene) {
  SceneSpec s;
  EXPECT_THROW(render(s, ToyProcess{}), std::invalid_argument);
}

TEST(Grid, ConstantGray) {
  Frame f(64, 64);
  std::fill(f.rgb.begin(), f.rgb.end(), 0.4f);
  GridFeatures g = extract_grid(f);
  for (Index r = 0; r < g.rows(); ++r) {
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(g(r, c), 0.4, 1e-7);
    for (int c = 3; c < 6; ++c) EXPECT_NEAR(g(r, c), 0.0, 1e-6);
    EXPECT_EQ(g(r, 10), 0.0);
    EXPECT_EQ(g(r, 11), 0.0);
  }
}

TEST(Grid, HorizontalMirror) {
  Frame f = noise_frame(1), m(64, 64);
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x)
      for (int c = 0; c < 3; ++c) m.at(y, x, c) = f.at(y, 63 - x, c);
  GridConfig gc;
  GridFeatures a = extract_grid(f, gc), b = extract_grid(m, gc);
  const int swap[12] = {0, 1, 2, 3, 4, 5, 7, 6, 9, 8, 10, 11};
  for (int r = 0; r < gc.grid_h; ++r)
    for (int c = 0; c < gc.grid_w; ++c)
      for (int ch = 0; ch < 12; ++ch)
        EXPECT_NEAR(a(r * gc.grid_w + c, ch), b(r * gc.grid_w + (gc.grid_w - 1 - c), swap[ch]), 1e-9);
}

TEST(Grid, PatchLocality) {
  Frame f = noise_frame(2), g = f;
  for (int y = 24; y < 32; ++y)
    for (int x = 24; x < 32; ++x) g.at(y, x, 1) = 1.0f - g.at(y, x, 1);
  GridFeatures a = extract_grid(f), b = extract_grid(g);
  for (Index p = 0; p < a.rows(); ++p) {
    if (p == 3 * 8 + 3) EXPECT_GT((a.row(p) - b.row(p)).cwiseAbs().maxCoeff(), 0.0);
    else EXPECT_TRUE(a.row(p) == b.row(p));
  }
}

TEST(Grid, RejectsIndivisibleResolution) {
  Frame f(60, 64);
  EXPECT_THROW(extract_grid(f), std::invalid_argument);
}

TEST(PCA, IsotropicHalf) {
  Rng rng(3);
  Mat<double> x = standard_normal<double>(20000, 12, rng);
  EXPECT_EQ(fit_pca(x, 0.5).components(), 6);
}

TEST(PCA, RankOne) {
  Rng rng(4);
  Vec<double> dir = standard_normal<double>(12, 1, rng).col(0);
  Vec<double> a = standard_normal<double>(200, 1, rng).col(0);
  Mat<double> x = a * dir.transpose();
  for (double cev : {0.3, 0.9, 1.0}) EXPECT_EQ(fit_pca(x, cev).components(), 1);
}

TEST(PCA, ReconstructionError) {
  Rng rng(5);
  Vec<double> sd(12);
  sd << 3, 2.5, 2, 1.5, 1.2, 1, 0.8, 0.6, 0.5, 0.4, 0.3, 0.2;
  Mat<double> x = standard_normal<double>(5000, 12, rng) * sd.asDiagonal();
  for (double cev : {0.5, 0.7, 0.9}) {
    PCAProjector p = fit_pca(x, cev);
    Mat<double> c = x.rowwise() - p.mean.transpose();
    const double rel = (p.lift(p.project(x)) - x).squaredNorm() / c.squaredNorm();
    EXPECT_LE(rel, 1.0 - cev + 0.05);
    EXPECT_GE(p.cev, cev);
  }
}

TEST(Condition, StaticSceneAndFirstFrame) {
  Rng rng(6);
  Mat<double> g = standard_normal<double>(64, 3, rng);
  Mat<double> first = condition_features(g, std::nullopt), same = condition_features(g, g);
  EXPECT_TRUE((first.rightCols(3).array() == 0.0).all());
  EXPECT_TRUE((same.rightCols(3).array() == 0.0).all());
  EXPECT_THROW(condition_features(g, Mat<double>(g.leftCols(2))), std::invalid_argument);
}

TEST(Condition, FlashDifferenceFlipsSign) {
  DataConfig dc;
  SceneSpec s = one_emitter(0.0, 5);
  s.n_frames = 12;
  RenderedClip c = render(s, dc.toy);
  PCAProjector p;
  p.mean = Vec<double>::Zero(12);
  p.basis = Mat<double>::Identity(12, 12);
  auto feats = clip_condition_features(c.frames, dc.grid, p);
  const Index on = 2;  // phase
  ASSERT_TRUE(c.events.e(on, 0));
  Mat<double> d_on = feats[on].rightCols(12), d_off = feats[on + 1].rightCols(12);
  EXPECT_GT(d_on.cwiseAbs().maxCoeff(), 0.0);
  EXPECT_TRUE((d_on + d_off).cwiseAbs().maxCoeff() < 1e-12);
  for (Index r = 0; r < d_on.rows(); ++r)
    if (d_on.row(r).cwiseAbs().maxCoeff() > 0.0) EXPECT_GT(feats[on].row(r).head(3).maxCoeff(), 0.0);
}

TEST(Aggregator, PermutationOfTokensWithPositions) {
  AggregatorConfig ac{4, 4, 3, 8, 2, 5};
  Rng rng(7);
  Aggregator<double> agg(ac, rng);
  Mat<double> tok = standard_normal<double>(ac.tokens(), 4 * ac.in_channels, rng);
  std::vector<Index> perm{2, 0, 3, 1}, id{0, 1, 2, 3};
  Mat<double> ptok(tok.rows(), tok.cols());
  for (Index j = 0; j < 4; ++j) ptok.row(j) = tok.row(perm[static_cast<size_t>(j)]);
  Mat<double> a = agg.forward(tok, id).value(), b = agg.forward(ptok, perm).value();
  EXPECT_LT((a - b).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(Aggregator, VisionTokenDependsOnCurrentAndPreviousFrame) {
  DataConfig dc;
  dc.clips = 20;
  dc.frames = 8;
  Dataset ds = generate_dataset(dc);
  SceneSpec s = random_scene(42, dc);
  RenderedClip c = render(s, dc.toy);
  std::vector<Frame> other = c.frames;
  other[5] = noise_frame(8);
  AggregatorConfig ac = ds.aggregator_geometry();
  Rng rng(9);
  Aggregator<double> agg(ac, rng);
  Mat<double> va = agg.forward(clip_tokens(c.frames, dc.grid, ds.pca).cast<double>()).value();
  Mat<double> vb = agg.forward(clip_tokens(other, dc.grid, ds.pca).cast<double>()).value();
  EXPECT_TRUE(va.topRows(5) == vb.topRows(5));
  EXPECT_FALSE(va.row(5) == vb.row(5));
  EXPECT_FALSE(va.row(6) == vb.row(6));
  EXPECT_TRUE(va.bottomRows(1) == vb.bottomRows(1));
}

TEST(Dataset, DeterministicAndStratified) {
  DataConfig dc;
  dc.clips = 40;
  dc.frames = 6;
  Dataset a = generate_dataset(dc), b = generate_dataset(dc);
  for (size_t i = 0; i < a.clips.size(); ++i) {
    EXPECT_TRUE(a.clips[i].latents == b.clips[i].latents);
    EXPECT_TRUE(a.clips[i].tokens == b.clips[i].tokens);
  }
  for (const std::string fam : {"random", "periodic"}) {
    const double tr = static_cast<double>(a.select("train", fam).size());
    const double te = static_cast<double>(a.select("test", fam).size());
    EXPECT_NEAR(te / (tr + te), dc.test_fraction, 0.5 / (tr + te) + 1e-12) << fam;
  }
  dc.clips = 0;
  EXPECT_THROW(generate_dataset(dc), std::invalid_argument);
}

TEST(Dataset, StandardizedTrainStd) {
  DataConfig dc;
  dc.clips = 80;
  dc.frames = 32;
  Dataset ds = generate_dataset(dc);
  double ss = 0.0;
  Index n = 0;
  for (const auto& t : ds.tensors("train")) {
    ss += t.latents.cast<double>().squaredNorm();
    n += t.latents.size();
  }
  EXPECT_NEAR(std::sqrt(ss / static_cast<double>(n)), kSigmaData, 0.01);
}
