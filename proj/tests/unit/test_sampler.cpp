#include "framegen/sampler.hpp"

#include <gtest/gtest.h>

using namespace framegen;

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
  c.rope.n_train = 24;
  c.rope.n_target = 24;
  c.sync();
  return c;
}

// Zero-initialised output layers make the head trivial; jitter everything.
Model<double> jittered(std::uint64_t seed) {
  Model<double> m(tiny_config(), seed);
  Rng rng(seed + 100);
  m.visit([&rng](const std::string&, ad::Var<double>& v, bool) {
    v.mutable_value() += 0.2 * standard_normal<double>(v.rows(), v.cols(), rng);
  });
  return m;
}

Mat<double> clip_tokens_random(Index frames, const ModelConfig& c, unsigned seed) {
  Rng rng(seed);
  return standard_normal<double>(frames * c.agg.tokens(), 4 * c.agg.in_channels, rng);
}

Mat<double> run(const Model<double>& m, const SamplerConfig& sc, const std::vector<Mat<double>>& tokens,
                std::vector<long>* nfe = nullptr) {
  std::vector<std::uint64_t> seeds;
  for (size_t b = 0; b < tokens.size(); ++b) seeds.push_back(7 + b);
  GenerationBatch<double> g(m, sc, m.cfg.rope, seeds);
  const Index per = m.cfg.agg.tokens(), n = tokens.front().rows() / per;
  const Index B = static_cast<Index>(tokens.size());
  Mat<double> out(B * n, m.cfg.backbone.c_x);
  Mat<double> block(B * per, tokens.front().cols());
  for (Index i = 0; i < n; ++i) {
    for (Index b = 0; b < B; ++b) block.middleRows(b * per, per) = tokens[static_cast<size_t>(b)].middleRows(i * per, per);
    Mat<double> x = g.step(block);
    for (Index b = 0; b < B; ++b) out.row(b * n + i) = x.row(b);
    if (nfe) nfe->push_back(g.last_nfe());
  }
  return out;
}

}  // namespace

TEST(Sampler, UnitGuidanceMatchesConditionalStream) {
  auto m = jittered(1);
  std::vector<Mat<double>> tok{clip_tokens_random(8, m.cfg, 2), clip_tokens_random(8, m.cfg, 3)};
  for (auto mode : {HeadMode::diffusion, HeadMode::ect}) {
    SamplerConfig guided, single;
    guided.mode = single.mode = mode;
    guided.heun_steps = single.heun_steps = 4;
    guided.omega = 1.0;
    single.null_stream = false;
    Mat<double> a = run(m, guided, tok), b = run(m, single, tok);
    EXPECT_TRUE(a == b) << to_string(mode);
  }
}

TEST(Sampler, ZeroGuidanceIgnoresVision) {
  auto m = jittered(2);
  SamplerConfig sc;
  sc.heun_steps = 4;
  sc.omega = 0.0;
  Mat<double> a = run(m, sc, {clip_tokens_random(8, m.cfg, 4)});
  Mat<double> b = run(m, sc, {clip_tokens_random(8, m.cfg, 5)});
  EXPECT_TRUE(a == b);
  // Taking the audio positions from the conditional stream leaks vision.
  sc.guide_audio_positions = false;
  a = run(m, sc, {clip_tokens_random(8, m.cfg, 4)});
  b = run(m, sc, {clip_tokens_random(8, m.cfg, 5)});
  EXPECT_FALSE(a == b);
}

TEST(Sampler, OutputsAreCausalInVision) {
  auto m = jittered(3);
  SamplerConfig sc;
  sc.heun_steps = 3;
  Mat<double> t1 = clip_tokens_random(8, m.cfg, 6), t2 = t1;
  const Index per = m.cfg.agg.tokens(), k = 5;
  t2.bottomRows((8 - k) * per).setRandom();
  Mat<double> a = run(m, sc, {t1}), b = run(m, sc, {t2});
  EXPECT_TRUE(a.topRows(k) == b.topRows(k));
  EXPECT_FALSE(a.row(k) == b.row(k));
}

TEST(Sampler, SessionsAreIndependentOfBatchMates) {
  auto m = jittered(4);
  SamplerConfig sc;
  sc.heun_steps = 4;
  Mat<double> t0 = clip_tokens_random(6, m.cfg, 8);
  Mat<double> solo = run(m, sc, {t0});
  Mat<double> pair = run(m, sc, {t0, clip_tokens_random(6, m.cfg, 9)});
  EXPECT_LT((solo - pair.topRows(6)).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Sampler, EvaluationCounts) {
  auto m = jittered(5);
  std::vector<Mat<double>> tok{clip_tokens_random(3, m.cfg, 10)};
  SamplerConfig sc;
  std::vector<long> nfe;
  run(m, sc, tok, &nfe);
  for (long n : nfe) EXPECT_EQ(n, 59);
  EXPECT_EQ(sc.nfe(), 59);
  sc.mode = HeadMode::ect;
  for (int k : {1, 2, 4}) {
    sc.cm_ts = cm_schedule(k);
    nfe.clear();
    run(m, sc, tok, &nfe);
    for (long n : nfe) EXPECT_EQ(n, k);
    EXPECT_EQ(sc.nfe(), k);
  }
  sc.head_cfg = true;
  nfe.clear();
  run(m, sc, tok, &nfe);
  for (long n : nfe) EXPECT_EQ(n, 8);
}

TEST(Sampler, HeadGuidanceRequiresFlag) {
  Mat<double> a = Mat<double>::Zero(1, 4), b = a, c = a;
  SamplerConfig sc;
  EXPECT_THROW(head_cfg_conditions<double>(a, b, c, sc), std::invalid_argument);
  sc.head_cfg = true;
  auto [zc, zu] = head_cfg_conditions<double>(a, b, c, sc);
  EXPECT_EQ(zc.cols(), 8);
  sc.null_stream = false;
  EXPECT_THROW(sc.validate(), std::invalid_argument);
}

TEST(Sampler, RejectsBadSchedules) {
  SamplerConfig sc;
  sc.heun_steps = 1;
  EXPECT_THROW(sc.validate(), std::invalid_argument);
  sc = SamplerConfig{};
  sc.mode = HeadMode::ect;
  sc.cm_ts = {1.0, 2.0};
  EXPECT_THROW(sc.validate(), std::invalid_argument);
  sc.cm_ts = {90.0};
  EXPECT_THROW(sc.validate(), std::invalid_argument);
}

TEST(Sampler, RejectsOverlongGeneration) {
  auto m = jittered(6);
  SamplerConfig sc;
  sc.heun_steps = 2;
  GenerationBatch<double> g(m, sc, m.cfg.rope, {1});
  Mat<double> tok = clip_tokens_random(1, m.cfg, 11);
  for (int i = 0; i < 12; ++i) g.step(tok);  // 24 positions
  EXPECT_THROW(g.step(tok), std::length_error);
  // A sliding window lifts the limit.
  RopeConfig r = m.cfg.rope;
  r.swa_window = 8;
  r.n_target = 40;
  GenerationBatch<double> w(m, sc, r, {1});
  for (int i = 0; i < 20; ++i) EXPECT_NO_THROW(w.step(tok));
}
