#include "framegen/metrics.hpp"

#include <gtest/gtest.h>

#include <numbers>

using namespace framegen;

namespace {

Mat<double> gaussian(Index n, Index d, double mu, double sd, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> g(mu, sd);
  Mat<double> m(n, d);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = g(rng);
  return m;
}

Vec<double> impulse_train(Index n, int period, int stretch = 1) {
  Vec<double> s = Vec<double>::Zero(n);
  for (Index i = 0; i < n; i += period * stretch) s(i) = 1.0;
  return s;
}

// One pattern at a fixed position with events every `period` frames.
RenderedClip periodic_clip(std::uint64_t seed, double position, int period, Index n) {
  SceneSpec s;
  s.seed = seed;
  s.n_frames = static_cast<int>(n);
  Emitter e;
  e.pattern_id = 1;
  e.position = position;
  e.period = period;
  s.emitters.push_back(e);
  return render(s, ToyProcess{});
}

}  // namespace

TEST(Oracle, NoiselessNoEventsDecays) {
  ToyProcess toy;
  toy.sigma_n = 0.0;
  Rng rng(1);
  Vec<double> prev = Vec<double>::LinSpaced(toy.latent_dim(), -1.0, 1.0);
  Vec<double> x = oracle_sample(toy, prev, {}, rng);
  EXPECT_TRUE(x == (toy.beta * prev).eval());
}

TEST(Oracle, NllAtMode) {
  ToyProcess toy;
  Vec<double> prev = Vec<double>::Constant(toy.latent_dim(), 0.3);
  std::vector<ActiveEvent> ev{{0, 0.2}};
  const double want = 0.5 * toy.latent_dim() * std::log(2.0 * std::numbers::pi * toy.sigma_n * toy.sigma_n);
  EXPECT_NEAR(oracle_nll(toy, toy.conditional_mean(prev, ev), prev, ev), want, 1e-12);
}

TEST(Oracle, MonteCarloMean) {
  ToyProcess toy;
  Rng rng(2);
  Vec<double> prev = Vec<double>::LinSpaced(toy.latent_dim(), -0.5, 0.5);
  std::vector<ActiveEvent> ev{{2, 0.7}};
  Vec<double> acc = Vec<double>::Zero(toy.latent_dim());
  for (int i = 0; i < 10000; ++i) acc += oracle_sample(toy, prev, ev, rng);
  acc /= 10000.0;
  EXPECT_LT((acc - toy.conditional_mean(prev, ev)).cwiseAbs().maxCoeff(), 3.0 * toy.sigma_n / 100.0);
}

TEST(MMD, IdenticalSets) {
  Mat<double> a = gaussian(40, 3, 0.0, 1.0, 3);
  EXPECT_NEAR(rbf_mmd_biased(a, a, 1.0), 0.0, 1e-14);
  EXPECT_LE(rbf_mmd(a, a, 1.0), 1e-14);
}

TEST(MMD, MatchesPairwiseSum) {
  Mat<double> a(3, 1), b(3, 1);
  a << 0.0, 1.0, 3.0;
  b << 0.5, 2.0, -1.0;
  EXPECT_NEAR(rbf_mmd(a, b, 1.5), -0.300200237368099, 1e-14);
  EXPECT_NEAR(rbf_mmd_biased(a, b, 1.5), 0.06695736492940241, 1e-14);
}

TEST(MMD, DetectsShift) {
  Mat<double> a = gaussian(500, 1, 0.0, 1.0, 4), b = gaussian(500, 1, 3.0, 1.0, 5);
  Rng rng(6);
  MMDTest t = mmd_permutation_test(a, b, 200, rng);
  EXPECT_GT(t.mmd2, t.null_q95);
  EXPECT_LT(t.p_value, 0.01);
}

TEST(MMD, NullIsCalibrated) {
  Mat<double> a = gaussian(200, 2, 0.0, 1.0, 7), b = gaussian(200, 2, 0.0, 1.0, 8);
  Rng rng(9);
  MMDTest t = mmd_permutation_test(a, b, 200, rng);
  EXPECT_GT(t.p_value, 0.05);
  EXPECT_LT(std::abs(t.mmd2), 0.02);
}

TEST(MMD, RejectsTinySets) {
  Mat<double> a(1, 2), b(4, 2);
  a.setZero();
  b.setZero();
  EXPECT_THROW(rbf_mmd(a, b), std::invalid_argument);
  EXPECT_THROW(rbf_mmd(Mat<double>(0, 2), b), std::invalid_argument);
}

TEST(MMD, MonotoneInShift) {
  Mat<double> a = gaussian(300, 2, 0.0, 1.0, 10);
  double last = -1.0;
  for (double s : {0.25, 0.5, 1.0, 2.0}) {
    Mat<double> b = gaussian(300, 2, s, 1.0, 11);
    const double m = rbf_mmd(a, b, 1.0);
    EXPECT_GT(m, last);
    last = m;
  }
}

TEST(Frechet, IdenticalIsZero) {
  Mat<double> a = gaussian(100, 4, 0.0, 1.0, 12);
  EXPECT_NEAR(frechet_gaussian(a, a).distance, 0.0, 1e-10);
}

TEST(Frechet, OneDimensionalClosedForm) {
  Mat<double> sa(1, 1), sb(1, 1);
  sa << 1.0;
  sb << 1.0;
  Vec<double> ma(1), mb(1);
  ma << 0.0;
  mb << 1.0;
  EXPECT_NEAR(frechet_from_moments(ma, sa, mb, sb).distance, 1.0, 1e-12);
}

TEST(Frechet, DiagonalCovariances) {
  Vec<double> ma(3), mb(3), da(3), db(3);
  ma << 0.1, -0.2, 0.3;
  mb << 0.0, 0.5, -0.1;
  da << 1.0, 4.0, 0.25;
  db << 2.0, 1.0, 0.5;
  double want = (ma - mb).squaredNorm() + (da.cwiseSqrt() - db.cwiseSqrt()).squaredNorm();
  Mat<double> sa = da.asDiagonal(), sb = db.asDiagonal();
  EXPECT_NEAR(frechet_from_moments(ma, sa, mb, sb).distance, want, 1e-12);
}

TEST(Frechet, ClampsIndefiniteCovariance) {
  Mat<double> s = Mat<double>::Identity(2, 2);
  s(1, 1) = -0.5;
  Vec<double> m = Vec<double>::Zero(2);
  FrechetResult r = frechet_from_moments(m, s, m, Mat<double>::Identity(2, 2));
  EXPECT_TRUE(r.clamped);
  EXPECT_GE(r.distance, 0.0);
}

TEST(Period, ImpulseTrain) {
  EXPECT_NEAR(period_estimate(impulse_train(100, 10)).period, 10.0, 0.1);
  EXPECT_NEAR(period_estimate(impulse_train(200, 10, 2)).period, 20.0, 0.2);
}

TEST(Period, NoisyImpulseTrain) {
  // 10 dB: noise power is a tenth of the train's mean power 1 / P.
  const int P = 10;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Vec<double> s = impulse_train(120, P);
    Mat<double> n = gaussian(120, 1, 0.0, std::sqrt(0.1 / P), 100 + seed);
    PeriodEstimate e = period_estimate(s + n.col(0));
    ASSERT_TRUE(e.valid);
    EXPECT_NEAR(e.period, P, 0.05 * P) << seed;
  }
}

TEST(Period, FlatSignalIsFlagged) {
  EXPECT_FALSE(period_estimate(Vec<double>::Constant(50, 2.0)).valid);
}

TEST(Period, OracleLatents) {
  RenderedClip c = periodic_clip(13, 0.4, 6, 64);
  EXPECT_NEAR(latent_period(c.latents, 0.9).period, 6.0, 0.3);
}

TEST(EventLag, OracleAndDelayed) {
  ToyProcess toy;
  RenderedClip c = periodic_clip(14, 0.3, 5, 60);
  EXPECT_EQ(event_lag(toy, c.latents, c.events), 0);
  Mat<double> late = Mat<double>::Zero(c.latents.rows(), c.latents.cols());
  late.bottomRows(c.latents.rows() - 2) = c.latents.topRows(c.latents.rows() - 2);
  EXPECT_EQ(event_lag(toy, late, c.events), 2);
}

TEST(EventLag, RejectsMissingEvents) {
  ToyProcess toy;
  RenderedClip c = periodic_clip(15, 0.3, 5, 20);
  c.events.e.setZero();
  EXPECT_THROW(event_lag(toy, c.latents, c.events), std::invalid_argument);
}

TEST(Pan, OracleHardPan) {
  ToyProcess toy;
  for (double p : {0.0, 1.0}) {
    RenderedClip c = periodic_clip(16, p, 4, 64);
    PanEstimate e = pan_estimate(toy, {{&c.latents, &c.events}}, 0);
    const double ratio = p == 0.0 ? e.energy_ratio() : 1.0 / e.energy_ratio();
    EXPECT_LE(ratio, 0.05);
    EXPECT_NEAR(e.asymmetry(), 1.0 - 2.0 * p, 0.05);
  }
}

TEST(ConditionalMatch, OracleSamplesPass) {
  ToyProcess toy;
  Rng rng(17);
  std::vector<ContextSamples> ctx;
  for (int c = 0; c < 100; ++c) {
    Vec<double> prev = gaussian(toy.latent_dim(), 1, 0.0, 0.5, 200 + c).col(0);
    std::vector<ActiveEvent> ev;
    if (c % 3 == 0) ev.push_back({c % toy.n_patterns, 0.1 * (c % 10)});
    ContextSamples s;
    s.oracle_mean = toy.conditional_mean(prev, ev);
    s.samples.resize(256, toy.latent_dim());
    for (Index i = 0; i < 256; ++i) s.samples.row(i) = oracle_sample(toy, prev, ev, rng).transpose();
    ctx.push_back(std::move(s));
  }
  ConditionalMatch m = conditional_match(ctx, toy.sigma_n);
  EXPECT_LT(m.max_mean_error, 0.1);
  EXPECT_LT(m.cov_rel_error, 0.2);
  // A constant offset of 0.2 sigma_n is detected.
  for (auto& s : ctx) s.samples.array() += 0.2 * toy.sigma_n;
  EXPECT_GT(conditional_match(ctx, toy.sigma_n).max_mean_error, 0.15);
}
