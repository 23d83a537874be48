#include "framegen/codec.hpp"
#include "framegen/nn.hpp"

#include <gtest/gtest.h>

using namespace framegen;

namespace {

template <class T = float>
Mat<T> gauss(Index r, Index c, Rng& rng) {
  std::normal_distribution<double> n01;
  Mat<T> m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(n01(rng));
  return m;
}

Mat<float> standard_normal_f(Index r, Index c, Rng& rng) { return gauss<float>(r, c, rng); }

Waveform random_wave(Index frames, unsigned seed, int hop = 16) {
  Rng rng(seed);
  Waveform w;
  w.samples = standard_normal_f(2, frames * hop, rng);
  return w;
}

}  // namespace

TEST(Codec, ZeroWaveformGivesZeroLatents) {
  FrameCodec codec;
  Waveform w;
  w.samples = Mat<float>::Zero(2, 5 * 16);
  EXPECT_TRUE((codec.encode(w, CodecStats::identity(32)).latents.array() == 0.0f).all());
}

TEST(Codec, RoundTrip) {
  FrameCodec codec;
  Waveform w = random_wave(12, 1);
  CodecStats s = codec.fit_stats({w});
  Waveform r = codec.decode(codec.encode(w, s), s);
  EXPECT_LT((r.samples - w.samples).cwiseAbs().maxCoeff(), 1e-6);
  AudioLatentSeq l;
  Rng rng(2);
  l.latents = standard_normal_f(7, 32, rng);
  EXPECT_LT((codec.encode(codec.decode(l, s), s).latents - l.latents).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Codec, Parseval) {
  FrameCodec codec;
  Waveform w = random_wave(20, 3);
  Mat<double> raw = codec.analyze(w);
  const double a = raw.norm(), b = w.samples.cast<double>().norm();
  EXPECT_LT(std::abs(a - b) / b, 1e-6);
}

TEST(Codec, ZeroLatentsDecodeToMean) {
  FrameCodec codec;
  CodecStats s;
  s.mean = Vec<double>::LinSpaced(32, -1.0, 1.0);
  s.scale = 2.0;
  AudioLatentSeq l;
  l.latents = Mat<float>::Zero(3, 32);
  Waveform w = codec.decode(l, s);
  Mat<double> frame = codec.synthesize_frame(s.mean);
  for (Index i = 0; i < 3; ++i)
    EXPECT_LT((w.samples.middleCols(i * 16, 16).cast<double>() - frame).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Codec, UnitCoefficientIsBasisFrame) {
  FrameCodec codec;
  for (int k : {0, 5, 16 + 3}) {
    Vec<double> e = Vec<double>::Zero(32);
    e(k) = 1.0;
    Mat<double> f = codec.synthesize_frame(e);
    EXPECT_NEAR(f.norm(), 1.0, 1e-12);
    const int ch = k / 16, kk = k % 16;
    for (int n = 0; n < 16; ++n) {
      const double a = kk == 0 ? std::sqrt(1.0 / 16) : std::sqrt(2.0 / 16);
      EXPECT_NEAR(f(ch, n), a * std::cos(std::numbers::pi * (2 * n + 1) * kk / 32.0), 1e-12);
      EXPECT_EQ(f(1 - ch, n), 0.0);
    }
  }
}

TEST(Codec, IncrementalEqualsBatch) {
  FrameCodec codec;
  Rng rng(4);
  AudioLatentSeq l;
  l.latents = standard_normal_f(240, 32, rng);
  CodecStats s;
  s.mean = Vec<double>::Constant(32, 0.1);
  s.scale = 0.7;
  Waveform batch = codec.decode(l, s);
  DecoderState st = make_decoder_state(codec, s);
  Mat<float> inc(2, 240 * 16);
  for (Index i = 0; i < 240; ++i) {
    Vec<double> x = l.latents.row(i).transpose().cast<double>();
    inc.middleCols(i * 16, 16) = decode_incremental(codec, s, x, st);
  }
  EXPECT_EQ((inc - batch.samples).cwiseAbs().maxCoeff(), 0.0f);
  EXPECT_EQ(st.frames_decoded, 240u);
}

TEST(Codec, ResumeFromSerializedState) {
  FrameCodec codec;
  Rng rng(5);
  Mat<float> lat = standard_normal_f(10, 32, rng);
  CodecStats s = CodecStats::identity(32);
  DecoderState a = make_decoder_state(codec, s);
  std::vector<Mat<float>> full;
  for (Index i = 0; i < 10; ++i) full.push_back(decode_incremental(codec, s, lat.row(i).transpose().cast<double>(), a));
  DecoderState b = make_decoder_state(codec, s);
  for (Index i = 0; i < 4; ++i) decode_incremental(codec, s, lat.row(i).transpose().cast<double>(), b);
  DecoderState c = DecoderState::deserialize(b.serialize());
  for (Index i = 4; i < 10; ++i)
    EXPECT_TRUE(decode_incremental(codec, s, lat.row(i).transpose().cast<double>(), c) == full[static_cast<size_t>(i)]);
  CodecStats other = s;
  other.scale = 2.0;
  EXPECT_THROW(decode_incremental(codec, other, lat.row(0).transpose().cast<double>(), c), std::invalid_argument);
}

TEST(Codec, RejectsRaggedWaveform) {
  FrameCodec codec;
  Waveform w;
  w.samples = Mat<float>::Zero(2, 16 * 3 + 5);
  try {
    codec.encode(w, CodecStats::identity(32));
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("multiple of the frame hop"), std::string::npos);
  }
}

TEST(CodecStats, Fit) {
  FrameCodec codec;
  Rng rng(6);
  Mat<double> a = gauss<double>(10000, 32, rng);
  CodecStats s = codec.fit_stats_raw({a});
  EXPECT_NEAR(s.scale, 0.5, 0.01);
  const double sd = std::sqrt(((a.rowwise() - s.mean.transpose()) * s.scale).squaredNorm() / (a.size()));
  EXPECT_GE(sd, 0.49);
  EXPECT_LE(sd, 0.51);
  Mat<double> clip = gauss<double>(6, 32, rng);
  CodecStats t = codec.fit_stats_raw({clip, clip, clip});
  EXPECT_LT((t.mean - clip.colwise().mean().transpose()).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_THROW(codec.fit_stats_raw({}), std::invalid_argument);
}
