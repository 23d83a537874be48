#include "framegen/bench.hpp"

#include <gtest/gtest.h>

using namespace framegen;

TEST(Latency, BusyWaitStub) {
  BusyWaitWorkload w(6, 2.0, 0.5);
  LatencyReport r = measure_latency(w, 5);
  EXPECT_NEAR(r.token.mean, 2.0, 0.25);
  EXPECT_NEAR(r.waveform.mean, 2.5, 0.25);
  for (size_t c = 0; c < r.clip_token_means.size(); ++c) EXPECT_GE(r.clip_waveform_means[c], r.clip_token_means[c]);
}

TEST(Latency, ExcludesWarmupAndFirstFrame) {
  BusyWaitWorkload w(5, 0.0);
  LatencyReport r = measure_latency(w, 7);
  EXPECT_EQ(r.measured_clips, 4);
  EXPECT_EQ(r.measured_frames, 4 * 4);
  EXPECT_EQ(r.frames.size(), 7u * 5u);
  long counted = 0;
  for (const auto& f : r.frames) {
    counted += f.counted;
    if (f.clip < 3 || f.frame == 0) EXPECT_FALSE(f.counted);
  }
  EXPECT_EQ(counted, 16);
}

TEST(Latency, RejectsTooFewClips) {
  BusyWaitWorkload w(4, 0.0);
  EXPECT_THROW(measure_latency(w, 3), std::invalid_argument);
  EXPECT_NO_THROW(measure_latency(w, 4));
}

TEST(Latency, CsvHasOneRowPerFrame) {
  BusyWaitWorkload w(3, 0.0);
  LatencyReport r = measure_latency(w, 4);
  std::ostringstream os;
  r.write_csv(os);
  const std::string s = os.str();
  EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 1 + 12);
}
