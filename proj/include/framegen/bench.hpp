#pragma once

// Per-frame latency harness. Token-level time covers vision encoding through
// head sampling of one frame; waveform-level time additionally covers the
// incremental decode. Statistics run over per-clip means after a warm-up,
// excluding each clip's first frame.

#include "framegen/sampler.hpp"

#include <chrono>
#include <cmath>
#include <memory>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace framegen {

// Work driven by the harness. flush() is the barrier placed around timed
// regions; synchronous CPU code has nothing to flush.
class FrameWorkload {
 public:
  virtual ~FrameWorkload() = default;
  virtual Index frames(size_t clip) const = 0;
  virtual void begin_clip(size_t clip) = 0;  // untimed setup
  virtual void token_step(Index frame) = 0;
  virtual void decode_step(Index frame) = 0;
  virtual void flush() {}
};

struct MeanStd {
  double mean = 0.0, std = 0.0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
  MeanStd r;
  if (v.empty()) return r;
  for (double x : v) r.mean += x;
  r.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double s = 0.0;
    for (double x : v) s += (x - r.mean) * (x - r.mean);
    r.std = std::sqrt(s / static_cast<double>(v.size() - 1));
  }
  return r;
}

struct FrameLatency {
  size_t clip = 0;
  Index frame = 0;
  double token_ms = 0.0, waveform_ms = 0.0;
  bool counted = false;
};

struct LatencyReport {
  MeanStd token, waveform;
  std::vector<double> clip_token_means, clip_waveform_means;
  std::vector<FrameLatency> frames;
  long nfe = 0;
  std::string config_hash;
  int warmup_clips = 0;
  int measured_clips = 0;
  long measured_frames = 0;
  bool coarse_clock = false;

  std::string json() const {
    std::ostringstream os;
    os << "{\"token_ms\":{\"mean\":" << token.mean << ",\"std\":" << token.std << "},\"waveform_ms\":{\"mean\":"
       << waveform.mean << ",\"std\":" << waveform.std << "},\"nfe\":" << nfe << ",\"clips\":" << measured_clips
       << ",\"warmup_clips\":" << warmup_clips << ",\"frames\":" << measured_frames << ",\"coarse_clock\":"
       << (coarse_clock ? "true" : "false") << ",\"config_hash\":\"" << config_hash << "\",\"clip_token_means\":[";
    for (size_t i = 0; i < clip_token_means.size(); ++i) os << (i ? "," : "") << clip_token_means[i];
    os << "]}";
    return os.str();
  }

  void write_csv(std::ostream& os) const {
    os << "clip,frame,token_ms,waveform_ms,counted\n";
    for (const auto& f : frames)
      os << f.clip << ',' << f.frame << ',' << f.token_ms << ',' << f.waveform_ms << ',' << (f.counted ? 1 : 0) << '\n';
  }
};

inline bool clock_is_coarse() {
  using clk = std::chrono::steady_clock;
  return static_cast<double>(clk::period::num) / clk::period::den > 1e-4;
}

inline LatencyReport measure_latency(FrameWorkload& w, size_t clips, int warmup = 3) {
  if (warmup < 0) throw std::invalid_argument("latency: negative warm-up");
  if (clips < static_cast<size_t>(warmup) + 1)
    throw std::invalid_argument("latency: need at least " + std::to_string(warmup + 1) + " clips (" +
                                std::to_string(warmup) + " warm-up + 1 measured), got " + std::to_string(clips));
  using clk = std::chrono::steady_clock;
  LatencyReport r;
  r.warmup_clips = warmup;
  r.coarse_clock = clock_is_coarse();
  for (size_t c = 0; c < clips; ++c) {
    const Index n = w.frames(c);
    w.begin_clip(c);
    double tok = 0.0, wav = 0.0;
    long counted = 0;
    for (Index i = 0; i < n; ++i) {
      w.flush();
      const auto t0 = clk::now();
      w.token_step(i);
      w.flush();
      const auto t1 = clk::now();
      w.decode_step(i);
      w.flush();
      const auto t2 = clk::now();
      FrameLatency f{c, i, std::chrono::duration<double, std::milli>(t1 - t0).count(),
                     std::chrono::duration<double, std::milli>(t2 - t0).count(), false};
      if (c >= static_cast<size_t>(warmup) && i > 0) {
        f.counted = true;
        tok += f.token_ms;
        wav += f.waveform_ms;
        ++counted;
      }
      r.frames.push_back(f);
    }
    if (c < static_cast<size_t>(warmup)) continue;
    if (counted == 0) throw std::invalid_argument("latency: measured clips need at least two frames");
    r.clip_token_means.push_back(tok / static_cast<double>(counted));
    r.clip_waveform_means.push_back(wav / static_cast<double>(counted));
    r.measured_frames += counted;
  }
  r.measured_clips = static_cast<int>(r.clip_token_means.size());
  r.token = mean_std(r.clip_token_means);
  r.waveform = mean_std(r.clip_waveform_means);
  return r;
}

// Spins for a fixed wall time per token step; decode is free.
class BusyWaitWorkload : public FrameWorkload {
 public:
  BusyWaitWorkload(Index frames, double token_ms, double decode_ms = 0.0)
      : frames_(frames), token_ms_(token_ms), decode_ms_(decode_ms) {}
  Index frames(size_t) const override { return frames_; }
  void begin_clip(size_t) override {}
  void token_step(Index) override { spin(token_ms_); }
  void decode_step(Index) override { spin(decode_ms_); }

 private:
  static void spin(double ms) {
    using clk = std::chrono::steady_clock;
    const auto end = clk::now() + std::chrono::duration<double, std::milli>(ms);
    while (clk::now() < end) {
    }
  }
  Index frames_;
  double token_ms_, decode_ms_;
};

// Online generation over rendered clips with batch size one.
template <class T>
class ModelWorkload : public FrameWorkload {
 public:
  ModelWorkload(const Model<T>& model, const SamplerConfig& cfg, const RopeConfig& rope, const Dataset& ds,
                std::vector<std::vector<Frame>> clips, std::uint64_t seed)
      : model_(&model), cfg_(cfg), rope_(rope), ds_(&ds), clips_(std::move(clips)), seed_(seed) {}

  Index frames(size_t clip) const override { return static_cast<Index>(clips_.at(clip).size()); }
  void begin_clip(size_t clip) override {
    clip_ = clip;
    session_ = std::make_unique<GenerationSession<T>>(*model_, cfg_, rope_, seed_ + clip, *ds_);
  }
  void token_step(Index frame) override { session_->generate_token(clips_[clip_][static_cast<size_t>(frame)]); }
  void decode_step(Index) override { audio_ = session_->decode_last(); }
  long last_nfe() const { return session_ ? session_->last_nfe() : 0; }

 private:
  const Model<T>* model_;
  SamplerConfig cfg_;
  RopeConfig rope_;
  const Dataset* ds_;
  std::vector<std::vector<Frame>> clips_;
  std::uint64_t seed_;
  size_t clip_ = 0;
  std::unique_ptr<GenerationSession<T>> session_;
  Mat<float> audio_;
};

}  // namespace framegen
