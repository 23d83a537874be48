#pragma once

// Frame-level online generation. Each frame: feed the previous latent to both
// guidance streams, encode the current video frame, feed [v_i, null] to the
// conditional / null streams, combine with the guidance scale, then sample the
// next latent with the head. Several independent sessions can advance in
// lockstep for evaluation throughput.

#include "framegen/codec.hpp"
#include "framegen/dataset.hpp"
#include "framegen/model.hpp"

#include <chrono>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace framegen {

enum class HeadMode { diffusion, ect };

inline const char* to_string(HeadMode m) { return m == HeadMode::diffusion ? "diffusion" : "ect"; }
inline HeadMode head_mode_from_string(const std::string& s) {
  if (s == "diffusion") return HeadMode::diffusion;
  if (s == "ect") return HeadMode::ect;
  throw std::invalid_argument("unknown head mode '" + s + "' (expected diffusion|ect)");
}

struct SamplerConfig {
  double omega = 3.0;
  HeadMode mode = HeadMode::diffusion;
  int heun_steps = 30;
  std::vector<double> cm_ts{5.0, 1.1, 0.08};
  bool shared_noise = false;
  bool head_cfg = false;         // guidance inside the head instead of on z
  bool guide_audio_positions = true;  // false: z at audio positions from the conditional stream only
  bool null_stream = true;       // false: conditional-only decoding (no guidance)
  bool streaming_decode = false;

  void validate() const {
    if (!(omega >= 0.0)) throw std::invalid_argument("sampler: omega must be >= 0");
    if (mode == HeadMode::diffusion && heun_steps < 2) throw std::invalid_argument("sampler: heun steps must be >= 2");
    if (head_cfg && !null_stream) throw std::invalid_argument("sampler: head guidance needs the null stream");
    if (mode == HeadMode::ect) {
      double prev = kTMax;
      for (double t : cm_ts) {
        if (!(t > 0.0 && t < prev)) throw std::invalid_argument("sampler: consistency levels must decrease within (0, 80)");
        prev = t;
      }
    }
  }

  // Head evaluations per generated token.
  long nfe() const {
    const long base = mode == HeadMode::diffusion ? 2L * heun_steps - 1 : 1L + static_cast<long>(cm_ts.size());
    return head_cfg ? 2 * base : base;
  }
};

// Head-guidance inputs: both conditions share the conditional audio-position
// half and differ in the vision-position half.
template <class T>
std::pair<Mat<T>, Mat<T>> head_cfg_conditions(const Mat<T>& z_odd, const Mat<T>& even_cond, const Mat<T>& even_null,
                                              const SamplerConfig& cfg) {
  if (!cfg.head_cfg) throw std::invalid_argument("head_cfg_conditions: head guidance flag is not set");
  Mat<T> zc(z_odd.rows(), z_odd.cols() + even_cond.cols()), zu(zc.rows(), zc.cols());
  zc << z_odd, even_cond;
  zu << z_odd, even_null;
  return {std::move(zc), std::move(zu)};
}

struct FrameTiming {
  double token_ms = 0.0;
  double waveform_ms = 0.0;
};

// B sessions advanced together. Every session owns its caches and rng; the
// backbone path is row-local, the head runs batched.
template <class T>
class GenerationBatch {
 public:
  GenerationBatch(const Model<T>& model, const SamplerConfig& cfg, const RopeConfig& rope,
                  const std::vector<std::uint64_t>& seeds)
      : model_(&model), cfg_(cfg), rope_(rope) {
    cfg.validate();
    rope.validate();
    const size_t B = seeds.size();
    if (B == 0) throw std::invalid_argument("generation: need at least one session");
    for (auto s : seeds) rngs_.emplace_back(s);
    cond_.reserve(B);
    null_.reserve(B);
    for (size_t b = 0; b < B; ++b) {
      cond_.push_back(model.bb.make_cache(rope));
      if (cfg.null_stream) null_.push_back(model.bb.make_cache(rope));
    }
    null_token_ = model.bb.embed_null();
    prev_ = Mat<T>::Zero(static_cast<Index>(B), model.cfg.backbone.c_x);
  }

  Index sessions() const { return static_cast<Index>(rngs_.size()); }
  Index frames() const { return frame_; }
  long last_nfe() const { return last_nfe_; }
  // Frames that still fit in the position budget.
  Index max_frames() const { return rope_.capacity() / 2; }

  // Per-position backbone outputs of both streams, plus the vision tokens and
  // sampled latents, for offline comparison with the full-sequence pass.
  struct Trace {
    std::vector<Mat<T>> cond, null;  // one [B, d] entry per position
    std::vector<Mat<T>> vision, latents;
  };
  void enable_trace() { tracing_ = true; }
  const Trace& trace() const { return trace_; }

  // Feeds the last sampled latent into both streams without sampling a new
  // one; closes the session.
  Mat<T> feed_final_audio() {
    ad::NoGradGuard guard;
    if (frame_ == 0) throw std::logic_error("generation: nothing to feed");
    if (2 * frame_ + 1 > rope_.capacity())
      throw std::length_error("generation: no room for the final audio position");
    Mat<T> in = model_->bb.embed_audio(prev_);
    Mat<T> c = model_->bb.step(in, ptrs(cond_), rope_);
    Mat<T> n = cfg_.null_stream ? model_->bb.step(in, ptrs(null_), rope_) : Mat<T>();
    if (tracing_) {
      trace_.cond.push_back(c);
      trace_.null.push_back(n);
    }
    closed_ = true;
    return c;
  }

  // tokens: [B * agg tokens, 4C], one block of within-frame tokens per session.
  // Returns x_i for every session, [B, c_x].
  Mat<T> step(const Mat<T>& tokens) {
    ad::NoGradGuard guard;
    const Index B = sessions();
    if (closed_) throw std::logic_error("generation: session closed by feed_final_audio");
    if (2 * (frame_ + 1) > rope_.capacity())
      throw std::length_error("generation: frame " + std::to_string(frame_ + 1) + " exceeds the " +
                              std::to_string(rope_.capacity()) +
                              "-position context; enable pi, ntk or an swa window to extend it");
    // (1) previous latent (BOS for the first frame) at the audio position.
    Mat<T> in_odd = frame_ == 0 ? Mat<T>(model_->bb.embed_bos().replicate(B, 1)) : model_->bb.embed_audio(prev_);
    Mat<T> odd_c = model_->bb.step(in_odd, ptrs(cond_), rope_);
    Mat<T> odd_n = cfg_.null_stream ? model_->bb.step(in_odd, ptrs(null_), rope_) : Mat<T>();
    // (2) vision token of the current frame.
    const Index per = model_->cfg.agg.tokens();
    if (tokens.rows() != B * per) throw std::invalid_argument("generation: token block count does not match sessions");
    Mat<T> v(B, model_->cfg.agg.out_dim);
    for (Index b = 0; b < B; ++b) v.row(b) = model_->agg.forward(Mat<T>(tokens.middleRows(b * per, per))).value();
    // (3) [v_i, null] into the conditional / null streams.
    Mat<T> even_c = model_->bb.step(model_->bb.embed_vision(v), ptrs(cond_), rope_);
    Mat<T> even_n = cfg_.null_stream ? model_->bb.step(null_token_.replicate(B, 1), ptrs(null_), rope_) : Mat<T>();
    // (4)-(5) guidance and the conditioning vector.
    Mat<T> z_odd, z_even;
    if (!cfg_.null_stream) {
      z_odd = odd_c;
      z_even = even_c;
    } else {
      z_odd = cfg_.guide_audio_positions ? guide<T>(odd_n, odd_c, cfg_.omega) : odd_c;
      z_even = guide<T>(even_n, even_c, cfg_.omega);
    }
    // (6) head sampling.
    Mat<T> x = cfg_.head_cfg ? sample_head(odd_c, z_even, even_c, even_n) : sample_head(z_odd, z_even, even_c, even_n);
    if (tracing_) {
      trace_.cond.push_back(odd_c);
      trace_.cond.push_back(even_c);
      trace_.null.push_back(odd_n);
      trace_.null.push_back(even_n);
      trace_.vision.push_back(v);
      trace_.latents.push_back(x);
    }
    prev_ = x;
    ++frame_;
    return x;
  }

 private:
  static std::vector<KVCache<T>*> ptrs(std::vector<KVCache<T>>& v) {
    std::vector<KVCache<T>*> out;
    for (auto& c : v) out.push_back(&c);
    return out;
  }

  Mat<T> condition(const Mat<T>& z) const { return model_->head.condition(ad::constant<T>(z)).value(); }

  Mat<T> sample_head(const Mat<T>& z_odd, const Mat<T>& z_even, const Mat<T>& even_c, const Mat<T>& even_n) {
    const Index B = sessions(), c_x = model_->cfg.backbone.c_x;
    long calls = 0;
    Denoiser<T> D;
    if (cfg_.head_cfg) {
      auto [zc, zu] = head_cfg_conditions<T>(z_odd, even_c, even_n, cfg_);
      D = guided_denoiser<T>(counted<T>(make_denoiser(model_->head, condition(zc)), &calls),
                             counted<T>(make_denoiser(model_->head, condition(zu)), &calls), cfg_.omega);
    } else {
      Mat<T> z(B, z_odd.cols() + z_even.cols());
      z << z_odd, z_even;
      D = counted<T>(make_denoiser(model_->head, condition(z)), &calls);
    }
    // Each session draws its own noise so its output is independent of the batch.
    Mat<T> x(B, c_x);
    if (cfg_.mode == HeadMode::diffusion) {
      Mat<T> eps(B, c_x);
      for (Index b = 0; b < B; ++b) eps.row(b) = standard_normal<T>(1, c_x, rngs_[static_cast<size_t>(b)]);
      x = heun_sample<T>(D, std::move(eps), cfg_.heun_steps);
    } else {
      Mat<T> eps0(B, c_x);
      for (Index b = 0; b < B; ++b) eps0.row(b) = standard_normal<T>(1, c_x, rngs_[static_cast<size_t>(b)]);
      x = D(eps0 * static_cast<T>(kTMax), kTMax);
      for (double t : cfg_.cm_ts) {
        Mat<T> e(B, c_x);
        if (cfg_.shared_noise) e = eps0;
        else
          for (Index b = 0; b < B; ++b) e.row(b) = standard_normal<T>(1, c_x, rngs_[static_cast<size_t>(b)]);
        x = D(x + static_cast<T>(t) * e, t);
      }
    }
    last_nfe_ = calls;
    return x;
  }

  const Model<T>* model_;
  SamplerConfig cfg_;
  RopeConfig rope_;
  std::vector<Rng> rngs_;
  std::vector<KVCache<T>> cond_, null_;
  Mat<T> null_token_;
  Mat<T> prev_;
  Index frame_ = 0;
  long last_nfe_ = 0;
  bool tracing_ = false, closed_ = false;
  Trace trace_;
};

struct FrameRecord {
  Index frame = 0;
  long nfe = 0;
};

struct GenerationResult {
  Mat<double> latents;  // standardized, n x c_x
  Waveform waveform;
  std::vector<FrameRecord> records;
  std::vector<FrameTiming> timing;
};

// Single-stream online session over raw frames: owns the vision frontend and
// the streaming decoder.
template <class T>
class GenerationSession {
 public:
  GenerationSession(const Model<T>& model, const SamplerConfig& cfg, const RopeConfig& rope, std::uint64_t seed,
                    const Dataset& ds)
      : batch_(model, cfg, rope, {seed}),
        cfg_(cfg),
        frontend_(ds.cfg.grid, ds.pca),
        geom_(ds.aggregator_geometry()),
        codec_(ds.cfg.toy.channels, ds.cfg.toy.hop),
        stats_(ds.stats),
        dec_(make_decoder_state(codec_, ds.stats)) {}

  Index frames() const { return batch_.frames(); }
  long last_nfe() const { return batch_.last_nfe(); }

  // Vision encoding, both backbone streams and head sampling for one frame;
  // returns the standardized latent.
  Vec<double> generate_token(const Frame& f) {
    Mat<double> feat = frontend_.push(f);
    std::vector<const Mat<double>*> ptr{&feat};
    last_ = batch_.step(downsample_tokens<T>(ptr, geom_)).row(0).transpose().template cast<double>();
    return last_;
  }

  // Incremental waveform decode of the latest latent.
  Mat<float> decode_last() { return decode_incremental(codec_, stats_, last_, dec_); }

  // One frame of online generation with optional decode and wall times.
  Vec<double> step(const Frame& f, FrameTiming* timing = nullptr, Mat<float>* audio = nullptr) {
    using clk = std::chrono::steady_clock;
    const auto t0 = clk::now();
    Vec<double> x = generate_token(f);
    const auto t1 = clk::now();
    if (cfg_.streaming_decode || audio) {
      Mat<float> frame = decode_last();
      if (audio) *audio = std::move(frame);
    }
    const auto t2 = clk::now();
    if (timing) {
      timing->token_ms = std::chrono::duration<double, std::milli>(t1 - t0).count();
      timing->waveform_ms = std::chrono::duration<double, std::milli>(t2 - t0).count();
    }
    return x;
  }

  // Generates the given frames, continuing from the current state. Caches and
  // rope scaling persist across calls; overflow of the budget is rejected
  // before any frame is consumed.
  GenerationResult continue_generation(const std::vector<Frame>& frames) {
    if (batch_.frames() + static_cast<Index>(frames.size()) > batch_.max_frames())
      throw std::length_error("generation: " + std::to_string(batch_.frames() + static_cast<Index>(frames.size())) +
                              " frames exceed the budget of " + std::to_string(batch_.max_frames()) +
                              "; raise n_target with pi or ntk, or use an swa window");
    GenerationResult r;
    r.latents.resize(static_cast<Index>(frames.size()), codec_.latent_dim());
    r.waveform.channels = codec_.channels();
    r.waveform.sample_rate = codec_.sample_rate();
    r.waveform.samples.resize(codec_.channels(), static_cast<Index>(frames.size()) * codec_.hop());
    for (size_t i = 0; i < frames.size(); ++i) {
      FrameTiming ft;
      Mat<float> audio;
      r.latents.row(static_cast<Index>(i)) = step(frames[i], &ft, &audio).transpose();
      r.waveform.samples.middleCols(static_cast<Index>(i) * codec_.hop(), codec_.hop()) = audio;
      r.records.push_back({batch_.frames() - 1, last_nfe()});
      r.timing.push_back(ft);
    }
    return r;
  }

  GenerationResult run(const std::vector<Frame>& frames) { return continue_generation(frames); }

 private:
  GenerationBatch<T> batch_;
  SamplerConfig cfg_;
  VisionFrontend frontend_;
  AggregatorConfig geom_;
  FrameCodec codec_;
  CodecStats stats_;
  DecoderState dec_;
  Vec<double> last_;
};

// Generates full clips from precomputed tokens for many sessions at once.
// tokens[b] is [n * agg tokens, 4C]; all clips share n. Returns one
// standardized latent matrix per clip.
template <class T>
std::vector<Mat<double>> generate_clips(const Model<T>& model, const SamplerConfig& cfg, const RopeConfig& rope,
                                        const std::vector<const Mat<float>*>& tokens,
                                        const std::vector<std::uint64_t>& seeds, long* nfe_per_token = nullptr) {
  if (tokens.size() != seeds.size() || tokens.empty()) throw std::invalid_argument("generate_clips: size mismatch");
  const Index per = model.cfg.agg.tokens();
  const Index n = tokens.front()->rows() / per, B = static_cast<Index>(tokens.size());
  for (const auto* t : tokens)
    if (t->rows() != n * per) throw std::invalid_argument("generate_clips: clips differ in length");
  GenerationBatch<T> gen(model, cfg, rope, seeds);
  std::vector<Mat<double>> out(tokens.size(), Mat<double>(n, model.cfg.backbone.c_x));
  Mat<T> block(B * per, tokens.front()->cols());
  for (Index i = 0; i < n; ++i) {
    for (Index b = 0; b < B; ++b) block.middleRows(b * per, per) = tokens[static_cast<size_t>(b)]->middleRows(i * per, per).template cast<T>();
    Mat<T> x = gen.step(block);
    for (Index b = 0; b < B; ++b) out[static_cast<size_t>(b)].row(i) = x.row(b).template cast<double>();
  }
  if (nfe_per_token) *nfe_per_token = gen.last_nfe();
  return out;
}

// Line-delimited JSON manifest of a generation run.
inline std::string generation_manifest(const GenerationResult& r, const SamplerConfig& cfg) {
  std::ostringstream os;
  for (const auto& rec : r.records)
    os << "{\"frame\":" << rec.frame << ",\"nfe\":" << rec.nfe << ",\"mode\":\"" << to_string(cfg.mode)
       << "\",\"omega\":" << cfg.omega << "}\n";
  return os.str();
}

}  // namespace framegen
