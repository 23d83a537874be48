#pragma once

// Exactly invertible per-frame audio codec: each hop-sized frame of every
// channel is mapped through an orthonormal DCT-II, channel coefficient blocks
// are concatenated into one latent, and latents are standardized with a
// per-dimension mean and a single global scale.

#include "framegen/autodiff.hpp"

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace framegen {

inline constexpr double kSigmaData = 0.5;

struct Waveform {
  int channels = 2;
  int sample_rate = 480;
  Mat<float> samples;  // channels x T

  Index length() const { return samples.cols(); }
};

struct AudioLatentSeq {
  Mat<float> latents;  // n x c_x
  double frame_rate = 30.0;

  Index frames() const { return latents.rows(); }
};

struct CodecStats {
  Vec<double> mean;
  double scale = 1.0;  // standardized = (raw - mean) * scale

  bool fitted() const { return mean.size() > 0 && scale > 0.0; }

  static CodecStats identity(Index dim) {
    CodecStats s;
    s.mean = Vec<double>::Zero(dim);
    s.scale = 1.0;
    return s;
  }
};

class FrameCodec {
 public:
  explicit FrameCodec(int channels = 2, int hop = 16, int sample_rate = 480)
      : channels_(channels), hop_(hop), sample_rate_(sample_rate), basis_(hop, hop) {
    if (channels <= 0 || hop <= 0 || sample_rate <= 0) throw std::invalid_argument("codec: bad geometry");
    // basis_(k, n) = alpha_k cos(pi (2n+1) k / 2N); rows are orthonormal.
    const double n = hop;
    for (int k = 0; k < hop; ++k) {
      const double a = k == 0 ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
      for (int j = 0; j < hop; ++j) basis_(k, j) = a * std::cos(std::numbers::pi * (2 * j + 1) * k / (2.0 * n));
    }
  }

  int channels() const { return channels_; }
  int hop() const { return hop_; }
  int latent_dim() const { return channels_ * hop_; }
  int sample_rate() const { return sample_rate_; }
  double frame_rate() const { return static_cast<double>(sample_rate_) / hop_; }

  // Unstandardized coefficients of one frame; `frame` is channels x hop.
  Vec<double> analyze_frame(const Mat<double>& frame) const {
    Vec<double> out(latent_dim());
    for (int c = 0; c < channels_; ++c) out.segment(c * hop_, hop_) = basis_ * frame.row(c).transpose();
    return out;
  }

  Mat<double> synthesize_frame(const Vec<double>& coeffs) const {
    Mat<double> frame(channels_, hop_);
    for (int c = 0; c < channels_; ++c)
      frame.row(c) = (basis_.transpose() * coeffs.segment(c * hop_, hop_)).transpose();
    return frame;
  }

  // Raw coefficients for every frame, n x c_x.
  Mat<double> analyze(const Waveform& w) const {
    check_waveform(w);
    const Index n = w.length() / hop_;
    Mat<double> out(n, latent_dim());
    for (Index i = 0; i < n; ++i) {
      Mat<double> frame = w.samples.middleCols(i * hop_, hop_).cast<double>();
      out.row(i) = analyze_frame(frame).transpose();
    }
    return out;
  }

  AudioLatentSeq encode(const Waveform& w, const CodecStats& stats) const {
    check_stats(stats);
    Mat<double> raw = analyze(w);
    AudioLatentSeq seq;
    seq.frame_rate = frame_rate();
    seq.latents.resize(raw.rows(), raw.cols());
    for (Index i = 0; i < raw.rows(); ++i)
      seq.latents.row(i) = ((raw.row(i).transpose() - stats.mean) * stats.scale).transpose().cast<float>();
    return seq;
  }

  Mat<double> destandardize(const Eigen::Ref<const Vec<double>>& x, const CodecStats& stats) const {
    return x / stats.scale + stats.mean;
  }

  Mat<float> decode_frame(const Eigen::Ref<const Vec<double>>& x, const CodecStats& stats) const {
    return synthesize_frame(destandardize(x, stats)).cast<float>();
  }

  Waveform decode(const AudioLatentSeq& l, const CodecStats& stats) const {
    check_stats(stats);
    if (l.latents.cols() != latent_dim()) throw std::invalid_argument("decode: latent dim mismatch");
    if (!l.latents.allFinite()) throw std::invalid_argument("decode: non-finite latents");
    Waveform w;
    w.channels = channels_;
    w.sample_rate = sample_rate_;
    w.samples.resize(channels_, l.frames() * hop_);
    for (Index i = 0; i < l.frames(); ++i) {
      Vec<double> x = l.latents.row(i).transpose().cast<double>();
      w.samples.middleCols(i * hop_, hop_) = decode_frame(x, stats);
    }
    return w;
  }

  // Fits the per-dimension mean and a global scale giving latent std sigma_data.
  CodecStats fit_stats(const std::vector<Waveform>& corpus) const {
    if (corpus.empty()) throw std::invalid_argument("fit_stats: empty corpus");
    std::vector<Mat<double>> raws;
    for (const auto& w : corpus) raws.push_back(analyze(w));
    return fit_stats_raw(raws);
  }

  CodecStats fit_stats_raw(const std::vector<Mat<double>>& raws) const {
    Index frames = 0;
    Vec<double> sum = Vec<double>::Zero(latent_dim());
    for (const auto& r : raws) {
      if (r.cols() != latent_dim()) throw std::invalid_argument("fit_stats: latent dim mismatch");
      frames += r.rows();
      sum += r.colwise().sum().transpose();
    }
    if (frames == 0) throw std::invalid_argument("fit_stats: empty corpus");
    CodecStats s;
    s.mean = sum / static_cast<double>(frames);
    double ss = 0.0;
    for (const auto& r : raws) ss += (r.rowwise() - s.mean.transpose()).squaredNorm();
    const double std = std::sqrt(ss / static_cast<double>(frames * latent_dim()));
    if (!(std > 0.0)) throw std::invalid_argument("fit_stats: corpus has zero variance");
    s.scale = kSigmaData / std;
    return s;
  }

 private:
  void check_waveform(const Waveform& w) const {
    if (w.channels != channels_ || w.samples.rows() != channels_)
      throw std::invalid_argument("codec: expected " + std::to_string(channels_) + " channels");
    if (w.length() % hop_ != 0)
      throw std::invalid_argument("codec: waveform length " + std::to_string(w.length()) +
                                  " is not a multiple of the frame hop " + std::to_string(hop_) +
                                  " (last frame would start at sample " +
                                  std::to_string((w.length() / hop_) * hop_) + ")");
    if (!w.samples.allFinite()) throw std::invalid_argument("codec: non-finite samples");
  }

  void check_stats(const CodecStats& s) const {
    if (!s.fitted() || s.mean.size() != latent_dim()) throw std::invalid_argument("codec: stats not fitted");
  }

  int channels_, hop_, sample_rate_;
  Mat<double> basis_;
};

// Streaming decoder state. The codec is frame-local, so the state only pins
// the stream identity and position.
struct DecoderState {
  std::uint64_t frames_decoded = 0;
  std::uint32_t latent_dim = 0;
  std::uint64_t stats_fingerprint = 0;

  std::vector<std::uint8_t> serialize() const {
    std::vector<std::uint8_t> out(20);
    std::memcpy(out.data(), &frames_decoded, 8);
    std::memcpy(out.data() + 8, &latent_dim, 4);
    std::memcpy(out.data() + 12, &stats_fingerprint, 8);
    return out;
  }

  static DecoderState deserialize(const std::vector<std::uint8_t>& b) {
    if (b.size() != 20) throw std::invalid_argument("decoder state: bad size");
    DecoderState s;
    std::memcpy(&s.frames_decoded, b.data(), 8);
    std::memcpy(&s.latent_dim, b.data() + 8, 4);
    std::memcpy(&s.stats_fingerprint, b.data() + 12, 8);
    return s;
  }
};

inline std::uint64_t stats_fingerprint(const CodecStats& s) {
  std::uint64_t h = 1469598103934665603ull;
  auto mix = [&h](const void* p, size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    for (size_t i = 0; i < n; ++i) h = (h ^ c[i]) * 1099511628211ull;
  };
  mix(s.mean.data(), sizeof(double) * static_cast<size_t>(s.mean.size()));
  mix(&s.scale, sizeof(double));
  return h;
}

inline DecoderState make_decoder_state(const FrameCodec& codec, const CodecStats& stats) {
  DecoderState s;
  s.latent_dim = static_cast<std::uint32_t>(codec.latent_dim());
  s.stats_fingerprint = stats_fingerprint(stats);
  return s;
}

// Decodes one latent frame and advances the state.
inline Mat<float> decode_incremental(const FrameCodec& codec, const CodecStats& stats,
                                     const Eigen::Ref<const Vec<double>>& x, DecoderState& state) {
  if (state.latent_dim != static_cast<std::uint32_t>(codec.latent_dim()) ||
      static_cast<Index>(x.size()) != codec.latent_dim())
    throw std::invalid_argument("decode_incremental: latent dim does not match decoder state");
  if (state.stats_fingerprint != stats_fingerprint(stats))
    throw std::invalid_argument("decode_incremental: stats do not match decoder state");
  Mat<float> frame = codec.decode_frame(x, stats);
  ++state.frames_decoded;
  return frame;
}

// Raw little-endian waveform file: "FRWAV1\0\0", u32 channels, u32 rate,
// then channel-interleaved f32 samples.
inline void write_waveform(const std::string& path, const Waveform& w) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "' for writing");
  const char magic[8] = {'F', 'R', 'W', 'A', 'V', '1', '\0', '\0'};
  f.write(magic, 8);
  const std::uint32_t ch = static_cast<std::uint32_t>(w.channels), sr = static_cast<std::uint32_t>(w.sample_rate);
  f.write(reinterpret_cast<const char*>(&ch), 4);
  f.write(reinterpret_cast<const char*>(&sr), 4);
  std::vector<float> inter(static_cast<size_t>(w.samples.size()));
  for (Index t = 0; t < w.length(); ++t)
    for (int c = 0; c < w.channels; ++c) inter[static_cast<size_t>(t * w.channels + c)] = w.samples(c, t);
  f.write(reinterpret_cast<const char*>(inter.data()), static_cast<std::streamsize>(inter.size() * 4));
  if (!f) throw std::runtime_error("write failed for '" + path + "'");
}

inline Waveform read_waveform(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + path + "'");
  char magic[8];
  f.read(magic, 8);
  if (!f || std::memcmp(magic, "FRWAV1\0\0", 8) != 0) throw std::runtime_error("'" + path + "' is not a waveform file");
  std::uint32_t ch = 0, sr = 0;
  f.read(reinterpret_cast<char*>(&ch), 4);
  f.read(reinterpret_cast<char*>(&sr), 4);
  std::vector<char> bytes((std::istreambuf_iterator<char>(f)), {});
  if (ch == 0 || bytes.size() % (4 * ch) != 0) throw std::runtime_error("'" + path + "' has a truncated payload");
  Waveform w;
  w.channels = static_cast<int>(ch);
  w.sample_rate = static_cast<int>(sr);
  const Index T = static_cast<Index>(bytes.size() / (4 * ch));
  w.samples.resize(ch, T);
  for (Index t = 0; t < T; ++t)
    for (Index c = 0; c < static_cast<Index>(ch); ++c)
      std::memcpy(&w.samples(c, t), bytes.data() + 4 * (t * ch + c), 4);
  return w;
}

}  // namespace framegen
