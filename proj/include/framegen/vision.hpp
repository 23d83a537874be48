#pragma once

// Vision side of the pipeline: synthetic scenes with known event ground
// truth, per-frame patch statistics, PCA reduction, temporal-difference
// conditioning and the learnable single-token aggregator.

#include "framegen/attention.hpp"
#include "framegen/autodiff.hpp"
#include "framegen/nn.hpp"
#include "framegen/toy.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace framegen {

// ---------------------------------------------------------------------------
// Scenes

struct Emitter {
  int pattern_id = 0;
  double position = 0.5;
  double rate = 0.0;  // Bernoulli flash probability per frame (used when period == 0)
  int period = 0;     // fixed period in frames; 0 = Bernoulli
  int phase = 0;

  bool periodic() const { return period > 0; }
};

struct SceneSpec {
  std::uint64_t seed = 0;
  int n_frames = 32;
  std::vector<Emitter> emitters;
  int height = 64;
  int width = 64;

  void validate(const ToyProcess& toy) const {
    if (emitters.empty()) throw std::invalid_argument("scene: at least one emitter is required");
    if (n_frames <= 0) throw std::invalid_argument("scene: n_frames must be positive");
    if (height <= 0 || width <= 0) throw std::invalid_argument("scene: bad resolution");
    for (const auto& e : emitters) {
      if (e.pattern_id < 0 || e.pattern_id >= toy.n_patterns) throw std::invalid_argument("scene: pattern id out of range");
      if (e.position < 0.0 || e.position > 1.0) throw std::invalid_argument("scene: emitter position outside [0, 1]");
      if (e.period < 0 || (e.period == 0 && (e.rate < 0.0 || e.rate > 1.0)))
        throw std::invalid_argument("scene: bad firing process");
    }
  }
};

struct EventTrack {
  Mat<std::uint8_t> e;  // n x K
  std::vector<double> positions;
  std::vector<int> patterns;

  std::vector<ActiveEvent> active(Index frame) const {
    std::vector<ActiveEvent> out;
    for (Index k = 0; k < e.cols(); ++k)
      if (e(frame, k)) out.push_back({patterns[static_cast<size_t>(k)], positions[static_cast<size_t>(k)]});
    return out;
  }
};

struct Frame {
  int height = 0, width = 0;
  std::vector<float> rgb;  // HWC, values in [0, 1]

  Frame() = default;
  Frame(int h, int w) : height(h), width(w), rgb(static_cast<size_t>(h) * w * 3, 0.0f) {}
  float& at(int y, int x, int c) { return rgb[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  float at(int y, int x, int c) const { return rgb[(static_cast<size_t>(y) * width + x) * 3 + c]; }
};

struct RenderedClip {
  std::vector<Frame> frames;
  EventTrack events;
  Mat<double> latents;  // raw toy-process latents, n x c_x
};

inline std::array<float, 3> pattern_color(int id) {
  static const std::array<std::array<float, 3>, 6> table{{{1.0f, 0.35f, 0.2f},
                                                          {0.25f, 1.0f, 0.3f},
                                                          {0.3f, 0.45f, 1.0f},
                                                          {1.0f, 1.0f, 0.3f},
                                                          {0.3f, 1.0f, 1.0f},
                                                          {1.0f, 0.3f, 1.0f}}};
  return table[static_cast<size_t>(id) % table.size()];
}

inline void draw_flash(Frame& f, const Emitter& e, int n_patterns) {
  const double cx = e.position * (f.width - 1);
  const double cy = (e.pattern_id + 1.0) * f.height / (n_patterns + 1.0);
  const double s2 = 2.0 * 3.0 * 3.0;
  const auto col = pattern_color(e.pattern_id);
  for (int y = 0; y < f.height; ++y) {
    for (int x = 0; x < f.width; ++x) {
      const double g = std::exp(-((x - cx) * (x - cx) + (y - cy) * (y - cy)) / s2);
      if (g < 1e-4) continue;
      for (int c = 0; c < 3; ++c) f.at(y, x, c) = std::min(1.0f, f.at(y, x, c) + static_cast<float>(g) * col[c]);
    }
  }
}

// Deterministic in spec.seed. Events and latents use separate RNG streams so
// changing the toy noise level does not move the flashes.
inline RenderedClip render(const SceneSpec& spec, const ToyProcess& toy) {
  spec.validate(toy);
  toy.validate();
  const Index n = spec.n_frames, K = static_cast<Index>(spec.emitters.size());
  RenderedClip clip;
  clip.events.e = Mat<std::uint8_t>::Zero(n, K);
  for (const auto& em : spec.emitters) {
    clip.events.positions.push_back(em.position);
    clip.events.patterns.push_back(em.pattern_id);
  }
  std::mt19937_64 ev_rng(spec.seed * 0x9E3779B97F4A7C15ull + 1);
  std::uniform_real_distribution<double> u01;
  for (Index i = 0; i < n; ++i) {
    for (Index k = 0; k < K; ++k) {
      const auto& em = spec.emitters[static_cast<size_t>(k)];
      const double u = u01(ev_rng);
      bool fire = em.periodic() ? ((i - em.phase) % em.period == 0 && i >= em.phase) : (u < em.rate);
      clip.events.e(i, k) = fire ? 1 : 0;
    }
  }
  clip.frames.reserve(static_cast<size_t>(n));
  for (Index i = 0; i < n; ++i) {
    Frame f(spec.height, spec.width);
    for (Index k = 0; k < K; ++k)
      if (clip.events.e(i, k)) draw_flash(f, spec.emitters[static_cast<size_t>(k)], toy.n_patterns);
    clip.frames.push_back(std::move(f));
  }
  std::mt19937_64 lat_rng(spec.seed * 0xD1B54A32D192ED03ull + 7);
  clip.latents.resize(n, toy.latent_dim());
  Vec<double> prev = Vec<double>::Zero(toy.latent_dim());
  for (Index i = 0; i < n; ++i) {
    prev = toy.sample(prev, clip.events.active(i), lat_rng);
    clip.latents.row(i) = prev.transpose();
  }
  return clip;
}

// ---------------------------------------------------------------------------
// Grid features

struct GridConfig {
  int grid_h = 8;
  int grid_w = 8;
  static constexpr int channels = 12;

  int patches() const { return grid_h * grid_w; }
};

// Channel layout per patch: RGB mean (0-2), RGB std (3-5), quadrant luminance
// means TL TR BL BR (6-9), mean |dx| and |dy| of luminance (10-11).
using GridFeatures = Mat<double>;  // patches x 12, patch index = row * grid_w + col

inline GridFeatures extract_grid(const Frame& f, const GridConfig& g = {}) {
  if (f.height % g.grid_h != 0 || f.width % g.grid_w != 0)
    throw std::invalid_argument("extract_grid: resolution " + std::to_string(f.height) + "x" +
                                std::to_string(f.width) + " not divisible by the " + std::to_string(g.grid_h) +
                                "x" + std::to_string(g.grid_w) + " patch grid");
  const int ph = f.height / g.grid_h, pw = f.width / g.grid_w;
  GridFeatures out = GridFeatures::Zero(g.patches(), GridConfig::channels);
  auto lum = [&](int y, int x) { return 0.299 * f.at(y, x, 0) + 0.587 * f.at(y, x, 1) + 0.114 * f.at(y, x, 2); };
  for (int r = 0; r < g.grid_h; ++r) {
    for (int c = 0; c < g.grid_w; ++c) {
      auto row = out.row(r * g.grid_w + c);
      const int y0 = r * ph, x0 = c * pw;
      const double area = static_cast<double>(ph) * pw;
      for (int ch = 0; ch < 3; ++ch) {
        double s = 0, ss = 0;
        for (int y = y0; y < y0 + ph; ++y)
          for (int x = x0; x < x0 + pw; ++x) {
            const double v = f.at(y, x, ch);
            s += v;
            ss += v * v;
          }
        const double m = s / area;
        row(ch) = m;
        row(3 + ch) = std::sqrt(std::max(0.0, ss / area - m * m));
      }
      const int hh = ph / 2, hw = pw / 2;
      for (int q = 0; q < 4; ++q) {
        const int qy = y0 + (q / 2) * hh, qx = x0 + (q % 2) * hw;
        const int qh = (q / 2) ? ph - hh : hh, qw = (q % 2) ? pw - hw : hw;
        double s = 0;
        for (int y = qy; y < qy + qh; ++y)
          for (int x = qx; x < qx + qw; ++x) s += lum(y, x);
        row(6 + q) = s / std::max(1, qh * qw);
      }
      double gx = 0, gy = 0;
      int nx = 0, ny = 0;
      for (int y = y0; y < y0 + ph; ++y)
        for (int x = x0; x + 1 < x0 + pw; ++x, ++nx) gx += std::abs(lum(y, x + 1) - lum(y, x));
      for (int y = y0; y + 1 < y0 + ph; ++y)
        for (int x = x0; x < x0 + pw; ++x, ++ny) gy += std::abs(lum(y + 1, x) - lum(y, x));
      row(10) = nx ? gx / nx : 0.0;
      row(11) = ny ? gy / ny : 0.0;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// PCA

struct PCAProjector {
  Vec<double> mean;
  Mat<double> basis;  // c_g x c_p, orthonormal columns
  Vec<double> explained;  // variance ratio per kept component, nonincreasing
  double cev = 0.0;

  Index components() const { return basis.cols(); }

  Mat<double> project(const Mat<double>& x) const {
    if (x.cols() != mean.size()) throw std::invalid_argument("pca: feature width mismatch");
    return (x.rowwise() - mean.transpose()) * basis;
  }

  Mat<double> lift(const Mat<double>& y) const {
    return (y * basis.transpose()).rowwise() + mean.transpose();
  }

  std::uint64_t fingerprint() const {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const double* p, Index n) {
      const auto* c = reinterpret_cast<const unsigned char*>(p);
      for (size_t i = 0; i < sizeof(double) * static_cast<size_t>(n); ++i) h = (h ^ c[i]) * 1099511628211ull;
    };
    mix(mean.data(), mean.size());
    mix(basis.data(), basis.size());
    return h;
  }
};

// Keeps the smallest number of leading components whose cumulative explained
// variance reaches target_cev. Rank-deficient covariance caps the count.
inline PCAProjector fit_pca(const Mat<double>& samples, double target_cev) {
  const Index n = samples.rows(), d = samples.cols();
  if (n < d) throw std::invalid_argument("fit_pca: need at least " + std::to_string(d) + " samples");
  if (!(target_cev > 0.0 && target_cev <= 1.0)) throw std::invalid_argument("fit_pca: cev must be in (0, 1]");
  PCAProjector p;
  p.mean = samples.colwise().mean().transpose();
  Mat<double> c = samples.rowwise() - p.mean.transpose();
  Mat<double> cov = (c.transpose() * c) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  Vec<double> ev = es.eigenvalues().reverse();
  Eigen::MatrixXd vecs = es.eigenvectors().rowwise().reverse();
  const double total = ev.cwiseMax(0.0).sum();
  if (!(total > 0.0)) throw std::invalid_argument("fit_pca: zero-variance data");
  Index rank = 0;
  for (Index i = 0; i < d; ++i)
    if (ev(i) > 1e-12 * ev(0)) ++rank;
  Index k = 0;
  double acc = 0.0;
  while (k < rank) {
    acc += std::max(0.0, ev(k)) / total;
    ++k;
    if (acc >= target_cev - 1e-12) break;
  }
  if (acc < target_cev - 1e-12)
    std::cerr << "fit_pca: covariance rank " << rank << " retains only " << acc << " of the variance\n";
  p.basis = vecs.leftCols(k);
  p.explained = ev.head(k) / total;
  p.cev = acc;
  return p;
}

// Channel concat of the projected grid and its difference from the previous
// frame. The first frame passes prev = nullopt and gets a zero difference.
inline Mat<double> condition_features(const Mat<double>& cur, const std::optional<Mat<double>>& prev) {
  Mat<double> out(cur.rows(), 2 * cur.cols());
  out.leftCols(cur.cols()) = cur;
  if (prev) {
    if (prev->rows() != cur.rows() || prev->cols() != cur.cols())
      throw std::invalid_argument("condition_features: frames projected with different projectors");
    out.rightCols(cur.cols()) = cur - *prev;
  } else {
    out.rightCols(cur.cols()).setZero();
  }
  return out;
}

// Streaming frame encoder: grid -> PCA -> temporal difference. Holds only the
// previous projected grid.
class VisionFrontend {
 public:
  VisionFrontend() = default;
  VisionFrontend(GridConfig grid, PCAProjector pca) : grid_(grid), pca_(std::move(pca)) {}

  Mat<double> push(const Frame& f) {
    Mat<double> proj = pca_.project(extract_grid(f, grid_));
    Mat<double> out = condition_features(proj, prev_);
    prev_ = std::move(proj);
    return out;
  }

  void reset() { prev_.reset(); }
  const PCAProjector& pca() const { return pca_; }
  const GridConfig& grid() const { return grid_; }
  Index feature_channels() const { return 2 * pca_.components(); }

 private:
  GridConfig grid_;
  PCAProjector pca_;
  std::optional<Mat<double>> prev_;
};

// Every frame's conditioned grid for a clip, in frame order.
inline std::vector<Mat<double>> clip_condition_features(const std::vector<Frame>& frames, const GridConfig& grid,
                                                        const PCAProjector& pca) {
  VisionFrontend fe(grid, pca);
  std::vector<Mat<double>> out;
  out.reserve(frames.size());
  for (const auto& f : frames) out.push_back(fe.push(f));
  return out;
}

// ---------------------------------------------------------------------------
// Aggregator

struct AggregatorConfig {
  int grid_h = 8, grid_w = 8;
  int in_channels = 8;  // 2 * PCA components
  int dim = 32;
  int heads = 2;
  int out_dim = 64;  // c_v

  int tokens() const { return (grid_h / 2) * (grid_w / 2); }
};

// Rearranges each frame's conditioned grid into 2x2 non-overlapping blocks,
// one row of 4*C features per downsampled token.
template <class T>
Mat<T> downsample_tokens(const std::vector<const Mat<double>*>& frames, const AggregatorConfig& cfg) {
  const int th = cfg.grid_h / 2, tw = cfg.grid_w / 2, C = cfg.in_channels;
  Mat<T> out(static_cast<Index>(frames.size()) * th * tw, 4 * C);
  for (size_t f = 0; f < frames.size(); ++f) {
    const Mat<double>& g = *frames[f];
    if (g.rows() != cfg.grid_h * cfg.grid_w || g.cols() != C)
      throw std::invalid_argument("aggregator: conditioned grid shape mismatch");
    for (int r = 0; r < th; ++r)
      for (int c = 0; c < tw; ++c) {
        const Index row = static_cast<Index>(f) * th * tw + r * tw + c;
        int q = 0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx, ++q)
            out.row(row).segment(q * C, C) = g.row((2 * r + dy) * cfg.grid_w + 2 * c + dx).template cast<T>();
      }
  }
  return out;
}

template <class T>
struct Aggregator {
  AggregatorConfig cfg;
  LinearLayer<T> in;
  ad::Var<T> pos, agg_token, norm1, norm2, norm_out;
  LinearLayer<T> wq, wk, wv, wo, mlp1, mlp2, out;

  Aggregator() = default;
  Aggregator(const AggregatorConfig& c, Rng& rng) : cfg(c) {
    if (c.grid_h % 2 || c.grid_w % 2) throw std::invalid_argument("aggregator: grid must be even for 2x downsampling");
    if (c.dim % c.heads) throw std::invalid_argument("aggregator: dim not divisible by heads");
    in = LinearLayer<T>(4 * c.in_channels, c.dim, rng);
    pos = param_normal<T>(c.tokens(), c.dim, 0.02, rng);
    agg_token = param_normal<T>(1, c.dim, 0.02, rng);
    norm1 = param_const<T>(1, c.dim, 1.0);
    norm2 = param_const<T>(1, c.dim, 1.0);
    norm_out = param_const<T>(1, c.dim, 1.0);
    wq = LinearLayer<T>(c.dim, c.dim, rng, 1.0, false);
    wk = LinearLayer<T>(c.dim, c.dim, rng, 1.0, false);
    wv = LinearLayer<T>(c.dim, c.dim, rng, 1.0, false);
    wo = LinearLayer<T>(c.dim, c.dim, rng, 0.5, false);
    mlp1 = LinearLayer<T>(c.dim, 2 * c.dim, rng);
    mlp2 = LinearLayer<T>(2 * c.dim, c.dim, rng, 0.5);
    out = LinearLayer<T>(c.dim, c.out_dim, rng);
  }

  void visit(const ParamVisitor<T>& f) {
    in.visit("agg.in", f);
    f("agg.pos", pos, false);
    f("agg.token", agg_token, false);
    f("agg.norm1", norm1, false);
    f("agg.norm2", norm2, false);
    f("agg.norm_out", norm_out, false);
    wq.visit("agg.wq", f);
    wk.visit("agg.wk", f);
    wv.visit("agg.wv", f);
    wo.visit("agg.wo", f);
    mlp1.visit("agg.mlp1", f);
    mlp2.visit("agg.mlp2", f);
    out.visit("agg.out", f);
  }

  // tokens: [frames * tokens(), 4 * in_channels] from downsample_tokens.
  // pos_index[j] selects the positional embedding of within-frame token j.
  ad::Var<T> forward(const Mat<T>& tokens, const std::vector<Index>& pos_index) const {
    const Index nt = cfg.tokens();
    if (tokens.rows() % nt != 0) throw std::invalid_argument("aggregator: token rows not a multiple of tokens/frame");
    const Index frames = tokens.rows() / nt;
    ad::Var<T> x = in(ad::constant<T>(tokens));
    std::vector<Index> pidx(static_cast<size_t>(frames * nt));
    for (Index i = 0; i < frames * nt; ++i) pidx[static_cast<size_t>(i)] = pos_index[static_cast<size_t>(i % nt)];
    x = ad::add(x, ad::gather_rows(pos, pidx));
    // Sequence per frame: [agg, tok_0 .. tok_{nt-1}].
    ad::Var<T> all = ad::concat_rows<T>({x, agg_token});
    std::vector<Index> sidx;
    sidx.reserve(static_cast<size_t>(frames * (nt + 1)));
    for (Index f = 0; f < frames; ++f) {
      sidx.push_back(frames * nt);
      for (Index j = 0; j < nt; ++j) sidx.push_back(f * nt + j);
    }
    ad::Var<T> h = ad::gather_rows(all, std::move(sidx));
    const T eps = static_cast<T>(1e-6);
    ad::Var<T> a = ad::rms_norm(h, norm1, eps);
    AttentionMask mask{false, 0};
    h = ad::add(h, wo(ad::attention(wq(a), wk(a), wv(a), nt + 1, cfg.heads, mask)));
    h = ad::add(h, mlp2(ad::silu(mlp1(ad::rms_norm(h, norm2, eps)))));
    std::vector<Index> aidx(static_cast<size_t>(frames));
    for (Index f = 0; f < frames; ++f) aidx[static_cast<size_t>(f)] = f * (nt + 1);
    return out(ad::rms_norm(ad::gather_rows(h, std::move(aidx)), norm_out, eps));
  }

  ad::Var<T> forward(const Mat<T>& tokens) const {
    std::vector<Index> id(static_cast<size_t>(cfg.tokens()));
    for (Index j = 0; j < cfg.tokens(); ++j) id[static_cast<size_t>(j)] = j;
    return forward(tokens, id);
  }
};

}  // namespace framegen
