#pragma once

// Seed-regenerable toy audio-visual corpus: scene sampling per family,
// rendering, codec statistics, PCA fit on training grids and per-clip
// conditioned vision tokens.

#include "framegen/codec.hpp"
#include "framegen/training.hpp"
#include "framegen/vision.hpp"

#include <algorithm>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace framegen {

struct DataConfig {
  int clips = 512;
  int frames = 32;
  std::uint64_t seed = 1;
  double periodic_fraction = 0.25;
  double test_fraction = 0.2;
  double target_cev = 0.7;
  int pca_fit_frames = 2048;
  int height = 64, width = 64;
  int min_period = 4, max_period = 8;
  double min_rate = 0.05, max_rate = 0.25;
  ToyProcess toy;
  GridConfig grid;

  void validate() const {
    if (clips <= 0) throw std::invalid_argument("data: clip count must be positive");
    if (frames <= 1) throw std::invalid_argument("data: need at least two frames per clip");
    if (!(periodic_fraction >= 0.0 && periodic_fraction <= 1.0)) throw std::invalid_argument("data: bad periodic fraction");
    if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw std::invalid_argument("data: bad test fraction");
    if (min_period < 2 || max_period < min_period) throw std::invalid_argument("data: bad period range");
    toy.validate();
  }
};

// 1-3 emitters with distinct patterns, Bernoulli firing.
inline SceneSpec random_scene(std::uint64_t seed, const DataConfig& dc) {
  Rng rng(seed ^ 0xA5A5A5A5ull);
  SceneSpec s;
  s.seed = seed;
  s.n_frames = dc.frames;
  s.height = dc.height;
  s.width = dc.width;
  std::vector<int> ids(static_cast<size_t>(dc.toy.n_patterns));
  for (int i = 0; i < dc.toy.n_patterns; ++i) ids[static_cast<size_t>(i)] = i;
  std::shuffle(ids.begin(), ids.end(), rng);
  std::uniform_int_distribution<int> count(1, dc.toy.n_patterns);
  std::uniform_real_distribution<double> pos(0.0, 1.0), rate(dc.min_rate, dc.max_rate);
  const int k = count(rng);
  for (int i = 0; i < k; ++i) {
    Emitter e;
    e.pattern_id = ids[static_cast<size_t>(i)];
    e.position = pos(rng);
    e.rate = rate(rng);
    s.emitters.push_back(e);
  }
  return s;
}

// One periodic emitter, optionally with one Bernoulli distractor.
inline SceneSpec periodic_scene(std::uint64_t seed, const DataConfig& dc, int frames, bool distractor = true) {
  Rng rng(seed ^ 0x5A5A5A5Aull);
  SceneSpec s;
  s.seed = seed;
  s.n_frames = frames;
  s.height = dc.height;
  s.width = dc.width;
  std::uniform_int_distribution<int> pattern(0, dc.toy.n_patterns - 1), period(dc.min_period, dc.max_period);
  std::uniform_real_distribution<double> pos(0.0, 1.0), rate(dc.min_rate, dc.max_rate);
  Emitter e;
  e.pattern_id = pattern(rng);
  e.position = pos(rng);
  e.period = period(rng);
  e.phase = std::uniform_int_distribution<int>(0, e.period - 1)(rng);
  s.emitters.push_back(e);
  if (distractor && dc.toy.n_patterns > 1) {
    Emitter d;
    d.pattern_id = (e.pattern_id + 1 + std::uniform_int_distribution<int>(0, dc.toy.n_patterns - 2)(rng)) %
                   dc.toy.n_patterns;
    d.position = pos(rng);
    d.rate = rate(rng);
    s.emitters.push_back(d);
  }
  return s;
}

struct ClipRecord {
  SceneSpec spec;
  std::string family;  // "random" | "periodic"
  std::string split;   // "train" | "test"
  Mat<double> latents;  // raw oracle latents
  EventTrack events;
  Mat<float> tokens;    // conditioned vision tokens [frames * agg tokens, 4 * 2 c_p]
};

struct Dataset {
  DataConfig cfg;
  std::vector<ClipRecord> clips;
  CodecStats stats;
  PCAProjector pca;

  AggregatorConfig aggregator_geometry() const {
    AggregatorConfig a;
    a.grid_h = cfg.grid.grid_h;
    a.grid_w = cfg.grid.grid_w;
    a.in_channels = static_cast<int>(2 * pca.components());
    return a;
  }

  Mat<float> standardize(const Mat<double>& raw) const {
    return ((raw.rowwise() - stats.mean.transpose()) * stats.scale).cast<float>();
  }

  Mat<double> destandardize(const Mat<double>& x) const {
    return (x / stats.scale).rowwise() + stats.mean.transpose();
  }

  std::vector<ClipTensors> tensors(const std::string& split) const {
    std::vector<ClipTensors> out;
    for (const auto& c : clips)
      if (c.split == split) out.push_back({c.tokens, standardize(c.latents)});
    return out;
  }

  std::vector<const ClipRecord*> select(const std::string& split, const std::string& family = "") const {
    std::vector<const ClipRecord*> out;
    for (const auto& c : clips)
      if (c.split == split && (family.empty() || c.family == family)) out.push_back(&c);
    return out;
  }
};

inline Mat<float> clip_tokens(const std::vector<Frame>& frames, const GridConfig& grid, const PCAProjector& pca) {
  auto feats = clip_condition_features(frames, grid, pca);
  std::vector<const Mat<double>*> ptr;
  for (const auto& f : feats) ptr.push_back(&f);
  AggregatorConfig a;
  a.grid_h = grid.grid_h;
  a.grid_w = grid.grid_w;
  a.in_channels = static_cast<int>(2 * pca.components());
  return downsample_tokens<float>(ptr, a);
}

// Deterministic in cfg. Splits are assigned per family so both families keep
// the same train/test ratio.
inline Dataset generate_dataset(const DataConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.cfg = cfg;
  Rng rng(cfg.seed);
  const int n_periodic = static_cast<int>(std::lround(cfg.periodic_fraction * cfg.clips));
  std::vector<std::uint64_t> seeds(static_cast<size_t>(cfg.clips));
  for (auto& s : seeds) s = rng();
  for (int i = 0; i < cfg.clips; ++i) {
    ClipRecord c;
    const bool periodic = i < n_periodic;
    c.family = periodic ? "periodic" : "random";
    c.spec = periodic ? periodic_scene(seeds[static_cast<size_t>(i)], cfg, cfg.frames)
                      : random_scene(seeds[static_cast<size_t>(i)], cfg);
    ds.clips.push_back(std::move(c));
  }
  for (const std::string fam : {"periodic", "random"}) {
    std::vector<ClipRecord*> members;
    for (auto& c : ds.clips)
      if (c.family == fam) members.push_back(&c);
    const size_t n_test = static_cast<size_t>(std::lround(cfg.test_fraction * static_cast<double>(members.size())));
    for (size_t j = 0; j < members.size(); ++j) members[j]->split = j < n_test ? "test" : "train";
  }

  // Render once; keep grids of the training split for the PCA fit.
  std::vector<std::vector<Mat<double>>> grids(ds.clips.size());
  for (size_t i = 0; i < ds.clips.size(); ++i) {
    RenderedClip r = render(ds.clips[i].spec, cfg.toy);
    ds.clips[i].latents = std::move(r.latents);
    ds.clips[i].events = std::move(r.events);
    for (const auto& f : r.frames) grids[i].push_back(extract_grid(f, cfg.grid));
  }
  std::vector<const Mat<double>*> fit;
  for (size_t i = 0; i < ds.clips.size(); ++i)
    if (ds.clips[i].split == "train")
      for (const auto& g : grids[i]) fit.push_back(&g);
  if (fit.empty()) throw std::invalid_argument("data: training split is empty");
  Rng pick(cfg.seed + 17);
  std::shuffle(fit.begin(), fit.end(), pick);
  if (static_cast<int>(fit.size()) > cfg.pca_fit_frames) fit.resize(static_cast<size_t>(cfg.pca_fit_frames));
  const Index rows_per = fit.front()->rows();
  Mat<double> samples(static_cast<Index>(fit.size()) * rows_per, fit.front()->cols());
  for (size_t j = 0; j < fit.size(); ++j) samples.middleRows(static_cast<Index>(j) * rows_per, rows_per) = *fit[j];
  ds.pca = fit_pca(samples, cfg.target_cev);

  std::vector<Mat<double>> train_raw;
  for (const auto& c : ds.clips)
    if (c.split == "train") train_raw.push_back(c.latents);
  FrameCodec codec(cfg.toy.channels, cfg.toy.hop);
  ds.stats = codec.fit_stats_raw(train_raw);

  AggregatorConfig geom = ds.aggregator_geometry();
  for (size_t i = 0; i < ds.clips.size(); ++i) {
    std::vector<const Mat<double>*> ptr;
    std::vector<Mat<double>> feats;
    std::optional<Mat<double>> prev;
    for (const auto& g : grids[i]) {
      Mat<double> proj = ds.pca.project(g);
      feats.push_back(condition_features(proj, prev));
      prev = std::move(proj);
    }
    for (const auto& f : feats) ptr.push_back(&f);
    ds.clips[i].tokens = downsample_tokens<float>(ptr, geom);
  }
  return ds;
}

// Tokens for a scene rendered outside the corpus (same projector).
inline Mat<float> scene_tokens(const SceneSpec& spec, const Dataset& ds, RenderedClip* out = nullptr) {
  RenderedClip r = render(spec, ds.cfg.toy);
  Mat<float> t = clip_tokens(r.frames, ds.cfg.grid, ds.pca);
  if (out) *out = std::move(r);
  return t;
}

}  // namespace framegen
