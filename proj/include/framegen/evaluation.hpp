#pragma once

// Model-level evaluation on the toy corpus: teacher-forced conditional match
// against the oracle, test-set generation and the distribution, sync, pan and
// cadence probes built on it.

#include "framegen/dataset.hpp"
#include "framegen/metrics.hpp"
#include "framegen/sampler.hpp"
#include "framegen/training.hpp"

#include <algorithm>
#include <cstdint>
#include <random>
#include <vector>

namespace framegen {

// Draws n_samples latents per row of z (teacher-forced conditioning vectors,
// already guided). Returns standardized samples, one block of n_samples rows per
// input row.
template <class T>
Mat<double> sample_from_conditions(const Model<T>& m, const Mat<T>& z, int n_samples, const SamplerConfig& sc,
                                   Rng& rng) {
  ad::NoGradGuard g;
  const Index c_x = m.cfg.backbone.c_x;
  Mat<double> out(z.rows() * n_samples, c_x);
  for (Index r = 0; r < z.rows(); ++r) {
    Mat<T> zc = m.head.condition(ad::constant<T>(Mat<T>(z.row(r)))).value();
    Denoiser<T> D = make_denoiser(m.head, zc);
    Mat<T> eps = standard_normal<T>(n_samples, c_x, rng);
    Mat<T> x = sc.mode == HeadMode::diffusion ? heun_sample<T>(D, std::move(eps), sc.heun_steps)
                                               : cm_sample<T>(D, eps, sc.cm_ts, rng, sc.shared_noise);
    out.middleRows(r * n_samples, n_samples) = x.template cast<double>();
  }
  return out;
}

// Guided teacher-forced conditions for whole clips: rows c * n + i.
template <class T>
Mat<T> guided_conditions(const Model<T>& m, const std::vector<const ClipTensors*>& clips, double omega) {
  ad::NoGradGuard g;
  Batch<T> b = make_batch<T>(clips);
  Mat<T> zc = teacher_forced_conditions(m, b, {}).value();
  if (omega == 1.0) return zc;
  Mat<T> zn = teacher_forced_conditions(m, b, std::vector<bool>(clips.size(), true)).value();
  return guide<T>(zn, zc, omega);
}

struct ConditionalMatchConfig {
  int contexts = 100;
  int samples = 256;
  std::uint64_t seed = 5;
};

// Contexts are (test clip, frame) pairs; the model sees the true audio prefix
// and video up to the frame.
template <class T>
ConditionalMatch evaluate_conditional_match(const Model<T>& m, const Dataset& ds, const SamplerConfig& sc,
                                            const ConditionalMatchConfig& cc) {
  auto test = ds.select("test");
  if (test.empty()) throw std::invalid_argument("conditional match: empty test split");
  Rng rng(cc.seed);
  std::uniform_int_distribution<size_t> pick_clip(0, test.size() - 1);
  std::uniform_int_distribution<Index> pick_frame(1, ds.cfg.frames - 1);
  std::vector<std::pair<size_t, Index>> ctx;
  for (int c = 0; c < cc.contexts; ++c) ctx.emplace_back(pick_clip(rng), pick_frame(rng));
  std::vector<ContextSamples> out;
  const ToyProcess& toy = ds.cfg.toy;
  for (const auto& [ci, i] : ctx) {
    const ClipRecord& rec = *test[ci];
    ClipTensors t{rec.tokens, ds.standardize(rec.latents)};
    Mat<T> z = guided_conditions<T>(m, {&t}, sc.omega);
    Mat<double> s = sample_from_conditions<T>(m, Mat<T>(z.row(i)), cc.samples, sc, rng);
    ContextSamples cs;
    cs.samples = ds.destandardize(s);
    cs.oracle_mean = toy.conditional_mean(rec.latents.row(i - 1).transpose(), rec.events.active(i));
    out.push_back(std::move(cs));
  }
  return conditional_match(out, toy.sigma_n);
}

// ---------------------------------------------------------------------------
// Generation on scenes outside the corpus

struct EvalClip {
  SceneSpec spec;
  Mat<double> latents;  // raw oracle latents
  EventTrack events;
  Mat<float> tokens;
};

inline EvalClip make_eval_clip(const SceneSpec& spec, const Dataset& ds) {
  RenderedClip r;
  EvalClip c;
  c.spec = spec;
  c.tokens = scene_tokens(spec, ds, &r);
  c.latents = std::move(r.latents);
  c.events = std::move(r.events);
  return c;
}

// Random-family scenes with seeds disjoint from the corpus.
inline std::vector<EvalClip> fresh_random_clips(const Dataset& ds, int n, std::uint64_t seed) {
  std::vector<EvalClip> out;
  for (int i = 0; i < n; ++i) out.push_back(make_eval_clip(random_scene(seed * 1000003ull + static_cast<std::uint64_t>(i), ds.cfg), ds));
  return out;
}

// Single periodic emitter, no distractor, `frames` long.
inline std::vector<EvalClip> periodic_clips(const Dataset& ds, int n, int frames, std::uint64_t seed) {
  std::vector<EvalClip> out;
  for (int i = 0; i < n; ++i)
    out.push_back(make_eval_clip(periodic_scene(seed * 1000003ull + static_cast<std::uint64_t>(i), ds.cfg, frames, false), ds));
  return out;
}

// One Bernoulli emitter at a fixed horizontal position.
inline std::vector<EvalClip> pan_clips(const Dataset& ds, int n, double position, std::uint64_t seed) {
  std::vector<EvalClip> out;
  for (int i = 0; i < n; ++i) {
    SceneSpec s = random_scene(seed * 1000003ull + static_cast<std::uint64_t>(i), ds.cfg);
    s.emitters.resize(1);
    s.emitters[0].position = position;
    s.emitters[0].rate = ds.cfg.max_rate;
    out.push_back(make_eval_clip(s, ds));
  }
  return out;
}

// Generates every clip (raw units), `batch` sessions at a time; session seeds
// are seed + clip index.
template <class T>
std::vector<Mat<double>> generate_eval(const Model<T>& m, const Dataset& ds, const SamplerConfig& sc,
                                       const RopeConfig& rope, const std::vector<EvalClip>& clips, std::uint64_t seed,
                                       int batch = 64) {
  std::vector<Mat<double>> out;
  for (size_t b0 = 0; b0 < clips.size(); b0 += static_cast<size_t>(batch)) {
    const size_t b1 = std::min(clips.size(), b0 + static_cast<size_t>(batch));
    std::vector<const Mat<float>*> tok;
    std::vector<std::uint64_t> seeds;
    for (size_t i = b0; i < b1; ++i) {
      tok.push_back(&clips[i].tokens);
      seeds.push_back(seed + i);
    }
    for (auto& x : generate_clips<T>(m, sc, rope, tok, seeds)) {
      if (!x.allFinite()) throw NumericalError("generation produced non-finite latents");
      out.push_back(ds.destandardize(x));
    }
  }
  return out;
}

// `per_clip` transition pairs per clip at frame indices drawn from rng; the
// same indices are used for generated and oracle latents.
inline std::pair<Mat<double>, Mat<double>> paired_transitions(const std::vector<Mat<double>>& gen,
                                                              const std::vector<EvalClip>& clips, int per_clip, Rng& rng,
                                                              Index first = 1, Index last = -1) {
  if (gen.size() != clips.size()) throw std::invalid_argument("paired_transitions: size mismatch");
  const Index d = clips.front().latents.cols();
  Mat<double> a(static_cast<Index>(gen.size()) * per_clip, 2 * d), b(a.rows(), a.cols());
  Index r = 0;
  for (size_t c = 0; c < gen.size(); ++c) {
    const Index hi = last < 0 ? gen[c].rows() - 1 : last;
    std::uniform_int_distribution<Index> pick(first, hi);
    for (int k = 0; k < per_clip; ++k, ++r) {
      const Index i = pick(rng);
      a.row(r) << gen[c].row(i - 1), gen[c].row(i);
      b.row(r) << clips[c].latents.row(i - 1), clips[c].latents.row(i);
    }
  }
  return {std::move(a), std::move(b)};
}

struct DistributionEval {
  MMDTest mmd;
  FrechetResult frechet;
  double oracle_nll = 0.0;  // mean per frame
};

inline DistributionEval distribution_eval(const ToyProcess& toy, const std::vector<Mat<double>>& gen,
                                          const std::vector<EvalClip>& clips, int per_clip, int permutations,
                                          std::uint64_t seed) {
  Rng rng(seed);
  auto [a, b] = paired_transitions(gen, clips, per_clip, rng);
  DistributionEval e;
  e.mmd = mmd_permutation_test(a, b, permutations, rng);
  e.frechet = frechet_gaussian(a, b);
  double nll = 0.0;
  Index frames = 0;
  for (size_t c = 0; c < gen.size(); ++c) {
    nll += sequence_nll(toy, gen[c], clips[c].events) * static_cast<double>(gen[c].rows());
    frames += gen[c].rows();
  }
  e.oracle_nll = nll / static_cast<double>(frames);
  return e;
}

inline int generated_event_lag(const ToyProcess& toy, const std::vector<Mat<double>>& gen,
                               const std::vector<EvalClip>& clips) {
  std::vector<LagClip> lc;
  for (size_t c = 0; c < gen.size(); ++c) lc.push_back({&gen[c], &clips[c].events});
  return event_lag(toy, lc);
}

inline PanEstimate generated_pan(const ToyProcess& toy, const std::vector<Mat<double>>& gen,
                                 const std::vector<EvalClip>& clips) {
  std::vector<LagClip> lc;
  for (size_t c = 0; c < gen.size(); ++c) lc.push_back({&gen[c], &clips[c].events});
  return pan_estimate(toy, lc, 0);
}

// Mean relative period error over clips, measured on frames [from, to).
inline double mean_period_error(const ToyProcess& toy, const std::vector<Mat<double>>& x,
                                const std::vector<EvalClip>& clips, Index from, Index to, int* invalid = nullptr) {
  double err = 0.0;
  int bad = 0;
  for (size_t c = 0; c < x.size(); ++c) {
    const double P = clips[c].spec.emitters.front().period;
    // Envelope over the whole clip so the window's first frame keeps its predecessor.
    PeriodEstimate p = period_estimate(innovation_envelope(x[c], toy.beta).segment(from, to - from));
    if (!p.valid) {
      ++bad;
      err += 1.0;
      continue;
    }
    err += std::abs(p.period - P) / P;
  }
  if (invalid) *invalid = bad;
  return err / static_cast<double>(x.size());
}

// Largest elementwise gap between the cached step path and a full-sequence
// forward pass over the same inputs, for both streams. Runs `frames` frames
// and then feeds the last latent, 2 frames + 1 positions in total.
template <class T>
double kv_cache_gap(const Model<T>& m, const SamplerConfig& sc, const RopeConfig& rope, const Mat<float>& tokens,
                    std::uint64_t seed) {
  ad::NoGradGuard g;
  const Index per = m.cfg.agg.tokens(), frames = tokens.rows() / per;
  GenerationBatch<T> gen(m, sc, rope, {seed});
  gen.enable_trace();
  for (Index i = 0; i < frames; ++i) gen.step(tokens.middleRows(i * per, per).template cast<T>());
  gen.feed_final_audio();
  const auto& tr = gen.trace();
  const Index len = 2 * frames + 1, c_x = m.cfg.backbone.c_x, c_v = m.cfg.agg.out_dim;
  Mat<T> audio(frames, c_x), vision(frames, c_v);
  for (Index i = 0; i < frames; ++i) {
    audio.row(i) = tr.latents[static_cast<size_t>(i)];
    vision.row(i) = tr.vision[static_cast<size_t>(i)];
  }
  Mat<T> null_v = m.bb.null_embedding.value().replicate(frames, 1);
  Mat<T> hc = m.bb.forward_full(ad::constant<T>(audio), ad::constant<T>(vision), 1, len, rope).value();
  Mat<T> hn = m.bb.forward_full(ad::constant<T>(audio), ad::constant<T>(null_v), 1, len, rope).value();
  double gap = 0.0;
  for (Index p = 0; p < len; ++p) {
    gap = std::max(gap, static_cast<double>((hc.row(p) - tr.cond[static_cast<size_t>(p)]).cwiseAbs().maxCoeff()));
    gap = std::max(gap, static_cast<double>((hn.row(p) - tr.null[static_cast<size_t>(p)]).cwiseAbs().maxCoeff()));
  }
  return gap;
}

}  // namespace framegen
