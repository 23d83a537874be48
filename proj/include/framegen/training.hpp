#pragma once

// Stage-1 denoising score matching with a learned per-level uncertainty and
// Stage-2 consistency fine-tuning against an EMA teacher.

#include "framegen/model.hpp"
#include "framegen/optim.hpp"

#include <cmath>
#include <functional>
#include <numbers>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace framegen {

struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NoiseSamplerCfg {
  double p_mean = -0.4;
  double p_std = 1.0;

  static NoiseSamplerCfg stage1() { return {-0.4, 1.0}; }
  static NoiseSamplerCfg stage2() { return {-0.8, 1.6}; }

  void validate() const {
    if (!(p_std > 0.0)) throw std::invalid_argument("noise sampler: p_std must be > 0");
  }
  double from_normal(double g) const { return std::exp(p_mean + p_std * g); }
  double sample(Rng& rng) const {
    std::normal_distribution<double> n01;
    return from_normal(n01(rng));
  }
};

// Stage-1 loss weight (t^2 + s^2) / (t s)^2.
inline double edm_weight(double t, double sigma_data = kSigmaData) {
  return (t * t + sigma_data * sigma_data) / ((t * sigma_data) * (t * sigma_data));
}

// Stage-2 loss weight 1/t^2 + 1/s^2.
inline double ect_weight(double t, double sigma_data = kSigmaData) {
  return 1.0 / (t * t) + 1.0 / (sigma_data * sigma_data);
}

inline double pseudo_huber(double dist, double nu = 0.06) { return std::sqrt(dist * dist + nu * nu) - nu; }

enum class EctPreset { cf, in };

struct ECTMapCfg {
  double q = 2.0;
  double s = 1.0;
  double k = 8.0;
  double b = 1.0;

  static ECTMapCfg preset(EctPreset p, long total_iters) {
    ECTMapCfg c;
    if (p == EctPreset::cf) {
      c.q = 2.0;
      c.s = std::max(1L, total_iters / 8);
    } else {
      c.q = 4.0;
      c.s = std::max(1L, total_iters / 4);
    }
    return c;
  }

  void validate() const {
    if (!(q > 1.0 && s >= 1.0 && k > 0.0 && b > 0.0)) throw std::invalid_argument("ect map: need q>1, s>=1, k>0, b>0");
  }

  // Unclamped (1 - q^{-ceil(iters/s)} k sigmoid(-b t)) t.
  double raw(double t, long iters) const {
    const double m = std::ceil(static_cast<double>(iters) / s);
    const double sig = 1.0 / (1.0 + std::exp(b * t));
    return (1.0 - std::pow(q, -m) * k * sig) * t;
  }

  // Gap t - r, computed directly so it stays positive where r rounds to t.
  double gap(double t, long iters) const {
    if (!(t > 0.0)) throw std::invalid_argument("ect map: t must be > 0");
    if (iters < 0) throw std::invalid_argument("ect map: negative iteration count");
    const double m = std::ceil(static_cast<double>(iters) / s);
    const double sig = 1.0 / (1.0 + std::exp(b * t));
    return std::min(t, std::pow(q, -m) * k * sig * t);
  }

  double map(double t, long iters) const {
    const double g = gap(t, iters);
    return g >= t ? 0.0 : t - g;
  }
};

// One training clip: conditioned vision tokens [frames * agg tokens, 4C] and
// standardized latents [frames, c_x].
struct ClipTensors {
  Mat<float> tokens;
  Mat<float> latents;
  Index frames() const { return latents.rows(); }
};

template <class T>
struct Batch {
  Index clips = 0, frames = 0;
  Mat<T> tokens;
  Mat<T> latents;  // clip-major rows
};

template <class T>
Batch<T> make_batch(const std::vector<const ClipTensors*>& clips) {
  if (clips.empty()) throw std::invalid_argument("make_batch: empty batch");
  Batch<T> b;
  b.clips = static_cast<Index>(clips.size());
  b.frames = clips.front()->frames();
  const Index tok = clips.front()->tokens.rows(), c_x = clips.front()->latents.cols();
  b.tokens.resize(b.clips * tok, clips.front()->tokens.cols());
  b.latents.resize(b.clips * b.frames, c_x);
  for (Index i = 0; i < b.clips; ++i) {
    const auto& c = *clips[static_cast<size_t>(i)];
    if (c.frames() != b.frames || c.tokens.rows() != tok) throw std::invalid_argument("make_batch: ragged clips");
    b.tokens.middleRows(i * tok, tok) = c.tokens.cast<T>();
    b.latents.middleRows(i * b.frames, b.frames) = c.latents.cast<T>();
  }
  return b;
}

// Teacher-forced conditioning vectors z_i = [out(2i-1), out(2i)] for every
// frame of every clip, [clips * frames, 2 d_model]. Clips flagged in
// `null_clips` see the null embedding at every vision position.
template <class T>
ad::Var<T> teacher_forced_conditions(const Model<T>& m, const Batch<T>& b, const std::vector<bool>& null_clips,
                                     T dropout = T(0), Rng* rng = nullptr) {
  const Index n = b.frames, B = b.clips, len = 2 * n;
  ad::Var<T> v = m.agg.forward(b.tokens);
  std::vector<bool> null_rows(static_cast<size_t>(B * n), false);
  for (Index c = 0; c < B; ++c)
    if (!null_clips.empty() && null_clips[static_cast<size_t>(c)])
      for (Index i = 0; i < n; ++i) null_rows[static_cast<size_t>(c * n + i)] = true;
  v = m.bb.substitute_null(v, null_rows);
  // Audio inputs x_1 .. x_{n-1}; the output at x_n's position is never used.
  std::vector<Index> aidx;
  aidx.reserve(static_cast<size_t>(B * (n - 1)));
  for (Index c = 0; c < B; ++c)
    for (Index i = 0; i + 1 < n; ++i) aidx.push_back(c * n + i);
  ad::Var<T> x = ad::constant<T>(Mat<T>(b.latents(aidx, Eigen::all)));
  ad::Var<T> out = m.bb.forward_full(x, v, B, len, m.cfg.rope, dropout, rng);
  std::vector<Index> odd, even;
  for (Index c = 0; c < B; ++c)
    for (Index i = 1; i <= n; ++i) {
      odd.push_back(c * len + 2 * i - 2);
      even.push_back(c * len + 2 * i - 1);
    }
  return ad::concat_cols<T>({ad::gather_rows(out, std::move(odd)), ad::gather_rows(out, std::move(even))});
}

struct LossBreakdown {
  double loss = 0.0;
  double weighted_residual = 0.0;  // mean per (clip, draw), summed over tokens
  double uncertainty = 0.0;
  double mean_dt = 0.0;            // Stage 2: mean t - r
  double grad_norm = 0.0;
};

struct DrawSet {
  Vec<double> t, r;
  Mat<double> eps;
};

// Per-row noise levels and shared Gaussian noise for `draws` replicas of every token.
inline DrawSet sample_draws(Index tokens, int draws, Index c_x, const NoiseSamplerCfg& ns, Rng& rng) {
  DrawSet d;
  const Index rows = tokens * draws;
  d.t.resize(rows);
  std::normal_distribution<double> n01;
  for (Index r = 0; r < rows; ++r) d.t(r) = ns.sample(rng);
  d.eps.resize(rows, c_x);
  for (Index i = 0; i < d.eps.size(); ++i) d.eps.data()[i] = n01(rng);
  return d;
}

inline std::vector<Index> replicate_index(Index tokens, int draws) {
  std::vector<Index> idx(static_cast<size_t>(tokens * draws));
  for (int k = 0; k < draws; ++k)
    for (Index i = 0; i < tokens; ++i) idx[static_cast<size_t>(k * tokens + i)] = i;
  return idx;
}

inline void check_finite_rows(const Mat<double>& per_row, const Vec<double>& t, Index tokens, const char* what) {
  for (Index r = 0; r < per_row.rows(); ++r)
    if (!std::isfinite(per_row(r, 0))) {
      std::ostringstream os;
      os << what << ": non-finite loss at token " << (r % tokens) << " (draw " << (r / tokens) << ", t=" << t(r)
         << ")";
      throw NumericalError(os.str());
    }
}

// norm * sum_rows [lambda(t) e^{-u} |x0 - D|^2 + u].
template <class T>
ad::Var<T> dsm_objective(const ad::Var<T>& D, Mat<T> x0, const Vec<double>& t, const ad::Var<T>& u, T norm,
                         Index tokens, double sigma_data = kSigmaData, LossBreakdown* info = nullptr) {
  const Index rows = x0.rows();
  ad::Var<T> err = ad::row_sum(ad::square(ad::sub(D, ad::constant<T>(std::move(x0)))));
  Mat<T> lam(rows, 1);
  for (Index r = 0; r < rows; ++r) lam(r, 0) = static_cast<T>(edm_weight(t(r), sigma_data));
  ad::Var<T> wres = ad::mul(ad::mul(err, ad::constant<T>(std::move(lam))), ad::exp(ad::scale(u, T(-1))));
  ad::Var<T> per = ad::add(wres, u);
  check_finite_rows(per.value().template cast<double>(), t, tokens, "dsm");
  if (info) {
    info->weighted_residual = static_cast<double>(wres.value().sum() * norm);
    info->uncertainty = static_cast<double>(u.value().sum() * norm);
  }
  return ad::scale(ad::sum(per), norm);
}

// Stage-1 loss graph. Returns the scalar loss; `draws` supplies t and eps.
template <class T>
ad::Var<T> dsm_loss(const Model<T>& m, const Batch<T>& b, const ad::Var<T>& z, const DrawSet& d, int draws,
                    T dropout, Rng* rng, LossBreakdown* info = nullptr) {
  const Index tokens = b.clips * b.frames;
  auto rep = replicate_index(tokens, draws);
  ad::Var<T> zc = ad::gather_rows(m.head.condition(z), rep);
  Mat<T> x0 = b.latents(rep, Eigen::all);
  Mat<T> xt = x0 + (d.eps.cast<T>().array().colwise() * d.t.cast<T>().array()).matrix();
  ad::Var<T> D = m.head.denoise(xt, d.t, zc, dropout, rng);
  return dsm_objective(D, std::move(x0), d.t, m.head.uncertainty(d.t), T(1) / static_cast<T>(b.clips * draws),
                       tokens, m.cfg.head.sigma_data, info);
}

// Stage-2 loss graph; the teacher output is a constant.
template <class T>
ad::Var<T> ect_loss(const Model<T>& student, const Model<T>& teacher, const Batch<T>& b, const ad::Var<T>& z_student,
                    const Mat<T>& zc_teacher, const DrawSet& d, int draws, T dropout, Rng* rng, double nu = 0.06,
                    LossBreakdown* info = nullptr) {
  const Index tokens = b.clips * b.frames, rows = tokens * draws;
  auto rep = replicate_index(tokens, draws);
  Mat<T> x0 = b.latents(rep, Eigen::all);
  Mat<T> eps = d.eps.cast<T>();
  Mat<T> xt = x0 + (eps.array().colwise() * d.t.cast<T>().array()).matrix();
  Mat<T> xr = x0 + (eps.array().colwise() * d.r.cast<T>().array()).matrix();
  Mat<T> g_teacher;
  {
    ad::NoGradGuard g;
    g_teacher = teacher.head.denoise(xr, d.r, ad::constant<T>(Mat<T>(zc_teacher(rep, Eigen::all)))).value();
  }
  ad::Var<T> zc = ad::gather_rows(student.head.condition(z_student), rep);
  ad::Var<T> G = student.head.denoise(xt, d.t, zc, dropout, rng);
  ad::Var<T> dist2 = ad::row_sum(ad::square(ad::sub(G, ad::constant<T>(std::move(g_teacher)))));
  ad::Var<T> ph = ad::add_scalar(ad::sqrt(ad::add_scalar(dist2, static_cast<T>(nu * nu))), static_cast<T>(-nu));
  Mat<T> w(rows, 1);
  for (Index r = 0; r < rows; ++r) w(r, 0) = static_cast<T>(ect_weight(d.t(r), student.cfg.head.sigma_data));
  ad::Var<T> per = ad::mul(ph, ad::constant<T>(std::move(w)));
  check_finite_rows(per.value().template cast<double>(), d.t, tokens, "ect");
  const T norm = T(1) / static_cast<T>(b.clips * draws);
  if (info) info->weighted_residual = static_cast<double>(per.value().sum() * norm);
  return ad::scale(ad::sum(per), norm);
}

// ---------------------------------------------------------------------------
// Training state and loops

struct TrainConfig {
  int stage = 1;
  long iterations = 2000;
  long total_iterations = 2000;  // Stage-2 schedule horizon for the ECT map
  int batch = 8;
  int draws = 4;
  AdamWConfig adam;
  double ema_rate = 0.9999;
  double dropout = 0.0;
  double cfg_dropout = 0.1;
  NoiseSamplerCfg noise = NoiseSamplerCfg::stage1();
  EctPreset preset = EctPreset::cf;
  double huber_nu = 0.06;
  bool head_only = false;
  long log_every = 50;
  long checkpoint_every = 0;
  std::uint64_t seed = 1;
};

template <class T>
struct TrainState {
  int stage = 1;
  Model<T> student;
  Model<T> ema;  // sampling EMA (Stage 1) or stop-gradient teacher (Stage 2)
  AdamW<T> opt;
  long iter = 0;
  Rng rng;

  TrainState() = default;
  TrainState(const ModelConfig& mc, const TrainConfig& tc, std::uint64_t init_seed)
      : stage(1), student(mc, init_seed), ema(student.clone()), opt(tc.adam), rng(tc.seed) {
    opt.init(param_refs(student));
  }

  // Stage-2 state from a Stage-1 state: student and teacher both start from
  // the Stage-1 sampling EMA; optimizer moments restart.
  static TrainState from_stage1(const TrainState& s1, const TrainConfig& tc) {
    if (s1.stage != 1) throw std::invalid_argument("stage 2 must be initialized from a stage-1 checkpoint");
    TrainState s;
    s.stage = 2;
    s.student = s1.ema.clone();
    s.ema = s1.ema.clone();
    s.opt = AdamW<T>(tc.adam);
    s.opt.init(param_refs(s.student));
    s.iter = 0;
    s.rng = Rng(tc.seed);
    return s;
  }
};

template <class T>
std::vector<bool> sample_null_clips(Index clips, double p, Rng& rng) {
  std::bernoulli_distribution drop(p);
  std::vector<bool> out(static_cast<size_t>(clips));
  for (Index c = 0; c < clips; ++c) out[static_cast<size_t>(c)] = p > 0.0 && drop(rng);
  return out;
}

template <class T>
std::vector<const ClipTensors*> sample_clips(const std::vector<ClipTensors>& data, int batch, Rng& rng) {
  if (data.empty()) throw std::invalid_argument("training: empty dataset");
  std::uniform_int_distribution<size_t> pick(0, data.size() - 1);
  std::vector<const ClipTensors*> out;
  for (int i = 0; i < batch; ++i) out.push_back(&data[pick(rng)]);
  return out;
}

// One Stage-1 optimizer step (forward, backward, clip, update, EMA).
template <class T>
LossBreakdown dsm_step(TrainState<T>& s, const Batch<T>& b, const TrainConfig& tc) {
  auto nulls = sample_null_clips<T>(b.clips, tc.cfg_dropout, s.rng);
  const T drop = static_cast<T>(tc.dropout);
  DrawSet d = sample_draws(b.clips * b.frames, tc.draws, b.latents.cols(), tc.noise, s.rng);
  LossBreakdown info;
  s.student.zero_grad();
  ad::Var<T> z = teacher_forced_conditions(s.student, b, nulls, drop, tc.dropout > 0 ? &s.rng : nullptr);
  ad::Var<T> loss = dsm_loss(s.student, b, z, d, tc.draws, drop, tc.dropout > 0 ? &s.rng : nullptr, &info);
  info.loss = static_cast<double>(loss.item());
  ad::backward(loss);
  info.grad_norm = s.opt.step(param_refs(s.student));
  ema_update(s.ema, s.student, tc.ema_rate);
  ++s.iter;
  return info;
}

// One Stage-2 optimizer step against the EMA teacher.
template <class T>
LossBreakdown ect_step(TrainState<T>& s, const Batch<T>& b, const TrainConfig& tc) {
  if (s.stage != 2) throw std::invalid_argument("ect_step: state was not initialized from stage 1");
  const ECTMapCfg map = ECTMapCfg::preset(tc.preset, tc.total_iterations);
  auto nulls = sample_null_clips<T>(b.clips, tc.cfg_dropout, s.rng);
  const T drop = static_cast<T>(tc.dropout);
  DrawSet d = sample_draws(b.clips * b.frames, tc.draws, b.latents.cols(), tc.noise, s.rng);
  d.r.resize(d.t.size());
  double dt = 0.0;
  for (Index r = 0; r < d.t.size(); ++r) {
    d.r(r) = map.map(d.t(r), s.iter);
    dt += d.t(r) - d.r(r);
  }
  LossBreakdown info;
  info.mean_dt = dt / static_cast<double>(d.t.size());
  Mat<T> zc_teacher;
  {
    ad::NoGradGuard g;
    ad::Var<T> zt = teacher_forced_conditions(s.ema, b, nulls);
    zc_teacher = s.ema.head.condition(zt).value();
  }
  s.student.zero_grad();
  ad::Var<T> z;
  if (tc.head_only) {
    ad::NoGradGuard g;
    z = teacher_forced_conditions(s.student, b, nulls);
  } else {
    z = teacher_forced_conditions(s.student, b, nulls, drop, tc.dropout > 0 ? &s.rng : nullptr);
  }
  ad::Var<T> loss = ect_loss(s.student, s.ema, b, z, zc_teacher, d, tc.draws, drop,
                             tc.dropout > 0 ? &s.rng : nullptr, tc.huber_nu, &info);
  info.loss = static_cast<double>(loss.item());
  ad::backward(loss);
  // Parameters without a gradient (the frozen backbone in head-only mode) are
  // left untouched by the optimizer.
  info.grad_norm = s.opt.step(param_refs(s.student));
  ema_update(s.ema, s.student, tc.ema_rate);
  ++s.iter;
  return info;
}

// JSON line for the loss log.
inline std::string loss_record(long iter, const LossBreakdown& l) {
  std::ostringstream os;
  os.precision(9);
  os << "{\"iter\":" << iter << ",\"loss\":" << l.loss << ",\"grad_norm\":" << l.grad_norm << ",\"dt_mean\":" << l.mean_dt
     << "}";
  return os.str();
}

// Runs `tc.iterations` steps from the state's current iteration. `on_log` is
// called every log_every steps, `on_checkpoint` every checkpoint_every steps.
template <class T>
void train(TrainState<T>& s, const std::vector<ClipTensors>& data, const TrainConfig& tc,
           const std::function<void(long, const LossBreakdown&)>& on_log = {},
           const std::function<void(const TrainState<T>&)>& on_checkpoint = {}) {
  tc.noise.validate();
  while (s.iter < tc.iterations) {
    Batch<T> b = make_batch<T>(sample_clips<T>(data, tc.batch, s.rng));
    LossBreakdown l = s.stage == 1 ? dsm_step(s, b, tc) : ect_step(s, b, tc);
    if (on_log && tc.log_every > 0 && (s.iter % tc.log_every == 0 || s.iter == tc.iterations)) on_log(s.iter, l);
    if (on_checkpoint && tc.checkpoint_every > 0 && s.iter % tc.checkpoint_every == 0) on_checkpoint(s);
  }
}

}  // namespace framegen
