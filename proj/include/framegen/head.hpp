#pragma once

// Per-token conditional denoiser D(x_t, t, z) with the standard
// skip/out/in/noise preconditioning, plus the two samplers that drive it:
// a deterministic Heun ODE solver and multistep consistency sampling.

#include "framegen/autodiff.hpp"
#include "framegen/codec.hpp"
#include "framegen/nn.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>
#include <vector>

namespace framegen {

struct Precond {
  double c_skip, c_out, c_in, c_noise;
};

// Defined for t >= 0; at t = 0 the denoiser is the identity and c_noise is -inf.
inline Precond precondition(double t, double sigma_data = kSigmaData) {
  if (!(t >= 0.0) || !std::isfinite(t)) throw std::invalid_argument("precondition: t must be finite and >= 0");
  const double s2 = sigma_data * sigma_data, r = std::sqrt(t * t + s2);
  return {s2 / (t * t + s2), t * sigma_data / r, 1.0 / r,
          t > 0.0 ? 0.25 * std::log(t) : -std::numeric_limits<double>::infinity()};
}

struct HeadConfig {
  int c_x = 32;
  int cond_dim = 256;  // 2 * d_model
  int width = 256;
  int blocks = 4;
  int fourier = 64;    // cos + sin features of c_noise
  double sigma_data = kSigmaData;

  void validate() const {
    if (fourier % 2) throw std::invalid_argument("head: fourier feature count must be even");
    if (width <= 0 || blocks < 0 || c_x <= 0 || cond_dim <= 0) throw std::invalid_argument("head: bad shape");
  }
};

// Log-spaced frequencies in [0.1, 8] applied to c_noise.
inline Mat<double> noise_features(const Vec<double>& c_noise, int n_features) {
  const int half = n_features / 2;
  Mat<double> out(c_noise.size(), n_features);
  for (int j = 0; j < half; ++j) {
    const double f = 0.1 * std::pow(80.0, half > 1 ? static_cast<double>(j) / (half - 1) : 0.0);
    for (Index r = 0; r < c_noise.size(); ++r) {
      out(r, j) = std::cos(f * c_noise(r));
      out(r, half + j) = std::sin(f * c_noise(r));
    }
  }
  return out;
}

template <class T>
struct HeadBlock {
  LinearLayer<T> ada, mlp1, mlp2;  // ada -> [shift, scale, gate]
};

template <class T>
struct Head {
  HeadConfig cfg;
  LinearLayer<T> x_in, z_proj, t1, t2;
  std::vector<HeadBlock<T>> blocks;
  LinearLayer<T> ada_final, out;
  LinearLayer<T> u;  // log-variance of the per-token loss, from noise features only

  Head() = default;
  Head(const HeadConfig& c, Rng& rng) : cfg(c) {
    c.validate();
    const int w = c.width;
    x_in = LinearLayer<T>(c.c_x, w, rng);
    z_proj = LinearLayer<T>(c.cond_dim, w, rng);
    t1 = LinearLayer<T>(c.fourier, w, rng);
    t2 = LinearLayer<T>(w, w, rng);
    for (int b = 0; b < c.blocks; ++b) {
      HeadBlock<T> B;
      B.ada = LinearLayer<T>::zeros(w, 3 * w);
      B.mlp1 = LinearLayer<T>(w, w, rng);
      B.mlp2 = LinearLayer<T>(w, w, rng);
      blocks.push_back(std::move(B));
    }
    ada_final = LinearLayer<T>::zeros(w, 2 * w);
    out = LinearLayer<T>::zeros(w, c.c_x);
    u = LinearLayer<T>::zeros(c.fourier, 1);
  }

  void visit(const ParamVisitor<T>& f) {
    x_in.visit("head.x_in", f);
    z_proj.visit("head.z_proj", f);
    t1.visit("head.t1", f);
    t2.visit("head.t2", f);
    for (size_t b = 0; b < blocks.size(); ++b) {
      const std::string p = "head.b" + std::to_string(b);
      blocks[b].ada.visit(p + ".ada", f);
      blocks[b].mlp1.visit(p + ".mlp1", f);
      blocks[b].mlp2.visit(p + ".mlp2", f);
    }
    ada_final.visit("head.ada_final", f);
    out.visit("head.out", f);
    u.visit("head.u", f);
  }

  // Projected conditioning; computed once per token and reused across
  // solver steps.
  ad::Var<T> condition(const ad::Var<T>& z) const { return z_proj(z); }

  // Raw network output F(c_in x_t, c_noise, z) for rows with per-row t > 0.
  ad::Var<T> network(const Mat<T>& x_t, const Vec<double>& t, const ad::Var<T>& zc, T dropout = T(0),
                     Rng* rng = nullptr) const {
    const Index n = x_t.rows();
    if (t.size() != n || zc.rows() != n) throw std::invalid_argument("head: row mismatch");
    Mat<T> xs(x_t);
    Vec<double> cn(n);
    for (Index r = 0; r < n; ++r) {
      const Precond p = precondition(t(r), cfg.sigma_data);
      xs.row(r) *= static_cast<T>(p.c_in);
      cn(r) = p.c_noise;
    }
    const Index w = cfg.width;
    ad::Var<T> temb = t2(ad::silu(t1(ad::constant<T>(noise_features(cn, cfg.fourier).cast<T>()))));
    ad::Var<T> sc = ad::silu(ad::add(temb, zc));
    ad::Var<T> h = x_in(ad::constant<T>(std::move(xs)));
    const T eps = static_cast<T>(1e-6);
    for (const auto& B : blocks) {
      ad::Var<T> mod = B.ada(sc);
      ad::Var<T> hn = modulate(ad::layer_norm(h, eps), ad::slice_cols(mod, 0, w), ad::slice_cols(mod, w, w));
      ad::Var<T> m = ad::silu(B.mlp1(hn));
      if (rng) m = ad::dropout(m, dropout, *rng);
      h = ad::add(h, ad::mul(ad::slice_cols(mod, 2 * w, w), B.mlp2(m)));
    }
    ad::Var<T> mod = ada_final(sc);
    return out(modulate(ad::layer_norm(h, eps), ad::slice_cols(mod, 0, w), ad::slice_cols(mod, w, w)));
  }

  // D = c_skip x_t + c_out F. Rows with t = 0 return x_t exactly.
  ad::Var<T> denoise(const Mat<T>& x_t, const Vec<double>& t, const ad::Var<T>& zc, T dropout = T(0),
                     Rng* rng = nullptr) const {
    const Index n = x_t.rows();
    if (!x_t.allFinite()) throw std::invalid_argument("denoise: non-finite input");
    Mat<T> skip(x_t), outc(n, 1);
    for (Index r = 0; r < n; ++r) {
      const Precond p = precondition(t(r), cfg.sigma_data);
      skip.row(r) *= static_cast<T>(p.c_skip);
      outc(r, 0) = static_cast<T>(p.c_out);
    }
    bool all_zero = true;
    for (Index r = 0; r < n; ++r) all_zero = all_zero && t(r) == 0.0;
    if (all_zero) return ad::constant<T>(std::move(skip));
    Vec<double> tt = t;
    for (Index r = 0; r < n; ++r) if (tt(r) == 0.0) tt(r) = 1.0;  // masked by c_out = 0
    ad::Var<T> f = network(x_t, tt, zc, dropout, rng);
    return ad::add(ad::constant<T>(std::move(skip)), ad::mul_col(f, ad::constant<T>(std::move(outc))));
  }

  // Per-row log-variance u(t), [n, 1].
  ad::Var<T> uncertainty(const Vec<double>& t) const {
    Vec<double> cn(t.size());
    for (Index r = 0; r < t.size(); ++r) cn(r) = precondition(t(r), cfg.sigma_data).c_noise;
    return u(ad::constant<T>(noise_features(cn, cfg.fourier).cast<T>()));
  }

 private:
  static ad::Var<T> modulate(const ad::Var<T>& x, const ad::Var<T>& shift, const ad::Var<T>& scale) {
    return ad::add(ad::mul(x, ad::add_scalar(scale, T(1))), shift);
  }
};

// ---------------------------------------------------------------------------
// Samplers. A denoiser maps a batch of rows x (all at noise level t) to D(x, t).

template <class T>
using Denoiser = std::function<Mat<T>(const Mat<T>&, double)>;

// Inference-only denoiser for a fixed projected condition.
template <class T>
Denoiser<T> make_denoiser(const Head<T>& head, const Mat<T>& zc) {
  return [&head, zc](const Mat<T>& x, double t) {
    ad::NoGradGuard g;
    Mat<T> zr = zc.rows() == x.rows() ? zc : zc.replicate(x.rows(), 1);
    return head.denoise(x, Vec<double>::Constant(x.rows(), t), ad::constant<T>(std::move(zr))).value();
  };
}

// (1 - w) a + w b: equals a exactly at w = 0 and b exactly at w = 1.
template <class T, class A, class B>
Mat<T> guide(const A& uncond, const B& cond, double omega) {
  return static_cast<T>(1.0 - omega) * uncond + static_cast<T>(omega) * cond;
}

// Guided denoiser D_u + w (D_c - D_u): two evaluations per call.
template <class T>
Denoiser<T> guided_denoiser(Denoiser<T> cond, Denoiser<T> uncond, double omega) {
  return [cond = std::move(cond), uncond = std::move(uncond), omega](const Mat<T>& x, double t) {
    return guide<T>(uncond(x, t), cond(x, t), omega);
  };
}

// Wraps a denoiser with an evaluation counter.
template <class T>
Denoiser<T> counted(Denoiser<T> d, long* counter) {
  return [d = std::move(d), counter](const Mat<T>& x, double t) {
    ++*counter;
    return d(x, t);
  };
}

struct SamplerStats {
  long nfe = 0;
};

inline constexpr double kTMax = 80.0;
inline constexpr double kRho = 7.0;

// N solver steps over N + 1 levels t_0 = t_max > ... > t_N = t_min (= 0 here):
//   t_j = (t_max^(1/rho) + j/N (t_min^(1/rho) - t_max^(1/rho)))^rho.
inline std::vector<double> heun_schedule(int steps, double t_max = kTMax, double t_min = 0.0, double rho = kRho) {
  if (steps < 2) throw std::invalid_argument("heun_schedule: need at least two steps");
  std::vector<double> t(static_cast<size_t>(steps) + 1);
  const double a = std::pow(t_max, 1.0 / rho), b = std::pow(t_min, 1.0 / rho);
  for (int j = 0; j <= steps; ++j) t[j] = std::pow(a + (static_cast<double>(j) / steps) * (b - a), rho);
  t.front() = t_max;
  t.back() = t_min;
  return t;
}

// Deterministic second-order solver; the step into t = 0 is first order.
// `x` holds the initial N(0, I) draw and is scaled by t_0 here.
template <class T>
Mat<T> heun_sample(const Denoiser<T>& D, Mat<T> x, int steps, SamplerStats* stats = nullptr) {
  const auto ts = heun_schedule(steps);
  x *= static_cast<T>(ts[0]);
  long nfe = 0;
  for (int j = 0; j < steps; ++j) {
    const double t = ts[j], tn = ts[j + 1];
    Mat<T> d = (x - D(x, t)) / static_cast<T>(t);
    ++nfe;
    Mat<T> xn = x + static_cast<T>(tn - t) * d;
    if (tn > 0.0) {
      Mat<T> d2 = (xn - D(xn, tn)) / static_cast<T>(tn);
      ++nfe;
      xn = x + static_cast<T>(0.5 * (tn - t)) * (d + d2);
    }
    x = std::move(xn);
  }
  if (stats) stats->nfe += nfe;
  return x;
}

// Consistency-model schedules for a requested number of evaluations.
inline std::vector<double> cm_schedule(int nfe) {
  switch (nfe) {
    case 1: return {};
    case 2: return {2.5};
    case 4: return {5.0, 1.1, 0.08};
    default: throw std::invalid_argument("cm_schedule: no schedule for NFE=" + std::to_string(nfe));
  }
}

// x <- G(t_max eps_0, t_max); for each t_k: x <- G(x + t_k eps_k, t_k).
// With shared_noise every refresh reuses eps_0.
template <class T>
Mat<T> cm_sample(const Denoiser<T>& G, const Mat<T>& eps0, const std::vector<double>& ts, Rng& rng,
                 bool shared_noise = false, SamplerStats* stats = nullptr) {
  Mat<T> x = G(eps0 * static_cast<T>(kTMax), kTMax);
  long nfe = 1;
  std::normal_distribution<double> n01;
  double prev = kTMax;
  for (double t : ts) {
    if (!(t > 0.0 && t < prev)) throw std::invalid_argument("cm_sample: intermediate levels must decrease within (0, t_max)");
    prev = t;
    Mat<T> e(eps0.rows(), eps0.cols());
    if (shared_noise) e = eps0;
    else
      for (Index i = 0; i < e.size(); ++i) e.data()[i] = static_cast<T>(n01(rng));
    x = G(x + static_cast<T>(t) * e, t);
    ++nfe;
  }
  if (stats) stats->nfe += nfe;
  return x;
}

template <class T>
Mat<T> standard_normal(Index rows, Index cols, Rng& rng) {
  std::normal_distribution<double> n01;
  Mat<T> m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(n01(rng));
  return m;
}

}  // namespace framegen
