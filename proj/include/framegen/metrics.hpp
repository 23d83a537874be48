#pragma once

// Desk-scale metrics on raw latents: oracle conditionals, unbiased RBF-MMD
// with a permutation test, Gaussian Frechet distance, period and event-lag
// estimators, pan asymmetry.

#include "framegen/toy.hpp"
#include "framegen/vision.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace framegen {

// ---------------------------------------------------------------------------
// Oracle

inline Vec<double> oracle_sample(const ToyProcess& toy, const Vec<double>& prev, const std::vector<ActiveEvent>& ev,
                                 Rng& rng) {
  return toy.sample(prev, ev, rng);
}

inline double oracle_nll(const ToyProcess& toy, const Vec<double>& x, const Vec<double>& prev,
                         const std::vector<ActiveEvent>& ev) {
  return toy.nll(x, prev, ev);
}

// Mean per-frame NLL of a raw latent sequence under the oracle, given the
// event track that produced the conditioning video.
inline double sequence_nll(const ToyProcess& toy, const Mat<double>& x, const EventTrack& ev) {
  double s = 0.0;
  Vec<double> prev = Vec<double>::Zero(x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    Vec<double> xi = x.row(i).transpose();
    s += toy.nll(xi, prev, ev.active(i));
    prev = xi;
  }
  return s / static_cast<double>(x.rows());
}

// ---------------------------------------------------------------------------
// MMD

inline Mat<double> pairwise_sq_dists(const Mat<double>& a, const Mat<double>& b) {
  Mat<double> d = (-2.0 * a * b.transpose()).eval();
  const Vec<double> na = a.rowwise().squaredNorm(), nb = b.rowwise().squaredNorm();
  d.colwise() += na;
  d.rowwise() += nb.transpose();
  return d.cwiseMax(0.0);
}

// Median pairwise distance of the pooled sample (off-diagonal pairs).
inline double median_bandwidth(const Mat<double>& a, const Mat<double>& b) {
  Mat<double> p(a.rows() + b.rows(), a.cols());
  p << a, b;
  Mat<double> d = pairwise_sq_dists(p, p);
  std::vector<double> v;
  v.reserve(static_cast<size_t>(p.rows() * (p.rows() - 1) / 2));
  for (Index i = 0; i < p.rows(); ++i)
    for (Index j = i + 1; j < p.rows(); ++j) v.push_back(d(i, j));
  auto mid = v.begin() + static_cast<std::ptrdiff_t>(v.size() / 2);
  std::nth_element(v.begin(), mid, v.end());
  return std::sqrt(*mid);
}

namespace detail {

// Unbiased estimate from a pooled kernel matrix; idx lists the pooled rows,
// the first m belong to A.
inline double mmd_from_kernel(const Mat<double>& K, const std::vector<Index>& idx, Index m) {
  const Index n = static_cast<Index>(idx.size()) - m;
  double xx = 0.0, yy = 0.0, xy = 0.0;
  for (Index i = 0; i < m; ++i) {
    const Index a = idx[static_cast<size_t>(i)];
    for (Index j = 0; j < m; ++j)
      if (i != j) xx += K(a, idx[static_cast<size_t>(j)]);
    for (Index j = m; j < m + n; ++j) xy += K(a, idx[static_cast<size_t>(j)]);
  }
  for (Index i = m; i < m + n; ++i) {
    const Index b = idx[static_cast<size_t>(i)];
    for (Index j = m; j < m + n; ++j)
      if (i != j) yy += K(b, idx[static_cast<size_t>(j)]);
  }
  const double dm = static_cast<double>(m), dn = static_cast<double>(n);
  return xx / (dm * (dm - 1.0)) + yy / (dn * (dn - 1.0)) - 2.0 * xy / (dm * dn);
}

inline Mat<double> pooled_kernel(const Mat<double>& a, const Mat<double>& b, double h) {
  Mat<double> p(a.rows() + b.rows(), a.cols());
  p << a, b;
  return (pairwise_sq_dists(p, p) * (-0.5 / (h * h))).array().exp().matrix();
}

inline void check_sets(const Mat<double>& a, const Mat<double>& b) {
  if (a.rows() < 2 || b.rows() < 2) throw std::invalid_argument("mmd: each sample set needs at least two points");
  if (a.cols() != b.cols()) throw std::invalid_argument("mmd: feature dimensions differ");
}

}  // namespace detail

// Unbiased U-statistic with k(x, y) = exp(-|x - y|^2 / (2 h^2)); h <= 0 selects
// the median heuristic.
inline double rbf_mmd(const Mat<double>& a, const Mat<double>& b, double bandwidth = 0.0) {
  detail::check_sets(a, b);
  const double h = bandwidth > 0.0 ? bandwidth : median_bandwidth(a, b);
  Mat<double> K = detail::pooled_kernel(a, b, h);
  std::vector<Index> idx(static_cast<size_t>(K.rows()));
  std::iota(idx.begin(), idx.end(), Index{0});
  return detail::mmd_from_kernel(K, idx, a.rows());
}

// V-statistic (diagonal terms kept).
inline double rbf_mmd_biased(const Mat<double>& a, const Mat<double>& b, double bandwidth) {
  detail::check_sets(a, b);
  Mat<double> K = detail::pooled_kernel(a, b, bandwidth);
  const Index m = a.rows(), n = b.rows();
  return K.topLeftCorner(m, m).mean() + K.bottomRightCorner(n, n).mean() - 2.0 * K.topRightCorner(m, n).mean();
}

struct MMDTest {
  double mmd2 = 0.0;
  double bandwidth = 0.0;
  double p_value = 1.0;
  double null_q95 = 0.0;
  int permutations = 0;
};

inline MMDTest mmd_permutation_test(const Mat<double>& a, const Mat<double>& b, int permutations, Rng& rng,
                                    double bandwidth = 0.0) {
  detail::check_sets(a, b);
  if (permutations < 1) throw std::invalid_argument("mmd: need at least one permutation");
  MMDTest r;
  r.bandwidth = bandwidth > 0.0 ? bandwidth : median_bandwidth(a, b);
  r.permutations = permutations;
  Mat<double> K = detail::pooled_kernel(a, b, r.bandwidth);
  std::vector<Index> idx(static_cast<size_t>(K.rows()));
  std::iota(idx.begin(), idx.end(), Index{0});
  r.mmd2 = detail::mmd_from_kernel(K, idx, a.rows());
  std::vector<double> null(static_cast<size_t>(permutations));
  int ge = 0;
  for (int p = 0; p < permutations; ++p) {
    std::shuffle(idx.begin(), idx.end(), rng);
    null[static_cast<size_t>(p)] = detail::mmd_from_kernel(K, idx, a.rows());
    if (null[static_cast<size_t>(p)] >= r.mmd2) ++ge;
  }
  r.p_value = (1.0 + ge) / (1.0 + permutations);
  std::sort(null.begin(), null.end());
  r.null_q95 = null[static_cast<size_t>(std::min<double>(permutations - 1, std::ceil(0.95 * permutations) - 1))];
  return r;
}

// Rows concat(x_{i-1}, x_i) for i >= 1.
inline Mat<double> transition_pairs(const Mat<double>& x) {
  if (x.rows() < 2) return Mat<double>(0, 2 * x.cols());
  Mat<double> out(x.rows() - 1, 2 * x.cols());
  out << x.topRows(x.rows() - 1), x.bottomRows(x.rows() - 1);
  return out;
}

// ---------------------------------------------------------------------------
// Frechet distance between Gaussian fits

struct FrechetResult {
  double distance = 0.0;
  bool clamped = false;  // a covariance had negative eigenvalues set to 0
};

namespace detail {
inline Mat<double> psd_sqrt(const Mat<double>& s, bool& clamped) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (s + s.transpose()));
  Eigen::VectorXd ev = es.eigenvalues();
  if (ev.minCoeff() < 0.0) {
    if (ev.minCoeff() < -1e-10 * std::max(1.0, ev.cwiseAbs().maxCoeff())) clamped = true;
    ev = ev.cwiseMax(0.0);
  }
  return es.eigenvectors() * ev.cwiseSqrt().asDiagonal() * es.eigenvectors().transpose();
}
}  // namespace detail

inline FrechetResult frechet_from_moments(const Vec<double>& mu_a, const Mat<double>& sa, const Vec<double>& mu_b,
                                          const Mat<double>& sb) {
  FrechetResult r;
  Mat<double> ra = detail::psd_sqrt(sa, r.clamped);
  Mat<double> mid = detail::psd_sqrt(ra * sb * ra, r.clamped);
  r.distance = std::max(0.0, (mu_a - mu_b).squaredNorm() + sa.trace() + sb.trace() - 2.0 * mid.trace());
  return r;
}

inline std::pair<Vec<double>, Mat<double>> mean_cov(const Mat<double>& a) {
  if (a.rows() < 2) throw std::invalid_argument("frechet: need at least two samples");
  Vec<double> mu = a.colwise().mean().transpose();
  Mat<double> c = a.rowwise() - mu.transpose();
  return {mu, (c.transpose() * c) / static_cast<double>(a.rows() - 1)};
}

inline FrechetResult frechet_gaussian(const Mat<double>& a, const Mat<double>& b) {
  auto [ma, sa] = mean_cov(a);
  auto [mb, sb] = mean_cov(b);
  return frechet_from_moments(ma, sa, mb, sb);
}

// ---------------------------------------------------------------------------
// Periodicity

struct PeriodEstimate {
  double period = std::numeric_limits<double>::quiet_NaN();
  bool valid = false;
};

// Argmax of the (biased) autocorrelation over lags [2, n/2] with parabolic
// refinement around the peak.
inline PeriodEstimate period_estimate(const Vec<double>& signal) {
  const Index n = signal.size();
  PeriodEstimate r;
  if (n < 8) return r;
  Vec<double> s = signal.array() - signal.mean();
  const double energy = s.squaredNorm();
  if (!(energy > 1e-12 * std::max(1.0, signal.squaredNorm()))) return r;
  const Index max_lag = n / 2;
  Vec<double> ac(max_lag + 2);
  for (Index l = 0; l <= max_lag + 1 && l < n; ++l) ac(l) = s.head(n - l).dot(s.tail(n - l)) / energy;
  Index best = 2;
  for (Index l = 3; l <= max_lag; ++l)
    if (ac(l) > ac(best)) best = l;
  if (!(ac(best) > 0.0)) return r;
  double off = 0.0;
  const double y0 = ac(best - 1), y1 = ac(best), y2 = ac(best + 1);
  const double den = y0 - 2.0 * y1 + y2;
  if (den < 0.0) off = std::clamp(0.5 * (y0 - y2) / den, -0.5, 0.5);
  r.period = static_cast<double>(best) + off;
  r.valid = true;
  return r;
}

// Per-frame onset envelope of raw latents: energy of the innovation
// x_i - beta x_{i-1}.
inline Vec<double> innovation_envelope(const Mat<double>& x, double beta) {
  Vec<double> e(x.rows());
  for (Index i = 0; i < x.rows(); ++i)
    e(i) = (i == 0 ? x.row(0) : Eigen::Matrix<double, 1, Eigen::Dynamic>(x.row(i) - beta * x.row(i - 1))).squaredNorm();
  return e;
}

inline PeriodEstimate latent_period(const Mat<double>& x, double beta) { return period_estimate(innovation_envelope(x, beta)); }

// ---------------------------------------------------------------------------
// Synchronisation

// Projection of the innovation onto the (pan-independent) pattern direction:
// left and right halves are both matched against the base pattern, so the
// value is the event amplitude.
inline Vec<double> pattern_activation(const ToyProcess& toy, const Mat<double>& x, int pattern) {
  const Vec<double> h = toy.base_pattern(pattern);
  const double hh = h.squaredNorm();
  Vec<double> a(x.rows());
  for (Index i = 0; i < x.rows(); ++i) {
    Eigen::Matrix<double, 1, Eigen::Dynamic> d = x.row(i);
    if (i > 0) d -= toy.beta * x.row(i - 1);
    a(i) = (d.head(toy.hop).dot(h.transpose()) + d.tail(toy.hop).dot(h.transpose())) / hh;
  }
  return a;
}

struct LagClip {
  const Mat<double>* latents;  // raw
  const EventTrack* events;
};

// Lag maximizing the pooled cross-correlation between pattern activations and
// the centred event indicators; positive lag = audio late.
inline int event_lag(const ToyProcess& toy, const std::vector<LagClip>& clips, int max_lag = 4) {
  long n_events = 0;
  std::vector<double> cc(static_cast<size_t>(2 * max_lag + 1), 0.0);
  for (const auto& c : clips) {
    const Index n = c.latents->rows();
    if (c.events->e.rows() != n) throw std::invalid_argument("event_lag: event track length differs from latents");
    for (Index k = 0; k < c.events->e.cols(); ++k) {
      Vec<double> ind = c.events->e.col(k).cast<double>();
      n_events += static_cast<long>(ind.sum());
      ind.array() -= ind.mean();
      const Vec<double> act = pattern_activation(toy, *c.latents, c.events->patterns[static_cast<size_t>(k)]);
      for (int l = -max_lag; l <= max_lag; ++l) {
        double s = 0.0;
        for (Index i = 0; i < n; ++i)
          if (i + l >= 0 && i + l < n) s += act(i + l) * ind(i);
        cc[static_cast<size_t>(l + max_lag)] += s;
      }
    }
  }
  if (n_events < 5) throw std::invalid_argument("event_lag: need at least 5 events, got " + std::to_string(n_events));
  return static_cast<int>(std::max_element(cc.begin(), cc.end()) - cc.begin()) - max_lag;
}

inline int event_lag(const ToyProcess& toy, const Mat<double>& latents, const EventTrack& events, int max_lag = 4) {
  return event_lag(toy, {{&latents, &events}}, max_lag);
}

// ---------------------------------------------------------------------------
// Panning

struct PanEstimate {
  double left = 0.0, right = 0.0;  // mean per-event amplitude in each channel half
  long events = 0;
  // (left - right) / (left + right); the oracle value is 1 - 2 p.
  double asymmetry() const { return (left - right) / (left + right); }
  // Right-half pattern energy as a fraction of the left half.
  double energy_ratio() const { return (right * right) / (left * left); }
};

// Events of one emitter (column k) located at a single position.
inline PanEstimate pan_estimate(const ToyProcess& toy, const std::vector<LagClip>& clips, Index k) {
  PanEstimate p;
  for (const auto& c : clips) {
    const Vec<double> h = toy.base_pattern(c.events->patterns[static_cast<size_t>(k)]);
    const double hh = h.squaredNorm();
    const Mat<double>& x = *c.latents;
    for (Index i = 0; i < x.rows(); ++i) {
      if (!c.events->e(i, k)) continue;
      Eigen::Matrix<double, 1, Eigen::Dynamic> d = x.row(i);
      if (i > 0) d -= toy.beta * x.row(i - 1);
      p.left += d.head(toy.hop).dot(h.transpose()) / hh;
      p.right += d.tail(toy.hop).dot(h.transpose()) / hh;
      ++p.events;
    }
  }
  if (p.events == 0) throw std::invalid_argument("pan_estimate: no events");
  p.left /= static_cast<double>(p.events);
  p.right /= static_cast<double>(p.events);
  return p;
}

// ---------------------------------------------------------------------------
// Conditional match against the oracle

// Samples drawn for one context, raw units, and the oracle mean.
struct ContextSamples {
  Mat<double> samples;  // S x c_x
  Vec<double> oracle_mean;
};

struct ConditionalMatch {
  double max_mean_error = 0.0;   // max over dims, in units of sigma_n
  double mean_mean_error = 0.0;  // average over dims, in units of sigma_n
  double cov_rel_error = 0.0;    // |avg cov - sigma_n^2 I|_F / |sigma_n^2 I|_F
  int contexts = 0;
  int samples = 0;
};

// Mean error per dimension is the RMS over contexts of the sample-mean offset
// with the Monte Carlo variance (s^2 / S) removed. The covariance is the
// within-context covariance averaged over contexts.
inline ConditionalMatch conditional_match(const std::vector<ContextSamples>& ctx, double sigma_n) {
  if (ctx.empty()) throw std::invalid_argument("conditional_match: no contexts");
  const Index d = ctx.front().samples.cols(), S = ctx.front().samples.rows();
  if (S < 2) throw std::invalid_argument("conditional_match: need at least two samples per context");
  Vec<double> sq = Vec<double>::Zero(d), mc = Vec<double>::Zero(d);
  Mat<double> cov = Mat<double>::Zero(d, d);
  for (const auto& c : ctx) {
    if (c.samples.rows() != S || c.samples.cols() != d) throw std::invalid_argument("conditional_match: ragged contexts");
    auto [mu, s] = mean_cov(c.samples);
    sq += (mu - c.oracle_mean).array().square().matrix();
    mc += s.diagonal() / static_cast<double>(S);
    cov += s;
  }
  const double C = static_cast<double>(ctx.size());
  Vec<double> err = ((sq - mc) / C).cwiseMax(0.0).cwiseSqrt() / sigma_n;
  cov /= C;
  const double ref = sigma_n * sigma_n * std::sqrt(static_cast<double>(d));
  ConditionalMatch r;
  r.max_mean_error = err.maxCoeff();
  r.mean_mean_error = err.mean();
  r.cov_rel_error = (cov - Mat<double>::Identity(d, d) * sigma_n * sigma_n).norm() / ref;
  r.contexts = static_cast<int>(ctx.size());
  r.samples = static_cast<int>(S);
  return r;
}

// ---------------------------------------------------------------------------
// Report

struct MetricReport {
  double mmd2 = std::numeric_limits<double>::quiet_NaN();
  double mmd_p = std::numeric_limits<double>::quiet_NaN();
  double frechet = std::numeric_limits<double>::quiet_NaN();
  double oracle_nll = std::numeric_limits<double>::quiet_NaN();
  double period_error = std::numeric_limits<double>::quiet_NaN();
  double event_lag = std::numeric_limits<double>::quiet_NaN();
  std::string config_hash;

  std::string json() const {
    auto num = [](double v) {
      std::ostringstream os;
      if (std::isfinite(v)) os << v;
      else os << "null";
      return os.str();
    };
    std::ostringstream os;
    os << "{\"mmd2\":" << num(mmd2) << ",\"mmd_p\":" << num(mmd_p) << ",\"frechet\":" << num(frechet)
       << ",\"oracle_nll\":" << num(oracle_nll) << ",\"period_error\":" << num(period_error)
       << ",\"event_lag\":" << num(event_lag) << ",\"config_hash\":\"" << config_hash << "\"}";
    return os.str();
  }
};

}  // namespace framegen
