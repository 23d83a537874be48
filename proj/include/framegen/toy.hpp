#pragma once

// Analytic toy audio process. Latents follow
//   x_i = beta * x_{i-1} + sum_k e_{k,i} g_k(p_k) + sigma_n * zeta_i,
// so every conditional p(x_i | x_{i-1}, events_i) is a closed-form Gaussian.

#include "framegen/autodiff.hpp"

#include <bit>
#include <cmath>
#include <numbers>
#include <random>
#include <stdexcept>
#include <vector>

namespace framegen {

struct ActiveEvent {
  int pattern_id = 0;
  double position = 0.5;  // horizontal position in [0, 1]; also the pan
};

struct ToyProcess {
  double beta = 0.9;
  double sigma_n = 0.1;
  double amplitude = 1.0;
  int channels = 2;
  int hop = 16;
  int n_patterns = 3;

  int latent_dim() const { return channels * hop; }

  void validate() const {
    if (!(std::abs(beta) < 1.0)) throw std::invalid_argument("toy process: |beta| must be < 1");
    if (sigma_n < 0.0) throw std::invalid_argument("toy process: negative sigma_n");
    if (channels != 2) throw std::invalid_argument("toy process: panning needs exactly two channels");
    if (n_patterns < 1 || n_patterns >= hop) throw std::invalid_argument("toy process: bad pattern count");
  }

  // Per-channel spectral shape: row (id + 1) of the Sylvester-Hadamard matrix
  // of order `hop`, so patterns are mutually orthogonal with flat magnitude.
  Vec<double> base_pattern(int id) const {
    if (id < 0 || id >= n_patterns) throw std::out_of_range("toy process: pattern id");
    Vec<double> h(hop);
    const int row = id + 1;
    for (int m = 0; m < hop; ++m) {
      const int bits = std::popcount(static_cast<unsigned>(row & m));
      h(m) = (bits % 2 == 0 ? 1.0 : -1.0) * amplitude;
    }
    return h;
  }

  // Left half scaled by (1 - p), right half by p.
  Vec<double> pattern(int id, double p) const {
    Vec<double> h = base_pattern(id);
    Vec<double> g(latent_dim());
    g.head(hop) = (1.0 - p) * h;
    g.tail(hop) = p * h;
    return g;
  }

  Vec<double> conditional_mean(const Vec<double>& prev, const std::vector<ActiveEvent>& events) const {
    Vec<double> m = beta * prev;
    for (const auto& e : events) m += pattern(e.pattern_id, e.position);
    return m;
  }

  template <class Rng>
  Vec<double> sample(const Vec<double>& prev, const std::vector<ActiveEvent>& events, Rng& rng) const {
    std::normal_distribution<double> n01;
    Vec<double> x = conditional_mean(prev, events);
    for (Index j = 0; j < x.size(); ++j) x(j) += sigma_n * n01(rng);
    return x;
  }

  // Negative log density of x under N(mean, sigma_n^2 I).
  double nll(const Vec<double>& x, const Vec<double>& prev, const std::vector<ActiveEvent>& events) const {
    const double var = sigma_n * sigma_n;
    const Vec<double> r = x - conditional_mean(prev, events);
    return 0.5 * static_cast<double>(latent_dim()) * std::log(2.0 * std::numbers::pi * var) +
           0.5 * r.squaredNorm() / var;
  }
};

}  // namespace framegen
