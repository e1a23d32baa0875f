#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpnav/rng.hpp"
#include "dpnav/svd.hpp"
#include "dpnav/tensor.hpp"

namespace dpnav {

enum class WeightScheme { gradient_svd, uniform, exponential };

inline WeightScheme weight_scheme_from_string(const std::string& s) {
  if (s == "gradient_svd") return WeightScheme::gradient_svd;
  if (s == "uniform") return WeightScheme::uniform;
  if (s == "exponential") return WeightScheme::exponential;
  throw std::invalid_argument("unknown weight scheme: " + s);
}

struct DpConfig {
  int rank_k = 10;
  double sigma = 2.0;       // noise multiplier
  double clip_init = 2.0;   // lambda_0
  double momentum = 0.9;    // gamma
  double delta = 1e-5;
  WeightScheme weights = WeightScheme::gradient_svd;
  std::uint64_t seed = 0;

  void validate() const {
    if (rank_k < 1) throw std::invalid_argument("dp: rank_k must be >= 1");
    if (sigma <= 0.0) throw std::invalid_argument("dp: sigma must be > 0");
    if (momentum <= 0.0 || momentum >= 1.0)
      throw std::invalid_argument("dp: momentum must be in (0,1)");
    if (delta <= 0.0 || delta >= 1.0)
      throw std::invalid_argument("dp: delta must be in (0,1)");
    if (clip_init <= 0.0) throw std::invalid_argument("dp: clip_init must be > 0");
  }
};

// Per-parameter historical clipping threshold.
struct ClipState {
  double lambda = 0.0;
};

// dim 0 becomes rows, remaining dims flatten to columns; 1-D tensors map to
// m x 1. Row-major data makes both directions plain copies.
inline Matrix matricize(const Tensor& g) {
  int m = g.dim(0);
  int n = static_cast<int>(g.size() / static_cast<std::size_t>(m));
  Matrix out(m, n);
  out.a = g.values();
  return out;
}

inline Tensor dematricize(const Matrix& m, const Shape& shape) {
  if (m.a.size() != shape_numel(shape))
    throw TensorError("dematricize: element count mismatch");
  return Tensor::from_data(shape, m.a);
}

// lambda_t = gamma * lambda_{t-1} + (1 - gamma) * ||grad||_2
inline double update_threshold(ClipState& state, double grad_norm, double gamma) {
  state.lambda = gamma * state.lambda + (1.0 - gamma) * grad_norm;
  return state.lambda;
}

// sigma_i~ = min(sigma_i, lambda)
inline std::vector<double> clip_singular(const std::vector<double>& sigma,
                                         double lambda) {
  std::vector<double> out(sigma.size());
  for (std::size_t i = 0; i < sigma.size(); ++i) out[i] = std::min(sigma[i], lambda);
  return out;
}

// Normalized utility weights; all-zero spectra fall back to uniform so the
// noise step never degenerates.
inline std::vector<double> utility_weights(const std::vector<double>& sigma,
                                           WeightScheme scheme) {
  std::size_t k = sigma.size();
  if (k == 0) throw std::invalid_argument("utility_weights: empty spectrum");
  std::vector<double> w(k, 0.0);
  switch (scheme) {
    case WeightScheme::uniform: {
      for (double& v : w) v = 1.0 / static_cast<double>(k);
      break;
    }
    case WeightScheme::exponential: {
      constexpr double lambda_w = 1.0;
      double z = 0.0;
      for (std::size_t i = 0; i < k; ++i) {
        w[i] = std::exp(-lambda_w * static_cast<double>(i + 1));
        z += w[i];
      }
      for (double& v : w) v /= z;
      break;
    }
    case WeightScheme::gradient_svd: {
      double z = 0.0;
      for (double s : sigma) z += s;
      if (z <= 0.0) {
        for (double& v : w) v = 1.0 / static_cast<double>(k);
      } else {
        for (std::size_t i = 0; i < k; ++i) w[i] = sigma[i] / z;
      }
      break;
    }
  }
  return w;
}

// Draws xi_i ~ N(0, (sigma * lambda)^2) for the k retained directions and
// returns z = U * diag(xi_i * w_i) * V^T, i.e. noise confined to the top-k
// singular span.
inline Matrix gani_noise(const SvdTriple& triple, const std::vector<double>& w,
                         double sigma, double lambda, Rng& rng) {
  if (w.size() != static_cast<std::size_t>(triple.k))
    throw std::invalid_argument("gani_noise: weight/rank mismatch");
  std::vector<double> diag(w.size());
  double stddev = sigma * lambda;
  for (std::size_t i = 0; i < w.size(); ++i) diag[i] = rng.gaussian(0.0, stddev) * w[i];
  return triple.reconstruct(diag);
}

// Full per-tensor pipeline of the SVD mechanism:
//   matricize -> truncated SVD -> threshold update -> singular-value clip ->
//   utility weights -> aligned noise -> reconstruct -> dematricize.
// The input gradient is left untouched. An all-zero gradient skips the SVD
// and emits pure noise along canonical directions with uniform weights.
inline Tensor dp_gradient(const Tensor& grad, ClipState& state, const DpConfig& cfg,
                          Rng& rng) {
  cfg.validate();
  Matrix G = matricize(grad);
  double norm = G.frobenius();
  double lambda = update_threshold(state, norm, cfg.momentum);
  int keff = std::min(cfg.rank_k, std::min(G.rows, G.cols));

  if (norm == 0.0) {
    SvdTriple canon;
    canon.m = G.rows;
    canon.n = G.cols;
    canon.k = keff;
    canon.U.assign(static_cast<std::size_t>(canon.m) * keff, 0.0);
    canon.V.assign(static_cast<std::size_t>(canon.n) * keff, 0.0);
    canon.S.assign(static_cast<std::size_t>(keff), 0.0);
    for (int r = 0; r < keff; ++r) {
      canon.U[static_cast<std::size_t>(r) * keff + r] = 1.0;
      canon.V[static_cast<std::size_t>(r) * keff + r] = 1.0;
    }
    auto w = utility_weights(canon.S, WeightScheme::uniform);
    Matrix z = gani_noise(canon, w, cfg.sigma, lambda, rng);
    return dematricize(z, grad.shape());
  }

  SvdTriple triple = truncated_svd(G, keff);
  auto clipped = clip_singular(triple.S, lambda);
  auto w = utility_weights(triple.S, cfg.weights);
  std::vector<double> diag(clipped);
  double stddev = cfg.sigma * lambda;
  for (std::size_t i = 0; i < diag.size(); ++i)
    diag[i] += rng.gaussian(0.0, stddev) * w[i];
  Matrix out = triple.reconstruct(diag);
  return dematricize(out, grad.shape());
}

// Clipped reconstruction only (no noise); used by the sensitivity analysis.
inline Matrix clipped_reconstruction(const Matrix& G, int k, double lambda) {
  SvdTriple triple = truncated_svd(G, k);
  return triple.reconstruct(clip_singular(triple.S, lambda));
}

// ---------------------------------------------------------------------------
// classic DP-SGD reference mechanism (comparison baseline)

// g~ = g * min(1, C / ||g||_2)
inline Tensor global_clip(const Tensor& grad, double clip_norm) {
  double norm = 0.0;
  for (double v : grad.values()) norm += v * v;
  norm = std::sqrt(norm);
  double s = norm > clip_norm ? clip_norm / norm : 1.0;
  std::vector<double> out(grad.values());
  for (double& v : out) v *= s;
  return Tensor::from_data(grad.shape(), std::move(out));
}

// Mini-batch mean gradient with isotropic noise: clip to C, then add
// N(0, (sigma * C / B)^2) per coordinate.
inline Tensor dpsgd_gradient(const Tensor& grad, double clip_norm, double sigma,
                             int batch_size, Rng& rng) {
  if (batch_size < 1) throw std::invalid_argument("dpsgd: batch_size must be >= 1");
  Tensor clipped = global_clip(grad, clip_norm);
  double stddev = sigma * clip_norm / static_cast<double>(batch_size);
  for (double& v : clipped.values()) v += rng.gaussian(0.0, stddev);
  return clipped;
}

// ---------------------------------------------------------------------------
// spectrum diagnostics

// E(k) = sum_{i<=k} sigma_i^2 / sum_i sigma_i^2
inline double energy_capture(const std::vector<double>& spectrum, int k) {
  if (k < 0 || spectrum.empty()) throw std::invalid_argument("energy_capture: bad input");
  double total = 0.0, head = 0.0;
  for (std::size_t i = 0; i < spectrum.size(); ++i) {
    double e = spectrum[i] * spectrum[i];
    total += e;
    if (i < static_cast<std::size_t>(k)) head += e;
  }
  if (total == 0.0) return 0.0;
  return head / total;
}

// SNR_k = sum_{i<=k} sigma_i^2 / (k * sigma_noise^2)
inline double spectral_snr(const std::vector<double>& spectrum, int k,
                           double sigma_noise) {
  if (k < 1 || sigma_noise <= 0.0) throw std::invalid_argument("spectral_snr: bad input");
  double head = 0.0;
  for (int i = 0; i < k && i < static_cast<int>(spectrum.size()); ++i)
    head += spectrum[static_cast<std::size_t>(i)] * spectrum[static_cast<std::size_t>(i)];
  return head / (static_cast<double>(k) * sigma_noise * sigma_noise);
}

}  // namespace dpnav
