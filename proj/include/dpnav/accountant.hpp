#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

namespace dpnav {

struct AccountantError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Log-gamma via the Lanczos approximation, g = 7 with 9 coefficients
// (relative error below 1e-13 for positive arguments). Kept self-contained so
// the accountant has no dependence on platform libm quirks.
inline double lanczos_lgamma(double x) {
  static const double g = 7.0;
  static const double coeff[9] = {
      0.99999999999980993,      676.5203681218851,     -1259.1392167224028,
      771.32342877765313,       -176.61502916214059,   12.507343278686905,
      -0.13857109526572012,     9.9843695780195716e-6, 1.5056327351493116e-7};
  static const double half_log_two_pi = 0.91893853320467274178;
  if (x <= 0.0) throw AccountantError("lanczos_lgamma: argument must be positive");
  if (x < 0.5) {
    // reflection: lgamma(x) = log(pi / sin(pi x)) - lgamma(1 - x)
    static const double pi = 3.14159265358979323846;
    return std::log(pi / std::sin(pi * x)) - lanczos_lgamma(1.0 - x);
  }
  double z = x - 1.0;
  double sum = coeff[0];
  for (int i = 1; i < 9; ++i) sum += coeff[i] / (z + static_cast<double>(i));
  double t = z + g + 0.5;
  return half_log_two_pi + (z + 0.5) * std::log(t) - t + std::log(sum);
}

// log(binom(2l, l)) for possibly fractional l, via Gamma(2l+1)/Gamma(l+1)^2.
inline double log_central_binom(double lambda) {
  return lanczos_lgamma(2.0 * lambda + 1.0) - 2.0 * lanczos_lgamma(lambda + 1.0);
}

namespace detail {
// log(1 + exp(s)) without overflow.
inline double softplus(double s) {
  if (s > 0.0) return s + std::log1p(std::exp(-s));
  return std::log1p(std::exp(s));
}
// log(exp(x) - 1) for x > 0.
inline double log_expm1(double x) { return x + std::log1p(-std::exp(-x)); }
}  // namespace detail

// Per-step subsampled-Gaussian RDP at order lambda:
//   R(l) = 1/(l-1) * log(1 + q^2 l binom(2l, l) (e^{l/sigma^2} - 1)).
// Evaluated in log space; no overflow for the full order grid down to
// sigma ~ 0.3.
inline double rdp_step(double sigma, double q, double lambda) {
  if (lambda <= 1.0) throw AccountantError("rdp_step: order must exceed 1");
  if (sigma <= 0.0) throw AccountantError("rdp_step: sigma must be positive");
  if (q <= 0.0 || q > 1.0) throw AccountantError("rdp_step: q must be in (0,1]");
  double log_term = 2.0 * std::log(q) + std::log(lambda) + log_central_binom(lambda) +
                    detail::log_expm1(lambda / (sigma * sigma));
  return detail::softplus(log_term) / (lambda - 1.0);
}

// The order grid of the conversion step: {1.1 + 0.1 i : i = 1..300}.
inline std::vector<double> standard_order_grid() {
  std::vector<double> g(300);
  for (int i = 1; i <= 300; ++i) g[static_cast<std::size_t>(i - 1)] = 1.1 + 0.1 * i;
  return g;
}

enum class AccountantMode { subsampled_gaussian, weighted_lemma };

struct EpsilonReport {
  double epsilon = 0.0;
  double order = 0.0;  // argmin over the grid
};

// Tracks per-order RDP across training steps and converts to (eps, delta).
// In subsampled_gaussian mode the per-step cost at each order is cached and
// totals are T * R(order), which makes accumulation exactly additive in the
// integer step count. weighted_lemma mode accumulates sum_i w_i^2 per step.
class PrivacyLedger {
 public:
  PrivacyLedger(AccountantMode mode, double sigma, double q, double delta)
      : mode_(mode), sigma_(sigma), q_(q), delta_(delta), orders_(standard_order_grid()) {
    if (delta <= 0.0 || delta >= 1.0)
      throw AccountantError("ledger: delta must be in (0,1)");
    if (mode_ == AccountantMode::subsampled_gaussian) {
      per_step_.reserve(orders_.size());
      for (double l : orders_) per_step_.push_back(rdp_step(sigma_, q_, l));
    }
  }

  AccountantMode mode() const { return mode_; }
  double sigma() const { return sigma_; }
  double sampling_rate() const { return q_; }
  double delta() const { return delta_; }
  long long steps() const { return steps_; }
  const std::vector<double>& orders() const { return orders_; }

  void accumulate(long long steps) {
    if (steps < 0) throw AccountantError("ledger: negative step count");
    if (mode_ != AccountantMode::subsampled_gaussian)
      throw AccountantError("ledger: accumulate(steps) requires subsampled mode");
    steps_ += steps;
  }

  // weighted_lemma mode: one training step with the given utility weights.
  void record_step(const std::vector<double>& weights) {
    if (mode_ != AccountantMode::weighted_lemma)
      throw AccountantError("ledger: record_step requires weighted mode");
    double sw2 = 0.0;
    for (double w : weights) sw2 += w * w;
    w2_history_.push_back(sw2);
    sum_w2_ += sw2;
    steps_ += 1;
  }

  const std::vector<double>& weight_history() const { return w2_history_; }

  // Accumulated RDP at one order.
  double rdp_total(std::size_t order_index) const {
    if (mode_ == AccountantMode::subsampled_gaussian)
      return static_cast<double>(steps_) * per_step_[order_index];
    return orders_[order_index] / (2.0 * sigma_ * sigma_) * sum_w2_;
  }

  double epsilon_at(std::size_t order_index) const {
    double l = orders_[order_index];
    return rdp_total(order_index) + std::log(1.0 / delta_) / (l - 1.0);
  }

  // eps = min over the grid of [R_total(l) + log(1/delta)/(l-1)].
  EpsilonReport epsilon() const {
    EpsilonReport r;
    r.epsilon = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < orders_.size(); ++i) {
      double e = epsilon_at(i);
      if (e < r.epsilon) {
        r.epsilon = e;
        r.order = orders_[i];
      }
    }
    return r;
  }

 private:
  AccountantMode mode_;
  double sigma_, q_, delta_;
  std::vector<double> orders_;
  std::vector<double> per_step_;     // subsampled mode, per order
  long long steps_ = 0;
  double sum_w2_ = 0.0;              // weighted mode
  std::vector<double> w2_history_;
};

// Amplified per-step RDP bound under sampling rate q:
//   eps~(alpha) <= q^2 alpha / (2 sigma^2) * sum_i w_i^2.
inline double amplified_bound(double q, double sigma, const std::vector<double>& w,
                              double alpha) {
  if (alpha <= 1.0) throw AccountantError("amplified_bound: alpha must exceed 1");
  double sw2 = 0.0;
  for (double wi : w) sw2 += wi * wi;
  return q * q * alpha / (2.0 * sigma * sigma) * sw2;
}

// Expected optimization error bound for L-smooth, mu-strongly-convex f under
// the aligned-noise update:
//   (1 - mu eta)^T Delta0 + eta sigma^2 / (2 mu) * sum_i w_i^2.
inline double convergence_bound(double L, double mu, double eta, double sigma,
                                const std::vector<double>& w, long long T,
                                double delta0) {
  if (eta > 1.0 / L) throw AccountantError("convergence_bound: eta must be <= 1/L");
  if (mu <= 0.0 || mu > L) throw AccountantError("convergence_bound: need 0 < mu <= L");
  double sw2 = 0.0;
  for (double wi : w) sw2 += wi * wi;
  return std::pow(1.0 - mu * eta, static_cast<double>(T)) * delta0 +
         eta * sigma * sigma / (2.0 * mu) * sw2;
}

}  // namespace dpnav
