#pragma once

#include <array>
#include <cmath>
#include <stdexcept>

#include "dpnav/imu.hpp"
#include "dpnav/rng.hpp"

namespace dpnav {

inline constexpr double kPi = 3.14159265358979323846;

struct AugmentConfig {
  double theta_max = kPi / 4.0;  // rad
  double delta_s = 0.2;
  double delta_k = 0.1;
  double noise_sigma = 0.01;  // feature units
  std::uint64_t seed = 0;

  void validate() const {
    if (theta_max < 0.0 || theta_max > kPi)
      throw std::invalid_argument("aug: theta_max must be in [0, pi]");
    if (delta_s < 0.0 || delta_s >= 1.0)
      throw std::invalid_argument("aug: delta_s must be in [0, 1)");
    if (noise_sigma < 0.0) throw std::invalid_argument("aug: noise_sigma must be >= 0");
  }
};

// Row-major 2x2 transform.
struct Transform2 {
  std::array<double, 4> m{1.0, 0.0, 0.0, 1.0};

  double det() const { return m[0] * m[3] - m[1] * m[2]; }

  Transform2 inverse() const {
    double d = det();
    return Transform2{{m[3] / d, -m[1] / d, -m[2] / d, m[0] / d}};
  }

  void apply(double& x, double& y) const {
    double nx = m[0] * x + m[1] * y;
    double ny = m[2] * x + m[3] * y;
    x = nx;
    y = ny;
  }

  static Transform2 rotation(double theta) {
    double c = std::cos(theta), s = std::sin(theta);
    return Transform2{{c, -s, s, c}};
  }
  static Transform2 scaling(double s) { return Transform2{{s, 0.0, 0.0, s}}; }
  static Transform2 skew(double k) { return Transform2{{1.0, k, 0.0, 1.0}}; }

  Transform2 operator*(const Transform2& o) const {
    return Transform2{{m[0] * o.m[0] + m[1] * o.m[2], m[0] * o.m[1] + m[1] * o.m[3],
                       m[2] * o.m[0] + m[3] * o.m[2], m[2] * o.m[1] + m[3] * o.m[3]}};
  }
};

// Draws theta ~ U[0, theta_max], s ~ U[1-ds, 1+ds], k ~ U[-dk, dk] in that
// order and returns T = S * (R * K).
inline Transform2 sample_transform(const AugmentConfig& cfg, Rng& rng) {
  cfg.validate();
  double theta = rng.uniform(0.0, cfg.theta_max);
  double s = rng.uniform(1.0 - cfg.delta_s, 1.0 + cfg.delta_s);
  double k = rng.uniform(-cfg.delta_k, cfg.delta_k);
  return Transform2::scaling(s) * (Transform2::rotation(theta) * Transform2::skew(k));
}

// Applies T to the horizontal (x, y) pairs of accel, gyro and the target
// velocity of every window in the batch (z channels untouched), then adds
// i.i.d. N(0, sigma^2) to all six feature channels. Targets get no noise so
// the supervised signal stays clean.
inline void apply_transform(WindowBatch& wb, const Transform2& T, Rng& rng,
                            const AugmentConfig& cfg) {
  cfg.validate();
  int L = wb.length;
  for (int w = 0; w < wb.count; ++w) {
    double* f = wb.window(w);
    for (int i = 0; i < L; ++i) {
      T.apply(f[0 * L + i], f[1 * L + i]);  // ax, ay
      T.apply(f[3 * L + i], f[4 * L + i]);  // gx, gy
    }
    T.apply(wb.targets[static_cast<std::size_t>(w) * 2],
            wb.targets[static_cast<std::size_t>(w) * 2 + 1]);
  }
  if (cfg.noise_sigma > 0.0)
    for (double& x : wb.features) x += cfg.noise_sigma * rng.gaussian();
}

// Per-window augmentation with one independent RNG substream per window
// index, so results do not depend on processing order.
inline void augment_windows(WindowBatch& wb, const AugmentConfig& cfg,
                            std::uint64_t epoch, std::uint64_t base_index) {
  for (int w = 0; w < wb.count; ++w) {
    Rng rng = Rng::substream(cfg.seed, "augment", epoch, base_index + static_cast<std::uint64_t>(w));
    Transform2 T = sample_transform(cfg, rng);
    WindowBatch one;
    one.count = 1;
    one.length = wb.length;
    one.dt = wb.dt;
    std::size_t fs = static_cast<std::size_t>(6) * wb.length;
    one.features.assign(wb.features.begin() + w * fs, wb.features.begin() + (w + 1) * fs);
    one.targets.assign(wb.targets.begin() + w * 2, wb.targets.begin() + (w + 1) * 2);
    apply_transform(one, T, rng, cfg);
    std::copy(one.features.begin(), one.features.end(), wb.features.begin() + w * fs);
    std::copy(one.targets.begin(), one.targets.end(), wb.targets.begin() + w * 2);
  }
}

}  // namespace dpnav
