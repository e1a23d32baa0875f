#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>
#include <vector>

#include "dpnav/quat.hpp"

namespace dpnav {

struct MetricsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// 2-D position sequence at a fixed sampling interval.
struct Trajectory {
  std::vector<Vec2> positions;
  double dt = 0.0;

  void validate() const {
    if (positions.size() < 2) throw MetricsError("trajectory needs at least 2 points");
    if (!(dt > 0.0)) throw MetricsError("trajectory dt must be positive");
    for (const Vec2& p : positions)
      if (!std::isfinite(p.x) || !std::isfinite(p.y))
        throw MetricsError("trajectory has non-finite entries");
  }
};

// p_0 = origin, p_{i+1} = p_i + v_i * dt.
inline Trajectory integrate(const std::vector<Vec2>& velocities, double dt,
                            Vec2 origin = {0.0, 0.0}) {
  if (!(dt > 0.0)) throw MetricsError("integrate: dt must be positive");
  Trajectory tr;
  tr.dt = dt;
  tr.positions.resize(velocities.size() + 1);
  tr.positions[0] = origin;
  for (std::size_t i = 0; i < velocities.size(); ++i)
    tr.positions[i + 1] = tr.positions[i] + velocities[i] * dt;
  tr.validate();
  return tr;
}

inline std::vector<Vec2> finite_difference(const Trajectory& tr) {
  tr.validate();
  std::vector<Vec2> v(tr.positions.size() - 1);
  for (std::size_t i = 0; i + 1 < tr.positions.size(); ++i)
    v[i] = (tr.positions[i + 1] - tr.positions[i]) * (1.0 / tr.dt);
  return v;
}

// RMSE of pointwise position error.
inline double ate(const Trajectory& est, const Trajectory& gt) {
  est.validate();
  gt.validate();
  if (est.positions.size() != gt.positions.size())
    throw MetricsError("ate: trajectory lengths differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < est.positions.size(); ++i) {
    Vec2 d = est.positions[i] - gt.positions[i];
    acc += d.x * d.x + d.y * d.y;
  }
  return std::sqrt(acc / static_cast<double>(est.positions.size()));
}

// RMSE of the displacement difference over a fixed interval; constant
// offsets of either trajectory cancel.
inline double rte(const Trajectory& est, const Trajectory& gt,
                  double interval_s = 60.0) {
  est.validate();
  gt.validate();
  if (est.positions.size() != gt.positions.size())
    throw MetricsError("rte: trajectory lengths differ");
  auto delta = static_cast<std::size_t>(std::llround(interval_s / est.dt));
  if (delta < 1 || delta >= est.positions.size())
    throw MetricsError("rte: trajectory shorter than the interval");
  std::size_t count = est.positions.size() - delta;
  double acc = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    Vec2 dg = gt.positions[i + delta] - gt.positions[i];
    Vec2 de = est.positions[i + delta] - est.positions[i];
    Vec2 d = dg - de;
    acc += d.x * d.x + d.y * d.y;
  }
  return std::sqrt(acc / static_cast<double>(count));
}

struct ScaleConsistency {
  double sc = 0.0;          // population std of the per-window scale ratios
  double drift_rate = 0.0;  // least-squares slope of ratio vs window index
  int windows_used = 0;
};

// Scale ratio s_i = |est displacement| / |gt displacement| over
// non-overlapping windows; windows whose ground-truth displacement is below
// 1e-6 m are skipped.
inline ScaleConsistency scale_consistency(const Trajectory& est, const Trajectory& gt,
                                          double window_s = 5.0) {
  est.validate();
  gt.validate();
  if (est.positions.size() != gt.positions.size())
    throw MetricsError("scale_consistency: trajectory lengths differ");
  auto w = static_cast<std::size_t>(std::llround(window_s / est.dt));
  if (w < 1 || w >= est.positions.size())
    throw MetricsError("scale_consistency: trajectory shorter than the window");

  std::vector<std::pair<double, double>> ratios;  // (window index, s_i)
  for (std::size_t start = 0; start + w < est.positions.size(); start += w) {
    double idx = static_cast<double>(start / w);
    Vec2 dg = gt.positions[start + w] - gt.positions[start];
    if (dg.norm() < 1e-6) continue;
    Vec2 de = est.positions[start + w] - est.positions[start];
    ratios.emplace_back(idx, de.norm() / dg.norm());
  }
  ScaleConsistency out;
  out.windows_used = static_cast<int>(ratios.size());
  if (ratios.empty()) return out;

  double mean = 0.0;
  for (auto& [i, s] : ratios) mean += s;
  mean /= static_cast<double>(ratios.size());
  double var = 0.0;
  for (auto& [i, s] : ratios) var += (s - mean) * (s - mean);
  out.sc = std::sqrt(var / static_cast<double>(ratios.size()));

  if (ratios.size() >= 2) {
    double mx = 0.0;
    for (auto& [i, s] : ratios) mx += i;
    mx /= static_cast<double>(ratios.size());
    double num = 0.0, den = 0.0;
    for (auto& [i, s] : ratios) {
      num += (i - mx) * (s - mean);
      den += (i - mx) * (i - mx);
    }
    out.drift_rate = den > 0.0 ? num / den : 0.0;
  }
  return out;
}

// Empirical fraction of pointwise errors <= e at each listed threshold.
inline std::vector<std::pair<double, double>> error_cdf(
    const Trajectory& est, const Trajectory& gt, const std::vector<double>& thresholds) {
  est.validate();
  gt.validate();
  if (est.positions.size() != gt.positions.size())
    throw MetricsError("error_cdf: trajectory lengths differ");
  std::vector<double> errors(est.positions.size());
  for (std::size_t i = 0; i < errors.size(); ++i)
    errors[i] = (est.positions[i] - gt.positions[i]).norm();
  std::sort(errors.begin(), errors.end());
  std::vector<std::pair<double, double>> out;
  out.reserve(thresholds.size());
  for (double e : thresholds) {
    auto it = std::upper_bound(errors.begin(), errors.end(), e);
    out.emplace_back(e, static_cast<double>(it - errors.begin()) /
                            static_cast<double>(errors.size()));
  }
  return out;
}

}  // namespace dpnav
