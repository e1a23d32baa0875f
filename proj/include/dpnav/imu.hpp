#pragma once

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "dpnav/quat.hpp"
#include "dpnav/rng.hpp"

namespace dpnav {

struct PipelineError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Time-stamped 6-axis IMU stream with orientation and reference positions.
struct ImuSequence {
  std::vector<double> t;      // seconds, strictly increasing
  std::vector<Vec3> accel;    // m/s^2, device frame unless aligned
  std::vector<Vec3> gyro;     // rad/s
  std::vector<Quat> q_ori;    // device -> global, unit norm
  std::vector<Vec3> pos;      // meters, reference positions

  std::size_t size() const { return t.size(); }
  double duration() const { return t.empty() ? 0.0 : t.back() - t.front(); }

  void validate() const {
    if (t.size() < 2) throw PipelineError("sequence needs at least 2 samples");
    if (accel.size() != t.size() || gyro.size() != t.size() ||
        q_ori.size() != t.size() || pos.size() != t.size())
      throw PipelineError("sequence arrays have unequal lengths");
    for (std::size_t i = 1; i < t.size(); ++i)
      if (!(t[i] > t[i - 1]))
        throw PipelineError("timestamps must be strictly increasing");
    for (const Quat& q : q_ori)
      if (std::fabs(q.norm() - 1.0) > 1e-6)
        throw PipelineError("orientation quaternion is not unit norm");
  }
};

// Model-ready windows: features are [count, 6, length] row-major with channel
// order [ax, ay, az, gx, gy, gz] after global alignment; targets are [count, 2].
struct WindowBatch {
  int count = 0;
  int length = 200;
  double dt = 1.0 / 200.0;
  std::vector<double> features;  // count * 6 * length
  std::vector<double> targets;   // count * 2

  double* window(int i) { return features.data() + static_cast<std::size_t>(i) * 6 * length; }
  const double* window(int i) const {
    return features.data() + static_cast<std::size_t>(i) * 6 * length;
  }
};

// ---------------------------------------------------------------------------
// resampling and alignment

inline ImuSequence resample(const ImuSequence& in, double rate_hz = 200.0) {
  in.validate();
  if (rate_hz <= 0.0) throw PipelineError("resample: rate must be positive");
  if (in.duration() < 2.0 / rate_hz)
    throw PipelineError("resample: sequence shorter than two sample intervals");
  double dt = 1.0 / rate_hz;
  std::size_t n_out = static_cast<std::size_t>(std::floor(in.duration() * rate_hz)) + 1;

  ImuSequence out;
  out.t.resize(n_out);
  out.accel.resize(n_out);
  out.gyro.resize(n_out);
  out.q_ori.resize(n_out);
  out.pos.resize(n_out);

  std::size_t j = 0;
  for (std::size_t i = 0; i < n_out; ++i) {
    double ti = in.t.front() + static_cast<double>(i) * dt;
    if (ti > in.t.back()) ti = in.t.back();
    while (j + 2 < in.size() && in.t[j + 1] <= ti) ++j;
    double span = in.t[j + 1] - in.t[j];
    double a = (ti - in.t[j]) / span;
    if (a < 0.0) a = 0.0;
    if (a > 1.0) a = 1.0;
    out.t[i] = in.t.front() + static_cast<double>(i) * dt;
    out.accel[i] = in.accel[j] + (in.accel[j + 1] - in.accel[j]) * a;
    out.gyro[i] = in.gyro[j] + (in.gyro[j + 1] - in.gyro[j]) * a;
    out.pos[i] = in.pos[j] + (in.pos[j + 1] - in.pos[j]) * a;
    out.q_ori[i] = nlerp(in.q_ori[j], in.q_ori[j + 1], a);
  }
  return out;
}

// Rotates accel and gyro to the global frame via q_ori and removes gravity
// (0, 0, g) from the rotated accelerometer reading.
inline ImuSequence align_to_global(const ImuSequence& in, double gravity = 9.81) {
  in.validate();
  ImuSequence out = in;
  for (std::size_t i = 0; i < in.size(); ++i) {
    out.accel[i] = rotate_to_global(in.accel[i], in.q_ori[i]);
    out.accel[i].z -= gravity;
    out.gyro[i] = rotate_to_global(in.gyro[i], in.q_ori[i]);
  }
  return out;
}

// Forward-difference velocity from reference positions (x, y); the final
// sample repeats the previous value.
inline std::vector<Vec2> ground_truth_velocity(const ImuSequence& seq) {
  if (seq.size() < 2) throw PipelineError("ground_truth_velocity: fewer than 2 samples");
  std::vector<Vec2> v(seq.size());
  for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
    double dt = seq.t[i + 1] - seq.t[i];
    v[i] = {(seq.pos[i + 1].x - seq.pos[i].x) / dt,
            (seq.pos[i + 1].y - seq.pos[i].y) / dt};
  }
  v.back() = v[v.size() - 2];
  return v;
}

inline int window_count(std::size_t n, int length, int stride) {
  if (n < static_cast<std::size_t>(length)) return 0;
  return static_cast<int>((n - static_cast<std::size_t>(length)) / stride) + 1;
}

// Slices a resampled, globally aligned sequence into model windows. The
// target is the ground-truth velocity at each window's final sample.
inline WindowBatch make_windows(const ImuSequence& seq, int length = 200,
                                int stride = 10) {
  seq.validate();
  if (length < 1 || stride < 1) throw PipelineError("make_windows: bad length/stride");
  int count = window_count(seq.size(), length, stride);
  if (count < 1) throw PipelineError("make_windows: sequence shorter than one window");
  auto vel = ground_truth_velocity(seq);

  WindowBatch wb;
  wb.count = count;
  wb.length = length;
  wb.dt = seq.t[1] - seq.t[0];
  wb.features.resize(static_cast<std::size_t>(count) * 6 * length);
  wb.targets.resize(static_cast<std::size_t>(count) * 2);
  for (int w = 0; w < count; ++w) {
    std::size_t start = static_cast<std::size_t>(w) * stride;
    double* f = wb.window(w);
    for (int i = 0; i < length; ++i) {
      const Vec3& a = seq.accel[start + i];
      const Vec3& g = seq.gyro[start + i];
      f[0 * length + i] = a.x;
      f[1 * length + i] = a.y;
      f[2 * length + i] = a.z;
      f[3 * length + i] = g.x;
      f[4 * length + i] = g.y;
      f[5 * length + i] = g.z;
    }
    const Vec2& tv = vel[start + length - 1];
    wb.targets[static_cast<std::size_t>(w) * 2 + 0] = tv.x;
    wb.targets[static_cast<std::size_t>(w) * 2 + 1] = tv.y;
  }
  return wb;
}

// ---------------------------------------------------------------------------
// synthetic sequences

enum class MotionProfile { walk, run, mixed };

inline MotionProfile profile_from_string(const std::string& s) {
  if (s == "walk") return MotionProfile::walk;
  if (s == "run") return MotionProfile::run;
  if (s == "mixed") return MotionProfile::mixed;
  throw PipelineError("unknown motion profile: " + s);
}

struct SynthConfig {
  double rate_hz = 200.0;
  double gravity = 9.81;
  double accel_noise_sigma = 0.02;   // m/s^2, white
  double gyro_noise_sigma = 0.002;   // rad/s, white
  double accel_bias_scale = 0.05;    // per-axis constant bias, drawn once
  double gyro_bias_scale = 0.005;
  double walk_speed_min = 0.5, walk_speed_max = 2.0;   // m/s
  double run_speed_min = 2.0, run_speed_max = 4.0;
  double mixed_speed_min = 0.5, mixed_speed_max = 3.5;

  static SynthConfig noiseless() {
    SynthConfig c;
    c.accel_noise_sigma = 0.0;
    c.gyro_noise_sigma = 0.0;
    c.accel_bias_scale = 0.0;
    c.gyro_bias_scale = 0.0;
    return c;
  }
};

// Smooth random trajectory: heading and speed are low-frequency random
// Fourier processes; accel/gyro follow analytically in the device frame
// defined by the heading (yaw-only orientation), with gravity included in the
// device accelerometer channel. Deterministic given the seed.
inline ImuSequence synth_trajectory(std::uint64_t seed, double duration_s,
                                    MotionProfile profile,
                                    const SynthConfig& cfg = SynthConfig{}) {
  if (duration_s < 5.0) throw PipelineError("synth_trajectory: duration must be >= 5 s");

  double lo, hi;
  switch (profile) {
    case MotionProfile::walk: lo = cfg.walk_speed_min; hi = cfg.walk_speed_max; break;
    case MotionProfile::run: lo = cfg.run_speed_min; hi = cfg.run_speed_max; break;
    default: lo = cfg.mixed_speed_min; hi = cfg.mixed_speed_max; break;
  }
  double s_mid = 0.5 * (lo + hi);
  double s_half = 0.499 * (hi - lo);  // strictly inside the band

  Rng proc = Rng::substream(seed, "synth.process");
  constexpr int nh = 4;  // heading harmonics
  constexpr int ns = 3;  // speed harmonics
  double ha[nh], hw[nh], hp[nh];
  for (int i = 0; i < nh; ++i) {
    ha[i] = proc.uniform(0.2, 0.9);
    hw[i] = kTwoPi * proc.uniform(0.02, 0.2);
    hp[i] = proc.uniform(0.0, kTwoPi);
  }
  double sa[ns], sw[ns], sp[ns];
  for (int i = 0; i < ns; ++i) {
    sa[i] = proc.uniform(0.3, 1.0);
    sw[i] = kTwoPi * proc.uniform(0.05, 0.3);
    sp[i] = proc.uniform(0.0, kTwoPi);
  }
  double psi0 = proc.uniform(0.0, kTwoPi);

  auto heading = [&](double t) {
    double p = psi0;
    for (int i = 0; i < nh; ++i) p += ha[i] * std::sin(hw[i] * t + hp[i]);
    return p;
  };
  auto heading_rate = [&](double t) {
    double p = 0.0;
    for (int i = 0; i < nh; ++i) p += ha[i] * hw[i] * std::cos(hw[i] * t + hp[i]);
    return p;
  };
  auto speed_u = [&](double t) {
    double u = 0.0;
    for (int i = 0; i < ns; ++i) u += sa[i] * std::sin(sw[i] * t + sp[i]);
    return u;
  };
  auto speed = [&](double t) { return s_mid + s_half * std::tanh(speed_u(t)); };
  auto speed_rate = [&](double t) {
    double du = 0.0;
    for (int i = 0; i < ns; ++i) du += sa[i] * sw[i] * std::cos(sw[i] * t + sp[i]);
    double c = std::cosh(speed_u(t));
    return s_half * du / (c * c);
  };

  Rng abias_rng = Rng::substream(seed, "synth.bias.accel");
  Rng gbias_rng = Rng::substream(seed, "synth.bias.gyro");
  Vec3 accel_bias{cfg.accel_bias_scale * abias_rng.gaussian(),
                  cfg.accel_bias_scale * abias_rng.gaussian(),
                  cfg.accel_bias_scale * abias_rng.gaussian()};
  Vec3 gyro_bias{cfg.gyro_bias_scale * gbias_rng.gaussian(),
                 cfg.gyro_bias_scale * gbias_rng.gaussian(),
                 cfg.gyro_bias_scale * gbias_rng.gaussian()};
  Rng noise = Rng::substream(seed, "synth.noise");

  double dt = 1.0 / cfg.rate_hz;
  std::size_t n = static_cast<std::size_t>(std::floor(duration_s * cfg.rate_hz)) + 1;
  ImuSequence seq;
  seq.t.resize(n);
  seq.accel.resize(n);
  seq.gyro.resize(n);
  seq.q_ori.resize(n);
  seq.pos.resize(n);

  Vec2 p{0.0, 0.0};
  Vec2 v_prev{speed(0.0) * std::cos(heading(0.0)), speed(0.0) * std::sin(heading(0.0))};
  for (std::size_t i = 0; i < n; ++i) {
    double t = static_cast<double>(i) * dt;
    double psi = heading(t);
    double dpsi = heading_rate(t);
    double s = speed(t);
    double ds = speed_rate(t);

    Vec2 v{s * std::cos(psi), s * std::sin(psi)};
    if (i > 0) {
      p = p + (v_prev + v) * (0.5 * dt);  // trapezoidal position integration
      v_prev = v;
    }
    // global-frame acceleration of the trajectory
    Vec3 a_g{ds * std::cos(psi) - s * dpsi * std::sin(psi),
             ds * std::sin(psi) + s * dpsi * std::cos(psi), 0.0};
    // specific force in the global frame includes +g on z
    Vec3 f_g{a_g.x, a_g.y, a_g.z + cfg.gravity};
    Quat q = Quat::from_yaw(psi);
    Vec3 f_dev = rotate_to_global(f_g, q.conj());  // global -> device
    Vec3 w_dev{0.0, 0.0, dpsi};                    // yaw-only rotation

    seq.t[i] = t;
    seq.q_ori[i] = q;
    seq.pos[i] = {p.x, p.y, 0.0};
    seq.accel[i] = {f_dev.x + accel_bias.x + cfg.accel_noise_sigma * noise.gaussian(),
                    f_dev.y + accel_bias.y + cfg.accel_noise_sigma * noise.gaussian(),
                    f_dev.z + accel_bias.z + cfg.accel_noise_sigma * noise.gaussian()};
    seq.gyro[i] = {w_dev.x + gyro_bias.x + cfg.gyro_noise_sigma * noise.gaussian(),
                   w_dev.y + gyro_bias.y + cfg.gyro_noise_sigma * noise.gaussian(),
                   w_dev.z + gyro_bias.z + cfg.gyro_noise_sigma * noise.gaussian()};
  }
  return seq;
}

// ---------------------------------------------------------------------------
// CSV I/O: header mandatory, columns exactly
//   t,ax,ay,az,gx,gy,gz,qw,qx,qy,qz,px,py,pz
// decimal point, UTF-8, LF line endings.

inline const char* kCsvHeader = "t,ax,ay,az,gx,gy,gz,qw,qx,qy,qz,px,py,pz";

inline void save_csv(const ImuSequence& seq, const std::string& path) {
  seq.validate();
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw PipelineError("save_csv: cannot open " + path);
  std::fprintf(f, "%s\n", kCsvHeader);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    std::fprintf(f,
                 "%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,"
                 "%.17g,%.17g,%.17g,%.17g\n",
                 seq.t[i], seq.accel[i].x, seq.accel[i].y, seq.accel[i].z,
                 seq.gyro[i].x, seq.gyro[i].y, seq.gyro[i].z, seq.q_ori[i].w,
                 seq.q_ori[i].x, seq.q_ori[i].y, seq.q_ori[i].z, seq.pos[i].x,
                 seq.pos[i].y, seq.pos[i].z);
  }
  std::fclose(f);
}

inline ImuSequence load_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw PipelineError("load_csv: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw PipelineError("load_csv: empty file " + path);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  if (line != kCsvHeader)
    throw PipelineError("load_csv: bad header, expected '" + std::string(kCsvHeader) +
                        "' in " + path);
  ImuSequence seq;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    double v[14];
    const char* p = line.c_str();
    const char* end = p + line.size();
    for (int c = 0; c < 14; ++c) {
      if (c > 0) {
        if (p >= end || *p != ',')
          throw PipelineError("load_csv: missing column " + std::to_string(c + 1) +
                              " on line " + std::to_string(lineno));
        ++p;
      }
      auto [next, ec] = std::from_chars(p, end, v[c]);
      if (ec != std::errc{})
        throw PipelineError("load_csv: bad number on line " + std::to_string(lineno));
      p = next;
    }
    if (p != end)
      throw PipelineError("load_csv: trailing data on line " + std::to_string(lineno));
    if (!seq.t.empty() && !(v[0] > seq.t.back()))
      throw PipelineError("load_csv: non-monotonic timestamp on line " +
                          std::to_string(lineno));
    seq.t.push_back(v[0]);
    seq.accel.push_back({v[1], v[2], v[3]});
    seq.gyro.push_back({v[4], v[5], v[6]});
    seq.q_ori.push_back({v[7], v[8], v[9], v[10]});
    seq.pos.push_back({v[11], v[12], v[13]});
  }
  seq.validate();
  return seq;
}

}  // namespace dpnav
