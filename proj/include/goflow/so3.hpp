#pragma once

// Unit-quaternion representation of SO(3): geodesic interpolation, exp/log maps,
// angular velocities and geodesic distance.
//
// Convention: scalar-first (w, x, y, z), Hamilton product, right-handed frames.
// A unit quaternion q acts on a vector v as q v q*. Angular velocities are
// world-frame rotation vectors: dq/dt = 1/2 * omega (x) q.

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Core>

#include "goflow/types.hpp"

namespace goflow {

/// Axis * angle vector in the Lie algebra so(3), radians.
using RotVec = Vec3;

struct UnitQuat {
  double w = 1.0;
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  static UnitQuat identity() { return {}; }

  /// Normalizes (w, x, y, z). The sign is kept, so paths stay continuous.
  static UnitQuat normalized(double w, double x, double y, double z) {
    const double n = std::sqrt(w * w + x * x + y * y + z * z);
    return {w / n, x / n, y / n, z / n};
  }

  /// Same as normalized() followed by canonical().
  static UnitQuat canonical_from(double w, double x, double y, double z) {
    return normalized(w, x, y, z).canonical();
  }

  /// Representative with w >= 0; when w == 0 the first nonzero imaginary
  /// component is made positive.
  UnitQuat canonical() const {
    bool flip = w < 0.0;
    if (w == 0.0) {
      if (x != 0.0) flip = x < 0.0;
      else if (y != 0.0) flip = y < 0.0;
      else flip = z < 0.0;
    }
    return flip ? UnitQuat{-w, -x, -y, -z} : *this;
  }

  Vec3 vec() const { return {x, y, z}; }
  Eigen::Vector4d coeffs() const { return {w, x, y, z}; }
  double norm() const { return std::sqrt(w * w + x * x + y * y + z * z); }
  UnitQuat conj() const { return {w, -x, -y, -z}; }
  UnitQuat operator-() const { return {-w, -x, -y, -z}; }

  /// 3x3 rotation matrix R with R v = q v q*.
  Eigen::Matrix3d to_matrix() const {
    Eigen::Matrix3d r;
    r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
    return r;
  }

  /// Inverse of to_matrix() for a proper rotation matrix (Shepperd's method); canonical sign.
  static UnitQuat from_matrix(const Eigen::Matrix3d& r) {
    const double tr = r.trace();
    double qw, qx, qy, qz;
    if (tr > r(0, 0) && tr > r(1, 1) && tr > r(2, 2)) {
      const double s = 2.0 * std::sqrt(1.0 + tr);
      qw = 0.25 * s;
      qx = (r(2, 1) - r(1, 2)) / s;
      qy = (r(0, 2) - r(2, 0)) / s;
      qz = (r(1, 0) - r(0, 1)) / s;
    } else if (r(0, 0) > r(1, 1) && r(0, 0) > r(2, 2)) {
      const double s = 2.0 * std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2));
      qw = (r(2, 1) - r(1, 2)) / s;
      qx = 0.25 * s;
      qy = (r(0, 1) + r(1, 0)) / s;
      qz = (r(0, 2) + r(2, 0)) / s;
    } else if (r(1, 1) > r(2, 2)) {
      const double s = 2.0 * std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2));
      qw = (r(0, 2) - r(2, 0)) / s;
      qx = (r(0, 1) + r(1, 0)) / s;
      qy = 0.25 * s;
      qz = (r(1, 2) + r(2, 1)) / s;
    } else {
      const double s = 2.0 * std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1));
      qw = (r(1, 0) - r(0, 1)) / s;
      qx = (r(0, 2) + r(2, 0)) / s;
      qy = (r(1, 2) + r(2, 1)) / s;
      qz = 0.25 * s;
    }
    return canonical_from(qw, qx, qy, qz);
  }
};

/// Hamilton product.
inline UnitQuat operator*(const UnitQuat& a, const UnitQuat& b) {
  return {a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
          a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
          a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
          a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w};
}

inline double dot(const UnitQuat& a, const UnitQuat& b) {
  return a.w * b.w + a.x * b.x + a.y * b.y + a.z * b.z;
}

/// True when a and b represent the same rotation (|a.b| = 1 within tol).
inline bool same_rotation(const UnitQuat& a, const UnitQuat& b, double tol = 1e-12) {
  return std::abs(std::abs(dot(a, b)) - 1.0) <= tol;
}

inline constexpr double kSlerpNlerpThreshold = 1e-8;
inline constexpr double kLogPiTieBand = 1e-12;

/// Shortest-arc spherical linear interpolation. q1 is negated first when
/// q0.q1 < 0; below an arc of 1e-8 rad normalized linear interpolation is used.
inline UnitQuat slerp(const UnitQuat& q0, UnitQuat q1, double t) {
  double d = dot(q0, q1);
  if (d < 0.0) {
    q1 = -q1;
    d = -d;
  }
  d = std::min(d, 1.0);
  const double omega = std::acos(d);
  double a, b;
  if (omega < kSlerpNlerpThreshold) {
    a = 1.0 - t;
    b = t;
  } else {
    const double s = std::sin(omega);
    a = std::sin((1.0 - t) * omega) / s;
    b = std::sin(t * omega) / s;
  }
  return UnitQuat::normalized(a * q0.w + b * q1.w, a * q0.x + b * q1.x, a * q0.y + b * q1.y,
                              a * q0.z + b * q1.z);
}

/// Rotation vector (axis * angle, angle in [0, pi]) of q.
inline RotVec quat_log(const UnitQuat& q_in) {
  const UnitQuat q = q_in.canonical();
  const Vec3 u = q.vec();
  const double s = u.norm();
  if (s == 0.0) return RotVec::Zero();
  const double angle = 2.0 * std::atan2(s, q.w);
  if (std::numbers::pi - angle <= kLogPiTieBand) {
    // Half-turn: the sign of the axis is arbitrary; make the dominant component positive.
    Vec3 n = u / s;
    Eigen::Index k = 0;
    n.cwiseAbs().maxCoeff(&k);
    if (n[k] < 0.0) n = -n;
    return std::numbers::pi * n;
  }
  return (angle / s) * u;
}

/// Unit quaternion with rotation vector v.
inline UnitQuat quat_exp(const RotVec& v) {
  const double theta = v.norm();
  const double half = 0.5 * theta;
  double k;  // sin(theta/2) / theta
  if (theta < 1e-4) {
    const double t2 = theta * theta;
    k = 0.5 - t2 / 48.0 + t2 * t2 / 3840.0;
  } else {
    k = std::sin(half) / theta;
  }
  return UnitQuat::normalized(std::cos(half), k * v.x(), k * v.y(), k * v.z());
}

/// Constant world-frame angular velocity carrying q0 to q1 in unit time along
/// the shortest arc: the rotation vector of q1 (x) q0*.
inline RotVec relative_angular_velocity(const UnitQuat& q0, UnitQuat q1) {
  if (dot(q0, q1) < 0.0) q1 = -q1;
  return quat_log(q1 * q0.conj());
}

/// Angle of the relative rotation, in [0, pi].
inline double geodesic_distance(const UnitQuat& q0, const UnitQuat& q1) {
  return relative_angular_velocity(q0, q1).norm();
}

inline Vec3 rotate(const UnitQuat& q, const Vec3& v) { return q.to_matrix() * v; }

/// Rigidly rotates every row of points about the origin.
inline Coords apply_rotation(const UnitQuat& q, const Coords& points) {
  const Eigen::Matrix3d r = q.to_matrix();
  return points * r.transpose();
}

/// Unit quaternion drawn uniformly from SO(3) (Shoemake).
template <typename RngT>
UnitQuat random_rotation(RngT& rng) {
  const double u1 = rng.uniform(), u2 = rng.uniform(), u3 = rng.uniform();
  const double a = std::sqrt(1.0 - u1), b = std::sqrt(u1);
  const double tau = 2.0 * std::numbers::pi;
  return UnitQuat::normalized(b * std::cos(tau * u3), a * std::sin(tau * u2), a * std::cos(tau * u2),
                              b * std::sin(tau * u3));
}

}  // namespace goflow
