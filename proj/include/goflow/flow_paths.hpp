#pragma once

// Priors, interpolants and target velocities on translation, rotation and
// internal-coordinate spaces, and their composition into a Cartesian field.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>

#include "goflow/entropic_ot.hpp"
#include "goflow/errors.hpp"
#include "goflow/random.hpp"
#include "goflow/so3.hpp"
#include "goflow/types.hpp"
#include "goflow/zmatrix.hpp"

namespace goflow {

inline constexpr double kDefaultBondMean = 1.5;
inline constexpr double kDefaultAngleMean = 109.5 * std::numbers::pi / 180.0;
inline constexpr double kPriorMinBond = 0.3;
inline constexpr double kPriorAngleMargin = 1e-3;

struct PriorSpec {
  double sigma_trans = 0.5;
  double sigma_rot = 0.3;
  double sigma_conf = 0.1;
  std::optional<InternalCoords> reference_internals;
  bool cartesian = false;  // draw X0 ~ N(0, I) per coordinate and decompose it instead

  void validate() const {
    if (!(sigma_trans > 0) || !(sigma_rot > 0) || !(sigma_conf > 0))
      throw ValidationError("prior noise scales must be positive");
  }
};

/// Per-channel prior means: the reference internals when given, else 1.5 A / 109.5 deg / 0.
inline InternalCoords prior_means(const PriorSpec& prior, const ZMatrixSpec& zspec) {
  if (prior.reference_internals) {
    if (!prior.reference_internals->matches(zspec))
      throw StructuralError("prior reference internals do not match the Z-matrix");
    return *prior.reference_internals;
  }
  return {VecX::Constant(zspec.n_r(), kDefaultBondMean), VecX::Constant(zspec.n_theta(), kDefaultAngleMean),
          VecX::Zero(zspec.n_phi())};
}

inline RotVec sample_rotation_tangent(double sigma, Rng& rng) {
  while (true) {
    RotVec v(sigma * rng.normal(), sigma * rng.normal(), sigma * rng.normal());
    if (v.norm() < std::numbers::pi) return v;
  }
}

inline DecomposedState sample_prior(const PriorSpec& prior, const ZMatrixSpec& zspec, Rng& rng) {
  prior.validate();
  if (prior.cartesian) {
    Coords x(zspec.num_atoms(), 3);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.normal();
    DecomposedState s = decompose(x, zspec);
    return s;
  }
  DecomposedState s;
  s.c = Vec3(prior.sigma_trans * rng.normal(), prior.sigma_trans * rng.normal(), prior.sigma_trans * rng.normal());
  s.q = quat_exp(sample_rotation_tangent(prior.sigma_rot, rng));
  s.z = prior_means(prior, zspec);
  for (Eigen::Index k = 0; k < s.z.r.size(); ++k)
    s.z.r[k] = std::max(s.z.r[k] + prior.sigma_conf * rng.normal(), kPriorMinBond);
  for (Eigen::Index k = 0; k < s.z.theta.size(); ++k)
    s.z.theta[k] = std::clamp(s.z.theta[k] + prior.sigma_conf * rng.normal(), kPriorAngleMargin,
                              std::numbers::pi - kPriorAngleMargin);
  for (Eigen::Index k = 0; k < s.z.phi.size(); ++k) s.z.phi[k] = wrap_angle(s.z.phi[k] + prior.sigma_conf * rng.normal());
  return s;
}

/// Volume factor of the exponential chart of SO(3): Haar density 2(1 - cos|v|)/|v|^2, 1 at v = 0.
inline double so3_exp_volume(double angle) {
  if (angle < 1e-4) return 1.0 - angle * angle / 12.0;
  return 2.0 * (1.0 - std::cos(angle)) / (angle * angle);
}

inline double gaussian_log_density(double x, double mean, double sigma) {
  const double d = (x - mean) / sigma;
  return -0.5 * d * d - std::log(sigma) - 0.5 * std::log(2.0 * std::numbers::pi);
}

inline double wrapped_gaussian_log_density(double x, double mean, double sigma) {
  double acc = 0.0;
  const double base = wrap_angle(x - mean);
  for (int k = -3; k <= 3; ++k) acc += std::exp(gaussian_log_density(base + 2.0 * std::numbers::pi * k, 0.0, sigma));
  return std::log(acc);
}

/// Probability that a 3D isotropic Gaussian of scale sigma lands inside |v| < pi.
inline double rotation_truncation_mass(double sigma) {
  const double a = std::numbers::pi / sigma;
  return std::erf(a / std::sqrt(2.0)) - std::sqrt(2.0 / std::numbers::pi) * a * std::exp(-0.5 * a * a);
}

/// Log-density of the decomposed prior: Lebesgue on c and z, Haar (exponential-chart
/// normalization) on q. Clamping of the z draws is not modeled.
inline double prior_log_density(const DecomposedState& s, const PriorSpec& prior, const ZMatrixSpec& zspec) {
  prior.validate();
  if (prior.cartesian) throw ValidationError("log-density of the Cartesian prior is not available in the decomposed chart");
  double lp = 0.0;
  for (int d = 0; d < 3; ++d) lp += gaussian_log_density(s.c[d], 0.0, prior.sigma_trans);
  const RotVec v = quat_log(s.q);
  for (int d = 0; d < 3; ++d) lp += gaussian_log_density(v[d], 0.0, prior.sigma_rot);
  lp -= std::log(rotation_truncation_mass(prior.sigma_rot));
  lp -= std::log(so3_exp_volume(v.norm()));
  const InternalCoords mu = prior_means(prior, zspec);
  for (Eigen::Index k = 0; k < mu.r.size(); ++k) lp += gaussian_log_density(s.z.r[k], mu.r[k], prior.sigma_conf);
  for (Eigen::Index k = 0; k < mu.theta.size(); ++k)
    lp += gaussian_log_density(s.z.theta[k], mu.theta[k], prior.sigma_conf);
  for (Eigen::Index k = 0; k < mu.phi.size(); ++k)
    lp += wrapped_gaussian_log_density(s.z.phi[k], mu.phi[k], prior.sigma_conf);
  return lp;
}

// ---------------------------------------------------------------------------
// Paths

struct TranslationPath {
  Vec3 c_t;
  Vec3 target;
};

struct RotationPath {
  UnitQuat q_t;
  RotVec target;
};

struct ConformationPath {
  InternalCoords z_t;
  VecX target;
};

struct PathSample {
  double t = 0.0;
  DecomposedState state_t;
  Vec3 target_v_trans = Vec3::Zero();
  RotVec target_omega = RotVec::Zero();
  VecX target_v_conf;
};

inline void check_time(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw ValidationError("path time t = " + std::to_string(t) + " is outside [0, 1]");
}

inline TranslationPath path_translation(const Vec3& c0, const Vec3& c1, double t) {
  check_time(t);
  return {(1.0 - t) * c0 + t * c1, c1 - c0};
}

inline RotationPath path_rotation(const UnitQuat& q0, const UnitQuat& q1, double t) {
  check_time(t);
  return {slerp(q0, q1, t), relative_angular_velocity(q0, q1)};
}

/// Bonds log-linear, angles linear, torsions along the short arc.
inline ConformationPath path_conformation(const InternalCoords& z0, const InternalCoords& z1, double t) {
  check_time(t);
  if (z0.r.size() != z1.r.size() || z0.theta.size() != z1.theta.size() || z0.phi.size() != z1.phi.size())
    throw StructuralError("path endpoints have different internal-coordinate dimensions");
  z0.validate();
  z1.validate();
  ConformationPath p{z0, VecX(z0.size())};
  const Eigen::Index nr = z0.r.size(), nt = z0.theta.size();
  for (Eigen::Index k = 0; k < nr; ++k) {
    const double l0 = std::log(z0.r[k]), l1 = std::log(z1.r[k]);
    p.z_t.r[k] = std::exp((1.0 - t) * l0 + t * l1);
    p.target[k] = p.z_t.r[k] * (l1 - l0);
  }
  for (Eigen::Index k = 0; k < nt; ++k) {
    p.z_t.theta[k] = (1.0 - t) * z0.theta[k] + t * z1.theta[k];
    p.target[nr + k] = z1.theta[k] - z0.theta[k];
  }
  for (Eigen::Index k = 0; k < z0.phi.size(); ++k) {
    const double d = wrap_angle(z1.phi[k] - z0.phi[k]);
    p.z_t.phi[k] = wrap_angle(z0.phi[k] + t * d);
    p.target[nr + nt + k] = d;
  }
  return p;
}

inline PathSample make_path_sample(const DecomposedState& s0, const DecomposedState& s1, double t) {
  const TranslationPath tr = path_translation(s0.c, s1.c, t);
  const RotationPath rot = path_rotation(s0.q, s1.q, t);
  const ConformationPath conf = path_conformation(s0.z, s1.z, t);
  PathSample out;
  out.t = t;
  out.state_t.c = tr.c_t;
  out.state_t.q = rot.q_t;
  out.state_t.z = conf.z_t;
  out.target_v_trans = tr.target;
  out.target_omega = rot.target;
  out.target_v_conf = conf.target;
  return out;
}

// ---------------------------------------------------------------------------
// Cartesian composition

/// Per atom: v_trans + omega x (x_i - c) + (J v_conf)_i.
inline Coords compose_cartesian_velocity(const Vec3& v_trans, const RotVec& omega, const VecX& v_conf, const Coords& x,
                                         const Vec3& c, const MatX& j) {
  const Eigen::Index n = x.rows();
  if (j.rows() != 3 * n || j.cols() != v_conf.size())
    throw StructuralError("Jacobian is " + std::to_string(j.rows()) + "x" + std::to_string(j.cols()) + ", expected " +
                          std::to_string(3 * n) + "x" + std::to_string(v_conf.size()));
  Coords v = unflatten(j * v_conf);
  for (Eigen::Index i = 0; i < n; ++i) {
    const Vec3 r = x.row(i).transpose() - c;
    v.row(i) += (v_trans + omega.cross(r)).transpose();
  }
  return v;
}

/// Regression target for the flow-consistency loss: time derivative of the
/// composed path at state_t.
inline Coords cartesian_target_velocity(const PathSample& s, const ZMatrixSpec& zspec) {
  const Coords x = compose(s.state_t, zspec);
  return compose_cartesian_velocity(s.target_v_trans, s.target_omega, s.target_v_conf, x, s.state_t.c, jacobian(x, zspec));
}

}  // namespace goflow
