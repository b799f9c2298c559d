#pragma once

#include <Eigen/Core>

namespace goflow {

using Vec3 = Eigen::Vector3d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

/// N x 3 Cartesian coordinates in Angstrom, one row per atom. Row-major so the
/// flattened layout is (x0, y0, z0, x1, ...).
using Coords = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

inline Eigen::Map<const VecX> flatten(const Coords& x) { return {x.data(), x.size()}; }
inline Eigen::Map<VecX> flatten(Coords& x) { return {x.data(), x.size()}; }

inline Coords unflatten(const VecX& v) {
  Coords x(v.size() / 3, 3);
  flatten(x) = v;
  return x;
}

}  // namespace goflow
