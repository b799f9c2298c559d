#pragma once

// Internal coordinates z = (r, theta, phi) on a spanning-tree Z-matrix, the
// decomposition X = f(c, q, z) and its inverse, and the Jacobians that link
// internal and Cartesian velocities.

#include <algorithm>
#include <cmath>
#include <deque>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "goflow/errors.hpp"
#include "goflow/molecule.hpp"
#include "goflow/so3.hpp"
#include "goflow/types.hpp"

namespace goflow {

/// Principal value of an angle difference, in (-pi, pi].
inline double wrap_angle(double d) { return std::atan2(std::sin(d), std::cos(d)); }

struct ZEntry {
  int atom = -1;
  int parent = -1;
  int grandparent = -1;
  int great_grandparent = -1;
};

/// Spanning-tree internal-coordinate definition. Entry k (k >= 1) contributes
/// a bond r(atom, parent); k >= 2 an angle theta(atom, parent, grandparent)
/// with vertex at parent; k >= 3 a dihedral phi(atom, parent, grandparent,
/// great_grandparent).
struct ZMatrixSpec {
  int root = 0;
  std::vector<ZEntry> entries;  // BFS placement order; entries[0].atom == root

  int num_atoms() const { return static_cast<int>(entries.size()); }
  int n_r() const { return std::max(num_atoms() - 1, 0); }
  int n_theta() const { return std::max(num_atoms() - 2, 0); }
  int n_phi() const { return std::max(num_atoms() - 3, 0); }
  int m() const { return n_r() + n_theta() + n_phi(); }

  // Offsets of each block in the flattened z vector (r, then theta, then phi).
  int theta_offset() const { return n_r(); }
  int phi_offset() const { return n_r() + n_theta(); }

  enum class Channel { kBond, kAngle, kTorsion };

  Channel channel(int k) const {
    if (k < n_r()) return Channel::kBond;
    if (k < phi_offset()) return Channel::kAngle;
    return Channel::kTorsion;
  }

  /// Z-matrix entry that owns coordinate k of the flattened vector.
  const ZEntry& entry_of(int k) const {
    if (k < n_r()) return entries[k + 1];
    if (k < phi_offset()) return entries[k - n_r() + 2];
    return entries[k - phi_offset() + 3];
  }

  /// Atoms defining coordinate k: 2, 3 or 4 indices.
  std::vector<int> atoms_of(int k) const {
    const ZEntry& e = entry_of(k);
    switch (channel(k)) {
      case Channel::kBond: return {e.atom, e.parent};
      case Channel::kAngle: return {e.atom, e.parent, e.grandparent};
      default: return {e.atom, e.parent, e.grandparent, e.great_grandparent};
    }
  }

  /// Relabels atom indices: new index of old atom i is perm[i].
  ZMatrixSpec relabeled(const std::vector<int>& perm) const {
    ZMatrixSpec out = *this;
    auto map = [&](int a) { return a < 0 ? a : perm[a]; };
    out.root = map(root);
    for (ZEntry& e : out.entries) {
      e.atom = map(e.atom);
      e.parent = map(e.parent);
      e.grandparent = map(e.grandparent);
      e.great_grandparent = map(e.great_grandparent);
    }
    return out;
  }
};

/// Bond lengths (Angstrom, > 0), bond angles (rad, in (0, pi)) and torsions (rad, (-pi, pi]).
struct InternalCoords {
  VecX r;
  VecX theta;
  VecX phi;

  int size() const { return static_cast<int>(r.size() + theta.size() + phi.size()); }

  VecX to_vector() const {
    VecX z(size());
    z << r, theta, phi;
    return z;
  }

  static InternalCoords from_vector(const VecX& z, const ZMatrixSpec& spec) {
    if (z.size() != spec.m()) {
      throw StructuralError("internal coordinate vector has " + std::to_string(z.size()) +
                            " entries, spec expects " + std::to_string(spec.m()));
    }
    return {z.head(spec.n_r()), z.segment(spec.theta_offset(), spec.n_theta()), z.tail(spec.n_phi())};
  }

  bool matches(const ZMatrixSpec& spec) const {
    return r.size() == spec.n_r() && theta.size() == spec.n_theta() && phi.size() == spec.n_phi();
  }

  /// Throws ValidationError unless every coordinate is inside its domain.
  void validate() const {
    for (Eigen::Index k = 0; k < r.size(); ++k)
      if (!std::isfinite(r[k]) || r[k] <= 0.0)
        throw ValidationError("bond length r[" + std::to_string(k) + "] = " + std::to_string(r[k]) + " is not positive");
    for (Eigen::Index k = 0; k < theta.size(); ++k)
      if (!std::isfinite(theta[k]) || theta[k] <= 0.0 || theta[k] >= std::numbers::pi)
        throw ValidationError("bond angle theta[" + std::to_string(k) + "] = " + std::to_string(theta[k]) +
                              " is outside (0, pi)");
    for (Eigen::Index k = 0; k < phi.size(); ++k)
      if (!std::isfinite(phi[k])) throw ValidationError("torsion phi[" + std::to_string(k) + "] is not finite");
  }
};

struct DecomposedState {
  Vec3 c = Vec3::Zero();
  UnitQuat q;
  InternalCoords z;
  int clamped_angles = 0;  // set by decompose when an angle was pulled into the clamp band
};

inline constexpr double kAngleClampBand = 1e-6;

// ---------------------------------------------------------------------------
// Measurements

inline double measure_distance(const Vec3& a, const Vec3& b) { return (a - b).norm(); }

/// Angle a-b-c at vertex b.
inline double measure_angle(const Vec3& a, const Vec3& b, const Vec3& c) {
  const Vec3 u = a - b, v = c - b;
  return std::atan2(u.cross(v).norm(), u.dot(v));
}

/// IUPAC dihedral a-b-c-d in (-pi, pi]; anti-periplanar is pi.
inline double measure_dihedral(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
  const Vec3 b1 = b - a, b2 = c - b, b3 = d - c;
  const Vec3 n1 = b1.cross(b2), n2 = b2.cross(b3);
  return std::atan2(b2.norm() * b1.dot(n2), n1.dot(n2));
}

// ---------------------------------------------------------------------------
// Z-matrix construction

/// Deterministic BFS spanning-tree Z-matrix. Root is the lowest-index heavy atom
/// (atom 0 when there are none); neighbors are visited by (atomic number desc,
/// index asc). Missing chain references fall back to the earliest-placed
/// neighbor, then to the earliest-placed unused atom.
inline ZMatrixSpec build_zmatrix(const MolecularGraph& graph) {
  graph.validate();
  const auto comps = graph.components();
  if (comps.size() > 1) {
    std::ostringstream msg;
    msg << "molecular graph is disconnected (" << comps.size() << " components):";
    for (const auto& c : comps) {
      msg << " {";
      for (std::size_t k = 0; k < c.size(); ++k) msg << (k ? "," : "") << c[k];
      msg << "}";
    }
    throw StructuralError(msg.str());
  }
  const int n = static_cast<int>(graph.size());
  auto adj = graph.adjacency();
  for (auto& nbrs : adj) {
    std::sort(nbrs.begin(), nbrs.end(), [&](int a, int b) {
      if (graph.atoms[a].element != graph.atoms[b].element) return graph.atoms[a].element > graph.atoms[b].element;
      return a < b;
    });
  }

  int root = 0;
  for (int i = 0; i < n; ++i) {
    if (graph.atoms[i].heavy()) {
      root = i;
      break;
    }
  }

  std::vector<int> order, tree_parent(n, -1), pos(n, -1);
  std::deque<int> queue{root};
  pos[root] = 0;
  order.push_back(root);
  while (!queue.empty()) {
    const int a = queue.front();
    queue.pop_front();
    for (int nb : adj[a]) {
      if (pos[nb] >= 0) continue;
      pos[nb] = static_cast<int>(order.size());
      order.push_back(nb);
      tree_parent[nb] = a;
      queue.push_back(nb);
    }
  }

  auto earliest = [&](int k, const std::vector<int>& candidates, std::initializer_list<int> exclude) {
    int best = -1;
    for (int c : candidates) {
      if (pos[c] >= k || std::find(exclude.begin(), exclude.end(), c) != exclude.end()) continue;
      if (best < 0 || pos[c] < pos[best]) best = c;
    }
    return best;
  };
  auto earliest_any = [&](int k, std::initializer_list<int> exclude) {
    for (int p = 0; p < k; ++p)
      if (std::find(exclude.begin(), exclude.end(), order[p]) == exclude.end()) return order[p];
    return -1;
  };

  ZMatrixSpec spec;
  spec.root = root;
  spec.entries.resize(n);
  for (int k = 0; k < n; ++k) {
    ZEntry& e = spec.entries[k];
    e.atom = order[k];
    if (k >= 1) e.parent = tree_parent[e.atom];
    if (k >= 2) {
      const int gp = tree_parent[e.parent];
      e.grandparent = gp >= 0 ? gp : earliest(k, adj[e.parent], {e.atom});
      if (e.grandparent < 0) e.grandparent = earliest_any(k, {e.atom, e.parent});
    }
    if (k >= 3) {
      int ggp = tree_parent[e.grandparent];
      if (ggp < 0 || ggp == e.parent || ggp == e.atom) ggp = earliest(k, adj[e.grandparent], {e.atom, e.parent});
      if (ggp < 0) ggp = earliest(k, adj[e.parent], {e.atom, e.grandparent});
      if (ggp < 0) ggp = earliest_any(k, {e.atom, e.parent, e.grandparent});
      e.great_grandparent = ggp;
    }
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Cartesian <-> internal

inline InternalCoords measure_internals(const Coords& x, const ZMatrixSpec& spec) {
  InternalCoords z{VecX(spec.n_r()), VecX(spec.n_theta()), VecX(spec.n_phi())};
  auto row = [&](int a) -> Vec3 { return x.row(a).transpose(); };
  for (int k = 1; k < spec.num_atoms(); ++k) {
    const ZEntry& e = spec.entries[k];
    z.r[k - 1] = measure_distance(row(e.atom), row(e.parent));
    if (k >= 2) z.theta[k - 2] = measure_angle(row(e.atom), row(e.parent), row(e.grandparent));
    if (k >= 3)
      z.phi[k - 3] = measure_dihedral(row(e.atom), row(e.parent), row(e.grandparent), row(e.great_grandparent));
  }
  return z;
}

namespace detail {

/// Atom positions in the canonical frame: first spec atom at the origin, second
/// on +x, third in the xy half-plane with y > 0. Not centered.
inline Coords place_canonical(const InternalCoords& z, const ZMatrixSpec& spec) {
  const int n = spec.num_atoms();
  Coords p = Coords::Zero(n, 3);
  for (int k = 1; k < n; ++k) {
    const ZEntry& e = spec.entries[k];
    const double r = z.r[k - 1];
    if (k == 1) {
      p.row(e.atom) << r, 0.0, 0.0;
      continue;
    }
    const double th = z.theta[k - 2];
    const Vec3 pp = p.row(e.parent).transpose();
    const Vec3 pg = p.row(e.grandparent).transpose();
    if (k == 2) {
      const Vec3 d = (pg - pp).normalized();  // along +-x
      const Vec3 perp(0.0, 1.0, 0.0);
      p.row(e.atom) = (pp + r * (std::cos(th) * d + std::sin(th) * perp)).transpose();
      continue;
    }
    const Vec3 pa = p.row(e.great_grandparent).transpose();
    // Natural extension reference frame from (great-grandparent, grandparent, parent).
    const Vec3 bc = (pp - pg).normalized();
    const Vec3 nrm = (pg - pa).cross(bc).normalized();
    const Vec3 m = nrm.cross(bc);
    const double ph = z.phi[k - 3];
    const Vec3 local(-r * std::cos(th), r * std::sin(th) * std::cos(ph), r * std::sin(th) * std::sin(ph));
    p.row(e.atom) = (pp + local.x() * bc + local.y() * m + local.z() * nrm).transpose();
  }
  return p;
}

}  // namespace detail

inline Vec3 centroid(const Coords& x) { return x.colwise().mean().transpose(); }

/// Conformer from centroid c, orientation q and internal coordinates z.
inline Coords compose(const Vec3& c, const UnitQuat& q, const InternalCoords& z, const ZMatrixSpec& spec) {
  if (!z.matches(spec)) throw StructuralError("internal coordinates do not match the Z-matrix dimensions");
  z.validate();
  Coords p = detail::place_canonical(z, spec);
  p.rowwise() -= p.colwise().mean();
  Coords x = apply_rotation(q, p);
  x.rowwise() += c.transpose();
  return x;
}

inline Coords compose(const DecomposedState& s, const ZMatrixSpec& spec) { return compose(s.c, s.q, s.z, spec); }

/// Orientation of the canonical frame spanned by the first three spec atoms of x.
inline UnitQuat frame_orientation(const Coords& x, const ZMatrixSpec& spec) {
  const int n = spec.num_atoms();
  if (n < 2) return UnitQuat::identity();
  const Vec3 x0 = x.row(spec.entries[0].atom).transpose();
  const Vec3 e1 = (x.row(spec.entries[1].atom).transpose() - x0).normalized();
  if (n == 2) {
    // Minimal rotation taking +x onto the bond direction.
    const Vec3 ex(1.0, 0.0, 0.0);
    const Vec3 axis = ex.cross(e1);
    const double s = axis.norm();
    if (s < 1e-15) return e1.x() > 0 ? UnitQuat::identity() : UnitQuat{0.0, 0.0, 0.0, 1.0};
    return quat_exp(axis / s * std::atan2(s, ex.dot(e1)));
  }
  const Vec3 d2 = x.row(spec.entries[2].atom).transpose() - x0;
  const Vec3 w = d2 - d2.dot(e1) * e1;
  const Vec3 e2 = w.normalized();
  Eigen::Matrix3d r;
  r.col(0) = e1;
  r.col(1) = e2;
  r.col(2) = e1.cross(e2);
  return UnitQuat::from_matrix(r);
}

/// Splits a conformer into centroid, orientation and internal coordinates so
/// that compose(decompose(x)) reproduces x. Angles outside the clamp band are
/// clamped and counted in clamped_angles.
inline DecomposedState decompose(const Coords& x, const ZMatrixSpec& spec) {
  if (x.rows() != spec.num_atoms())
    throw StructuralError("conformer has " + std::to_string(x.rows()) + " atoms, Z-matrix expects " +
                          std::to_string(spec.num_atoms()));
  if (!x.allFinite()) throw ValidationError("conformer contains non-finite coordinates");
  DecomposedState s;
  s.c = centroid(x);
  s.z = measure_internals(x, spec);
  if (spec.num_atoms() >= 3) {
    const double th = s.z.theta[0];
    if (th < kAngleClampBand || th > std::numbers::pi - kAngleClampBand) {
      throw NumericalError("degenerate frame: first three Z-matrix atoms (" + std::to_string(spec.entries[0].atom) +
                           ", " + std::to_string(spec.entries[1].atom) + ", " + std::to_string(spec.entries[2].atom) +
                           ") are collinear");
    }
  }
  for (Eigen::Index k = 0; k < s.z.theta.size(); ++k) {
    double& th = s.z.theta[k];
    if (th < kAngleClampBand || th > std::numbers::pi - kAngleClampBand) {
      th = std::clamp(th, kAngleClampBand, std::numbers::pi - kAngleClampBand);
      ++s.clamped_angles;
    }
  }
  s.q = frame_orientation(x, spec);
  return s;
}

// ---------------------------------------------------------------------------
// Jacobians

/// Gradient rows of the internal-coordinate measurement map, dz/dX (m x 3N).
/// Bond rows are unit vectors along the bond; angle rows are perpendicular to
/// their bond arms and scaled by 1/sin(theta); torsion rows use the plane
/// normals, with the inner-atom blocks set so net force and torque vanish.
inline MatX wilson_b_matrix(const Coords& x, const ZMatrixSpec& spec) {
  const int n = spec.num_atoms();
  MatX b = MatX::Zero(spec.m(), 3 * n);
  auto row = [&](int a) -> Vec3 { return x.row(a).transpose(); };
  auto put = [&](int k, int atom, const Vec3& g) { b.block<1, 3>(k, 3 * atom) += g.transpose(); };

  for (int k = 0; k < spec.m(); ++k) {
    const ZEntry& e = spec.entry_of(k);
    switch (spec.channel(k)) {
      case ZMatrixSpec::Channel::kBond: {
        const Vec3 d = row(e.atom) - row(e.parent);
        const Vec3 u = d / d.norm();
        put(k, e.atom, u);
        put(k, e.parent, -u);
        break;
      }
      case ZMatrixSpec::Channel::kAngle: {
        // theta(i, j, k) with vertex j.
        const Vec3 di = row(e.atom) - row(e.parent), dk = row(e.grandparent) - row(e.parent);
        const double li = di.norm(), lk = dk.norm();
        const Vec3 u = di / li, v = dk / lk;
        const double cs = u.dot(v);
        const double sn = u.cross(v).norm();
        if (sn < kAngleClampBand)
          throw NumericalError("singular bond angle (" + std::to_string(e.atom) + ", " + std::to_string(e.parent) +
                               ", " + std::to_string(e.grandparent) + "): sin(theta) = " + std::to_string(sn));
        const Vec3 gi = (u * cs - v) / (li * sn);
        const Vec3 gk = (v * cs - u) / (lk * sn);
        put(k, e.atom, gi);
        put(k, e.grandparent, gk);
        put(k, e.parent, -gi - gk);
        break;
      }
      case ZMatrixSpec::Channel::kTorsion: {
        // phi(i, j, k, l) over atoms (atom, parent, grandparent, great-grandparent).
        const Vec3 xi = row(e.atom), xj = row(e.parent), xk = row(e.grandparent), xl = row(e.great_grandparent);
        const Vec3 f = xi - xj, g = xj - xk, h = xl - xk;
        const Vec3 a = f.cross(g), bb = h.cross(g);
        const double a2 = a.squaredNorm(), b2 = bb.squaredNorm(), gn = g.norm();
        if (a2 < 1e-24 || b2 < 1e-24)
          throw NumericalError("singular dihedral (" + std::to_string(e.atom) + ", " + std::to_string(e.parent) + ", " +
                               std::to_string(e.grandparent) + ", " + std::to_string(e.great_grandparent) +
                               "): collinear reference atoms");
        const Vec3 gi = -(gn / a2) * a;
        const Vec3 gl = (gn / b2) * bb;
        const double fg = f.dot(g), hg = h.dot(g);
        const Vec3 gj = -gi + (fg / (a2 * gn)) * a - (hg / (b2 * gn)) * bb;
        const Vec3 gk = -gi - gj - gl;
        put(k, e.atom, gi);
        put(k, e.parent, gj);
        put(k, e.grandparent, gk);
        put(k, e.great_grandparent, gl);
        break;
      }
    }
  }
  return b;
}

/// Rows of d(c, rho)/dX: the centroid and the infinitesimal rotation of the
/// canonical frame of the first three spec atoms (6 x 3N, N >= 3).
inline MatX external_coordinate_rows(const Coords& x, const ZMatrixSpec& spec) {
  const int n = spec.num_atoms();
  MatX g = MatX::Zero(6, 3 * n);
  for (int a = 0; a < n; ++a) g.block<3, 3>(0, 3 * a) = Eigen::Matrix3d::Identity() / n;
  const int i0 = spec.entries[0].atom, i1 = spec.entries[1].atom, i2 = spec.entries[2].atom;
  const Vec3 x0 = x.row(i0).transpose();
  const Vec3 d1 = x.row(i1).transpose() - x0, d2 = x.row(i2).transpose() - x0;
  const double l1 = d1.norm();
  const Vec3 e1 = d1 / l1;
  const double along = d2.dot(e1);
  const Vec3 w = d2 - along * e1;
  const double wl = w.norm();
  const Vec3 e2 = w / wl, e3 = e1.cross(e2);
  // rho . e3 = de1 . e2,  rho . e2 = -de1 . e3,  rho . e1 = de2 . e3
  auto add = [&](int r, int atom, const Vec3& v) { g.block<1, 3>(r, 3 * atom) += v.transpose(); };
  add(3, i1, e2 / l1);
  add(3, i0, -e2 / l1);
  add(4, i1, -e3 / l1);
  add(4, i0, e3 / l1);
  add(5, i2, e3 / wl);
  add(5, i0, -e3 / wl);
  add(5, i1, -along * e3 / (l1 * wl));
  add(5, i0, along * e3 / (l1 * wl));
  return g;
}

/// dX/dz of compose() at fixed centroid and orientation (3N x m). Solves the
/// full coordinate system [dz/dX; d(c, rho)/dX] J = [I; 0].
inline MatX jacobian(const Coords& x, const ZMatrixSpec& spec) {
  const int n = spec.num_atoms();
  const int m = spec.m();
  if (n <= 1) return MatX::Zero(3 * n, 0);
  if (n == 2) {
    const Vec3 d = x.row(spec.entries[1].atom).transpose() - x.row(spec.entries[0].atom).transpose();
    const Vec3 u = d.normalized();
    MatX j = MatX::Zero(6, 1);
    j.block<3, 1>(3 * spec.entries[1].atom, 0) = 0.5 * u;
    j.block<3, 1>(3 * spec.entries[0].atom, 0) = -0.5 * u;
    return j;
  }
  MatX full(3 * n, 3 * n);
  full.topRows(m) = wilson_b_matrix(x, spec);
  full.bottomRows(6) = external_coordinate_rows(x, spec);
  MatX rhs = MatX::Zero(3 * n, m);
  rhs.topRows(m).setIdentity();
  Eigen::PartialPivLU<MatX> lu(full);
  MatX j = lu.solve(rhs);
  if (!j.allFinite()) throw NumericalError("singular internal-coordinate Jacobian");
  return j;
}

}  // namespace goflow
