#include <cmath>
#include <numbers>

#include <gtest/gtest.h>

#include "goflow/zmatrix.hpp"
#include "test_util.hpp"

namespace goflow {
namespace {

using testing::chain_graph;
using testing::random_conformer;
using testing::random_graph;
using testing::random_internals;
using testing::ring_graph;
using testing::rmsd_no_align;

constexpr double kPi = std::numbers::pi;

// Central-difference Jacobian of the measurement map dz/dX, torsion differences wrapped.
MatX measurement_fd(const Coords& x, const ZMatrixSpec& spec, double h) {
  const int n = spec.num_atoms();
  MatX fd(spec.m(), 3 * n);
  for (int c = 0; c < 3 * n; ++c) {
    Coords xp = x, xm = x;
    xp(c / 3, c % 3) += h;
    xm(c / 3, c % 3) -= h;
    const VecX zp = measure_internals(xp, spec).to_vector(), zm = measure_internals(xm, spec).to_vector();
    for (int k = 0; k < spec.m(); ++k) {
      double d = zp[k] - zm[k];
      if (spec.channel(k) == ZMatrixSpec::Channel::kTorsion) d = wrap_angle(d);
      fd(k, c) = d / (2 * h);
    }
  }
  return fd;
}

// Central-difference Jacobian of compose with respect to z.
MatX compose_fd(const DecomposedState& s, const ZMatrixSpec& spec, double h) {
  const VecX z = s.z.to_vector();
  MatX fd(3 * spec.num_atoms(), spec.m());
  for (int k = 0; k < spec.m(); ++k) {
    VecX zp = z, zm = z;
    zp[k] += h;
    zm[k] -= h;
    const Coords xp = compose(s.c, s.q, InternalCoords::from_vector(zp, spec), spec);
    const Coords xm = compose(s.c, s.q, InternalCoords::from_vector(zm, spec), spec);
    fd.col(k) = (flatten(xp) - flatten(xm)) / (2 * h);
  }
  return fd;
}

double max_column_relative_error(const MatX& analytic, const MatX& fd, bool by_rows) {
  double worst = 0.0;
  const Eigen::Index count = by_rows ? analytic.rows() : analytic.cols();
  for (Eigen::Index k = 0; k < count; ++k) {
    const VecX a = by_rows ? VecX(analytic.row(k).transpose()) : VecX(analytic.col(k));
    const VecX f = by_rows ? VecX(fd.row(k).transpose()) : VecX(fd.col(k));
    worst = std::max(worst, (a - f).cwiseAbs().maxCoeff() / std::max(f.cwiseAbs().maxCoeff(), 1e-8));
  }
  return worst;
}

TEST(BuildZMatrix, PathGraphOfFourAtoms) {
  const ZMatrixSpec spec = build_zmatrix(chain_graph(4));
  ASSERT_EQ(spec.num_atoms(), 4);
  EXPECT_EQ(spec.n_r(), 3);
  EXPECT_EQ(spec.n_theta(), 2);
  EXPECT_EQ(spec.n_phi(), 1);
  EXPECT_EQ(spec.m(), 6);
  EXPECT_EQ(spec.root, 0);
  EXPECT_EQ(spec.atoms_of(0), (std::vector<int>{1, 0}));
  EXPECT_EQ(spec.atoms_of(1), (std::vector<int>{2, 1}));
  EXPECT_EQ(spec.atoms_of(2), (std::vector<int>{3, 2}));
  EXPECT_EQ(spec.atoms_of(3), (std::vector<int>{2, 1, 0}));
  EXPECT_EQ(spec.atoms_of(4), (std::vector<int>{3, 2, 1}));
  EXPECT_EQ(spec.atoms_of(5), (std::vector<int>{3, 2, 1, 0}));
}

TEST(BuildZMatrix, SingleBondIsDegenerate) {
  const ZMatrixSpec spec = build_zmatrix(chain_graph(2));
  EXPECT_EQ(spec.n_r(), 1);
  EXPECT_EQ(spec.n_theta(), 0);
  EXPECT_EQ(spec.n_phi(), 0);
}

TEST(BuildZMatrix, CyclohexaneSpanningTreeByHand) {
  // Ring 0-1-2-3-4-5-0. BFS from 0 visits 1, 5, 2, 4, 3; bond 3-4 closes the ring.
  const ZMatrixSpec spec = build_zmatrix(ring_graph(6));
  std::vector<int> order;
  for (const ZEntry& e : spec.entries) order.push_back(e.atom);
  EXPECT_EQ(order, (std::vector<int>{0, 1, 5, 2, 4, 3}));
  std::vector<std::pair<int, int>> tree;
  for (int k = 1; k < 6; ++k) tree.emplace_back(spec.entries[k].atom, spec.entries[k].parent);
  EXPECT_EQ(tree, (std::vector<std::pair<int, int>>{{1, 0}, {5, 0}, {2, 1}, {4, 5}, {3, 2}}));
  EXPECT_EQ(spec.entries[2].grandparent, 1);  // fallback: earliest placed neighbor of the root
  EXPECT_EQ(spec.entries[3].great_grandparent, 5);
  EXPECT_EQ(spec.entries[4].great_grandparent, 1);
  EXPECT_EQ(spec.entries[5].great_grandparent, 0);
  for (int k = 0; k < spec.m(); ++k) {
    const auto atoms = spec.atoms_of(k);
    const bool closure = (atoms[0] == 3 && atoms[1] == 4) || (atoms[0] == 4 && atoms[1] == 3);
    EXPECT_FALSE(spec.channel(k) == ZMatrixSpec::Channel::kBond && closure);
  }
}

TEST(BuildZMatrix, ReferencesArePlacedEarlierAndDistinct) {
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + static_cast<int>(rng.index(11));
    const ZMatrixSpec spec = build_zmatrix(random_graph(rng, n, trial % 2 == 0));
    std::vector<int> pos(n, -1);
    for (int k = 0; k < n; ++k) pos[spec.entries[k].atom] = k;
    for (int k = 1; k < n; ++k) {
      const ZEntry& e = spec.entries[k];
      std::vector<int> refs{e.parent};
      if (k >= 2) refs.push_back(e.grandparent);
      if (k >= 3) refs.push_back(e.great_grandparent);
      for (std::size_t a = 0; a < refs.size(); ++a) {
        ASSERT_GE(refs[a], 0);
        EXPECT_LT(pos[refs[a]], k);
        for (std::size_t b = 0; b < a; ++b) EXPECT_NE(refs[a], refs[b]);
      }
    }
  }
}

TEST(BuildZMatrix, RootIsLowestIndexHeavyAtom) {
  MolecularGraph g = chain_graph(4);
  g.atoms[0] = testing::hydrogen();
  EXPECT_EQ(build_zmatrix(g).root, 1);
}

TEST(BuildZMatrix, DisconnectedGraphNamesComponents) {
  MolecularGraph g = chain_graph(4);
  g.bonds.erase(g.bonds.begin() + 1);
  try {
    build_zmatrix(g);
    FAIL() << "expected StructuralError";
  } catch (const StructuralError& e) {
    EXPECT_NE(std::string(e.what()).find("{0,1}"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("{2,3}"), std::string::npos);
  }
}

TEST(BuildZMatrix, InvalidBondsRejected) {
  MolecularGraph g = chain_graph(3);
  g.bonds.push_back({2, 3, BondOrder::kSingle});
  EXPECT_THROW(build_zmatrix(g), ValidationError);
  g = chain_graph(3);
  g.bonds.push_back({1, 0, BondOrder::kSingle});
  EXPECT_THROW(build_zmatrix(g), ValidationError);
}

TEST(Compose, AntiPeriplanarChainIsPlanar) {
  const ZMatrixSpec spec = build_zmatrix(chain_graph(4));
  InternalCoords z{VecX::Constant(3, 1.54), VecX::Constant(2, 1.9), VecX::Constant(1, kPi)};
  const Coords x = compose(Vec3(0.3, -1, 2), quat_exp(Vec3(0.4, 0.2, -0.9)), z, spec);
  const Vec3 a = x.row(0).transpose(), b = x.row(1).transpose(), c = x.row(2).transpose(), d = x.row(3).transpose();
  const Vec3 nrm = (b - a).cross(c - a).normalized();
  EXPECT_LT(std::abs((d - a).dot(nrm)), 1e-9);
}

TEST(Compose, TwoAtomsAtBondLength) {
  const ZMatrixSpec spec = build_zmatrix(chain_graph(2));
  InternalCoords z{VecX::Constant(1, 1.5), VecX(0), VecX(0)};
  const Coords x = compose(Vec3::Zero(), UnitQuat::identity(), z, spec);
  EXPECT_NEAR((x.row(0) - x.row(1)).norm(), 1.5, 1e-15);
}

TEST(Compose, MeasuredInternalsMatchInput) {
  Rng rng(22);
  for (int trial = 0; trial < 200; ++trial) {
    const ZMatrixSpec spec = build_zmatrix(random_graph(rng, 3 + static_cast<int>(rng.index(10)), trial % 3 == 0));
    const InternalCoords z = random_internals(rng, spec);
    const Vec3 c(rng.normal(), rng.normal(), rng.normal());
    const Coords x = compose(c, random_rotation(rng), z, spec);
    const InternalCoords back = measure_internals(x, spec);
    EXPECT_LT((back.r - z.r).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((back.theta - z.theta).cwiseAbs().maxCoeff(), 1e-9);
    for (Eigen::Index k = 0; k < z.phi.size(); ++k) EXPECT_LT(std::abs(wrap_angle(back.phi[k] - z.phi[k])), 1e-9);
    EXPECT_LT((x.colwise().mean().transpose() - c).norm(), 1e-12);
  }
}

TEST(Compose, RejectsDomainViolations) {
  const ZMatrixSpec spec = build_zmatrix(chain_graph(4));
  InternalCoords z{VecX::Constant(3, 1.5), VecX::Constant(2, 1.9), VecX::Constant(1, 0.3)};
  InternalCoords bad = z;
  bad.r[1] = -0.1;
  EXPECT_THROW(compose(Vec3::Zero(), UnitQuat::identity(), bad, spec), ValidationError);
  bad = z;
  bad.theta[0] = kPi;
  EXPECT_THROW(compose(Vec3::Zero(), UnitQuat::identity(), bad, spec), ValidationError);
  bad = z;
  bad.phi[0] = std::nan("");
  EXPECT_THROW(compose(Vec3::Zero(), UnitQuat::identity(), bad, spec), ValidationError);
}

TEST(Decompose, RoundTripReproducesConformer) {
  Rng rng(23);
  for (int trial = 0; trial < 300; ++trial) {
    const int n = 1 + static_cast<int>(rng.index(12));
    const ZMatrixSpec spec = build_zmatrix(random_graph(rng, n, trial % 2 == 0));
    Coords x(n, 3);
    if (n >= 3) {
      x = random_conformer(rng, spec);
    } else {
      for (int i = 0; i < n; ++i) x.row(i) << rng.normal(), rng.normal(), rng.normal();
    }
    const DecomposedState s = decompose(x, spec);
    EXPECT_EQ(s.clamped_angles, 0);
    EXPECT_LE(rmsd_no_align(compose(s, spec), x), 1e-6) << "n = " << n;
    EXPECT_LE(rmsd_no_align(compose(s, spec), x), 1e-12) << "n = " << n;
  }
}

TEST(Decompose, TranslationShiftsOnlyCentroid) {
  Rng rng(24);
  const ZMatrixSpec spec = build_zmatrix(random_graph(rng, 8, true));
  const Coords x = random_conformer(rng, spec);
  Coords y = x;
  y.rowwise() += Eigen::RowVector3d(1, 2, 3);
  const DecomposedState a = decompose(x, spec), b = decompose(y, spec);
  EXPECT_LT((b.c - a.c - Vec3(1, 2, 3)).norm(), 1e-12);
  EXPECT_TRUE(same_rotation(a.q, b.q, 1e-14));
  EXPECT_LT((a.z.to_vector() - b.z.to_vector()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Decompose, RotationLeavesInternalsAndComposesOrientation) {
  Rng rng(25);
  for (int trial = 0; trial < 100; ++trial) {
    const ZMatrixSpec spec = build_zmatrix(random_graph(rng, 4 + static_cast<int>(rng.index(8)), trial % 2 == 1));
    const Coords x = random_conformer(rng, spec);
    const UnitQuat r = random_rotation(rng);
    const DecomposedState a = decompose(x, spec), b = decompose(apply_rotation(r, x), spec);
    EXPECT_LT((a.z.r - b.z.r).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_LT((a.z.theta - b.z.theta).cwiseAbs().maxCoeff(), 1e-9);
    for (Eigen::Index k = 0; k < a.z.phi.size(); ++k) EXPECT_LT(std::abs(wrap_angle(a.z.phi[k] - b.z.phi[k])), 1e-9);
    EXPECT_TRUE(same_rotation(b.q, r * a.q, 1e-10));
    EXPECT_LT((b.c - rotate(r, a.c)).norm(), 1e-10);
  }
}

TEST(Decompose, CollinearFrameIsAnError) {
  const ZMatrixSpec spec = build_zmatrix(chain_graph(4));
  Coords x(4, 3);
  x << 0, 0, 0, 1.5, 0, 0, 3.0, 0, 0, 3.5, 1, 0;
  EXPECT_THROW(decompose(x, spec), NumericalError);
}

TEST(Decompose, NearLinearAngleIsClampedAndFlagged) {
  const ZMatrixSpec spec = build_zmatrix(chain_graph(4));
  Coords x(4, 3);
  x << 0, 0, 0, 1.5, 0, 0, 2.0, 1.2, 0, 2.5, 2.4, 1e-9;
  const DecomposedState s = decompose(x, spec);
  EXPECT_EQ(s.clamped_angles, 1);
  EXPECT_LE(s.z.theta[1], kPi - kAngleClampBand);
}

TEST(WrapAngle, PrincipalValue) {
  EXPECT_EQ(wrap_angle(0.0), 0.0);
  EXPECT_NEAR(wrap_angle(1.5 * kPi), -0.5 * kPi, 1e-15);
  EXPECT_NEAR(wrap_angle(kPi), kPi, 1e-15);
  Rng rng(26);
  for (int trial = 0; trial < 10000; ++trial) {
    const double x = rng.uniform(-100, 100);
    const double w = wrap_angle(x);
    EXPECT_LE(std::abs(w), kPi);
    EXPECT_NEAR(std::sin(w), std::sin(x), 1e-12);
    EXPECT_NEAR(std::cos(w), std::cos(x), 1e-12);
    EXPECT_NEAR(wrap_angle(x + 2 * kPi * 3), w, 1e-12 * std::max(1.0, std::abs(x)) * 10);
  }
}

TEST(WilsonB, TwoAtomBondRow) {
  const ZMatrixSpec spec = build_zmatrix(chain_graph(2));
  Coords x(2, 3);
  x << 0, 0, 0, 1.5, 0, 0;
  const MatX b = wilson_b_matrix(x, spec);
  ASSERT_EQ(b.rows(), 1);
  // Entry (atom 1, parent 0): dr/dx1 = +x, dr/dx0 = -x.
  Eigen::RowVectorXd want(6);
  want << -1, 0, 0, 1, 0, 0;
  EXPECT_LT((b.row(0) - want).cwiseAbs().maxCoeff(), 1e-15);
  // Compose Jacobian splits the stretch symmetrically about the fixed centroid.
  const MatX j = jacobian(x, spec);
  Eigen::VectorXd jwant(6);
  jwant << -0.5, 0, 0, 0.5, 0, 0;
  EXPECT_LT((j.col(0) - jwant).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(WilsonB, AngleRowsPerpendicularToBondArms) {
  const ZMatrixSpec spec = build_zmatrix(chain_graph(3));
  Coords x(3, 3);
  x << 0, 1.2, 0, 0, 0, 0, 1.4, 0, 0;  // right angle at atom 1
  const MatX b = wilson_b_matrix(x, spec);
  const int k = spec.theta_offset();
  const auto atoms = spec.atoms_of(k);
  const Vec3 vertex = x.row(atoms[1]).transpose();
  for (int end : {atoms[0], atoms[2]}) {
    const Vec3 arm = x.row(end).transpose() - vertex;
    const Vec3 g = b.block<1, 3>(k, 3 * end).transpose();
    EXPECT_LT(std::abs(g.dot(arm)), 1e-12);
    EXPECT_GT(g.norm(), 0.1);
  }
}

TEST(WilsonB, MatchesFiniteDifferencesOfMeasurementMap) {
  Rng rng(27);
  for (int trial = 0; trial < 100; ++trial) {
    const ZMatrixSpec spec = build_zmatrix(random_graph(rng, 4 + static_cast<int>(rng.index(9)), trial % 2 == 0));
    const Coords x = random_conformer(rng, spec);
    const MatX b = wilson_b_matrix(x, spec);
    EXPECT_LE(max_column_relative_error(b, measurement_fd(x, spec, 1e-5), true), 1e-5) << "trial " << trial;
  }
}

TEST(Jacobian, MatchesFiniteDifferencesOfCompose) {
  Rng rng(28);
  for (int trial = 0; trial < 100; ++trial) {
    const ZMatrixSpec spec = build_zmatrix(random_graph(rng, 3 + static_cast<int>(rng.index(10)), trial % 2 == 0));
    const Coords x = random_conformer(rng, spec);
    const DecomposedState s = decompose(x, spec);
    const MatX j = jacobian(x, spec);
    ASSERT_EQ(j.rows(), 3 * spec.num_atoms());
    ASSERT_EQ(j.cols(), spec.m());
    EXPECT_LE(max_column_relative_error(j, compose_fd(s, spec, 1e-5), false), 1e-5) << "trial " << trial;
    // Internal velocities map back through the measurement map exactly.
    const MatX bj = wilson_b_matrix(x, spec) * j;
    EXPECT_LT((bj - MatX::Identity(spec.m(), spec.m())).cwiseAbs().maxCoeff(), 1e-9);
  }
}

TEST(Jacobian, ChainRuleIsSecondOrder) {
  Rng rng(29);
  for (int trial = 0; trial < 20; ++trial) {
    const ZMatrixSpec spec = build_zmatrix(random_graph(rng, 6 + static_cast<int>(rng.index(6)), trial % 2 == 0));
    const Coords x = random_conformer(rng, spec);
    const DecomposedState s = decompose(x, spec);
    const MatX j = jacobian(x, spec);
    VecX dir(spec.m());
    for (int k = 0; k < spec.m(); ++k) dir[k] = rng.normal();
    dir.normalize();
    auto residual = [&](double eps) {
      const VecX zp = s.z.to_vector() + eps * dir;
      const Coords xp = compose(s.c, s.q, InternalCoords::from_vector(zp, spec), spec);
      return (flatten(xp) - flatten(x) - j * (eps * dir)).norm();
    };
    const double e1 = residual(1e-3), e2 = residual(5e-4);
    EXPECT_GE(std::log2(e1 / e2), 1.9) << "trial " << trial;
  }
}

TEST(Jacobian, SingularAngleIsAnError) {
  const ZMatrixSpec spec = build_zmatrix(chain_graph(4));
  Coords x(4, 3);
  x << 0, 0, 0, 1.5, 0, 0, 2.0, 1.2, 0, 2.5, 2.4, 0;
  EXPECT_THROW(jacobian(x, spec), NumericalError);
}

}  // namespace
}  // namespace goflow
