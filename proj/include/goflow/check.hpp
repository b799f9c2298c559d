#pragma once

// Oracle suites run by `goflow check` and the acceptance tests. Each check
// reports its worst observed value against a tolerance.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <string>
#include <vector>

#include "json.hpp"

#include "goflow/dataset.hpp"
#include "goflow/entropic_ot.hpp"
#include "goflow/molecule.hpp"
#include "goflow/random.hpp"
#include "goflow/so3.hpp"
#include "goflow/toy_data.hpp"
#include "goflow/zmatrix.hpp"

namespace goflow {

struct CheckResult {
  std::string suite;
  std::string name;
  bool passed = false;
  double value = 0.0;      // worst observed
  double tolerance = 0.0;  // bound on value (or floor, see `at_least`)
  bool at_least = false;   // true when value must be >= tolerance
  std::string detail;
  double seconds = 0.0;
};

namespace detail {

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

inline CheckResult bound(std::string suite, std::string name, double value, double tol, std::string detail = "") {
  CheckResult r;
  r.suite = std::move(suite);
  r.name = std::move(name);
  r.value = value;
  r.tolerance = tol;
  r.passed = std::isfinite(value) && value <= tol;
  r.detail = std::move(detail);
  return r;
}

inline CheckResult floor(std::string suite, std::string name, double value, double tol, std::string detail = "") {
  CheckResult r = bound(std::move(suite), std::move(name), value, tol, std::move(detail));
  r.at_least = true;
  r.passed = std::isfinite(value) && value >= tol;
  return r;
}

inline Eigen::Vector4d aligned_coeffs(const UnitQuat& a, const UnitQuat& ref) {
  return dot(a, ref) < 0 ? Eigen::Vector4d(-a.coeffs()) : a.coeffs();
}

/// Random connected heavy-atom graph; with_ring adds one extra bond closing a cycle.
inline MolecularGraph check_graph(Rng& rng, int n, bool with_ring) {
  MolecularGraph g;
  g.atoms.resize(n);
  for (int i = 1; i < n; ++i) g.bonds.push_back({static_cast<int>(rng.index(i)), i, BondOrder::kSingle});
  if (with_ring && n >= 4) {
    for (int tries = 0; tries < 200; ++tries) {
      const int a = static_cast<int>(rng.index(n)), b = static_cast<int>(rng.index(n));
      if (a == b) continue;
      bool bonded = false;
      for (const Bond& bd : g.bonds) bonded = bonded || (bd.i == a && bd.j == b) || (bd.i == b && bd.j == a);
      if (bonded) continue;
      g.bonds.push_back({a, b, BondOrder::kSingle});
      break;
    }
  }
  return g;
}

inline InternalCoords check_internals(Rng& rng, const ZMatrixSpec& spec) {
  InternalCoords z{VecX(spec.n_r()), VecX(spec.n_theta()), VecX(spec.n_phi())};
  for (Eigen::Index k = 0; k < z.r.size(); ++k) z.r[k] = rng.uniform(1.0, 1.7);
  for (Eigen::Index k = 0; k < z.theta.size(); ++k) z.theta[k] = rng.uniform(0.6, 2.7);
  for (Eigen::Index k = 0; k < z.phi.size(); ++k) z.phi[k] = rng.uniform(-std::numbers::pi, std::numbers::pi);
  return z;
}

inline double aligned_free_rmsd(const Coords& a, const Coords& b) {
  return std::sqrt((a - b).rowwise().squaredNorm().mean());
}

inline double brute_force_assignment(const MatX& c) {
  std::vector<int> perm(c.rows());
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double s = 0.0;
    for (std::size_t i = 0; i < perm.size(); ++i) s += c(static_cast<Eigen::Index>(i), perm[i]);
    best = std::min(best, s);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best / static_cast<double>(c.rows());
}

/// Squared correlation of log(error) against iteration.
inline double log_linear_r2(const std::vector<double>& err) {
  const int n = static_cast<int>(err.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0, syy = 0;
  for (int k = 0; k < n; ++k) {
    const double x = k + 1, y = std::log(err[k]);
    sx += x, sy += y, sxx += x * x, sxy += x * y, syy += y * y;
  }
  const double den = (n * sxx - sx * sx) * (n * syy - sy * sy);
  if (!(den > 0)) return 0.0;
  const double r = (n * sxy - sx * sy) / std::sqrt(den);
  return r * r;
}

}  // namespace detail

/// SLERP speed, double cover, angular velocity and log/exp round trip.
inline std::vector<CheckResult> check_geometry(std::uint64_t seed = 0) {
  Rng rng = Rng(seed).stream(1);
  std::vector<CheckResult> out;
  const char* suite = "geometry";

  detail::Stopwatch sw;
  double speed = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const UnitQuat q0 = random_rotation(rng), q1 = random_rotation(rng);
    const double total = geodesic_distance(q0, q1);
    for (int k = 1; k <= 9; ++k) {
      const double t = 0.1 * k;
      speed = std::max(speed, std::abs(geodesic_distance(q0, slerp(q0, q1, t)) - t * total));
    }
  }
  out.push_back(detail::bound(suite, "slerp constant speed", speed, 1e-9, "max |d(q0, q_t) - t d(q0, q1)|"));
  out.back().seconds = sw.seconds();

  sw = {};
  double cover = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const UnitQuat q0 = random_rotation(rng), q1 = random_rotation(rng);
    const double t = rng.uniform();
    const Eigen::Matrix3d a = slerp(q0, q1, t).to_matrix();
    cover = std::max(cover, (a - slerp(q0, -q1, t).to_matrix()).cwiseAbs().maxCoeff());
    cover = std::max(cover, (a - slerp(-q0, q1, t).to_matrix()).cwiseAbs().maxCoeff());
    cover = std::max(cover, (q0.to_matrix() - (-q0).to_matrix()).cwiseAbs().maxCoeff());
  }
  out.push_back(detail::bound(suite, "double cover", cover, 1e-12, "max rotation-matrix difference for q vs -q"));
  out.back().seconds = sw.seconds();

  sw = {};
  double angvel = 0.0;
  const double h = 1e-6;
  for (int trial = 0; trial < 200; ++trial) {
    const UnitQuat q0 = random_rotation(rng), q1 = random_rotation(rng);
    const RotVec w = relative_angular_velocity(q0, q1);
    const double t = rng.uniform(0.05, 0.95);
    const Eigen::Vector4d fd = (slerp(q0, q1, t + h).coeffs() - slerp(q0, q1, t - h).coeffs()) / (2 * h);
    const Eigen::Vector4d pred = (UnitQuat{0.0, 0.5 * w.x(), 0.5 * w.y(), 0.5 * w.z()} * slerp(q0, q1, t)).coeffs();
    angvel = std::max(angvel, (fd - pred).norm() / std::max(pred.norm(), 1e-3));
  }
  out.push_back(detail::bound(suite, "angular velocity vs finite differences", angvel, 1e-5, "relative error"));
  out.back().seconds = sw.seconds();

  sw = {};
  double roundtrip = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const UnitQuat q = random_rotation(rng);
    roundtrip = std::max(roundtrip, (detail::aligned_coeffs(quat_exp(quat_log(q)), q) - q.coeffs()).norm());
    RotVec v(rng.normal(), rng.normal(), rng.normal());
    v *= rng.uniform(0.0, 3.1) / v.norm();
    roundtrip = std::max(roundtrip, (quat_log(quat_exp(v)) - v).norm());
  }
  out.push_back(detail::bound(suite, "quat log/exp round trip", roundtrip, 1e-10));
  out.back().seconds = sw.seconds();
  return out;
}

/// Columns of J(z) against central differences of compose over random graphs.
inline std::vector<CheckResult> check_jacobian(std::uint64_t seed = 0, int geometries = 100) {
  Rng rng = Rng(seed).stream(2);
  detail::Stopwatch sw;
  double worst = 0.0;
  int rings = 0, tested = 0;
  const double h = 1e-5;
  while (tested < geometries) {
    const bool ring = tested % 2 == 0;
    const int n = 3 + static_cast<int>(rng.index(10));  // 3..12 atoms
    const MolecularGraph g = detail::check_graph(rng, n, ring);
    const ZMatrixSpec spec = build_zmatrix(g);
    const InternalCoords z = detail::check_internals(rng, spec);
    const Vec3 c(rng.normal(), rng.normal(), rng.normal());
    const UnitQuat q = random_rotation(rng);
    const Coords x = compose(c, q, z, spec);
    MatX j;
    try {
      j = jacobian(x, spec);
    } catch (const NumericalError&) {
      continue;  // singular frame; draw again
    }
    const VecX z0 = z.to_vector();
    for (int k = 0; k < spec.m(); ++k) {
      VecX zp = z0, zm = z0;
      zp[k] += h;
      zm[k] -= h;
      const Coords xp = compose(c, q, InternalCoords::from_vector(zp, spec), spec);
      const Coords xm = compose(c, q, InternalCoords::from_vector(zm, spec), spec);
      VecX fd(3 * n);
      for (int a = 0; a < n; ++a) fd.segment<3>(3 * a) = ((xp.row(a) - xm.row(a)) / (2 * h)).transpose();
      worst = std::max(worst, (j.col(k) - fd).norm() / std::max(fd.norm(), 1e-8));
    }
    rings += g.bonds.size() >= static_cast<std::size_t>(n);
    ++tested;
  }
  std::vector<CheckResult> out;
  out.push_back(detail::bound("jacobian", "J(z) columns vs central differences", worst, 1e-5,
                              std::to_string(tested) + " geometries, " + std::to_string(rings) + " with a ring"));
  out.back().passed = out.back().passed && rings > 0;
  out.back().seconds = sw.seconds();
  return out;
}

/// compose(decompose(X)) against X for toy conformers and any supplied molecules.
inline std::vector<CheckResult> check_roundtrip(std::uint64_t seed = 0, const Dataset* real = nullptr,
                                                int toy_conformers = 1000) {
  Rng rng = Rng(seed).stream(3);
  std::vector<CheckResult> out;
  detail::Stopwatch sw;
  double worst = 0.0;
  int done = 0;
  const std::vector<ToyDatasetConfig> families = [&] {
    std::vector<ToyDatasetConfig> f;
    for (int len : {4, 5, 6, 8}) {
      ToyDatasetConfig c;
      c.chain_length = len;
      f.push_back(c);
    }
    ToyDatasetConfig r;
    r.family = ToyFamily::kFixedRing;
    r.chain_length = 3;
    f.push_back(r);
    return f;
  }();
  const int per = (toy_conformers + static_cast<int>(families.size()) - 1) / static_cast<int>(families.size());
  for (std::size_t f = 0; f < families.size() && done < toy_conformers; ++f) {
    ToyDatasetConfig cfg = families[f];
    cfg.conformers_per_molecule = std::min(per, toy_conformers - done);
    cfg.torsion_modes = {{0.0, 1.0, 2.0}};  // broad torsions
    cfg.seed = rng.next_u64();
    const Dataset d = generate_toy_dataset(cfg);
    const ZMatrixSpec spec = build_zmatrix(d[0].graph);
    for (const Coords& x0 : d[0].conformers) {
      Coords x = x0;
      x.rowwise() += Vec3(rng.normal(0, 3), rng.normal(0, 3), rng.normal(0, 3)).transpose();
      worst = std::max(worst, detail::aligned_free_rmsd(compose(decompose(x, spec), spec), x));
      ++done;
    }
  }
  out.push_back(detail::bound("roundtrip", "toy conformers", worst, 1e-6, std::to_string(done) + " conformers"));
  out.back().seconds = sw.seconds();

  sw = {};
  if (real) {
    double w = 0.0;
    int mols = 0, confs = 0;
    for (const MoleculeRecord& rec : *real) {
      const ZMatrixSpec spec = build_zmatrix(rec.graph);
      for (const Coords& x : rec.conformers) {
        w = std::max(w, detail::aligned_free_rmsd(compose(decompose(x, spec), spec), x));
        ++confs;
      }
      mols += !rec.conformers.empty();
    }
    out.push_back(detail::bound("roundtrip", "real molecules", w, 1e-6,
                                std::to_string(mols) + " molecules, " + std::to_string(confs) + " conformers"));
    if (mols < 10) {
      out.back().passed = false;
      out.back().detail += " (need at least 10 molecules)";
    }
    out.back().seconds = sw.seconds();
  }
  return out;
}

/// Marginal accuracy at the training setting, small-eps optimality and linear convergence.
inline std::vector<CheckResult> check_sinkhorn(std::uint64_t seed = 0) {
  Rng rng = Rng(seed).stream(4);
  std::vector<CheckResult> out;
  auto random_cost = [&](int n, int m) {
    CostMatrix c{MatX(n, m), {}};
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < m; ++j) c.values(i, j) = rng.uniform();
    return c;
  };

  detail::Stopwatch sw;
  double marg = 0.0;
  int max_iters = 0;
  for (int trial = 0; trial < 20; ++trial) {
    VecX a(32), b(32);
    for (int i = 0; i < 32; ++i) a[i] = rng.uniform(0.5, 1.5), b[i] = rng.uniform(0.5, 1.5);
    a /= a.sum();
    b /= b.sum();
    const TransportPlan p = sinkhorn(random_cost(32, 32), a, b, 0.1, 100, 1e-6);
    marg = std::max(marg, (p.plan.rowwise().sum() - a).lpNorm<1>() + (p.plan.colwise().sum().transpose() - b).lpNorm<1>());
    max_iters = std::max(max_iters, p.iterations_used);
  }
  out.push_back(detail::bound("sinkhorn", "marginal L1 error, 32x32, eps 0.1, <= 100 iterations", marg, 1e-6,
                              "max iterations used " + std::to_string(max_iters)));
  out.back().seconds = sw.seconds();

  sw = {};
  double ratio = 0.0;
  for (int n = 2; n <= 6; ++n)
    for (int trial = 0; trial < 5; ++trial) {
      const CostMatrix c = random_cost(n, n);
      const TransportPlan p = sinkhorn_uniform(c, 1e-3, 20000, 1e-9);
      const double opt = detail::brute_force_assignment(c.values);
      ratio = std::max(ratio, transport_cost(c, p) / std::max(opt, 1e-12));
    }
  out.push_back(detail::bound("sinkhorn", "eps 1e-3 cost / permutation optimum, n <= 6", ratio, 1.05));
  out.back().seconds = sw.seconds();

  sw = {};
  double r2 = 1.0;
  for (int trial = 0; trial < 10; ++trial) {
    const TransportPlan p = sinkhorn_uniform(random_cost(32, 32), 0.1, 100, 1e-13);
    std::vector<double> err;
    for (double e : p.error_history)
      if (e > 1e-13) err.push_back(e);
    if (err.size() >= 3) r2 = std::min(r2, detail::log_linear_r2(err));
  }
  out.push_back(detail::floor("sinkhorn", "exponential convergence fit R^2", r2, 0.95));
  out.back().seconds = sw.seconds();
  return out;
}

inline std::vector<CheckResult> run_checks(std::uint64_t seed = 0, const Dataset* real = nullptr) {
  std::vector<CheckResult> all;
  for (auto&& part : {check_geometry(seed), check_jacobian(seed), check_roundtrip(seed, real), check_sinkhorn(seed)})
    all.insert(all.end(), part.begin(), part.end());
  return all;
}

inline std::string format_checks(const std::vector<CheckResult>& results) {
  std::string out;
  char buf[512];
  for (const CheckResult& r : results) {
    std::snprintf(buf, sizeof buf, "%-4s  %-10s %-55s %11.3e %s %-9.3g %6.2fs  %s\n", r.passed ? "PASS" : "FAIL",
                  r.suite.c_str(), r.name.c_str(), r.value, r.at_least ? ">=" : "<=", r.tolerance, r.seconds,
                  r.detail.c_str());
    out += buf;
  }
  return out;
}

inline nlohmann::json checks_to_json(const std::vector<CheckResult>& results) {
  nlohmann::json j = nlohmann::json::array();
  for (const CheckResult& r : results)
    j.push_back({{"suite", r.suite}, {"name", r.name}, {"passed", r.passed}, {"value", r.value},
                 {"tolerance", r.tolerance}, {"at_least", r.at_least}, {"detail", r.detail}, {"seconds", r.seconds}});
  return j;
}

}  // namespace goflow
