#pragma once

// Integration of the decomposed velocity field from the prior (t = 0) to the
// data (t = 1). Translation and internal coordinates are integrated in their
// flat charts; rotations with Runge-Kutta-Munthe-Kaas steps through the
// exponential map, q <- exp(theta) q, so |q| = 1 is kept without renormalization.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "goflow/errors.hpp"
#include "goflow/flow_paths.hpp"
#include "goflow/random.hpp"
#include "goflow/so3.hpp"
#include "goflow/velocity_net.hpp"
#include "goflow/zmatrix.hpp"

namespace goflow {

enum class OdeMethod { kEuler, kRk4, kDopri };

inline OdeMethod parse_ode_method(const std::string& s) {
  if (s == "euler") return OdeMethod::kEuler;
  if (s == "rk4") return OdeMethod::kRk4;
  if (s == "dopri") return OdeMethod::kDopri;
  throw ValidationError("unknown integration method '" + s + "' (expected euler, rk4 or dopri)");
}

inline const char* method_name(OdeMethod m) {
  switch (m) {
    case OdeMethod::kEuler: return "euler";
    case OdeMethod::kRk4: return "rk4";
    default: return "dopri";
  }
}

struct SamplerConfig {
  OdeMethod method = OdeMethod::kEuler;
  int steps = 50;
  double rtol = 1e-5;
  double atol = 1e-7;
  double min_step = 1e-6;
  std::uint64_t seed = 0;
  bool cartesian = false;  // integrate v_total on coordinates, re-decomposing every step

  void validate() const {
    if (steps < 1) throw ValidationError("steps must be at least 1");
    if (!(rtol > 0) || !(atol > 0)) throw ValidationError("integration tolerances must be positive");
    if (!(min_step > 0)) throw ValidationError("min_step must be positive");
    if (cartesian && method == OdeMethod::kDopri)
      throw ValidationError("the Cartesian integration mode supports euler and rk4 only");
  }
};

/// Velocity of a batch of states at a common time.
using BatchField = std::function<std::vector<FieldOutput>(const std::vector<DecomposedState>& states, double t)>;

struct Trajectory {
  std::vector<double> times;
  std::vector<DecomposedState> states;
  int rejected_steps = 0;
};

inline constexpr double kSamplerMinBond = 1e-3;

namespace detail {

/// Increment of one item in the flat chart (c, rotation algebra, z).
struct Increment {
  Vec3 dc = Vec3::Zero();
  RotVec dtheta = RotVec::Zero();
  VecX dz;

  static Increment zero(const DecomposedState& s) { return {Vec3::Zero(), RotVec::Zero(), VecX::Zero(s.z.size())}; }
  void axpy(double a, const Increment& o) {
    dc += a * o.dc;
    dtheta += a * o.dtheta;
    dz += a * o.dz;
  }
};

/// Keeps internals inside their domains: bonds floored, angles clamped, torsions wrapped.
inline void project_internals(InternalCoords& z) {
  for (Eigen::Index k = 0; k < z.r.size(); ++k) z.r[k] = std::max(z.r[k], kSamplerMinBond);
  for (Eigen::Index k = 0; k < z.theta.size(); ++k)
    z.theta[k] = std::clamp(z.theta[k], kAngleClampBand, std::numbers::pi - kAngleClampBand);
  for (Eigen::Index k = 0; k < z.phi.size(); ++k)
    if (!(z.phi[k] > -std::numbers::pi && z.phi[k] <= std::numbers::pi)) z.phi[k] = wrap_angle(z.phi[k]);
}

inline DecomposedState apply_increment(const DecomposedState& s, const Increment& inc) {
  DecomposedState out = s;
  out.c += inc.dc;
  if (!inc.dtheta.isZero(0.0)) out.q = quat_exp(inc.dtheta) * s.q;
  VecX z = s.z.to_vector() + inc.dz;
  const Eigen::Index nr = s.z.r.size(), nt = s.z.theta.size();
  out.z.r = z.head(nr);
  out.z.theta = z.segment(nr, nt);
  out.z.phi = z.tail(s.z.phi.size());
  project_internals(out.z);
  return out;
}

/// Inverse of the right-trivialized differential of exp on so(3).
inline RotVec dexp_inv(const RotVec& theta, const RotVec& omega) {
  const double a = theta.norm();
  if (a == 0.0) return omega;
  const double coef = a < 1e-4 ? 1.0 / 12.0 + a * a / 720.0 : (1.0 - 0.5 * a / std::tan(0.5 * a)) / (a * a);
  return omega - 0.5 * theta.cross(omega) + coef * theta.cross(theta.cross(omega));
}

inline Increment slope(const FieldOutput& f, const Increment& theta_so_far) {
  return {f.v_trans, dexp_inv(theta_so_far.dtheta, f.omega_hat), f.v_conf};
}

inline void check_state(const DecomposedState& s, int step, double t) {
  if (!s.c.allFinite() || !s.q.coeffs().allFinite() || !s.z.to_vector().allFinite())
    throw NumericalError("non-finite state at step " + std::to_string(step) + " (t = " + std::to_string(t) + ")");
}

inline void check_field(const std::vector<FieldOutput>& f, const std::vector<DecomposedState>& s) {
  if (f.size() != s.size()) throw StructuralError("field returned " + std::to_string(f.size()) + " outputs for " +
                                                  std::to_string(s.size()) + " states");
  for (std::size_t b = 0; b < f.size(); ++b)
    if (f[b].v_conf.size() != s[b].z.size()) throw StructuralError("field v_conf size does not match the state");
}

/// Butcher tableau of an explicit Runge-Kutta method.
struct Tableau {
  std::vector<double> c;
  std::vector<std::vector<double>> a;
  std::vector<double> b;
  std::vector<double> b_err;  // embedded lower-order weights minus b (adaptive only)
};

inline const Tableau& rk4_tableau() {
  static const Tableau t{{0.0, 0.5, 0.5, 1.0}, {{}, {0.5}, {0.0, 0.5}, {0.0, 0.0, 1.0}},
                         {1.0 / 6, 1.0 / 3, 1.0 / 3, 1.0 / 6}, {}};
  return t;
}

inline const Tableau& euler_tableau() {
  static const Tableau t{{0.0}, {{}}, {1.0}, {}};
  return t;
}

inline const Tableau& dopri_tableau() {
  static const Tableau t = [] {
    Tableau d;
    d.c = {0.0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1.0, 1.0};
    d.a = {{},
           {1.0 / 5},
           {3.0 / 40, 9.0 / 40},
           {44.0 / 45, -56.0 / 15, 32.0 / 9},
           {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729},
           {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656},
           {35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84}};
    d.b = {35.0 / 384, 0.0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84, 0.0};
    const std::array<double, 7> b4{5179.0 / 57600, 0.0, 7571.0 / 16695, 393.0 / 640, -92097.0 / 339200,
                                   187.0 / 2100, 1.0 / 40};
    for (int i = 0; i < 7; ++i) d.b_err.push_back(b4[i] - d.b[i]);
    return d;
  }();
  return t;
}

/// One explicit RKMK step for a batch. Returns the increments (for error
/// control when the tableau has an embedded pair).
inline std::vector<DecomposedState> rk_step(const BatchField& field, const std::vector<DecomposedState>& s, double t,
                                            double h, const Tableau& tab, std::vector<Increment>* err = nullptr) {
  const std::size_t nb = s.size();
  const std::size_t ns = tab.c.size();
  std::vector<std::vector<Increment>> k(ns, std::vector<Increment>(nb));
  for (std::size_t i = 0; i < ns; ++i) {
    std::vector<DecomposedState> stage(nb);
    std::vector<Increment> acc(nb);
    for (std::size_t b = 0; b < nb; ++b) {
      acc[b] = Increment::zero(s[b]);
      for (std::size_t j = 0; j < i; ++j)
        if (tab.a[i][j] != 0.0) acc[b].axpy(h * tab.a[i][j], k[j][b]);
      stage[b] = i == 0 ? s[b] : apply_increment(s[b], acc[b]);
    }
    const std::vector<FieldOutput> f = field(stage, t + tab.c[i] * h);
    check_field(f, stage);
    for (std::size_t b = 0; b < nb; ++b) k[i][b] = slope(f[b], acc[b]);
  }
  std::vector<DecomposedState> out(nb);
  if (err) err->assign(nb, Increment{});
  for (std::size_t b = 0; b < nb; ++b) {
    Increment total = Increment::zero(s[b]);
    for (std::size_t i = 0; i < ns; ++i)
      if (tab.b[i] != 0.0) total.axpy(h * tab.b[i], k[i][b]);
    out[b] = apply_increment(s[b], total);
    if (err) {
      Increment e = Increment::zero(s[b]);
      for (std::size_t i = 0; i < ns; ++i)
        if (tab.b_err[i] != 0.0) e.axpy(h * tab.b_err[i], k[i][b]);
      (*err)[b] = e;
    }
  }
  return out;
}

inline double error_norm(const Increment& e, const DecomposedState& y0, const DecomposedState& y1, double rtol,
                         double atol) {
  double acc = 0.0;
  int n = 0;
  auto add = [&](double err, double a, double b) {
    const double sc = atol + rtol * std::max(std::abs(a), std::abs(b));
    acc += (err / sc) * (err / sc);
    ++n;
  };
  for (int d = 0; d < 3; ++d) add(e.dc[d], y0.c[d], y1.c[d]);
  for (int d = 0; d < 3; ++d) add(e.dtheta[d], 1.0, 1.0);
  const VecX z0 = y0.z.to_vector(), z1 = y1.z.to_vector();
  for (Eigen::Index k = 0; k < e.dz.size(); ++k) add(e.dz[k], z0[k], z1[k]);
  return std::sqrt(acc / n);
}

inline Trajectory integrate_adaptive(const BatchField& field, const DecomposedState& s0, const SamplerConfig& cfg) {
  const Tableau& tab = dopri_tableau();
  Trajectory tr;
  tr.times.push_back(0.0);
  tr.states.push_back(s0);
  double t = 0.0, h = std::min(1.0, 1.0 / cfg.steps);
  int step = 0;
  while (t < 1.0) {
    h = std::min(h, 1.0 - t);
    std::vector<Increment> err;
    const std::vector<DecomposedState> next = rk_step(field, {tr.states.back()}, t, h, tab, &err);
    const double en = error_norm(err[0], tr.states.back(), next[0], cfg.rtol, cfg.atol);
    if (!std::isfinite(en)) throw NumericalError("non-finite error estimate at step " + std::to_string(step));
    if (en <= 1.0) {
      t = (1.0 - t - h) < 1e-14 ? 1.0 : t + h;
      check_state(next[0], step, t);
      tr.times.push_back(t);
      tr.states.push_back(next[0]);
      ++step;
    } else {
      ++tr.rejected_steps;
      if (h <= cfg.min_step)
        {
        std::ostringstream msg;
        msg << "adaptive integration cannot meet rtol " << cfg.rtol << " / atol " << cfg.atol
            << " at the minimum step " << cfg.min_step << " (t = " << t << ")";
        throw ConvergenceError(msg.str());
      }
    }
    const double factor = en == 0.0 ? 5.0 : std::clamp(0.9 * std::pow(en, -0.2), 0.2, 5.0);
    h = std::max(h * factor, cfg.min_step);
  }
  return tr;
}

}  // namespace detail

/// Integrates every state of the batch from t = 0 to t = 1 in the decomposed chart.
/// Fixed-step trajectories hold steps + 1 states; adaptive ones every accepted step.
inline std::vector<Trajectory> integrate_batch(const BatchField& field, const std::vector<DecomposedState>& start,
                                               const SamplerConfig& cfg) {
  cfg.validate();
  if (cfg.cartesian) throw ValidationError("use integrate_cartesian for the Cartesian mode");
  std::vector<Trajectory> out(start.size());
  if (start.empty()) return out;
  if (cfg.method == OdeMethod::kDopri) {
    for (std::size_t b = 0; b < start.size(); ++b) {
      out[b] = detail::integrate_adaptive(field, start[b], cfg);
    }
    return out;
  }
  const detail::Tableau& tab = cfg.method == OdeMethod::kEuler ? detail::euler_tableau() : detail::rk4_tableau();
  const double h = 1.0 / cfg.steps;
  std::vector<DecomposedState> s = start;
  for (std::size_t b = 0; b < s.size(); ++b) {
    detail::project_internals(s[b].z);
    out[b].times.push_back(0.0);
    out[b].states.push_back(s[b]);
  }
  for (int step = 0; step < cfg.steps; ++step) {
    const double t = step * h;
    s = detail::rk_step(field, s, t, h, tab);
    const double t1 = step + 1 == cfg.steps ? 1.0 : (step + 1) * h;
    for (std::size_t b = 0; b < s.size(); ++b) {
      detail::check_state(s[b], step, t1);
      out[b].times.push_back(t1);
      out[b].states.push_back(s[b]);
    }
  }
  return out;
}

inline Trajectory integrate(const BatchField& field, const DecomposedState& start, const SamplerConfig& cfg) {
  return integrate_batch(field, {start}, cfg).front();
}

/// All-Cartesian alternative: integrates X' = v_total(X, t) with the composed
/// field and re-decomposes X at every stage evaluation.
inline Trajectory integrate_cartesian(const BatchField& field, const ZMatrixSpec& zspec, const DecomposedState& start,
                                      const SamplerConfig& cfg) {
  cfg.validate();
  if (cfg.method == OdeMethod::kDopri) throw ValidationError("the Cartesian integration mode supports euler and rk4 only");
  auto velocity = [&](const Coords& x, double t) {
    const DecomposedState s = decompose(x, zspec);
    const FieldOutput f = field({s}, t).front();
    return compose_cartesian_velocity(f.v_trans, f.omega_hat, f.v_conf, x, s.c, jacobian(x, zspec));
  };
  Trajectory tr;
  Coords x = compose(start, zspec);
  tr.times.push_back(0.0);
  tr.states.push_back(start);
  const double h = 1.0 / cfg.steps;
  for (int step = 0; step < cfg.steps; ++step) {
    const double t = step * h;
    if (cfg.method == OdeMethod::kEuler) {
      x += h * velocity(x, t);
    } else {
      const Coords k1 = velocity(x, t);
      const Coords k2 = velocity(x + 0.5 * h * k1, t + 0.5 * h);
      const Coords k3 = velocity(x + 0.5 * h * k2, t + 0.5 * h);
      const Coords k4 = velocity(x + h * k3, t + h);
      x += h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4);
    }
    if (!x.allFinite()) throw NumericalError("non-finite coordinates at step " + std::to_string(step));
    tr.times.push_back(step + 1 == cfg.steps ? 1.0 : (step + 1) * h);
    tr.states.push_back(decompose(x, zspec));
  }
  return tr;
}

/// Network field for one molecule, evaluated in chunks.
inline BatchField network_field(const NetParams& params, const MoleculeContext& mol, std::size_t chunk = 256) {
  return [&params, &mol, chunk](const std::vector<DecomposedState>& states, double t) {
    std::vector<FieldOutput> out;
    out.reserve(states.size());
    for (std::size_t lo = 0; lo < states.size(); lo += chunk) {
      const std::size_t hi = std::min(states.size(), lo + chunk);
      std::vector<const MoleculeContext*> mols(hi - lo, &mol);
      std::vector<const DecomposedState*> ptrs;
      for (std::size_t b = lo; b < hi; ++b) ptrs.push_back(&states[b]);
      const auto part = evaluate_batch(params, mols, ptrs, VecX::Constant(static_cast<Eigen::Index>(hi - lo), t));
      out.insert(out.end(), part.begin(), part.end());
    }
    return out;
  };
}

struct SampleSet {
  std::vector<Coords> conformers;
  std::vector<DecomposedState> states;  // final decomposed states
};

/// K prior draws from Rng(seed) integrated to t = 1 and composed to coordinates.
inline SampleSet sample_conformers(const NetParams& params, const MoleculeContext& mol, int k, const SamplerConfig& cfg,
                                   const PriorSpec& prior = {}) {
  cfg.validate();
  if (k < 0) throw ValidationError("number of samples must be nonnegative");
  SampleSet out;
  if (k == 0) return out;
  Rng rng(cfg.seed);
  std::vector<DecomposedState> start;
  for (int i = 0; i < k; ++i) start.push_back(sample_prior(prior, mol.zspec, rng));
  const BatchField field = network_field(params, mol);
  if (cfg.cartesian) {
    for (const DecomposedState& s : start) out.states.push_back(integrate_cartesian(field, mol.zspec, s, cfg).states.back());
  } else {
    for (const Trajectory& tr : integrate_batch(field, start, cfg)) out.states.push_back(tr.states.back());
  }
  for (const DecomposedState& s : out.states) out.conformers.push_back(compose(s, mol.zspec));
  return out;
}

}  // namespace goflow
