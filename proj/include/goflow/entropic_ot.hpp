#pragma once

// Minibatch entropic optimal transport between internal-coordinate sets.

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "goflow/errors.hpp"
#include "goflow/random.hpp"
#include "goflow/types.hpp"
#include "goflow/zmatrix.hpp"

namespace goflow {

struct CostWeights {
  double alpha_r = 1.0;
  double alpha_theta = 1.0;
  double alpha_phi = 1.0;
};

struct CostMatrix {
  MatX values;
  CostWeights weights;
};

struct TransportPlan {
  MatX plan;
  double epsilon = 0.0;
  int iterations_used = 0;
  double marginal_error = 0.0;
  bool converged = false;
  std::vector<double> error_history;  // L1 marginal error after each iteration
};

/// Displacement z1 - z0 with torsions taken along the short arc.
inline VecX internal_difference(const InternalCoords& z0, const InternalCoords& z1) {
  VecX d(z0.size());
  const Eigen::Index nr = z0.r.size(), nt = z0.theta.size(), np = z0.phi.size();
  d.head(nr) = z1.r - z0.r;
  d.segment(nr, nt) = z1.theta - z0.theta;
  for (Eigen::Index k = 0; k < np; ++k) d[nr + nt + k] = wrap_angle(z1.phi[k] - z0.phi[k]);
  return d;
}

inline double pair_cost(const InternalCoords& a, const InternalCoords& b, const CostWeights& w) {
  double cr = (a.r - b.r).squaredNorm();
  double ct = (a.theta - b.theta).squaredNorm();
  double cp = 0.0;
  for (Eigen::Index k = 0; k < a.phi.size(); ++k) {
    const double d = wrap_angle(a.phi[k] - b.phi[k]);
    cp += d * d;
  }
  return w.alpha_r * cr + w.alpha_theta * ct + w.alpha_phi * cp;
}

inline CostMatrix cost_matrix(const std::vector<InternalCoords>& z0, const std::vector<InternalCoords>& z1,
                              const CostWeights& weights = {}) {
  if (weights.alpha_r < 0 || weights.alpha_theta < 0 || weights.alpha_phi < 0)
    throw ValidationError("cost weights must be nonnegative");
  auto same_shape = [](const InternalCoords& a, const InternalCoords& b) {
    return a.r.size() == b.r.size() && a.theta.size() == b.theta.size() && a.phi.size() == b.phi.size();
  };
  const InternalCoords* ref = !z0.empty() ? &z0.front() : (!z1.empty() ? &z1.front() : nullptr);
  for (const auto* batch : {&z0, &z1})
    for (std::size_t i = 0; i < batch->size(); ++i)
      if (!same_shape((*batch)[i], *ref))
        throw StructuralError("internal coordinates in the OT batch do not share one Z-matrix (item " +
                              std::to_string(i) + ")");
  CostMatrix c{MatX(z0.size(), z1.size()), weights};
  for (std::size_t i = 0; i < z0.size(); ++i)
    for (std::size_t j = 0; j < z1.size(); ++j) c.values(i, j) = pair_cost(z0[i], z1[j], weights);
  return c;
}

namespace detail {

inline double log_sum_exp(const Eigen::Ref<const VecX>& x) {
  const double mx = x.maxCoeff();
  if (!std::isfinite(mx)) return mx;
  return mx + std::log((x.array() - mx).exp().sum());
}

}  // namespace detail

/// Log-domain Sinkhorn scaling. Stops once the L1 marginal error (rows plus
/// columns) is at most tol, or after max_iters iterations with converged = false.
inline TransportPlan sinkhorn(const CostMatrix& cost, const VecX& a, const VecX& b, double epsilon = 0.1,
                              int max_iters = 100, double tol = 1e-6) {
  const MatX& c = cost.values;
  const Eigen::Index n = c.rows(), m = c.cols();
  if (a.size() != n || b.size() != m) throw StructuralError("marginal sizes do not match the cost matrix");
  if (!(epsilon > 0.0)) throw ValidationError("sinkhorn epsilon must be positive");
  if (max_iters < 1) throw ValidationError("sinkhorn max_iters must be at least 1");
  if ((a.array() <= 0).any() || (b.array() <= 0).any()) throw ValidationError("marginals must be strictly positive");
  if (std::abs(a.sum() - 1.0) > 1e-9 || std::abs(b.sum() - 1.0) > 1e-9)
    throw ValidationError("marginals must each sum to 1");

  const MatX logk = -c / epsilon;
  if (!logk.allFinite())
    throw NumericalError("non-finite Sinkhorn kernel: C/eps ranges over [" + std::to_string(c.minCoeff() / epsilon) +
                         ", " + std::to_string(c.maxCoeff() / epsilon) + "]");
  const VecX loga = a.array().log(), logb = b.array().log();
  VecX f = VecX::Zero(n), g = VecX::Zero(m);  // log u, log v

  TransportPlan out;
  out.epsilon = epsilon;
  auto plan_from = [&]() {
    MatX p(n, m);
    for (Eigen::Index i = 0; i < n; ++i)
      for (Eigen::Index j = 0; j < m; ++j) p(i, j) = std::exp(f[i] + logk(i, j) + g[j]);
    return p;
  };
  for (int it = 1; it <= max_iters; ++it) {
    for (Eigen::Index i = 0; i < n; ++i) f[i] = loga[i] - detail::log_sum_exp(logk.row(i).transpose() + g);
    for (Eigen::Index j = 0; j < m; ++j) g[j] = logb[j] - detail::log_sum_exp(logk.col(j) + f);
    out.plan = plan_from();
    out.marginal_error = (out.plan.rowwise().sum() - a).lpNorm<1>() + (out.plan.colwise().sum().transpose() - b).lpNorm<1>();
    if (!std::isfinite(out.marginal_error))
      throw NumericalError("Sinkhorn produced non-finite scalings at iteration " + std::to_string(it));
    out.error_history.push_back(out.marginal_error);
    out.iterations_used = it;
    if (out.marginal_error <= tol) {
      out.converged = true;
      break;
    }
  }
  return out;
}

inline TransportPlan sinkhorn_uniform(const CostMatrix& cost, double epsilon = 0.1, int max_iters = 100,
                                      double tol = 1e-6) {
  const Eigen::Index n = cost.values.rows(), m = cost.values.cols();
  return sinkhorn(cost, VecX::Constant(n, 1.0 / n), VecX::Constant(m, 1.0 / m), epsilon, max_iters, tol);
}

/// One partner per row, drawn by inverse CDF from the normalized row.
inline std::vector<std::pair<int, int>> ot_pairing(const TransportPlan& plan, Rng& rng) {
  const MatX& p = plan.plan;
  std::vector<std::pair<int, int>> pairs;
  pairs.reserve(p.rows());
  for (Eigen::Index i = 0; i < p.rows(); ++i) {
    const double total = p.row(i).sum();
    if (!(total > 0.0)) throw NumericalError("transport plan row " + std::to_string(i) + " has no mass");
    const double u = rng.uniform() * total;
    double acc = 0.0;
    Eigen::Index pick = p.cols() - 1;
    for (Eigen::Index j = 0; j < p.cols(); ++j) {
      acc += p(i, j);
      if (u < acc) {
        pick = j;
        break;
      }
    }
    while (pick > 0 && p(i, pick) == 0.0) --pick;
    pairs.emplace_back(static_cast<int>(i), static_cast<int>(pick));
  }
  return pairs;
}

/// Plan-weighted mean displacement from z0[i] to the targets.
inline VecX barycentric_velocity(const TransportPlan& plan, const std::vector<InternalCoords>& z0,
                                 const std::vector<InternalCoords>& z1, int i) {
  const double total = plan.plan.row(i).sum();
  if (!(total > 0.0)) throw NumericalError("transport plan row " + std::to_string(i) + " has no mass");
  VecX v = VecX::Zero(z0[i].size());
  for (std::size_t j = 0; j < z1.size(); ++j) {
    const double w = plan.plan(i, static_cast<Eigen::Index>(j));
    if (w != 0.0) v += w * internal_difference(z0[i], z1[j]);
  }
  return v / total;
}

inline double transport_cost(const CostMatrix& cost, const TransportPlan& plan) {
  if (cost.values.rows() != plan.plan.rows() || cost.values.cols() != plan.plan.cols())
    throw StructuralError("cost and plan shapes differ");
  return cost.values.cwiseProduct(plan.plan).sum();
}

}  // namespace goflow
