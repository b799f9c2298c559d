#pragma once

// Flow-matching losses on the three subspaces plus the Cartesian consistency
// term, uncertainty weighting, the three training stages and the Hutchinson
// log-likelihood used by Stage 3.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/SparseCore>

#include "goflow/autodiff.hpp"
#include "goflow/dataset.hpp"
#include "goflow/entropic_ot.hpp"
#include "goflow/errors.hpp"
#include "goflow/flow_paths.hpp"
#include "goflow/random.hpp"
#include "goflow/velocity_net.hpp"
#include "goflow/zmatrix.hpp"

namespace goflow {

struct LossBreakdown {
  double l_trans = 0.0;
  double l_rot = 0.0;
  double l_conf = 0.0;
  double l_flow = 0.0;
  double weighted_total = 0.0;
  Eigen::Vector3d log_sigma_sq = Eigen::Vector3d::Zero();
};

struct StageConfig {
  int stage = 1;
  int epochs = 1;  // optimizer steps, one batch each
  double learning_rate = 1e-3;
  int batch_size = 64;
  double lambda_flow = 1.0;

  static StageConfig defaults(int stage) {
    StageConfig c;
    c.stage = stage;
    c.learning_rate = stage == 1 ? 1e-3 : stage == 2 ? 1e-4 : 1e-5;
    return c;
  }

  void validate() const {
    if (stage < 1 || stage > 3) throw ValidationError("stage must be 1, 2 or 3, got " + std::to_string(stage));
    if (epochs < 0) throw ValidationError("stage " + std::to_string(stage) + ": epochs must be nonnegative");
    if (!(learning_rate > 0)) throw ValidationError("stage " + std::to_string(stage) + ": learning_rate must be positive");
    if (batch_size < 1) throw ValidationError("stage " + std::to_string(stage) + ": batch_size must be at least 1");
    if (!(lambda_flow >= 0)) throw ValidationError("lambda_flow must be nonnegative");
  }
};

/// Settings shared by all stages.
struct TrainOptions {
  PriorSpec prior;
  CostWeights cost;
  double ot_epsilon = 0.1;
  int ot_max_iters = 100;
  double ot_tol = 1e-6;
  double momentum = 0.9;
  double divergence_factor = 10.0;
  int guard_window = 50;
  int likelihood_steps = 10;
  int likelihood_probes = 64;
  double hutchinson_step = 1e-5;
  // Subspaces trained in Stage 1.
  bool train_trans = true;
  bool train_rot = true;
  bool train_conf = true;
  std::uint64_t seed = 0;

  void validate() const {
    prior.validate();
    if (!(ot_epsilon > 0)) throw ValidationError("ot_epsilon must be positive");
    if (ot_max_iters < 1) throw ValidationError("ot_max_iters must be at least 1");
    if (!(momentum >= 0 && momentum < 1)) throw ValidationError("momentum must be in [0, 1)");
    if (!(divergence_factor > 1)) throw ValidationError("divergence_factor must exceed 1");
    if (guard_window < 1) throw ValidationError("guard_window must be at least 1");
    if (likelihood_steps < 1) throw ValidationError("likelihood_steps must be at least 1");
    if (likelihood_probes < 1) throw ValidationError("likelihood_probes must be at least 1");
    if (!(hutchinson_step > 0)) throw ValidationError("hutchinson_step must be positive");
    if (!train_trans && !train_rot && !train_conf) throw ValidationError("Stage 1 needs at least one subspace to train");
  }
};

struct LossRecord {
  int stage = 0;
  int step = 0;
  double l_trans = 0.0;
  double l_rot = 0.0;
  double l_conf = 0.0;
  double l_flow = 0.0;
  double total = 0.0;
};

// ---------------------------------------------------------------------------
// Losses on plain values

namespace detail {

template <class V>
double mean_squared_error(const std::vector<V>& pred, const std::vector<V>& target, const char* what) {
  if (pred.size() != target.size()) throw StructuralError(std::string(what) + ": batch sizes differ");
  if (pred.empty()) throw ValidationError(std::string(what) + ": empty batch");
  double acc = 0.0;
  for (std::size_t b = 0; b < pred.size(); ++b) {
    if (pred[b].size() != target[b].size()) throw StructuralError(std::string(what) + ": item shapes differ");
    acc += (pred[b] - target[b]).squaredNorm();
  }
  return acc / static_cast<double>(pred.size());
}

}  // namespace detail

inline double loss_translation(const std::vector<Vec3>& pred, const std::vector<Vec3>& target) {
  return detail::mean_squared_error(pred, target, "loss_translation");
}

inline double loss_rotation(const std::vector<RotVec>& pred, const std::vector<RotVec>& target) {
  return detail::mean_squared_error(pred, target, "loss_rotation");
}

/// Torsion targets are already wrapped differences, so all channels compare directly.
inline double loss_conformation(const std::vector<VecX>& pred, const std::vector<VecX>& target) {
  return detail::mean_squared_error(pred, target, "loss_conformation");
}

/// Batch mean of (sum of per-atom squared errors) / N.
inline double loss_flow(const std::vector<Coords>& pred, const std::vector<Coords>& target) {
  if (pred.size() != target.size()) throw StructuralError("loss_flow: batch sizes differ");
  if (pred.empty()) throw ValidationError("loss_flow: empty batch");
  double acc = 0.0;
  for (std::size_t b = 0; b < pred.size(); ++b) {
    if (pred[b].rows() != target[b].rows()) throw StructuralError("loss_flow: atom counts differ");
    acc += (pred[b] - target[b]).squaredNorm() / static_cast<double>(pred[b].rows());
  }
  return acc / static_cast<double>(pred.size());
}

/// sum_k exp(-s_k)/2 * l_k + lambda_F * l_flow + sum_k s_k with s = log sigma^2 over (trans, rot, conf).
inline double adaptive_total(const LossBreakdown& l, const Eigen::Vector3d& log_sigma_sq, double lambda_flow) {
  const Eigen::Vector3d lk(l.l_trans, l.l_rot, l.l_conf);
  double total = lambda_flow * l.l_flow;
  for (int k = 0; k < 3; ++k) total += 0.5 * std::exp(-log_sigma_sq[k]) * lk[k] + log_sigma_sq[k];
  return total;
}

/// Tape form: lk is 1 x 3 (trans, rot, conf), log_sigma_sq 1 x 3, l_flow 1 x 1.
inline ad::Var adaptive_total(ad::Var lk, ad::Var log_sigma_sq, ad::Var l_flow, double lambda_flow) {
  const ad::Var weights = ad::scale(ad::exp(ad::scale(log_sigma_sq, -1.0)), 0.5);
  return ad::add(ad::add(ad::sum(ad::mul(weights, lk)), ad::sum(log_sigma_sq)), ad::scale(l_flow, lambda_flow));
}

// ---------------------------------------------------------------------------
// Training data and batches

struct TrainingMolecule {
  MoleculeContext ctx;
  std::vector<DecomposedState> data;
};

struct TrainingSet {
  std::vector<TrainingMolecule> molecules;

  std::size_t num_conformers() const {
    std::size_t n = 0;
    for (const auto& m : molecules) n += m.data.size();
    return n;
  }
};

inline TrainingSet make_training_set(const Dataset& data) {
  TrainingSet set;
  for (const MoleculeRecord& rec : data) {
    rec.validate();
    if (rec.conformers.empty()) continue;
    TrainingMolecule m{make_context(rec.graph), {}};
    for (const Coords& x : rec.conformers) m.data.push_back(decompose(x, m.ctx.zspec));
    set.molecules.push_back(std::move(m));
  }
  if (set.molecules.empty()) throw ValidationError("training set has no conformers");
  return set;
}

struct TrainItem {
  int molecule = 0;
  PathSample path;
  Coords x_t;               // composed state at time t (flow loss only)
  Coords cartesian_target;  // target Cartesian velocity (flow loss only)
  MatX jac;                 // dX/dz at x_t (flow loss only)
};

/// Draws batch_size (molecule, conformer) items, pairs each molecule's items
/// with prior draws by entropic OT on internal coordinates, and samples t ~ U(0, 1).
inline std::vector<TrainItem> sample_batch(const TrainingSet& set, int batch_size, const TrainOptions& opt,
                                           bool cartesian, Rng& rng) {
  std::vector<int> mol_of(batch_size), conf_of(batch_size);
  std::map<int, std::vector<int>> groups;
  for (int b = 0; b < batch_size; ++b) {
    mol_of[b] = static_cast<int>(rng.index(set.molecules.size()));
    conf_of[b] = static_cast<int>(rng.index(set.molecules[mol_of[b]].data.size()));
    groups[mol_of[b]].push_back(b);
  }
  std::vector<TrainItem> batch(batch_size);
  for (const auto& [mol, items] : groups) {
    const TrainingMolecule& m = set.molecules[mol];
    const std::size_t n = items.size();
    std::vector<DecomposedState> s0(n);
    std::vector<InternalCoords> z0(n), z1(n);
    for (std::size_t i = 0; i < n; ++i) {
      s0[i] = sample_prior(opt.prior, m.ctx.zspec, rng);
      z0[i] = s0[i].z;
      z1[i] = m.data[conf_of[items[i]]].z;
    }
    const TransportPlan plan =
        sinkhorn_uniform(cost_matrix(z0, z1, opt.cost), opt.ot_epsilon, opt.ot_max_iters, opt.ot_tol);
    for (const auto& [i, j] : ot_pairing(plan, rng)) {
      TrainItem& item = batch[items[i]];
      item.molecule = mol;
      item.path = make_path_sample(s0[i], m.data[conf_of[items[j]]], rng.uniform());
      if (cartesian) {
        item.x_t = compose(item.path.state_t, m.ctx.zspec);
        item.jac = jacobian(item.x_t, m.ctx.zspec);
        item.cartesian_target = compose_cartesian_velocity(item.path.target_v_trans, item.path.target_omega,
                                                           item.path.target_v_conf, item.x_t, item.path.state_t.c,
                                                           item.jac);
      }
    }
  }
  return batch;
}

// ---------------------------------------------------------------------------
// Losses on the tape

struct LossVars {
  ad::Var l_trans;
  ad::Var l_rot;
  ad::Var l_conf;
  ad::Var l_flow;
  bool has_flow = false;
};

namespace detail {

inline LossVars loss_vars(ad::Tape& tape, const ParamVars& p, const NetConfig& config, const TrainingSet& set,
                          const std::vector<TrainItem>& batch, bool with_flow, bool detach_frame_heads) {
  using namespace ad;
  const Eigen::Index nb = static_cast<Eigen::Index>(batch.size());
  std::vector<const MoleculeContext*> mols;
  std::vector<const DecomposedState*> states;
  VecX t(nb);
  MatX tt(nb, 3), tr(nb, 3);
  Eigen::Index k_total = 0;
  for (Eigen::Index b = 0; b < nb; ++b) {
    const TrainItem& it = batch[b];
    mols.push_back(&set.molecules[it.molecule].ctx);
    states.push_back(&it.path.state_t);
    t[b] = it.path.t;
    tt.row(b) = it.path.target_v_trans.transpose();
    tr.row(b) = it.path.target_omega.transpose();
    k_total += it.path.target_v_conf.size();
  }
  MatX tc(k_total, 1);
  for (Eigen::Index b = 0, off = 0; b < nb; ++b) {
    const VecX& v = batch[b].path.target_v_conf;
    tc.middleRows(off, v.size()) = v;
    off += v.size();
  }
  const FieldVars f = forward(tape, p, config, mols, state_constants(tape, states), t, detach_frame_heads);
  const double inv_b = 1.0 / static_cast<double>(nb);
  LossVars out;
  out.l_trans = scale(sum(square(sub(f.v_trans, tape.constant(tt)))), inv_b);
  out.l_rot = scale(sum(square(sub(f.omega, tape.constant(tr)))), inv_b);
  out.l_conf = scale(sum(square(sub(f.v_conf, tape.constant(tc)))), inv_b);
  if (!with_flow) return out;

  // v_total = A_T vec(v_trans) + A_R vec(omega) + blockdiag(J_b) v_conf, flattened per atom.
  Eigen::Index n_rows = 0;
  for (const TrainItem& it : batch) {
    if (it.x_t.rows() == 0) throw StructuralError("flow loss needs Cartesian batch items");
    n_rows += 3 * it.x_t.rows();
  }
  using Trip = Eigen::Triplet<double>;
  std::vector<Trip> at, ar, aj;
  MatX target(n_rows, 1);
  VecX weight(n_rows);
  Eigen::Index row0 = 0;
  for (Eigen::Index b = 0; b < nb; ++b) {
    const TrainItem& it = batch[b];
    const Eigen::Index n = it.x_t.rows();
    const int c0 = f.conf_offset[b];
    for (Eigen::Index i = 0; i < n; ++i) {
      const Vec3 r = it.x_t.row(i).transpose() - it.path.state_t.c;
      Eigen::Matrix3d m;  // omega x r = m * omega
      m << 0, r.z(), -r.y(), -r.z(), 0, r.x(), r.y(), -r.x(), 0;
      for (int d = 0; d < 3; ++d) {
        const Eigen::Index row = row0 + 3 * i + d;
        at.emplace_back(row, 3 * b + d, 1.0);
        for (int e = 0; e < 3; ++e)
          if (m(d, e) != 0.0) ar.emplace_back(row, 3 * b + e, m(d, e));
        for (Eigen::Index k = 0; k < it.jac.cols(); ++k) aj.emplace_back(row, c0 + k, it.jac(3 * i + d, k));
        target(row, 0) = it.cartesian_target(i, d);
        weight[row] = inv_b / static_cast<double>(n);
      }
    }
    row0 += 3 * n;
  }
  Eigen::SparseMatrix<double> mt(n_rows, 3 * nb), mr(n_rows, 3 * nb), mj(n_rows, k_total);
  mt.setFromTriplets(at.begin(), at.end());
  mr.setFromTriplets(ar.begin(), ar.end());
  mj.setFromTriplets(aj.begin(), aj.end());
  Var v = add(sparse_matmul(mt, reshape(f.v_trans, 3 * nb, 1)), sparse_matmul(mr, reshape(f.omega, 3 * nb, 1)));
  if (k_total > 0) v = add(v, sparse_matmul(mj, f.v_conf));
  out.l_flow = sum(scale_rows(square(sub(v, tape.constant(target))), weight));
  out.has_flow = true;
  return out;
}

inline bool stage1_trainable(const std::string& name, const TrainOptions& opt) {
  const std::string g = param_group(name);
  return (g == "trans" && opt.train_trans) || (g == "rot" && opt.train_rot) ||
         ((g == "conf" || g == "trunk") && opt.train_conf);
}

}  // namespace detail

struct LossEvaluation {
  LossBreakdown losses;
  std::map<std::string, MatX> grads;  // trainable parameters only
};

/// Stage 1: sum of the enabled subspace losses, each reaching only its own head
/// (the trunk learns from the conformation loss). Stage 2: adaptive total with
/// the flow term, every parameter trainable.
inline LossEvaluation evaluate_losses(const NetParams& params, const TrainingSet& set, const std::vector<TrainItem>& batch,
                                      int stage, const TrainOptions& opt, double lambda_flow, bool need_grads) {
  if (stage != 1 && stage != 2) throw ValidationError("evaluate_losses covers stages 1 and 2");
  ad::Tape tape;
  const bool s1 = stage == 1;
  auto trainable = [&](const std::string& name) {
    if (!need_grads) return false;
    if (s1) return detail::stage1_trainable(name, opt);
    return true;
  };
  const ParamVars vars = bind_params(tape, params, trainable);
  const LossVars lv = detail::loss_vars(tape, vars, params.config, set, batch, !s1, s1);
  LossEvaluation out;
  out.losses.l_trans = lv.l_trans.scalar();
  out.losses.l_rot = lv.l_rot.scalar();
  out.losses.l_conf = lv.l_conf.scalar();
  out.losses.l_flow = lv.has_flow ? lv.l_flow.scalar() : 0.0;
  const ad::Var s = vars.at("adaptive.log_sigma_sq");
  out.losses.log_sigma_sq = s.val().row(0).transpose();
  ad::Var total;
  if (s1) {
    std::vector<ad::Var> terms;
    if (opt.train_trans) terms.push_back(lv.l_trans);
    if (opt.train_rot) terms.push_back(lv.l_rot);
    if (opt.train_conf) terms.push_back(lv.l_conf);
    total = terms.front();
    for (std::size_t k = 1; k < terms.size(); ++k) total = ad::add(total, terms[k]);
  } else {
    total = adaptive_total(ad::concat_cols({lv.l_trans, lv.l_rot, lv.l_conf}), s, lv.l_flow, lambda_flow);
  }
  out.losses.weighted_total = total.scalar();
  if (need_grads) {
    tape.backward(total);
    for (const auto& [name, v] : vars)
      if (tape.needs_grad(v)) out.grads[name] = tape.grad(v);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Divergence and likelihood

using FlatField = std::function<VecX(const VecX& x, double t)>;
using CartesianField = std::function<Coords(const Coords& x, double t)>;

/// Mean of eps^T (f(x + h eps) - f(x)) / h over Rademacher probes.
inline double hutchinson_divergence_flat(const FlatField& f, const VecX& x, double t, int num_probes, Rng& rng,
                                         double step = 1e-5) {
  if (num_probes < 1) throw ValidationError("num_probes must be at least 1");
  const VecX f0 = f(x, t);
  double acc = 0.0;
  VecX eps(x.size());
  for (int p = 0; p < num_probes; ++p) {
    for (Eigen::Index i = 0; i < eps.size(); ++i) eps[i] = rng.rademacher();
    acc += eps.dot(f(x + step * eps, t) - f0) / step;
  }
  return acc / num_probes;
}

inline double hutchinson_divergence(const CartesianField& f, const Coords& x, double t, int num_probes, Rng& rng,
                                    double step = 1e-5) {
  const FlatField flat = [&](const VecX& v, double tt) {
    const Coords y = f(unflatten(v), tt);
    return VecX(flatten(y));
  };
  return hutchinson_divergence_flat(flat, VecX(flatten(x)), t, num_probes, rng, step);
}

/// -integral_0^1 div f(x_t, t) dt along the trajectory through x1 at t = 1,
/// integrated backward with classical RK4 on the augmented state.
inline double log_density_change(const FlatField& f, const VecX& x1, int steps, int num_probes, Rng& rng,
                                 double step = 1e-5) {
  if (steps < 1) throw ValidationError("steps must be at least 1");
  const double h = 1.0 / steps;
  VecX x = x1;
  double acc = 0.0;
  for (int k = 0; k < steps; ++k) {
    const double t = 1.0 - k * h;
    Rng probe = rng.stream(static_cast<std::uint64_t>(k));
    auto div = [&](const VecX& y, double tt) {
      Rng r = probe;
      return hutchinson_divergence_flat(f, y, tt, num_probes, r, step);
    };
    const VecX k1 = f(x, t);
    const double d1 = div(x, t);
    const VecX x2 = x - 0.5 * h * k1;
    const VecX k2 = f(x2, t - 0.5 * h);
    const double d2 = div(x2, t - 0.5 * h);
    const VecX x3 = x - 0.5 * h * k2;
    const VecX k3 = f(x3, t - 0.5 * h);
    const double d3 = div(x3, t - 0.5 * h);
    const VecX x4 = x - h * k3;
    const double d4 = div(x4, t - h);
    x -= h / 6.0 * (k1 + 2 * k2 + 2 * k3 + f(x4, t - h));
    acc -= h / 6.0 * (d1 + 2 * d2 + 2 * d3 + d4);
    if (!x.allFinite() || x.cwiseAbs().maxCoeff() > 1e6)
      throw NumericalError("log-density integration blew up at t = " + std::to_string(t - h));
  }
  return acc;
}

namespace detail {

/// Prior log-density of stacked decomposed states, B x 1.
inline ad::Var prior_log_density_tape(ad::Tape& tape, ad::Var c, ad::Var q, ad::Var z,
                                      const std::vector<const MoleculeContext*>& mols, const PriorSpec& prior) {
  using namespace ad;
  const double log2pi = std::log(2.0 * std::numbers::pi);
  const Eigen::Index nb = c.rows();
  Var lp = add_scalar(scale(row_sum(square(c)), -0.5 / (prior.sigma_trans * prior.sigma_trans)),
                      -3.0 * std::log(prior.sigma_trans) - 1.5 * log2pi);
  const Var v = quat_log(q);
  lp = add(lp, add_scalar(scale(row_sum(square(v)), -0.5 / (prior.sigma_rot * prior.sigma_rot)),
                          -3.0 * std::log(prior.sigma_rot) - 1.5 * log2pi -
                              std::log(rotation_truncation_mass(prior.sigma_rot))));
  lp = sub(lp, so3_log_volume(v));

  std::vector<int> lin_rows, tor_rows, lin_item, tor_item;
  std::vector<double> lin_mu, tor_mu;
  int off = 0;
  for (Eigen::Index b = 0; b < nb; ++b) {
    const ZMatrixSpec& zs = mols[b]->zspec;
    const VecX mu = prior_means(prior, zs).to_vector();
    for (int k = 0; k < zs.m(); ++k) {
      const bool tor = zs.channel(k) == ZMatrixSpec::Channel::kTorsion;
      (tor ? tor_rows : lin_rows).push_back(off + k);
      (tor ? tor_item : lin_item).push_back(static_cast<int>(b));
      (tor ? tor_mu : lin_mu).push_back(mu[k]);
    }
    off += zs.m();
  }
  const double sc = prior.sigma_conf;
  const double norm = -std::log(sc) - 0.5 * log2pi;
  if (!lin_rows.empty()) {
    const MatX mu = Eigen::Map<const VecX>(lin_mu.data(), static_cast<Eigen::Index>(lin_mu.size()));
    const Var d = sub(gather_rows(z, lin_rows), tape.constant(mu));
    lp = add(lp, segment_sum(add_scalar(scale(square(d), -0.5 / (sc * sc)), norm), lin_item, nb));
  }
  if (!tor_rows.empty()) {
    const MatX mu = Eigen::Map<const VecX>(tor_mu.data(), static_cast<Eigen::Index>(tor_mu.size()));
    const Var base = wrap_angles(sub(gather_rows(z, tor_rows), tape.constant(mu)));
    std::vector<Var> expo;
    MatX top = MatX::Constant(base.rows(), 1, -std::numeric_limits<double>::infinity());
    for (int k = -3; k <= 3; ++k) {
      expo.push_back(scale(square(add_scalar(base, 2.0 * std::numbers::pi * k)), -0.5 / (sc * sc)));
      top = top.cwiseMax(expo.back().val());
    }
    const Var topv = tape.constant(top);
    Var acc = exp(sub(expo.front(), topv));
    for (std::size_t k = 1; k < expo.size(); ++k) acc = add(acc, exp(sub(expo[k], topv)));
    lp = add(lp, segment_sum(add_scalar(add(log(acc), topv), norm), tor_item, nb));
  }
  return lp;
}

struct LikelihoodTrace {
  ad::Var log_prob;  // B x 1: prior log-density at the t = 0 end plus delta
  VecX delta;        // -integral of the divergence per item
  std::vector<DecomposedState> start;
};

inline void check_bounded(const MatX& v, double t) {
  if (!v.allFinite() || (v.size() && v.cwiseAbs().maxCoeff() > 1e6))
    throw NumericalError("likelihood integration blew up at t = " + std::to_string(t));
}

/// Integrates the decomposed state backward from the data at t = 1 to t = 0 with
/// Euler steps, accumulating the Hutchinson divergence in the chart
/// (c, delta -> exp(delta) q, z).
inline LikelihoodTrace likelihood_tape(ad::Tape& tape, const ParamVars& p, const NetConfig& config,
                                       const std::vector<const MoleculeContext*>& mols,
                                       const std::vector<const DecomposedState*>& data, int steps, int num_probes,
                                       double fd_step, const PriorSpec& prior, Rng& rng) {
  using namespace ad;
  if (steps < 1) throw ValidationError("likelihood steps must be at least 1");
  if (num_probes < 1) throw ValidationError("num_probes must be at least 1");
  const int nb = static_cast<int>(mols.size());
  const StateVars s1 = state_constants(tape, data);
  Var c = s1.c, q = s1.q, z = s1.z;
  const int k_total = static_cast<int>(z.rows());

  std::vector<int> conf_off(nb + 1, 0), r_rows, phi_rows;
  for (int b = 0; b < nb; ++b) {
    const ZMatrixSpec& zs = mols[b]->zspec;
    for (int k = 0; k < zs.m(); ++k) {
      if (zs.channel(k) == ZMatrixSpec::Channel::kBond) r_rows.push_back(conf_off[b] + k);
      if (zs.channel(k) == ZMatrixSpec::Channel::kTorsion) phi_rows.push_back(conf_off[b] + k);
    }
    conf_off[b + 1] = conf_off[b] + zs.m();
  }
  // Probe layout: probe-major, then item, then coordinate.
  std::vector<int> rep, repz, segz, base_rows(nb), base_zrows(k_total), pert_rows, pert_zrows;
  for (int b = 0; b < nb; ++b) base_rows[b] = b;
  for (int k = 0; k < k_total; ++k) base_zrows[k] = k;
  for (int pr = 0; pr < num_probes; ++pr) {
    for (int b = 0; b < nb; ++b) {
      rep.push_back(b);
      pert_rows.push_back(nb + pr * nb + b);
      for (int k = conf_off[b]; k < conf_off[b + 1]; ++k) {
        repz.push_back(k);
        segz.push_back(b);
        pert_zrows.push_back(k_total + pr * k_total + k);
      }
    }
  }
  std::vector<const MoleculeContext*> all_mols;
  for (int pr = 0; pr <= num_probes; ++pr) all_mols.insert(all_mols.end(), mols.begin(), mols.end());
  const int np = num_probes * nb, npz = num_probes * k_total;

  const double h = 1.0 / steps;
  Var delta = tape.constant(MatX::Zero(nb, 1));
  for (int step = 0; step < steps; ++step) {
    const double t = 1.0 - step * h;
    MatX ec(np, 3), er(np, 3), ez(npz, 1), qleft(np, 4);
    for (Eigen::Index i = 0; i < ec.size(); ++i) ec.data()[i] = rng.rademacher();
    for (Eigen::Index i = 0; i < er.size(); ++i) er.data()[i] = rng.rademacher();
    for (Eigen::Index i = 0; i < ez.size(); ++i) ez.data()[i] = rng.rademacher();
    for (int i = 0; i < np; ++i)
      qleft.row(i) = quat_exp(RotVec(fd_step * er.row(i).transpose())).coeffs().transpose();

    const Var c_all = concat_rows({c, add(gather_rows(c, rep), tape.constant(fd_step * ec))});
    const Var q_all = concat_rows({q, quat_mul(tape.constant(qleft), gather_rows(q, rep))});
    Var z_all = z;
    if (k_total > 0) z_all = concat_rows({z, add(gather_rows(z, repz), tape.constant(fd_step * ez))});
    const FieldVars f = forward(tape, p, config, all_mols, {c_all, q_all, z_all},
                                VecX::Constant(static_cast<Eigen::Index>(all_mols.size()), t));

    const Var vt = gather_rows(f.v_trans, base_rows), om = gather_rows(f.omega, base_rows);
    Var div = add(segment_sum(row_sum(mul(sub(gather_rows(f.v_trans, pert_rows), gather_rows(vt, rep)),
                                          tape.constant(ec))),
                              rep, nb),
                  segment_sum(row_sum(mul(sub(gather_rows(f.omega, pert_rows), gather_rows(om, rep)),
                                          tape.constant(er))),
                              rep, nb));
    Var vc;
    if (k_total > 0) {
      vc = gather_rows(f.v_conf, base_zrows);
      div = add(div, segment_sum(mul(sub(gather_rows(f.v_conf, pert_zrows), gather_rows(vc, repz)),
                                     tape.constant(ez)),
                                 segz, nb));
    }
    div = scale(div, 1.0 / (num_probes * fd_step));
    delta = sub(delta, scale(div, h));

    c = sub(c, scale(vt, h));
    q = quat_mul(quat_exp(scale(om, -h)), q);
    if (k_total > 0) {
      z = sub(z, scale(vc, h));
      // Wrap torsions and floor bonds; the correction is piecewise constant.
      MatX fix = MatX::Zero(k_total, 1);
      for (int k : phi_rows) {
        const double v = z.val()(k, 0);
        if (!(v > -std::numbers::pi && v <= std::numbers::pi)) fix(k, 0) = wrap_angle(v) - v;
      }
      for (int k : r_rows) fix(k, 0) = std::max(z.val()(k, 0), 1e-3) - z.val()(k, 0);
      if (!fix.isZero(0.0)) z = add(z, tape.constant(fix));
    }
    check_bounded(c.val(), t - h);
    check_bounded(z.val(), t - h);
    check_bounded(delta.val(), t - h);
  }

  LikelihoodTrace out;
  out.log_prob = add(prior_log_density_tape(tape, c, q, z, mols, prior), delta);
  out.delta = delta.val().col(0);
  for (int b = 0; b < nb; ++b) {
    DecomposedState s;
    s.c = c.val().row(b).transpose();
    s.q = UnitQuat{q.val()(b, 0), q.val()(b, 1), q.val()(b, 2), q.val()(b, 3)};
    s.z = InternalCoords::from_vector(z.val().col(0).segment(conf_off[b], conf_off[b + 1] - conf_off[b]),
                                      mols[b]->zspec);
    out.start.push_back(s);
  }
  return out;
}

}  // namespace detail

struct LikelihoodResult {
  double log_likelihood = 0.0;
  double prior_log_density = 0.0;
  double delta = 0.0;  // -integral of the divergence
  DecomposedState start;
};

/// Log-density of a conformer under the flow, measured in the decomposed chart.
inline LikelihoodResult log_likelihood(const NetParams& params, const MoleculeContext& mol, const Coords& x, int steps,
                                       int num_probes, Rng& rng, const PriorSpec& prior = {},
                                       double fd_step = 1e-5) {
  prior.validate();
  if (prior.cartesian) throw ValidationError("log-likelihood needs the decomposed prior");
  const DecomposedState s1 = decompose(x, mol.zspec);
  ad::Tape tape;
  const ParamVars vars = bind_params(tape, params);
  const detail::LikelihoodTrace tr =
      detail::likelihood_tape(tape, vars, params.config, {&mol}, {&s1}, steps, num_probes, fd_step, prior, rng);
  LikelihoodResult out;
  out.start = tr.start.front();
  out.delta = tr.delta[0];
  out.prior_log_density = prior_log_density(out.start, prior, mol.zspec);
  out.log_likelihood = out.prior_log_density + out.delta;
  if (!std::isfinite(out.log_likelihood)) throw NumericalError("log-likelihood is not finite");
  return out;
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainState {
  NetParams params;
  int completed_stage = 0;
  std::vector<LossRecord> history;
};

namespace detail {

inline void sgd_step(NetParams& p, const std::map<std::string, MatX>& grads, std::map<std::string, MatX>& velocity,
                     double lr, double momentum) {
  for (const auto& [name, g] : grads) {
    MatX& v = velocity[name];
    if (v.size() == 0) v = MatX::Zero(g.rows(), g.cols());
    v = momentum * v + g;
    p.values.at(name) -= lr * v;
  }
}

/// Halts when the running-mean loss exceeds factor x its minimum. For losses
/// that can be negative the excess over the minimum is compared against
/// factor x max(|minimum|, 1).
class DivergenceGuard {
 public:
  DivergenceGuard(double factor, int window, bool signed_loss)
      : factor_(factor), window_(window), signed_(signed_loss) {}

  void observe(int stage, int step, double value) {
    values_.push_back(value);
    sum_ += value;
    if (static_cast<int>(values_.size()) > window_) {
      sum_ -= values_.front();
      values_.pop_front();
    }
    if (static_cast<int>(values_.size()) < window_) return;
    const double mean = sum_ / window_;
    best_ = std::min(best_, mean);
    const bool diverged =
        signed_ ? mean - best_ > factor_ * std::max(std::abs(best_), 1.0) : (best_ > 0 && mean > factor_ * best_);
    if (diverged)
      throw ConvergenceError("stage " + std::to_string(stage) + " diverged at step " + std::to_string(step) +
                             ": running-mean loss " + std::to_string(mean) + " against minimum " +
                             std::to_string(best_) + " (window " + std::to_string(window_) + ")");
  }

 private:
  double factor_;
  int window_;
  bool signed_;
  std::deque<double> values_;
  double sum_ = 0.0;
  double best_ = std::numeric_limits<double>::infinity();
};

inline void check_loss(int stage, int step, const char* component, double v) {
  if (!std::isfinite(v))
    throw NumericalError("stage " + std::to_string(stage) + " step " + std::to_string(step) + ": " + component +
                         " is not finite");
}

}  // namespace detail

/// Runs one stage in place on state. Stage s requires stage s - 1 to be complete.
inline std::vector<LossRecord> train_stage(const StageConfig& sc, const TrainOptions& opt, const TrainingSet& set,
                                           TrainState& state) {
  sc.validate();
  opt.validate();
  if (state.completed_stage < sc.stage - 1)
    throw ValidationError("stage " + std::to_string(sc.stage) + " needs parameters from stage " +
                          std::to_string(sc.stage - 1) + " (completed: " + std::to_string(state.completed_stage) + ")");
  if (set.molecules.empty()) throw ValidationError("training set is empty");
  Rng rng = Rng(opt.seed).stream(static_cast<std::uint64_t>(sc.stage));
  std::map<std::string, MatX> velocity;
  detail::DivergenceGuard guard(opt.divergence_factor, opt.guard_window, sc.stage == 3);
  std::vector<LossRecord> records;
  for (int step = 0; step < sc.epochs; ++step) try {
    LossRecord rec;
    rec.stage = sc.stage;
    rec.step = step;
    std::map<std::string, MatX> grads;
    double guarded;
    if (sc.stage < 3) {
      const std::vector<TrainItem> batch = sample_batch(set, sc.batch_size, opt, sc.stage == 2, rng);
      LossEvaluation ev = evaluate_losses(state.params, set, batch, sc.stage, opt, sc.lambda_flow, true);
      rec.l_trans = ev.losses.l_trans;
      rec.l_rot = ev.losses.l_rot;
      rec.l_conf = ev.losses.l_conf;
      rec.l_flow = ev.losses.l_flow;
      rec.total = ev.losses.weighted_total;
      guarded = rec.l_trans + rec.l_rot + rec.l_conf + rec.l_flow;
      grads = std::move(ev.grads);
    } else {
      std::vector<const MoleculeContext*> mols;
      std::vector<const DecomposedState*> data;
      for (int b = 0; b < sc.batch_size; ++b) {
        const TrainingMolecule& m = set.molecules[rng.index(set.molecules.size())];
        mols.push_back(&m.ctx);
        data.push_back(&m.data[rng.index(m.data.size())]);
      }
      ad::Tape tape;
      const ParamVars vars =
          bind_params(tape, state.params, [](const std::string& n) { return param_group(n) != "adaptive"; });
      const detail::LikelihoodTrace tr =
          detail::likelihood_tape(tape, vars, state.params.config, mols, data, opt.likelihood_steps,
                                  opt.likelihood_probes, opt.hutchinson_step, opt.prior, rng);
      const ad::Var nll = ad::scale(ad::sum(tr.log_prob), -1.0 / sc.batch_size);
      rec.total = nll.scalar();
      guarded = rec.total;
      detail::check_loss(sc.stage, step, "negative log-likelihood", rec.total);
      tape.backward(nll);
      for (const auto& [name, v] : vars)
        if (tape.needs_grad(v)) grads[name] = tape.grad(v);
    }
    detail::check_loss(sc.stage, step, "l_trans", rec.l_trans);
    detail::check_loss(sc.stage, step, "l_rot", rec.l_rot);
    detail::check_loss(sc.stage, step, "l_conf", rec.l_conf);
    detail::check_loss(sc.stage, step, "l_flow", rec.l_flow);
    detail::check_loss(sc.stage, step, "total", rec.total);
    for (const auto& [name, g] : grads)
      if (!g.allFinite())
        throw NumericalError("stage " + std::to_string(sc.stage) + " step " + std::to_string(step) +
                             ": non-finite gradient for " + name);
    detail::sgd_step(state.params, grads, velocity, sc.learning_rate, opt.momentum);
    records.push_back(rec);
    guard.observe(sc.stage, step, guarded);
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    if (msg.rfind("stage ", 0) == 0) throw;
    throw NumericalError("stage " + std::to_string(sc.stage) + " step " + std::to_string(step) + ": " + msg);
  }
  state.completed_stage = std::max(state.completed_stage, sc.stage);
  state.history.insert(state.history.end(), records.begin(), records.end());
  return records;
}

}  // namespace goflow
