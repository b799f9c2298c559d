#pragma once

// Graph-conditioned velocity field on the decomposed state (c, q, z).
//
// Trunk: atom features and a sinusoidal time embedding, then residual
// message-passing layers with sum aggregation over bonds, mean-pooled to a
// molecule embedding g. Heads:
//   trans: [g, c_t, time] -> v_trans
//   rot:   [g, R(q_t), time] -> omega_hat
//   conf:  per internal coordinate, [entry-atom embeddings, channel, value
//          features] -> encoding e_k; [e_k, mean_k e_k, g, time] -> dz_k/dt
// With detach_frame_heads the trans/rot heads read g through a stop-gradient,
// so the trunk is shaped only by frame-invariant signals (used in Stage 1).

#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "goflow/autodiff.hpp"
#include "goflow/errors.hpp"
#include "goflow/molecule.hpp"
#include "goflow/random.hpp"
#include "goflow/so3.hpp"
#include "goflow/types.hpp"
#include "goflow/zmatrix.hpp"

namespace goflow {

struct NetConfig {
  int hidden_dim = 128;
  int num_layers = 8;
  int time_embed_dim = 32;
  bool message_passing = true;
  std::uint64_t seed = 0;

  void validate() const {
    if (hidden_dim < 1) throw ValidationError("hidden_dim must be at least 1");
    if (num_layers < 1) throw ValidationError("num_layers must be at least 1");
    if (time_embed_dim < 2 || time_embed_dim % 2) throw ValidationError("time_embed_dim must be a positive even number");
  }
};

struct FieldOutput {
  Vec3 v_trans = Vec3::Zero();
  RotVec omega_hat = RotVec::Zero();
  VecX v_conf;
};

// ---------------------------------------------------------------------------
// Featurization

inline constexpr int kNumAtomFeatures = 57;
inline constexpr int kNumBondFeatures = 4;
inline constexpr double kValueScales[] = {3.0, 10.0, 30.0};
inline constexpr int kNumValueFeatures = (2 + 3) + (2 + 3) + (6 + 3);  // bond, angle, torsion blocks
inline constexpr double kCosTetrahedral = 0.33380685923377096;  // -cos(109.5 deg)

namespace detail {

inline int element_slot(int z) {
  switch (z) {
    case 1: return 0;
    case 6: return 1;
    case 7: return 2;
    case 8: return 3;
    case 9: return 4;
    case 16: return 5;
    case 17: return 6;
    case 35: return 7;
    default: return 8;
  }
}

inline void check_range(int value, int lo, int hi, std::size_t atom, const char* field) {
  if (value < lo || value > hi)
    throw ValidationError("atom " + std::to_string(atom) + ": " + field + " = " + std::to_string(value) +
                          " outside [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
}

}  // namespace detail

/// One-hot blocks: chirality 4, degree 11, charge 11, num_H 9, radicals 5,
/// hybridization 6, aromatic 1, in_ring 1, element 9 (H C N O F S Cl Br other).
inline MatX featurize(const MolecularGraph& graph) {
  MatX f = MatX::Zero(static_cast<Eigen::Index>(graph.size()), kNumAtomFeatures);
  for (std::size_t i = 0; i < graph.size(); ++i) {
    const Atom& a = graph.atoms[i];
    const int chir = static_cast<int>(a.chirality), hyb = static_cast<int>(a.hybridization);
    detail::check_range(chir, 0, 3, i, "chirality");
    detail::check_range(a.degree, 0, 10, i, "degree");
    detail::check_range(a.charge, -5, 5, i, "charge");
    detail::check_range(a.num_h, 0, 8, i, "num_h");
    detail::check_range(a.radicals, 0, 4, i, "radicals");
    detail::check_range(hyb, 0, 5, i, "hybridization");
    if (a.element < 1) throw ValidationError("atom " + std::to_string(i) + ": element must be a positive atomic number");
    const Eigen::Index r = static_cast<Eigen::Index>(i);
    int off = 0;
    f(r, off + chir) = 1;
    off += 4;
    f(r, off + a.degree) = 1;
    off += 11;
    f(r, off + a.charge + 5) = 1;
    off += 11;
    f(r, off + a.num_h) = 1;
    off += 9;
    f(r, off + a.radicals) = 1;
    off += 5;
    f(r, off + hyb) = 1;
    off += 6;
    f(r, off++) = a.aromatic ? 1 : 0;
    f(r, off++) = a.in_ring ? 1 : 0;
    f(r, off + detail::element_slot(a.element)) = 1;
  }
  return f;
}

/// Precomputed per-molecule inputs.
struct MoleculeContext {
  MolecularGraph graph;
  ZMatrixSpec zspec;
  MatX features;                              // N x 57
  std::vector<int> src, dst;                  // directed edges (both directions per bond)
  MatX edge_features;                         // E x 4 bond-order one-hot
  std::vector<std::vector<int>> channel_atoms;  // atoms defining each z entry
};

/// Context with an explicit Z-matrix (e.g. one relabeled alongside the graph).
inline MoleculeContext make_context(const MolecularGraph& graph, const ZMatrixSpec& zspec) {
  if (zspec.num_atoms() != static_cast<int>(graph.size()))
    throw StructuralError("Z-matrix covers " + std::to_string(zspec.num_atoms()) + " atoms, graph has " +
                          std::to_string(graph.size()));
  MoleculeContext ctx;
  ctx.graph = graph;
  ctx.zspec = zspec;
  ctx.features = featurize(graph);
  ctx.edge_features = MatX::Zero(2 * static_cast<Eigen::Index>(graph.bonds.size()), kNumBondFeatures);
  for (std::size_t k = 0; k < graph.bonds.size(); ++k) {
    const Bond& b = graph.bonds[k];
    ctx.src.push_back(b.i);
    ctx.dst.push_back(b.j);
    ctx.src.push_back(b.j);
    ctx.dst.push_back(b.i);
    const int slot = static_cast<int>(b.order) - 1;
    if (slot < 0 || slot >= kNumBondFeatures) throw ValidationError("bond " + std::to_string(k) + " has an unknown order");
    ctx.edge_features(2 * static_cast<Eigen::Index>(k), slot) = 1;
    ctx.edge_features(2 * static_cast<Eigen::Index>(k) + 1, slot) = 1;
  }
  for (int k = 0; k < ctx.zspec.m(); ++k) ctx.channel_atoms.push_back(ctx.zspec.atoms_of(k));
  return ctx;
}

inline MoleculeContext make_context(const MolecularGraph& graph) { return make_context(graph, build_zmatrix(graph)); }

// ---------------------------------------------------------------------------
// Parameters

struct NetParams {
  NetConfig config;
  std::map<std::string, MatX> values;

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [name, v] : values) n += static_cast<std::size_t>(v.size());
    return n;
  }
  const MatX& at(const std::string& name) const {
    auto it = values.find(name);
    if (it == values.end()) throw StructuralError("missing parameter '" + name + "'");
    return it->second;
  }
};

/// Parameter group of a name: trunk, trans, rot, conf or adaptive.
inline std::string param_group(const std::string& name) { return name.substr(0, name.find('.')); }

/// Uniform(-sqrt(3/fan_in), sqrt(3/fan_in)) weights (unit gain, variance 1/fan_in),
/// zero biases, zero final layers in all three heads.
inline NetParams init_params(const NetConfig& config) {
  config.validate();
  NetParams p;
  p.config = config;
  Rng rng(config.seed);
  const int h = config.hidden_dim, k = config.time_embed_dim;
  auto dense = [&](const std::string& name, int fan_in, int fan_out, bool zero, bool bias = true) {
    MatX w(fan_in, fan_out);
    const double lim = std::sqrt(3.0 / fan_in);
    for (Eigen::Index i = 0; i < w.size(); ++i) w.data()[i] = zero ? 0.0 : rng.uniform(-lim, lim);
    p.values[name + ".W"] = w;
    if (bias) p.values[name + ".b"] = MatX::Zero(1, fan_out);
  };
  dense("trunk.embed", kNumAtomFeatures, h, false);
  dense("trunk.time", k, h, false);
  for (int l = 0; l < config.num_layers; ++l) {
    const std::string base = "trunk.layer" + std::to_string(l);
    dense(base + ".self", h, h, false);
    dense(base + ".msg", h, h, false, false);
    dense(base + ".edge", kNumBondFeatures, h, false, false);
  }
  dense("trans.0", h + 3 + k, h, false);
  dense("trans.1", h, 3, true);
  dense("rot.0", h + 9 + k, h, false);
  dense("rot.1", h, 3, true);
  dense("conf.enc", h + 3 + kNumValueFeatures, h, false);
  dense("conf.0", 3 * h + k, h, false);
  dense("conf.1", h, 1, true);
  p.values["adaptive.log_sigma_sq"] = MatX::Zero(1, 3);
  return p;
}

using ParamVars = std::map<std::string, ad::Var>;

/// Binds every parameter onto the tape; parameters for which trainable(name)
/// is false become constants.
inline ParamVars bind_params(ad::Tape& tape, const NetParams& params,
                             const std::function<bool(const std::string&)>& trainable = {}) {
  ParamVars out;
  for (const auto& [name, v] : params.values)
    out.emplace(name, (trainable && trainable(name)) ? tape.leaf(v) : tape.constant(v));
  return out;
}

// ---------------------------------------------------------------------------
// Forward pass

/// State inputs on the tape for a batch of B items: c (B x 3), q (B x 4) and
/// all internal coordinates stacked item by item (K x 1).
struct StateVars {
  ad::Var c;
  ad::Var q;
  ad::Var z;
};

struct FieldVars {
  ad::Var v_trans;  // B x 3
  ad::Var omega;    // B x 3
  ad::Var v_conf;   // K x 1, same stacking as StateVars::z
  std::vector<int> conf_offset;  // B + 1 offsets into v_conf
};

inline MatX time_embedding(const VecX& t, int dim) {
  const int half = dim / 2;
  MatX e(t.size(), dim);
  for (Eigen::Index b = 0; b < t.size(); ++b) {
    for (int k = 0; k < half; ++k) {
      const double freq = std::exp(std::log(100.0) * k / std::max(half - 1, 1));
      e(b, k) = std::sin(freq * t[b]);
      e(b, half + k) = std::cos(freq * t[b]);
    }
  }
  return e;
}

namespace detail {

inline ad::Var dense(const ParamVars& p, const std::string& name, ad::Var x) {
  return ad::add_row(ad::matmul(x, p.at(name + ".W")), p.at(name + ".b"));
}

inline void check_finite(ad::Var v, const std::string& where) {
  if (!v.val().allFinite()) throw NumericalError("non-finite activation in " + where);
}

}  // namespace detail

inline FieldVars forward(ad::Tape& tape, const ParamVars& p, const NetConfig& config,
                         const std::vector<const MoleculeContext*>& mols, const StateVars& state, const VecX& t,
                         bool detach_frame_heads = false) {
  using namespace ad;
  const Eigen::Index nb = static_cast<Eigen::Index>(mols.size());
  if (nb == 0) throw StructuralError("forward: empty batch");
  if (t.size() != nb || state.c.rows() != nb || state.q.rows() != nb)
    throw StructuralError("forward: batch size mismatch between molecules, time and state");

  // Disjoint union of the batch graphs.
  std::vector<int> node_item, src, dst, entry_atoms, entry_channel, channel_item, r_rows, theta_rows, phi_rows;
  std::vector<int> node_offset(mols.size() + 1, 0);
  FieldVars out;
  out.conf_offset.assign(mols.size() + 1, 0);
  Eigen::Index n_nodes = 0, n_edges = 0;
  for (const MoleculeContext* m : mols) {
    n_nodes += m->features.rows();
    n_edges += m->edge_features.rows();
  }
  MatX x(n_nodes, kNumAtomFeatures), e(n_edges, kNumBondFeatures);
  Eigen::Index eo = 0;
  for (std::size_t b = 0; b < mols.size(); ++b) {
    const MoleculeContext& m = *mols[b];
    const int no = node_offset[b];
    const int co = out.conf_offset[b];
    x.middleRows(no, m.features.rows()) = m.features;
    e.middleRows(eo, m.edge_features.rows()) = m.edge_features;
    eo += m.edge_features.rows();
    for (Eigen::Index i = 0; i < m.features.rows(); ++i) node_item.push_back(static_cast<int>(b));
    for (std::size_t k = 0; k < m.src.size(); ++k) {
      src.push_back(no + m.src[k]);
      dst.push_back(no + m.dst[k]);
    }
    for (int k = 0; k < m.zspec.m(); ++k) {
      for (int a : m.channel_atoms[k]) {
        entry_atoms.push_back(no + a);
        entry_channel.push_back(co + k);
      }
      channel_item.push_back(static_cast<int>(b));
      const auto ch = m.zspec.channel(k);
      (ch == ZMatrixSpec::Channel::kBond ? r_rows : ch == ZMatrixSpec::Channel::kAngle ? theta_rows : phi_rows)
          .push_back(co + k);
    }
    node_offset[b + 1] = no + static_cast<int>(m.features.rows());
    out.conf_offset[b + 1] = co + m.zspec.m();
  }
  const Eigen::Index n_conf = out.conf_offset.back();
  if (state.z.rows() != n_conf || state.z.cols() != 1) throw StructuralError("forward: internal-coordinate stack mismatch");

  const Var temb = tape.constant(time_embedding(t, config.time_embed_dim));
  const Var tproj = silu(goflow::detail::dense(p, "trunk.time", temb));
  Var h = add(silu(goflow::detail::dense(p, "trunk.embed", tape.constant(x))), gather_rows(tproj, node_item));
  goflow::detail::check_finite(h, "embedding");
  if (config.message_passing) {
    const Var ev = tape.constant(e);
    const double res = 1.0 / std::sqrt(static_cast<double>(config.num_layers));
    for (int l = 0; l < config.num_layers; ++l) {
      const std::string base = "trunk.layer" + std::to_string(l);
      Var agg;
      if (n_edges > 0) {
        const Var msg = add(matmul(gather_rows(h, src), p.at(base + ".msg.W")), matmul(ev, p.at(base + ".edge.W")));
        agg = segment_sum(msg, dst, n_nodes);
      } else {
        agg = tape.constant(MatX::Zero(n_nodes, config.hidden_dim));
      }
      const Var pre = add_row(add(matmul(h, p.at(base + ".self.W")), agg), p.at(base + ".self.b"));
      h = add(h, scale(silu(pre), res));
      goflow::detail::check_finite(h, "message-passing layer " + std::to_string(l));
    }
  }
  const Var g = segment_mean(h, node_item, nb);
  const Var g_frozen = detach_frame_heads ? detach(g) : g;

  out.v_trans = goflow::detail::dense(p, "trans.1", silu(goflow::detail::dense(p, "trans.0", concat_cols({g_frozen, state.c, temb}))));
  out.omega = goflow::detail::dense(
      p, "rot.1", silu(goflow::detail::dense(p, "rot.0", concat_cols({g_frozen, quat_to_matrix(state.q), temb}))));
  goflow::detail::check_finite(out.v_trans, "translation head");
  goflow::detail::check_finite(out.omega, "rotation head");

  if (n_conf == 0) {
    out.v_conf = tape.constant(MatX::Zero(0, 1));
    return out;
  }
  // Value features, one column block per channel type: bonds (r - 1.5, log r),
  // angles (cos, sin), torsions (cos k phi, sin k phi for k = 1..3), each with
  // tanh(s u) of the deviation u from the default prior mean at several scales s.
  std::vector<Var> feats;
  std::vector<int> feat_rows;
  auto block = [&](const std::vector<int>& rows, int offset, std::vector<Var> cols, Var u) {
    for (double s : kValueScales) cols.push_back(tanh(scale(u, s)));
    const Var v = concat_cols(cols);
    const Eigen::Index n = static_cast<Eigen::Index>(rows.size()), right = kNumValueFeatures - offset - v.cols();
    std::vector<Var> padded;
    if (offset > 0) padded.push_back(tape.constant(MatX::Zero(n, offset)));
    padded.push_back(v);
    if (right > 0) padded.push_back(tape.constant(MatX::Zero(n, right)));
    feats.push_back(concat_cols(padded));
    feat_rows.insert(feat_rows.end(), rows.begin(), rows.end());
  };
  constexpr int ns = static_cast<int>(std::size(kValueScales));
  if (!r_rows.empty()) {
    const Var zr = gather_rows(state.z, r_rows);
    const Var u = add_scalar(zr, -1.5);
    block(r_rows, 0, {u, log(zr)}, u);
  }
  if (!theta_rows.empty()) {
    const Var za = gather_rows(state.z, theta_rows);
    block(theta_rows, 2 + ns, {cos(za), sin(za)}, add_scalar(cos(za), kCosTetrahedral));
  }
  if (!phi_rows.empty()) {
    const Var zp = gather_rows(state.z, phi_rows);
    std::vector<Var> cols;
    for (int k = 1; k <= 3; ++k) {
      const Var kz = scale(zp, k);
      cols.push_back(cos(kz));
      cols.push_back(sin(kz));
    }
    block(phi_rows, 4 + 2 * ns, cols, sin(zp));
  }
  const Var vf = segment_sum(concat_rows(feats), feat_rows, n_conf);
  MatX onehot = MatX::Zero(n_conf, 3);
  for (std::size_t b = 0; b < mols.size(); ++b)
    for (int k = 0; k < mols[b]->zspec.m(); ++k)
      onehot(out.conf_offset[b] + k, static_cast<int>(mols[b]->zspec.channel(k))) = 1;
  const Var h_entry = segment_sum(gather_rows(h, entry_atoms), entry_channel, n_conf);
  const Var enc = silu(goflow::detail::dense(p, "conf.enc", concat_cols({h_entry, tape.constant(onehot), vf})));
  const Var ctx = segment_mean(enc, channel_item, nb);
  const Var conf_in =
      concat_cols({enc, gather_rows(ctx, channel_item), gather_rows(g, channel_item), gather_rows(temb, channel_item)});
  out.v_conf = goflow::detail::dense(p, "conf.1", silu(goflow::detail::dense(p, "conf.0", conf_in)));
  goflow::detail::check_finite(out.v_conf, "conformation head");
  return out;
}

/// Stacks decomposed states as constant tape inputs.
inline StateVars state_constants(ad::Tape& tape, const std::vector<const DecomposedState*>& states) {
  const Eigen::Index nb = static_cast<Eigen::Index>(states.size());
  MatX c(nb, 3), q(nb, 4);
  Eigen::Index total = 0;
  for (const DecomposedState* s : states) total += s->z.size();
  MatX z(total, 1);
  Eigen::Index off = 0;
  for (Eigen::Index b = 0; b < nb; ++b) {
    const DecomposedState& s = *states[b];
    c.row(b) = s.c.transpose();
    q.row(b) = s.q.coeffs().transpose();
    const VecX zv = s.z.to_vector();
    z.middleRows(off, zv.size()) = zv;
    off += zv.size();
  }
  return {tape.constant(c), tape.constant(q), tape.constant(z)};
}

inline std::vector<FieldOutput> unpack_field(const FieldVars& f) {
  const Eigen::Index nb = f.v_trans.rows();
  std::vector<FieldOutput> out(nb);
  for (Eigen::Index b = 0; b < nb; ++b) {
    out[b].v_trans = f.v_trans.val().row(b).transpose();
    out[b].omega_hat = f.omega.val().row(b).transpose();
    out[b].v_conf = f.v_conf.val().col(0).segment(f.conf_offset[b], f.conf_offset[b + 1] - f.conf_offset[b]);
  }
  return out;
}

/// Evaluates the field for a batch of (molecule, state, t) items without gradients.
inline std::vector<FieldOutput> evaluate_batch(const NetParams& params, const std::vector<const MoleculeContext*>& mols,
                                               const std::vector<const DecomposedState*>& states, const VecX& t) {
  ad::Tape tape;
  const ParamVars p = bind_params(tape, params);
  return unpack_field(forward(tape, p, params.config, mols, state_constants(tape, states), t));
}

inline FieldOutput evaluate(const NetParams& params, const MoleculeContext& mol, const DecomposedState& state, double t) {
  if (!state.z.matches(mol.zspec)) throw StructuralError("state does not match the molecule's Z-matrix");
  VecX tv(1);
  tv[0] = t;
  return evaluate_batch(params, {&mol}, {&state}, tv).front();
}

}  // namespace goflow
