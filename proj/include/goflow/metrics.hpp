#pragma once

// Kabsch-aligned RMSD and coverage/matching metrics over conformer ensembles.
// Atoms are matched by index; no symmetry correction.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/SVD>

#include "json.hpp"

#include "goflow/errors.hpp"
#include "goflow/molecule.hpp"
#include "goflow/types.hpp"

namespace goflow {

/// RMSD after centering both sets and applying the optimal proper rotation.
inline double kabsch_rmsd(const Coords& x, const Coords& y) {
  if (x.rows() != y.rows())
    throw ValidationError("kabsch_rmsd: atom counts differ (" + std::to_string(x.rows()) + " vs " +
                          std::to_string(y.rows()) + ")");
  if (x.rows() < 1) throw ValidationError("kabsch_rmsd: need at least one atom");
  if (!x.allFinite() || !y.allFinite()) throw ValidationError("kabsch_rmsd: non-finite coordinates");
  const Coords xc = x.rowwise() - x.colwise().mean();
  const Coords yc = y.rowwise() - y.colwise().mean();
  if (xc == yc) return 0.0;
  const Eigen::Matrix3d h = xc.transpose() * yc;
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
  if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0) d(2, 2) = -1.0;
  const Eigen::Matrix3d r = svd.matrixV() * d * svd.matrixU().transpose();
  const Coords aligned = xc * r.transpose();
  return std::sqrt((aligned - yc).squaredNorm() / static_cast<double>(x.rows()));
}

/// Rows of `x` whose mask entry is true; an empty mask keeps every atom.
inline Coords select_atoms(const Coords& x, const std::vector<bool>& mask) {
  if (mask.empty()) return x;
  if (mask.size() != static_cast<std::size_t>(x.rows()))
    throw ValidationError("atom mask has " + std::to_string(mask.size()) + " entries for " +
                          std::to_string(x.rows()) + " atoms");
  Coords out(std::count(mask.begin(), mask.end(), true), 3);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    if (mask[i]) out.row(k++) = x.row(i);
  return out;
}

inline std::vector<bool> heavy_atom_mask(const MolecularGraph& g) {
  std::vector<bool> mask(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) mask[i] = g.atoms[i].heavy();
  return mask;
}

struct MetricsReport {
  double cov_r = 0.0;  // percent
  double mat_r = 0.0;  // Angstrom
  double cov_p = 0.0;
  double mat_p = 0.0;
  double delta = 0.0;
  int n_generated = 0;
  int n_reference = 0;
};

/// RMSD matrix with references as rows and generated conformers as columns.
inline MatX rmsd_matrix(const std::vector<Coords>& generated, const std::vector<Coords>& reference,
                        const std::vector<bool>& mask = {}) {
  if (generated.empty()) throw ValidationError("generated conformer set is empty");
  if (reference.empty()) throw ValidationError("reference conformer set is empty");
  const Eigen::Index n = reference.front().rows();
  for (const auto* set : {&generated, &reference})
    for (const Coords& c : *set)
      if (c.rows() != n) throw ValidationError("conformers have inconsistent atom counts");
  std::vector<Coords> g, r;
  for (const Coords& c : generated) g.push_back(select_atoms(c, mask));
  for (const Coords& c : reference) r.push_back(select_atoms(c, mask));
  MatX m(r.size(), g.size());
  for (std::size_t i = 0; i < r.size(); ++i)
    for (std::size_t j = 0; j < g.size(); ++j) m(i, j) = kabsch_rmsd(g[j], r[i]);
  return m;
}

inline MetricsReport cov_mat_from_matrix(const MatX& d, double delta) {
  if (!(delta >= 0)) throw ValidationError("delta must be nonnegative");
  if (d.rows() == 0 || d.cols() == 0) throw ValidationError("conformer sets must be nonempty");
  MetricsReport rep;
  rep.delta = delta;
  rep.n_reference = static_cast<int>(d.rows());
  rep.n_generated = static_cast<int>(d.cols());
  const VecX best_ref = d.rowwise().minCoeff();
  const VecX best_gen = d.colwise().minCoeff().transpose();
  rep.cov_r = 100.0 * static_cast<double>((best_ref.array() <= delta).count()) / static_cast<double>(d.rows());
  rep.cov_p = 100.0 * static_cast<double>((best_gen.array() <= delta).count()) / static_cast<double>(d.cols());
  // Sequential sums keep the result independent of vectorization.
  auto mean = [](const VecX& v) {
    double acc = 0.0;
    for (Eigen::Index i = 0; i < v.size(); ++i) acc += v[i];
    return acc / static_cast<double>(v.size());
  };
  rep.mat_r = mean(best_ref);
  rep.mat_p = mean(best_gen);
  return rep;
}

inline MetricsReport cov_mat(const std::vector<Coords>& generated, const std::vector<Coords>& reference, double delta,
                             const std::vector<bool>& mask = {}) {
  if (!(delta >= 0)) throw ValidationError("delta must be nonnegative");
  return cov_mat_from_matrix(rmsd_matrix(generated, reference, mask), delta);
}

// ---------------------------------------------------------------------------
// Aggregation across molecules and output.

struct MoleculeMetrics {
  std::string name;
  MetricsReport report;
};

struct Summary {
  double mean = 0.0;
  double median = 0.0;
};

inline Summary summarize(std::vector<double> v) {
  if (v.empty()) throw ValidationError("nothing to summarize");
  Summary s;
  double acc = 0.0;
  for (double x : v) acc += x;
  s.mean = acc / static_cast<double>(v.size());
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  s.median = v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
  return s;
}

struct AggregateReport {
  std::vector<MoleculeMetrics> molecules;
  Summary cov_r, mat_r, cov_p, mat_p;
  double delta = 0.0;
};

inline AggregateReport aggregate(std::vector<MoleculeMetrics> per_molecule) {
  if (per_molecule.empty()) throw ValidationError("no molecules to aggregate");
  AggregateReport a;
  std::vector<double> cr, mr, cp, mp;
  for (const auto& m : per_molecule) {
    cr.push_back(m.report.cov_r);
    mr.push_back(m.report.mat_r);
    cp.push_back(m.report.cov_p);
    mp.push_back(m.report.mat_p);
  }
  a.cov_r = summarize(cr);
  a.mat_r = summarize(mr);
  a.cov_p = summarize(cp);
  a.mat_p = summarize(mp);
  a.delta = per_molecule.front().report.delta;
  a.molecules = std::move(per_molecule);
  return a;
}

inline nlohmann::json to_json(const MetricsReport& r) {
  return {{"cov_r", r.cov_r}, {"mat_r", r.mat_r}, {"cov_p", r.cov_p},          {"mat_p", r.mat_p},
          {"delta", r.delta}, {"n_generated", r.n_generated}, {"n_reference", r.n_reference}};
}

inline nlohmann::json to_json(const AggregateReport& a) {
  nlohmann::json j;
  j["delta"] = a.delta;
  for (const auto& [key, s] : {std::pair{"cov_r", a.cov_r}, {"mat_r", a.mat_r}, {"cov_p", a.cov_p}, {"mat_p", a.mat_p}})
    j[key] = {{"mean", s.mean}, {"median", s.median}};
  j["molecules"] = nlohmann::json::array();
  for (const auto& m : a.molecules) {
    nlohmann::json e = to_json(m.report);
    e["name"] = m.name;
    j["molecules"].push_back(e);
  }
  return j;
}

inline std::string format_table(const AggregateReport& a) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "delta = %.3f A, %zu molecule(s)\n", a.delta, a.molecules.size());
  out += buf;
  std::snprintf(buf, sizeof buf, "%-6s %10s %10s %10s %10s\n", "", "COV-R(%)", "MAT-R(A)", "COV-P(%)", "MAT-P(A)");
  out += buf;
  std::snprintf(buf, sizeof buf, "%-6s %10.2f %10.4f %10.2f %10.4f\n", "Mean", a.cov_r.mean, a.mat_r.mean,
                a.cov_p.mean, a.mat_p.mean);
  out += buf;
  std::snprintf(buf, sizeof buf, "%-6s %10.2f %10.4f %10.2f %10.4f\n", "Med", a.cov_r.median, a.mat_r.median,
                a.cov_p.median, a.mat_p.median);
  out += buf;
  return out;
}

}  // namespace goflow
