#pragma once

// Synthetic molecules with a known conformer law: fixed bond lengths and
// angles, rotatable torsions drawn from a wrapped Gaussian mixture.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

#include "json.hpp"

#include "goflow/dataset.hpp"
#include "goflow/errors.hpp"
#include "goflow/molecule.hpp"
#include "goflow/random.hpp"
#include "goflow/so3.hpp"
#include "goflow/types.hpp"

namespace goflow {

struct TorsionMode {
  double mean = 0.0;  // rad
  double weight = 1.0;
  double std = 0.2;  // rad
};

enum class ToyFamily { kChain, kFixedRing };

struct ToyDatasetConfig {
  ToyFamily family = ToyFamily::kChain;
  int chain_length = 4;  // chain atoms; for the ring family, the length of the exocyclic tail
  std::vector<TorsionMode> torsion_modes{{-std::numbers::pi / 3, 0.5, 0.2}, {std::numbers::pi / 3, 0.5, 0.2}};
  int n_molecules = 1;
  int conformers_per_molecule = 200;
  std::uint64_t seed = 0;

  void validate() const {
    if (torsion_modes.empty()) throw ValidationError("toy dataset needs at least one torsion mode");
    double w = 0.0;
    for (const TorsionMode& m : torsion_modes) {
      if (!(m.std > 0)) throw ValidationError("torsion mode std must be positive");
      if (!(m.weight >= 0)) throw ValidationError("torsion mode weights must be nonnegative");
      if (!std::isfinite(m.mean)) throw ValidationError("torsion mode mean must be finite");
      w += m.weight;
    }
    if (std::abs(w - 1.0) > 1e-9) throw ValidationError("torsion mode weights must sum to 1");
    if (family == ToyFamily::kChain && chain_length < 2) throw ValidationError("chain_length must be at least 2");
    if (family == ToyFamily::kFixedRing && chain_length < 1) throw ValidationError("ring tail length must be at least 1");
    if (n_molecules < 1) throw ValidationError("n_molecules must be at least 1");
    if (conformers_per_molecule < 1) throw ValidationError("conformers_per_molecule must be at least 1");
  }
};

inline constexpr double kToyBondLength = 1.54;
inline constexpr double kToyBondAngle = 111.0 * std::numbers::pi / 180.0;
inline constexpr int kToyRingSize = 6;

inline const char* family_name(ToyFamily f) { return f == ToyFamily::kChain ? "chain" : "fixed-ring"; }

inline ToyFamily parse_family(const std::string& s) {
  if (s == "chain") return ToyFamily::kChain;
  if (s == "fixed-ring" || s == "ring") return ToyFamily::kFixedRing;
  throw ValidationError("unknown toy family '" + s + "' (expected chain or fixed-ring)");
}

/// Mixture draw, wrapped to (-pi, pi].
inline double sample_torsion(const std::vector<TorsionMode>& modes, Rng& rng) {
  const double u = rng.uniform();
  double acc = 0.0;
  std::size_t k = 0;
  for (; k + 1 < modes.size(); ++k) {
    acc += modes[k].weight;
    if (u < acc) break;
  }
  const double x = std::remainder(rng.normal(modes[k].mean, modes[k].std), 2.0 * std::numbers::pi);
  return x == -std::numbers::pi ? std::numbers::pi : x;
}

/// CDF of the wrapped mixture on (-pi, pi].
inline double torsion_cdf(const std::vector<TorsionMode>& modes, double x) {
  const double pi = std::numbers::pi;
  auto phi = [](double v) { return 0.5 * std::erfc(-v / std::sqrt(2.0)); };
  double f = 0.0;
  for (const TorsionMode& m : modes)
    for (int k = -3; k <= 3; ++k) {
      const double shift = m.mean + 2.0 * pi * k;
      f += m.weight * (phi((x - shift) / m.std) - phi((-pi - shift) / m.std));
    }
  return f;
}

/// Wasserstein-1 distance on (-pi, pi] between the empirical law of `samples` and
/// the mixture: integral of |F_emp - F| evaluated on a fine midpoint grid.
inline double torsion_w1(std::vector<double> samples, const std::vector<TorsionMode>& modes, int grid = 20000) {
  if (samples.empty()) throw ValidationError("torsion_w1 needs samples");
  std::sort(samples.begin(), samples.end());
  const double pi = std::numbers::pi, h = 2.0 * pi / grid;
  double w = 0.0;
  std::size_t below = 0;
  for (int i = 0; i < grid; ++i) {
    const double x = -pi + (i + 0.5) * h;
    while (below < samples.size() && samples[below] <= x) ++below;
    w += std::abs(static_cast<double>(below) / static_cast<double>(samples.size()) - torsion_cdf(modes, x)) * h;
  }
  return w;
}

namespace detail {

/// Places d with |cd| = r, angle(b, c, d) = theta and dihedral(a, b, c, d) = phi.
inline Vec3 nerf(const Vec3& a, const Vec3& b, const Vec3& c, double r, double theta, double phi) {
  const Vec3 bc = (c - b).normalized();
  const Vec3 n = (b - a).cross(bc).normalized();
  const Vec3 m = n.cross(bc);
  const Vec3 d2(-r * std::cos(theta), r * std::sin(theta) * std::cos(phi), r * std::sin(theta) * std::sin(phi));
  return c + d2.x() * bc + d2.y() * m + d2.z() * n;
}

inline MolecularGraph toy_graph(const ToyDatasetConfig& cfg) {
  MolecularGraph g;
  auto add_atom = [&](bool ring) {
    Atom a;
    a.in_ring = ring;
    g.atoms.push_back(a);
  };
  if (cfg.family == ToyFamily::kChain) {
    for (int i = 0; i < cfg.chain_length; ++i) add_atom(false);
    for (int i = 0; i + 1 < cfg.chain_length; ++i) g.bonds.push_back({i, i + 1, BondOrder::kSingle});
  } else {
    for (int i = 0; i < kToyRingSize; ++i) add_atom(true);
    for (int i = 0; i < kToyRingSize; ++i) g.bonds.push_back({i, (i + 1) % kToyRingSize, BondOrder::kSingle});
    for (int i = 0; i < cfg.chain_length; ++i) {
      add_atom(false);
      g.bonds.push_back({i == 0 ? 0 : kToyRingSize + i - 1, kToyRingSize + i, BondOrder::kSingle});
    }
  }
  std::vector<int> deg(g.size(), 0);
  for (const Bond& b : g.bonds) ++deg[b.i], ++deg[b.j];
  for (std::size_t i = 0; i < g.size(); ++i) {
    g.atoms[i].degree = deg[i];
    g.atoms[i].num_h = 4 - deg[i];
  }
  return g;
}

/// Chair ring with all bonds kToyBondLength and all angles kToyBondAngle.
inline std::vector<Vec3> chair_ring() {
  const double d = kToyBondLength;
  const double radius = d * std::sqrt(2.0 * (1.0 - std::cos(kToyBondAngle)) / 3.0);
  const double h = 0.5 * std::sqrt(d * d - radius * radius);
  std::vector<Vec3> p;
  for (int k = 0; k < kToyRingSize; ++k) {
    const double a = k * std::numbers::pi / 3.0;
    p.emplace_back(radius * std::cos(a), radius * std::sin(a), (k % 2 ? -h : h));
  }
  return p;
}

/// Unrotated conformer with the given rotatable torsions.
inline Coords toy_geometry(const ToyDatasetConfig& cfg, const std::vector<double>& torsions) {
  const double r = kToyBondLength, th = kToyBondAngle;
  std::vector<Vec3> p;
  if (cfg.family == ToyFamily::kChain) {
    p.emplace_back(0, 0, 0);
    if (cfg.chain_length > 1) p.emplace_back(r, 0, 0);
    if (cfg.chain_length > 2) p.emplace_back(r - r * std::cos(th), r * std::sin(th), 0);
    for (int i = 3; i < cfg.chain_length; ++i) p.push_back(nerf(p[i - 3], p[i - 2], p[i - 1], r, th, torsions[i - 3]));
  } else {
    p = chair_ring();
    // First tail atom: fixed exocyclic placement; later ones follow the torsions
    // measured from ring atom 1.
    p.push_back(nerf(p[2], p[1], p[0], r, th, std::numbers::pi));
    for (int i = 1; i < cfg.chain_length; ++i) {
      const Vec3& a = i == 1 ? p[1] : i == 2 ? p[0] : p[kToyRingSize + i - 3];
      const Vec3& b = i == 1 ? p[0] : p[kToyRingSize + i - 2];
      p.push_back(nerf(a, b, p[kToyRingSize + i - 1], r, th, torsions[i - 1]));
    }
  }
  Coords x(static_cast<Eigen::Index>(p.size()), 3);
  for (std::size_t i = 0; i < p.size(); ++i) x.row(static_cast<Eigen::Index>(i)) = p[i].transpose();
  return x;
}

}  // namespace detail

/// Number of sampled torsions per conformer.
inline int toy_num_torsions(const ToyDatasetConfig& cfg) {
  return cfg.family == ToyFamily::kChain ? std::max(cfg.chain_length - 3, 0) : std::max(cfg.chain_length - 1, 0);
}

/// Atom quadruples (a, b, c, d) whose dihedral is drawn from the mixture.
inline std::vector<std::array<int, 4>> toy_torsion_atoms(const ToyDatasetConfig& cfg) {
  std::vector<std::array<int, 4>> out;
  if (cfg.family == ToyFamily::kChain) {
    for (int i = 3; i < cfg.chain_length; ++i) out.push_back({i - 3, i - 2, i - 1, i});
  } else {
    const int t = kToyRingSize;
    for (int i = 1; i < cfg.chain_length; ++i)
      out.push_back({i == 1 ? 1 : i == 2 ? 0 : t + i - 3, i == 1 ? 0 : t + i - 2, t + i - 1, t + i});
  }
  return out;
}

inline nlohmann::json toy_metadata(const ToyDatasetConfig& cfg) {
  nlohmann::json modes = nlohmann::json::array();
  for (const TorsionMode& m : cfg.torsion_modes) modes.push_back({{"mean", m.mean}, {"weight", m.weight}, {"std", m.std}});
  nlohmann::json tors = nlohmann::json::array();
  for (const auto& q : toy_torsion_atoms(cfg)) tors.push_back(q);
  return {{"generator", "toy"},
          {"family", family_name(cfg.family)},
          {"chain_length", cfg.chain_length},
          {"bond_length", kToyBondLength},
          {"bond_angle", kToyBondAngle},
          {"torsion_modes", modes},
          {"torsion_atoms", tors},
          {"n_molecules", cfg.n_molecules},
          {"conformers_per_molecule", cfg.conformers_per_molecule},
          {"seed", cfg.seed}};
}

/// Inverse of toy_metadata.
inline ToyDatasetConfig toy_config_from_metadata(const nlohmann::json& meta) {
  try {
    ToyDatasetConfig cfg;
    cfg.family = parse_family(meta.at("family").get<std::string>());
    cfg.chain_length = meta.at("chain_length").get<int>();
    cfg.torsion_modes.clear();
    for (const auto& m : meta.at("torsion_modes"))
      cfg.torsion_modes.push_back({m.at("mean").get<double>(), m.at("weight").get<double>(), m.at("std").get<double>()});
    cfg.n_molecules = meta.at("n_molecules").get<int>();
    cfg.conformers_per_molecule = meta.at("conformers_per_molecule").get<int>();
    cfg.seed = meta.at("seed").get<std::uint64_t>();
    cfg.validate();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("toy metadata is incomplete: ") + e.what());
  }
}

/// Conformers are centered at the origin with a uniformly random orientation.
inline Dataset generate_toy_dataset(const ToyDatasetConfig& cfg) {
  cfg.validate();
  Rng rng(cfg.seed);
  const MolecularGraph graph = detail::toy_graph(cfg);
  const std::string meta = toy_metadata(cfg).dump();
  const int nt = toy_num_torsions(cfg);
  Dataset data;
  for (int m = 0; m < cfg.n_molecules; ++m) {
    MoleculeRecord rec;
    rec.name = "toy_" + std::string(family_name(cfg.family)) + "_" + std::to_string(m);
    rec.graph = graph;
    rec.meta_json = meta;
    for (int k = 0; k < cfg.conformers_per_molecule; ++k) {
      std::vector<double> tors(nt);
      for (double& t : tors) t = sample_torsion(cfg.torsion_modes, rng);
      Coords x = detail::toy_geometry(cfg, tors);
      x.rowwise() -= x.colwise().mean();
      rec.conformers.push_back(apply_rotation(random_rotation(rng), x));
    }
    data.push_back(std::move(rec));
  }
  return data;
}

}  // namespace goflow
