#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "goflow/errors.hpp"

namespace goflow {

enum class Chirality : int { kUnspecified = 0, kTetrahedralCW = 1, kTetrahedralCCW = 2, kOther = 3 };
enum class Hybridization : int { kSP = 0, kSP2 = 1, kSP3 = 2, kSP3D = 3, kSP3D2 = 4, kOther = 5 };
enum class BondOrder : int { kSingle = 1, kDouble = 2, kTriple = 3, kAromatic = 4 };

/// One atom with its atomic features. Ranges: degree 0..10, charge -5..5,
/// num_h 0..8, radicals 0..4.
struct Atom {
  int element = 6;  // atomic number
  Chirality chirality = Chirality::kUnspecified;
  int degree = 0;
  int charge = 0;
  int num_h = 0;
  int radicals = 0;
  Hybridization hybridization = Hybridization::kSP3;
  bool aromatic = false;
  bool in_ring = false;

  bool heavy() const { return element > 1; }
};

struct Bond {
  int i = 0;
  int j = 0;
  BondOrder order = BondOrder::kSingle;
};

struct MolecularGraph {
  std::vector<Atom> atoms;
  std::vector<Bond> bonds;

  std::size_t size() const { return atoms.size(); }

  std::vector<std::vector<int>> adjacency() const {
    std::vector<std::vector<int>> adj(atoms.size());
    for (const Bond& b : bonds) {
      adj[b.i].push_back(b.j);
      adj[b.j].push_back(b.i);
    }
    return adj;
  }

  /// Connected components as sorted atom-index lists.
  std::vector<std::vector<int>> components() const {
    const auto adj = adjacency();
    std::vector<int> label(atoms.size(), -1);
    std::vector<std::vector<int>> out;
    for (std::size_t s = 0; s < atoms.size(); ++s) {
      if (label[s] >= 0) continue;
      std::vector<int> comp{static_cast<int>(s)};
      label[s] = static_cast<int>(out.size());
      for (std::size_t k = 0; k < comp.size(); ++k) {
        for (int nb : adj[comp[k]]) {
          if (label[nb] < 0) {
            label[nb] = label[s];
            comp.push_back(nb);
          }
        }
      }
      std::sort(comp.begin(), comp.end());
      out.push_back(std::move(comp));
    }
    return out;
  }

  /// Bond indices in range, no self-bonds, no duplicates. Connectivity is checked
  /// separately (build_zmatrix reports the components).
  void validate() const {
    const int n = static_cast<int>(atoms.size());
    if (n == 0) throw ValidationError("molecular graph has no atoms");
    std::set<std::pair<int, int>> seen;
    for (std::size_t k = 0; k < bonds.size(); ++k) {
      const Bond& b = bonds[k];
      if (b.i < 0 || b.i >= n || b.j < 0 || b.j >= n) {
        throw ValidationError("bond " + std::to_string(k) + " (" + std::to_string(b.i) + ", " +
                              std::to_string(b.j) + ") references an atom index outside [0, " +
                              std::to_string(n) + ")");
      }
      if (b.i == b.j) throw ValidationError("bond " + std::to_string(k) + " is a self-bond on atom " + std::to_string(b.i));
      const auto key = std::minmax(b.i, b.j);
      if (!seen.insert({key.first, key.second}).second) {
        throw ValidationError("bond " + std::to_string(k) + " duplicates bond (" + std::to_string(key.first) + ", " +
                              std::to_string(key.second) + ")");
      }
    }
  }
};

/// Relabels atoms: new index of old atom i is perm[i].
inline MolecularGraph permute_graph(const MolecularGraph& g, const std::vector<int>& perm) {
  MolecularGraph out;
  out.atoms.resize(g.atoms.size());
  for (std::size_t i = 0; i < g.atoms.size(); ++i) out.atoms[perm[i]] = g.atoms[i];
  out.bonds = g.bonds;
  for (Bond& b : out.bonds) {
    b.i = perm[b.i];
    b.j = perm[b.j];
  }
  return out;
}

inline const char* element_symbol(int z) {
  static const std::array<const char*, 36> kSymbols = {
      "X",  "H",  "He", "Li", "Be", "B",  "C",  "N",  "O",  "F",  "Ne", "Na",
      "Mg", "Al", "Si", "P",  "S",  "Cl", "Ar", "K",  "Ca", "Sc", "Ti", "V",
      "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br"};
  return (z >= 0 && z < static_cast<int>(kSymbols.size())) ? kSymbols[z] : "X";
}

inline int element_number(const std::string& sym) {
  for (int z = 1; z < 36; ++z)
    if (sym == element_symbol(z)) return z;
  if (sym == "I") return 53;
  throw ValidationError("unknown element symbol '" + sym + "'");
}

}  // namespace goflow
