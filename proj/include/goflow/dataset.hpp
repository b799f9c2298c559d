#pragma once

#include <string>
#include <vector>

#include "goflow/errors.hpp"
#include "goflow/molecule.hpp"
#include "goflow/types.hpp"

namespace goflow {

/// One molecule with its conformer ensemble.
struct MoleculeRecord {
  std::string name;
  MolecularGraph graph;
  std::vector<Coords> conformers;
  std::string split = "train";
  std::string meta_json;  // opaque metadata, serialized JSON object or empty

  void validate() const {
    graph.validate();
    for (std::size_t k = 0; k < conformers.size(); ++k) {
      if (conformers[k].rows() != static_cast<Eigen::Index>(graph.size()))
        throw ValidationError("molecule '" + name + "' conformer " + std::to_string(k) + " has " +
                              std::to_string(conformers[k].rows()) + " atoms, graph has " +
                              std::to_string(graph.size()));
      if (!conformers[k].allFinite())
        throw ValidationError("molecule '" + name + "' conformer " + std::to_string(k) + " has non-finite coordinates");
    }
  }
};

using Dataset = std::vector<MoleculeRecord>;

/// Records whose split equals `split`; an empty filter keeps everything.
inline Dataset filter_split(const Dataset& data, const std::string& split) {
  if (split.empty()) return data;
  Dataset out;
  for (const MoleculeRecord& r : data)
    if (r.split == split) out.push_back(r);
  return out;
}

}  // namespace goflow
