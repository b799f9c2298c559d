#pragma once

// File formats: line-oriented JSON molecule records, binary checkpoints, loss
// CSV and decomposed-state records.

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "goflow/dataset.hpp"
#include "goflow/errors.hpp"
#include "goflow/molecule.hpp"
#include "goflow/training.hpp"
#include "goflow/velocity_net.hpp"
#include "goflow/zmatrix.hpp"

namespace goflow {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Atom and bond feature names

namespace detail {

inline const std::vector<std::string>& chirality_names() {
  static const std::vector<std::string> k{"unspecified", "cw", "ccw", "other"};
  return k;
}

inline const std::vector<std::string>& hybridization_names() {
  static const std::vector<std::string> k{"sp", "sp2", "sp3", "sp3d", "sp3d2", "other"};
  return k;
}

/// Accepts either a name from `names` or its integer index.
inline int parse_enum(const json& v, const std::vector<std::string>& names, const std::string& what) {
  if (v.is_number_integer()) {
    const int k = v.get<int>();
    if (k < 0 || k >= static_cast<int>(names.size())) throw ValidationError(what + " index " + std::to_string(k) + " out of range");
    return k;
  }
  if (v.is_string()) {
    std::string s = v.get<std::string>();
    for (char& ch : s) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    for (std::size_t k = 0; k < names.size(); ++k)
      if (names[k] == s) return static_cast<int>(k);
    throw ValidationError("unknown " + what + " '" + v.get<std::string>() + "'");
  }
  throw ValidationError(what + " must be a string or an integer");
}

inline BondOrder parse_bond_order(const json& v) {
  if (v.is_number_integer()) {
    const int k = v.get<int>();
    if (k >= 1 && k <= 4) return static_cast<BondOrder>(k);
  } else if (v.is_number()) {
    if (v.get<double>() == 1.5) return BondOrder::kAromatic;
  } else if (v.is_string()) {
    const std::string s = v.get<std::string>();
    if (s == "single") return BondOrder::kSingle;
    if (s == "double") return BondOrder::kDouble;
    if (s == "triple") return BondOrder::kTriple;
    if (s == "aromatic") return BondOrder::kAromatic;
  }
  throw ValidationError("bond order must be 1, 2, 3, 4 (aromatic), 1.5 or a name, got " + v.dump());
}

inline int int_field(const json& obj, const char* key, int fallback) {
  if (!obj.contains(key)) return fallback;
  const json& v = obj.at(key);
  if (!v.is_number_integer()) throw ValidationError(std::string("atom field '") + key + "' must be an integer");
  return v.get<int>();
}

inline bool bool_field(const json& obj, const char* key) {
  if (!obj.contains(key)) return false;
  const json& v = obj.at(key);
  if (v.is_boolean()) return v.get<bool>();
  if (v.is_number_integer()) return v.get<int>() != 0;
  throw ValidationError(std::string("atom field '") + key + "' must be a boolean");
}

inline Atom parse_atom(const json& a, std::size_t index) {
  const std::string where = "atom " + std::to_string(index) + ": ";
  try {
    if (!a.is_object()) throw ValidationError("expected an object");
    if (!a.contains("element")) throw ValidationError("missing 'element'");
    Atom atom;
    const json& e = a.at("element");
    if (e.is_number_integer())
      atom.element = e.get<int>();
    else if (e.is_string())
      atom.element = element_number(e.get<std::string>());
    else
      throw ValidationError("'element' must be a symbol or an atomic number");
    if (atom.element < 1 || atom.element > 118) throw ValidationError("atomic number " + std::to_string(atom.element) + " out of range");
    if (a.contains("chirality")) atom.chirality = static_cast<Chirality>(parse_enum(a.at("chirality"), chirality_names(), "chirality"));
    if (a.contains("hybridization"))
      atom.hybridization = static_cast<Hybridization>(parse_enum(a.at("hybridization"), hybridization_names(), "hybridization"));
    atom.degree = int_field(a, "degree", 0);
    atom.charge = int_field(a, "charge", 0);
    atom.num_h = int_field(a, "num_h", 0);
    atom.radicals = int_field(a, "radicals", 0);
    atom.aromatic = bool_field(a, "aromatic");
    atom.in_ring = bool_field(a, "in_ring");
    if (atom.degree < 0 || atom.degree > 10) throw ValidationError("degree must be in 0..10");
    if (atom.charge < -5 || atom.charge > 5) throw ValidationError("charge must be in -5..5");
    if (atom.num_h < 0 || atom.num_h > 8) throw ValidationError("num_h must be in 0..8");
    if (atom.radicals < 0 || atom.radicals > 4) throw ValidationError("radicals must be in 0..4");
    return atom;
  } catch (const ValidationError& err) {
    throw ValidationError(where + err.what());
  }
}

inline Coords parse_conformer(const json& c, std::size_t index) {
  const std::string where = "conformer " + std::to_string(index) + ": ";
  if (!c.is_array()) throw ValidationError(where + "expected an array of [x, y, z] rows");
  Coords x(static_cast<Eigen::Index>(c.size()), 3);
  for (std::size_t i = 0; i < c.size(); ++i) {
    const json& row = c[i];
    if (!row.is_array() || row.size() != 3)
      throw ValidationError(where + "atom " + std::to_string(i) + " must be a 3-element array");
    for (int d = 0; d < 3; ++d) {
      if (!row[d].is_number()) throw ValidationError(where + "atom " + std::to_string(i) + " has a non-numeric coordinate");
      x(static_cast<Eigen::Index>(i), d) = row[d].get<double>();
    }
  }
  return x;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Molecule records

/// Parses one molecule object. Errors name the offending atom, bond or conformer.
inline MoleculeRecord record_from_json(const json& j, const std::string& default_name = "") {
  if (!j.is_object()) throw ValidationError("record must be a JSON object");
  static const std::set<std::string> kKnown{"name", "split", "meta", "atoms", "bonds", "conformers"};
  for (const auto& [key, v] : j.items())
    if (!kKnown.count(key)) throw ValidationError("unknown field '" + key + "'");
  MoleculeRecord rec;
  rec.name = default_name;
  if (j.contains("name")) {
    if (!j.at("name").is_string()) throw ValidationError("'name' must be a string");
    rec.name = j.at("name").get<std::string>();
  }
  if (j.contains("split")) {
    if (!j.at("split").is_string()) throw ValidationError("'split' must be a string");
    rec.split = j.at("split").get<std::string>();
  }
  if (j.contains("meta")) {
    if (!j.at("meta").is_object()) throw ValidationError("'meta' must be an object");
    rec.meta_json = j.at("meta").dump();
  }
  if (!j.contains("atoms") || !j.at("atoms").is_array()) throw ValidationError("missing 'atoms' array");
  const json& atoms = j.at("atoms");
  for (std::size_t i = 0; i < atoms.size(); ++i) rec.graph.atoms.push_back(detail::parse_atom(atoms[i], i));
  if (j.contains("bonds")) {
    const json& bonds = j.at("bonds");
    if (!bonds.is_array()) throw ValidationError("'bonds' must be an array");
    for (std::size_t k = 0; k < bonds.size(); ++k) {
      const json& b = bonds[k];
      if (!b.is_array() || b.size() < 2 || b.size() > 3 || !b[0].is_number_integer() || !b[1].is_number_integer())
        throw ValidationError("bond " + std::to_string(k) + " must be [i, j] or [i, j, order]");
      Bond bond{b[0].get<int>(), b[1].get<int>(), BondOrder::kSingle};
      if (b.size() == 3) {
        try {
          bond.order = detail::parse_bond_order(b[2]);
        } catch (const ValidationError& e) {
          throw ValidationError("bond " + std::to_string(k) + ": " + e.what());
        }
      }
      rec.graph.bonds.push_back(bond);
    }
  }
  if (j.contains("conformers")) {
    const json& confs = j.at("conformers");
    if (!confs.is_array()) throw ValidationError("'conformers' must be an array");
    for (std::size_t k = 0; k < confs.size(); ++k) rec.conformers.push_back(detail::parse_conformer(confs[k], k));
  }
  rec.validate();
  if (rec.split == "train" && rec.conformers.empty()) throw ValidationError("training molecule has no conformers");
  return rec;
}

inline json record_to_json(const MoleculeRecord& rec) {
  json j;
  j["name"] = rec.name;
  j["split"] = rec.split;
  if (!rec.meta_json.empty()) j["meta"] = json::parse(rec.meta_json);
  json atoms = json::array();
  for (const Atom& a : rec.graph.atoms) {
    atoms.push_back({{"element", element_symbol(a.element)},
                     {"chirality", detail::chirality_names()[static_cast<int>(a.chirality)]},
                     {"degree", a.degree},
                     {"charge", a.charge},
                     {"num_h", a.num_h},
                     {"radicals", a.radicals},
                     {"hybridization", detail::hybridization_names()[static_cast<int>(a.hybridization)]},
                     {"aromatic", a.aromatic},
                     {"in_ring", a.in_ring}});
    if (std::string(element_symbol(a.element)) == "X") atoms.back()["element"] = a.element;
  }
  j["atoms"] = atoms;
  json bonds = json::array();
  for (const Bond& b : rec.graph.bonds) bonds.push_back({b.i, b.j, static_cast<int>(b.order)});
  j["bonds"] = bonds;
  json confs = json::array();
  for (const Coords& x : rec.conformers) {
    json rows = json::array();
    for (Eigen::Index i = 0; i < x.rows(); ++i) rows.push_back({x(i, 0), x(i, 1), x(i, 2)});
    confs.push_back(rows);
  }
  j["conformers"] = confs;
  return j;
}

/// Parses a dataset from a stream; `source` labels error messages.
inline Dataset read_dataset(std::istream& in, const std::string& source) {
  Dataset data;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = source + ":" + std::to_string(line_no) + " (record " + std::to_string(data.size()) + ")";
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw ValidationError(where + ": malformed JSON: " + e.what());
    }
    try {
      data.push_back(record_from_json(j, "mol" + std::to_string(data.size())));
    } catch (const Error& e) {
      throw ValidationError(where + ": " + e.what());
    }
  }
  if (data.empty()) throw ValidationError(source + ": no molecule records");
  return data;
}

inline Dataset load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open dataset '" + path + "'");
  return read_dataset(in, path);
}

inline void write_dataset(std::ostream& out, const Dataset& data) {
  for (const MoleculeRecord& rec : data) out << record_to_json(rec).dump() << '\n';
}

/// One record per line; doubles are written in shortest round-trip form.
inline void write_dataset(const std::string& path, const Dataset& data) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write '" + path + "'");
  write_dataset(out, data);
  if (!out) throw ValidationError("write to '" + path + "' failed");
}

// ---------------------------------------------------------------------------
// Import from bare coordinate lists

namespace detail {

/// Atoms lying on a cycle: endpoints of non-bridge bonds.
inline std::vector<bool> ring_atoms(const MolecularGraph& g) {
  const int n = static_cast<int>(g.size());
  std::vector<std::vector<std::pair<int, int>>> adj(n);
  for (std::size_t k = 0; k < g.bonds.size(); ++k) {
    adj[g.bonds[k].i].push_back({g.bonds[k].j, static_cast<int>(k)});
    adj[g.bonds[k].j].push_back({g.bonds[k].i, static_cast<int>(k)});
  }
  std::vector<int> disc(n, -1), low(n, 0);
  std::vector<bool> bridge(g.bonds.size(), false);
  int timer = 0;
  std::function<void(int, int)> dfs = [&](int u, int via) {
    disc[u] = low[u] = timer++;
    for (auto [v, k] : adj[u]) {
      if (k == via) continue;
      if (disc[v] >= 0) {
        low[u] = std::min(low[u], disc[v]);
      } else {
        dfs(v, k);
        low[u] = std::min(low[u], low[v]);
        if (low[v] > disc[u]) bridge[k] = true;
      }
    }
  };
  for (int s = 0; s < n; ++s)
    if (disc[s] < 0) dfs(s, -1);
  std::vector<bool> ring(n, false);
  for (std::size_t k = 0; k < g.bonds.size(); ++k)
    if (!bridge[k]) ring[g.bonds[k].i] = ring[g.bonds[k].j] = true;
  return ring;
}

}  // namespace detail

/// Builds a record from {name?, elements: [...], bonds: [[i, j, order?]], conformers}.
/// Degree, hydrogen count, aromaticity and ring membership are derived from the
/// bond list; other features keep their defaults.
inline MoleculeRecord record_from_coordinate_lists(const json& j, const std::string& default_name) {
  if (!j.is_object() || !j.contains("elements") || !j.at("elements").is_array())
    throw ValidationError("coordinate-list record needs an 'elements' array");
  json atoms = json::array();
  for (const json& e : j.at("elements")) atoms.push_back({{"element", e}});
  json rec = {{"atoms", atoms}, {"bonds", j.value("bonds", json::array())}, {"conformers", j.value("conformers", json::array())}};
  rec["name"] = j.value("name", default_name);
  if (j.contains("split")) rec["split"] = j.at("split");
  MoleculeRecord out = record_from_json(rec, default_name);
  std::vector<int> deg(out.graph.size(), 0), nh(out.graph.size(), 0);
  for (const Bond& b : out.graph.bonds) {
    ++deg[b.i];
    ++deg[b.j];
    if (out.graph.atoms[b.j].element == 1) ++nh[b.i];
    if (out.graph.atoms[b.i].element == 1) ++nh[b.j];
    if (b.order == BondOrder::kAromatic) out.graph.atoms[b.i].aromatic = out.graph.atoms[b.j].aromatic = true;
  }
  const std::vector<bool> ring = detail::ring_atoms(out.graph);
  for (std::size_t i = 0; i < out.graph.size(); ++i) {
    Atom& a = out.graph.atoms[i];
    a.degree = std::min(deg[i], 10);
    a.num_h = std::min(nh[i], 8);
    a.in_ring = ring[i];
    if (a.aromatic) a.hybridization = Hybridization::kSP2;
    if (a.element == 1) a.hybridization = Hybridization::kOther;
  }
  return out;
}

inline Dataset import_coordinate_lists(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path + "'");
  Dataset data;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      data.push_back(record_from_coordinate_lists(json::parse(line), "mol" + std::to_string(data.size())));
    } catch (const json::exception& e) {
      throw ValidationError(path + ":" + std::to_string(line_no) + ": malformed JSON: " + e.what());
    } catch (const Error& e) {
      throw ValidationError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (data.empty()) throw ValidationError(path + ": no molecule records");
  return data;
}

// ---------------------------------------------------------------------------
// Decomposed states

inline json state_to_json(const DecomposedState& s) {
  auto vec = [](const VecX& v) { return std::vector<double>(v.data(), v.data() + v.size()); };
  return {{"c", {s.c.x(), s.c.y(), s.c.z()}},
          {"q", {s.q.w, s.q.x, s.q.y, s.q.z}},
          {"r", vec(s.z.r)},
          {"theta", vec(s.z.theta)},
          {"phi", vec(s.z.phi)},
          {"clamped_angles", s.clamped_angles}};
}

/// One line per conformer: molecule name, conformer index, Z-matrix root and (c, q, z).
inline void write_decomposition(std::ostream& out, const Dataset& data) {
  for (const MoleculeRecord& rec : data) {
    const ZMatrixSpec spec = build_zmatrix(rec.graph);
    json order = json::array();
    for (const ZEntry& e : spec.entries) order.push_back({e.atom, e.parent, e.grandparent, e.great_grandparent});
    for (std::size_t k = 0; k < rec.conformers.size(); ++k) {
      json j = state_to_json(decompose(rec.conformers[k], spec));
      j["molecule"] = rec.name;
      j["conformer"] = k;
      j["zmatrix"] = order;
      out << j.dump() << '\n';
    }
  }
}

// ---------------------------------------------------------------------------
// Loss history

inline void write_loss_csv(std::ostream& out, const std::vector<LossRecord>& history) {
  out << "stage,step,l_trans,l_rot,l_conf,l_flow,total\n";
  out.precision(17);
  for (const LossRecord& r : history)
    out << r.stage << ',' << r.step << ',' << r.l_trans << ',' << r.l_rot << ',' << r.l_conf << ',' << r.l_flow << ','
        << r.total << '\n';
}

inline void write_loss_csv(const std::string& path, const std::vector<LossRecord>& history) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write '" + path + "'");
  write_loss_csv(out, history);
}

// ---------------------------------------------------------------------------
// Checkpoints: 8-byte magic, u32 version, u64 header length, JSON header,
// then every parameter as little-endian f64 in row-major order.

inline constexpr char kCheckpointMagic[8] = {'G', 'O', 'F', 'L', 'O', 'W', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  NetParams params;
  int completed_stage = 0;
  json meta = json::object();
};

namespace detail {

template <typename T>
void put_le(std::ostream& out, T v) {
  unsigned char b[sizeof(T)];
  std::memcpy(b, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  out.write(reinterpret_cast<const char*>(b), sizeof(T));
}

template <typename T>
T get_le(std::istream& in, const std::string& what) {
  unsigned char b[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(b), sizeof(T))) throw ValidationError("checkpoint truncated while reading " + what);
  if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(T));
  T v;
  std::memcpy(&v, b, sizeof(T));
  return v;
}

inline json net_config_json(const NetConfig& c) {
  return {{"hidden_dim", c.hidden_dim}, {"num_layers", c.num_layers}, {"time_embed_dim", c.time_embed_dim},
          {"message_passing", c.message_passing}, {"seed", c.seed}};
}

inline NetConfig net_config_from_json(const json& j) {
  NetConfig c;
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.num_layers = j.at("num_layers").get<int>();
  c.time_embed_dim = j.at("time_embed_dim").get<int>();
  c.message_passing = j.at("message_passing").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.validate();
  return c;
}

}  // namespace detail

inline void write_checkpoint(std::ostream& out, const Checkpoint& ck) {
  json header;
  header["net_config"] = detail::net_config_json(ck.params.config);
  header["completed_stage"] = ck.completed_stage;
  header["meta"] = ck.meta;
  json tensors = json::array();
  for (const auto& [name, m] : ck.params.values) tensors.push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
  header["tensors"] = tensors;
  const std::string h = header.dump();
  out.write(kCheckpointMagic, sizeof kCheckpointMagic);
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint64_t>(out, h.size());
  out.write(h.data(), static_cast<std::streamsize>(h.size()));
  for (const auto& [name, m] : ck.params.values)
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) detail::put_le<double>(out, m(i, j));
}

inline void write_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ValidationError("cannot write checkpoint '" + path + "'");
  write_checkpoint(out, ck);
  if (!out) throw ValidationError("write to '" + path + "' failed");
}

inline Checkpoint read_checkpoint(std::istream& in) {
  char magic[8];
  if (!in.read(magic, sizeof magic) || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw ValidationError("not a checkpoint file (bad magic)");
  const auto version = detail::get_le<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion)
    throw ValidationError("unsupported checkpoint version " + std::to_string(version));
  const auto len = detail::get_le<std::uint64_t>(in, "header length");
  if (len > (std::uint64_t{1} << 30)) throw ValidationError("checkpoint header length is implausible");
  std::string h(len, '\0');
  if (!in.read(h.data(), static_cast<std::streamsize>(len))) throw ValidationError("checkpoint truncated in header");
  Checkpoint ck;
  try {
    const json header = json::parse(h);
    ck.params.config = detail::net_config_from_json(header.at("net_config"));
    ck.completed_stage = header.at("completed_stage").get<int>();
    ck.meta = header.value("meta", json::object());
    for (const json& t : header.at("tensors")) {
      MatX m(t.at("rows").get<Eigen::Index>(), t.at("cols").get<Eigen::Index>());
      ck.params.values[t.at("name").get<std::string>()] = m;
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("malformed checkpoint header: ") + e.what());
  }
  if (ck.completed_stage < 0 || ck.completed_stage > 3) throw ValidationError("checkpoint has an invalid completed stage");
  for (auto& [name, m] : ck.params.values)
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) {
        m(i, j) = detail::get_le<double>(in, "parameter '" + name + "'");
        if (!std::isfinite(m(i, j))) throw NumericalError("checkpoint parameter '" + name + "' is not finite");
      }
  if (in.peek() != std::char_traits<char>::eof()) throw ValidationError("checkpoint has trailing bytes");
  // Shapes must match a freshly initialized network with the same configuration.
  const NetParams ref = init_params(ck.params.config);
  for (const auto& [name, m] : ref.values) {
    auto it = ck.params.values.find(name);
    if (it == ck.params.values.end()) throw ValidationError("checkpoint is missing parameter '" + name + "'");
    if (it->second.rows() != m.rows() || it->second.cols() != m.cols())
      throw ValidationError("checkpoint parameter '" + name + "' has the wrong shape");
  }
  if (ck.params.values.size() != ref.values.size()) throw ValidationError("checkpoint has unexpected parameters");
  return ck;
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint '" + path + "'");
  try {
    return read_checkpoint(in);
  } catch (const ValidationError& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

}  // namespace goflow
