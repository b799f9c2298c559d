#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "goflow/config.hpp"
#include "goflow/io.hpp"
#include "goflow/metrics.hpp"
#include "goflow/toy_data.hpp"
#include "test_util.hpp"

namespace goflow {
namespace {

constexpr double kPi = std::numbers::pi;

const char* kMinimal =
    R"({"atoms":[{"element":"C"},{"element":"O"}],"bonds":[[0,1,1]],"conformers":[[[0,0,0],[1.2,0,0]]]})";

Dataset parse(const std::string& text) {
  std::istringstream in(text);
  return read_dataset(in, "test.jsonl");
}

std::string error_of(const std::string& text) {
  try {
    parse(text);
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

TEST(DatasetIo, MinimalRecord) {
  const Dataset d = parse(kMinimal);
  ASSERT_EQ(d.size(), 1u);
  EXPECT_EQ(d[0].graph.size(), 2u);
  EXPECT_EQ(d[0].conformers.size(), 1u);
  EXPECT_EQ(d[0].graph.atoms[1].element, 8);
  EXPECT_EQ(d[0].split, "train");
  EXPECT_EQ(d[0].name, "mol0");
}

TEST(DatasetIo, AllAtomFields) {
  const Dataset d = parse(
      R"({"name":"x","split":"test","meta":{"k":1},"atoms":[{"element":6,"chirality":"cw","degree":1,"charge":-1,)"
      R"("num_h":3,"radicals":0,"hybridization":"sp2","aromatic":true,"in_ring":1},{"element":"N"}],)"
      R"("bonds":[[0,1,"aromatic"]],"conformers":[]})");
  const Atom& a = d[0].graph.atoms[0];
  EXPECT_EQ(a.chirality, Chirality::kTetrahedralCW);
  EXPECT_EQ(a.hybridization, Hybridization::kSP2);
  EXPECT_EQ(a.charge, -1);
  EXPECT_EQ(a.num_h, 3);
  EXPECT_TRUE(a.aromatic);
  EXPECT_TRUE(a.in_ring);
  EXPECT_EQ(d[0].graph.bonds[0].order, BondOrder::kAromatic);
  EXPECT_EQ(d[0].split, "test");
  EXPECT_EQ(nlohmann::json::parse(d[0].meta_json)["k"], 1);
}

TEST(DatasetIo, BondIndexOutOfRangeNamesBond) {
  const std::string e =
      error_of(R"({"atoms":[{"element":"C"},{"element":"C"}],"bonds":[[0,2]],"conformers":[[[0,0,0],[1,0,0]]]})");
  EXPECT_NE(e.find("bond 0"), std::string::npos) << e;
  EXPECT_NE(e.find("test.jsonl:1"), std::string::npos) << e;
}

TEST(DatasetIo, ErrorsAreLocated) {
  const std::string good = std::string(kMinimal) + "\n";
  EXPECT_NE(error_of(good + "\n{not json").find("test.jsonl:3"), std::string::npos);
  EXPECT_NE(error_of(good + R"({"atoms":[{"element":"C"}],"conformers":[[[0,0,"a"]]]})").find("conformer 0"),
            std::string::npos);
  EXPECT_NE(error_of(R"({"atoms":[{"element":"Qq"}],"conformers":[[[0,0,0]]]})").find("atom 0"), std::string::npos);
  EXPECT_NE(error_of(R"({"atoms":[{"element":"C"}],"conformers":[[[0,0,0],[1,1,1]]]})").find("conformer 0"),
            std::string::npos);
  EXPECT_NE(error_of(R"({"atoms":[{"element":"C"}],"extra":1,"conformers":[[[0,0,0]]]})").find("unknown field"),
            std::string::npos);
  EXPECT_NE(error_of(R"({"atoms":[{"element":"C"}],"conformers":[]})").find("no conformers"), std::string::npos);
  EXPECT_NE(error_of("").find("no molecule records"), std::string::npos);
  EXPECT_NE(error_of(R"({"atoms":[{"element":"C","charge":9}],"conformers":[[[0,0,0]]]})").find("charge"),
            std::string::npos);
}

TEST(DatasetIo, NanCoordinateRejected) {
  // JSON has no NaN literal; a huge exponent overflows to infinity and must be rejected.
  const std::string e = error_of(R"({"atoms":[{"element":"C"}],"conformers":[[[0,0,1e999]]]})");
  EXPECT_FALSE(e.empty());
}

TEST(DatasetIo, RoundTripIsBitStable) {
  ToyDatasetConfig cfg;
  cfg.conformers_per_molecule = 20;
  cfg.n_molecules = 2;
  Dataset d = generate_toy_dataset(cfg);
  d[1].split = "val";
  Rng rng(3);
  for (Coords& x : d[0].conformers) x += 1e-7 * Coords::Random(x.rows(), 3);
  std::stringstream ss;
  write_dataset(ss, d);
  const Dataset back = read_dataset(ss, "roundtrip");
  ASSERT_EQ(back.size(), d.size());
  for (std::size_t m = 0; m < d.size(); ++m) {
    EXPECT_EQ(back[m].name, d[m].name);
    EXPECT_EQ(back[m].split, d[m].split);
    EXPECT_EQ(nlohmann::json::parse(back[m].meta_json), nlohmann::json::parse(d[m].meta_json));
    ASSERT_EQ(back[m].conformers.size(), d[m].conformers.size());
    for (std::size_t k = 0; k < d[m].conformers.size(); ++k)
      EXPECT_EQ(std::memcmp(back[m].conformers[k].data(), d[m].conformers[k].data(),
                            sizeof(double) * d[m].conformers[k].size()),
                0);
    EXPECT_EQ(back[m].graph.bonds.size(), d[m].graph.bonds.size());
    for (std::size_t i = 0; i < d[m].graph.size(); ++i) {
      EXPECT_EQ(back[m].graph.atoms[i].degree, d[m].graph.atoms[i].degree);
      EXPECT_EQ(back[m].graph.atoms[i].num_h, d[m].graph.atoms[i].num_h);
    }
  }
}

TEST(DatasetIo, CoordinateListImport) {
  const nlohmann::json j = nlohmann::json::parse(
      R"({"name":"cp","elements":["C","C","C","H"],"bonds":[[0,1],[1,2],[2,0],[0,3]],)"
      R"("conformers":[[[0,0,0],[1.5,0,0],[0.75,1.3,0],[-1,0,0]]]})");
  const MoleculeRecord r = record_from_coordinate_lists(j, "x");
  EXPECT_EQ(r.name, "cp");
  EXPECT_EQ(r.graph.atoms[0].degree, 3);
  EXPECT_EQ(r.graph.atoms[0].num_h, 1);
  EXPECT_TRUE(r.graph.atoms[1].in_ring);
  EXPECT_FALSE(r.graph.atoms[3].in_ring);
}

TEST(Checkpoint, RoundTrip) {
  NetConfig cfg;
  cfg.hidden_dim = 8;
  cfg.num_layers = 2;
  cfg.time_embed_dim = 4;
  Checkpoint ck;
  ck.params = init_params(cfg);
  Rng rng(1);
  for (auto& [n, v] : ck.params.values)
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] = rng.normal();
  ck.completed_stage = 2;
  ck.meta = {{"note", "x"}};
  std::stringstream ss;
  write_checkpoint(ss, ck);
  const std::string bytes = ss.str();
  EXPECT_EQ(bytes.substr(0, 8), "GOFLOWCK");
  std::istringstream in(bytes);
  const Checkpoint back = read_checkpoint(in);
  EXPECT_EQ(back.completed_stage, 2);
  EXPECT_EQ(back.meta["note"], "x");
  EXPECT_EQ(back.params.config.hidden_dim, 8);
  for (const auto& [n, v] : ck.params.values) EXPECT_EQ(back.params.at(n), v) << n;
}

TEST(Checkpoint, CorruptionDetected) {
  NetConfig cfg;
  cfg.hidden_dim = 4;
  cfg.num_layers = 1;
  cfg.time_embed_dim = 2;
  Checkpoint ck;
  ck.params = init_params(cfg);
  std::stringstream ss;
  write_checkpoint(ss, ck);
  const std::string bytes = ss.str();
  auto fails = [](const std::string& b) {
    std::istringstream in(b);
    EXPECT_THROW(read_checkpoint(in), Error);
  };
  fails(bytes.substr(0, bytes.size() - 3));
  fails("XX" + bytes.substr(2));
  fails(bytes + "junk");
  std::string v = bytes;
  v[8] = 9;  // version
  fails(v);
}

TEST(LossCsv, HeaderAndRows) {
  std::ostringstream out;
  write_loss_csv(out, {{1, 0, 0.5, 0.25, 0.125, 0.0, 0.875}});
  EXPECT_EQ(out.str(), "stage,step,l_trans,l_rot,l_conf,l_flow,total\n1,0,0.5,0.25,0.125,0,0.875\n");
}

TEST(Decomposition, RecordsPerConformer) {
  ToyDatasetConfig cfg;
  cfg.conformers_per_molecule = 3;
  std::ostringstream out;
  write_decomposition(out, generate_toy_dataset(cfg));
  std::istringstream in(out.str());
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["q"].size(), 4u);
    EXPECT_EQ(j["phi"].size(), 1u);
    ++n;
  }
  EXPECT_EQ(n, 3);
}

// ---------------------------------------------------------------------------
// Toy data

TEST(ToyData, GeometryMatchesLaw) {
  for (ToyFamily fam : {ToyFamily::kChain, ToyFamily::kFixedRing}) {
    ToyDatasetConfig cfg;
    cfg.family = fam;
    cfg.chain_length = fam == ToyFamily::kChain ? 6 : 3;
    cfg.conformers_per_molecule = 10;
    const Dataset d = generate_toy_dataset(cfg);
    const auto quads = toy_torsion_atoms(cfg);
    EXPECT_EQ(static_cast<int>(quads.size()), toy_num_torsions(cfg));
    for (const Coords& x : d[0].conformers) {
      for (const Bond& b : d[0].graph.bonds)
        EXPECT_NEAR((x.row(b.i) - x.row(b.j)).norm(), kToyBondLength, 1e-9) << family_name(fam);
      EXPECT_LT(centroid(x).norm(), 1e-12);
      const auto adj = d[0].graph.adjacency();
      for (std::size_t c = 0; c < adj.size(); ++c)
        for (int a : adj[c])
          for (int b : adj[c]) {
            if (a >= b) continue;
            const double ang = measure_angle(x.row(a).transpose(), x.row(c).transpose(), x.row(b).transpose());
            // The exocyclic atom's angle to ring atom 5 is not fixed.
            if (fam == ToyFamily::kFixedRing && c == 0 && (a == 5 || b == 5) && (a == 6 || b == 6)) continue;
            EXPECT_NEAR(ang, kToyBondAngle, 1e-9) << family_name(fam) << " " << a << "-" << c << "-" << b;
          }
    }
  }
}

TEST(ToyData, NarrowModeGivesRigidCopies) {
  ToyDatasetConfig cfg;
  cfg.torsion_modes = {{1.0, 1.0, 1e-14}};
  cfg.conformers_per_molecule = 12;
  const Dataset d = generate_toy_dataset(cfg);
  for (const Coords& x : d[0].conformers) EXPECT_LT(kabsch_rmsd(x, d[0].conformers[0]), 1e-9);
}

TEST(ToyData, ModeWeights) {
  ToyDatasetConfig cfg;
  cfg.conformers_per_molecule = 10000;
  const Dataset d = generate_toy_dataset(cfg);
  int positive = 0;
  std::vector<double> tors;
  for (const Coords& x : d[0].conformers) {
    const double phi = measure_dihedral(x.row(0).transpose(), x.row(1).transpose(), x.row(2).transpose(),
                                        x.row(3).transpose());
    tors.push_back(phi);
    positive += phi > 0;
  }
  EXPECT_NEAR(positive / 10000.0, 0.5, 0.02);
  EXPECT_LT(torsion_w1(tors, cfg.torsion_modes), 0.05);
}

TEST(ToyData, SeedsDifferAndMetadataReplays) {
  ToyDatasetConfig cfg;
  cfg.family = ToyFamily::kFixedRing;
  cfg.chain_length = 3;
  cfg.conformers_per_molecule = 5;
  cfg.seed = 11;
  const Dataset a = generate_toy_dataset(cfg);
  cfg.seed = 12;
  EXPECT_NE(generate_toy_dataset(cfg)[0].conformers[0], a[0].conformers[0]);
  const Dataset replay = generate_toy_dataset(toy_config_from_metadata(nlohmann::json::parse(a[0].meta_json)));
  ASSERT_EQ(replay[0].conformers.size(), a[0].conformers.size());
  for (std::size_t k = 0; k < a[0].conformers.size(); ++k) EXPECT_EQ(replay[0].conformers[k], a[0].conformers[k]);
}

TEST(ToyData, InvalidConfig) {
  ToyDatasetConfig cfg;
  cfg.torsion_modes = {{0, 0.7, 0.1}, {1, 0.2, 0.1}};
  EXPECT_THROW(cfg.validate(), ValidationError);
  cfg.torsion_modes = {{0, 1.0, 0.0}};
  EXPECT_THROW(cfg.validate(), ValidationError);
}

TEST(TorsionW1, OracleCases) {
  const std::vector<TorsionMode> one{{0.0, 1.0, 0.3}};
  // CDF is 0 at -pi and 1 at pi.
  EXPECT_NEAR(torsion_cdf(one, -kPi), 0.0, 1e-12);
  EXPECT_NEAR(torsion_cdf(one, kPi), 1.0, 1e-12);
  // A point mass at x against a narrow mode at 0 is |x|.
  const std::vector<TorsionMode> narrow{{0.0, 1.0, 1e-6}};
  EXPECT_NEAR(torsion_w1({0.7}, narrow), 0.7, 1e-3);
  // Samples drawn from the law converge.
  Rng rng(2);
  std::vector<double> s;
  for (int i = 0; i < 20000; ++i) s.push_back(sample_torsion(one, rng));
  EXPECT_LT(torsion_w1(s, one), 0.02);
}

// ---------------------------------------------------------------------------
// Configuration

TEST(Config, ParsesTypedValues) {
  std::istringstream in(
      "# comment\nnet.hidden_dim = 32\nstage2.learning_rate=5e-4\nsampler.method = rk4\n"
      "toy.modes = -1.0:0.25:0.1, 1.0:0.75:0.2\neval.heavy_atoms_only = true\n\n");
  AppConfig c;
  apply_config(in, c);
  EXPECT_EQ(c.net.hidden_dim, 32);
  EXPECT_DOUBLE_EQ(c.stages[1].learning_rate, 5e-4);
  EXPECT_EQ(c.sampler.method, OdeMethod::kRk4);
  ASSERT_EQ(c.toy.torsion_modes.size(), 2u);
  EXPECT_DOUBLE_EQ(c.toy.torsion_modes[1].weight, 0.75);
  EXPECT_TRUE(c.heavy_atoms_only);
  EXPECT_NO_THROW(c.validate());
}

TEST(Config, Errors) {
  auto err = [](const std::string& text) {
    std::istringstream in(text);
    AppConfig c;
    try {
      apply_config(in, c, "f.cfg");
    } catch (const ValidationError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(err("net.hidden = 3").find("unknown key 'net.hidden'"), std::string::npos);
  EXPECT_NE(err("\nnet.hidden_dim = x").find("f.cfg:2"), std::string::npos);
  EXPECT_NE(err("net.hidden_dim = 3\nnet.hidden_dim = 4").find("duplicate"), std::string::npos);
  EXPECT_NE(err("garbage").find("key = value"), std::string::npos);
  EXPECT_NE(err("train.trans = maybe").find("boolean"), std::string::npos);
  EXPECT_NE(err("toy.modes = 1:2").find("mean:weight:std"), std::string::npos);
}

TEST(Config, SeedReachesEveryStream) {
  AppConfig c;
  c.set_seed(77);
  EXPECT_EQ(c.net.seed, 77u);
  EXPECT_EQ(c.train.seed, 77u);
  EXPECT_EQ(c.sampler.seed, 77u);
  EXPECT_EQ(c.toy.seed, 77u);
}

}  // namespace
}  // namespace goflow
