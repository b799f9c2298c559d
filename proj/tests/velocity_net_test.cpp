#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "goflow/velocity_net.hpp"
#include "test_util.hpp"

namespace goflow {
namespace {

NetConfig small_config(std::uint64_t seed = 3) {
  NetConfig c;
  c.hidden_dim = 16;
  c.num_layers = 3;
  c.time_embed_dim = 8;
  c.seed = seed;
  return c;
}

// Initialized parameters with every tensor (final layers included) filled with noise.
NetParams noisy_params(const NetConfig& config, std::uint64_t seed = 17) {
  NetParams p = init_params(config);
  Rng rng(seed);
  for (auto& [name, v] : p.values)
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] += 0.3 * rng.normal();
  return p;
}

MolecularGraph branched_graph() {
  Rng rng(5);
  MolecularGraph g = testing::random_graph(rng, 8, true);
  g.bonds.front().order = BondOrder::kDouble;
  g.atoms[2].aromatic = true;
  return g;
}

DecomposedState random_state(Rng& rng, const ZMatrixSpec& spec) {
  return {Vec3(rng.normal(), rng.normal(), rng.normal()), random_rotation(rng), testing::random_internals(rng, spec), 0};
}

TEST(Featurize, Sp3CarbonPositions) {
  MolecularGraph g;
  Atom a;
  a.degree = 4;
  g.atoms.push_back(a);
  const MatX f = featurize(g);
  ASSERT_EQ(f.cols(), kNumAtomFeatures);
  // chirality 0, degree 4, charge 0, num_h 0, radicals 0, sp3, element C
  for (int col : {0, 8, 20, 26, 35, 42, 49}) EXPECT_EQ(f(0, col), 1.0) << col;
  EXPECT_EQ(f.row(0).sum(), 7.0);
}

TEST(Featurize, RowSumCountsBlocksPlusFlags) {
  const MolecularGraph g = branched_graph();
  const MatX f = featurize(g);
  for (std::size_t i = 0; i < g.size(); ++i)
    EXPECT_EQ(f.row(static_cast<Eigen::Index>(i)).sum(), 7.0 + g.atoms[i].aromatic + g.atoms[i].in_ring);
}

TEST(Featurize, AromaticFlagSetsOneExtraBit) {
  MolecularGraph g;
  g.atoms.resize(2);
  g.atoms[1].aromatic = true;
  const MatX f = featurize(g);
  const MatX d = f.row(1) - f.row(0);
  EXPECT_EQ(d.cwiseAbs().sum(), 1.0);
  EXPECT_EQ(d(0, 46), 1.0);
}

TEST(Featurize, PermutingAtomsPermutesRows) {
  const MolecularGraph g = branched_graph();
  const std::vector<int> perm{3, 7, 0, 5, 1, 6, 2, 4};
  const MatX f = featurize(g), fp = featurize(permute_graph(g, perm));
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_EQ(fp.row(perm[i]), f.row(static_cast<Eigen::Index>(i)));
}

TEST(Featurize, OutOfRangeNamesAtomAndField) {
  MolecularGraph g;
  g.atoms.resize(3);
  g.atoms[2].charge = 6;
  try {
    featurize(g);
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("atom 2"), std::string::npos);
    EXPECT_NE(msg.find("charge"), std::string::npos);
  }
}

TEST(InitParams, SameSeedIsBitIdentical) {
  const NetParams a = init_params(small_config(8)), b = init_params(small_config(8));
  ASSERT_EQ(a.values.size(), b.values.size());
  for (const auto& [name, v] : a.values) EXPECT_EQ(v, b.at(name)) << name;
}

TEST(InitParams, DifferentSeedsDiffer) {
  const NetParams a = init_params(small_config(8)), b = init_params(small_config(9));
  bool differ = false;
  for (const auto& [name, v] : a.values) differ = differ || v != b.at(name);
  EXPECT_TRUE(differ);
}

TEST(InitParams, WeightScaleMatchesFanIn) {
  NetConfig c = small_config();
  c.hidden_dim = 64;
  const NetParams p = init_params(c);
  const MatX& w = p.at("trunk.layer0.self.W");
  const double var = w.array().square().mean();
  EXPECT_NEAR(var, 1.0 / 64, 0.1 / 64);
  EXPECT_LE(w.cwiseAbs().maxCoeff(), std::sqrt(3.0 / 64));
}

TEST(InitParams, InvalidConfigRejected) {
  NetConfig c;
  c.num_layers = 0;
  EXPECT_THROW(init_params(c), ValidationError);
  c = NetConfig{};
  c.hidden_dim = 0;
  EXPECT_THROW(init_params(c), ValidationError);
}

TEST(Forward, FreshParamsGiveExactlyZeroField) {
  const MoleculeContext mol = make_context(branched_graph());
  const NetParams p = init_params(small_config());
  Rng rng(1);
  for (double t : {0.0, 0.37, 1.0}) {
    const FieldOutput out = evaluate(p, mol, random_state(rng, mol.zspec), t);
    EXPECT_EQ(out.v_trans, Vec3::Zero());
    EXPECT_EQ(out.omega_hat, RotVec::Zero());
    ASSERT_EQ(out.v_conf.size(), mol.zspec.m());
    EXPECT_EQ(out.v_conf, VecX::Zero(mol.zspec.m()));
  }
}

TEST(Forward, DeterministicBitwise) {
  const MoleculeContext mol = make_context(branched_graph());
  const NetParams p = noisy_params(small_config());
  Rng rng(2);
  const DecomposedState s = random_state(rng, mol.zspec);
  const FieldOutput a = evaluate(p, mol, s, 0.4), b = evaluate(p, mol, s, 0.4);
  EXPECT_EQ(a.v_trans, b.v_trans);
  EXPECT_EQ(a.omega_hat, b.omega_hat);
  EXPECT_EQ(a.v_conf, b.v_conf);
}

TEST(Forward, TimeConditioningIsLive) {
  const MoleculeContext mol = make_context(branched_graph());
  const NetParams p = noisy_params(small_config());
  Rng rng(3);
  const DecomposedState s = random_state(rng, mol.zspec);
  const FieldOutput a = evaluate(p, mol, s, 0.0), b = evaluate(p, mol, s, 1.0);
  EXPECT_GT((a.v_conf - b.v_conf).norm(), 1e-6);
  EXPECT_GT((a.v_trans - b.v_trans).norm(), 1e-6);
}

TEST(Forward, InvariantToConsistentAtomRelabeling) {
  const MolecularGraph g = branched_graph();
  const MoleculeContext mol = make_context(g);
  const std::vector<int> perm{3, 7, 0, 5, 1, 6, 2, 4};
  const MoleculeContext permuted = make_context(permute_graph(g, perm), mol.zspec.relabeled(perm));
  const NetParams p = noisy_params(small_config());
  Rng rng(4);
  const DecomposedState s = random_state(rng, mol.zspec);
  const FieldOutput a = evaluate(p, mol, s, 0.6), b = evaluate(p, permuted, s, 0.6);
  EXPECT_LT((a.v_trans - b.v_trans).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((a.omega_hat - b.omega_hat).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((a.v_conf - b.v_conf).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Forward, ConformationHeadIgnoresRigidPose) {
  const MoleculeContext mol = make_context(branched_graph());
  const NetParams p = noisy_params(small_config());
  Rng rng(5);
  DecomposedState s = random_state(rng, mol.zspec);
  const FieldOutput a = evaluate(p, mol, s, 0.3);
  s.c = Vec3(4.0, -2.0, 1.0);
  s.q = random_rotation(rng);
  const FieldOutput b = evaluate(p, mol, s, 0.3);
  EXPECT_EQ(a.v_conf, b.v_conf);
  EXPECT_GT((a.omega_hat - b.omega_hat).norm(), 1e-8);
}

TEST(Forward, ConformationHeadInvariantUnderRotatedConformer) {
  const MoleculeContext mol = make_context(branched_graph());
  const NetParams p = noisy_params(small_config());
  Rng rng(6);
  const Coords x = testing::random_conformer(rng, mol.zspec);
  const UnitQuat r = random_rotation(rng);
  const Coords y = apply_rotation(r, x);
  const FieldOutput a = evaluate(p, mol, decompose(x, mol.zspec), 0.5);
  const FieldOutput b = evaluate(p, mol, decompose(y, mol.zspec), 0.5);
  EXPECT_LT((a.v_conf - b.v_conf).cwiseAbs().maxCoeff(), 1e-9);
}

TEST(Forward, BatchMatchesSingleEvaluation) {
  const MoleculeContext a = make_context(branched_graph());
  const MoleculeContext b = make_context(testing::chain_graph(5));
  const NetParams p = noisy_params(small_config());
  Rng rng(7);
  const DecomposedState sa = random_state(rng, a.zspec), sb = random_state(rng, b.zspec);
  VecX t(2);
  t << 0.2, 0.9;
  const auto batch = evaluate_batch(p, {&a, &b}, {&sa, &sb}, t);
  const FieldOutput ea = evaluate(p, a, sa, 0.2), eb = evaluate(p, b, sb, 0.9);
  EXPECT_LT((batch[0].v_conf - ea.v_conf).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((batch[1].v_conf - eb.v_conf).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((batch[1].v_trans - eb.v_trans).cwiseAbs().maxCoeff(), 1e-12);
  EXPECT_LT((batch[0].omega_hat - ea.omega_hat).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Forward, WithoutMessagePassing) {
  NetConfig c = small_config();
  c.message_passing = false;
  const MoleculeContext mol = make_context(branched_graph());
  Rng rng(8);
  const FieldOutput out = evaluate(noisy_params(c), mol, random_state(rng, mol.zspec), 0.5);
  EXPECT_TRUE(out.v_conf.allFinite());
  EXPECT_EQ(out.v_conf.size(), mol.zspec.m());
}

TEST(Forward, NonFiniteActivationReportsLayer) {
  const MoleculeContext mol = make_context(branched_graph());
  NetParams p = noisy_params(small_config());
  p.values["trunk.layer1.self.b"](0, 0) = std::numeric_limits<double>::quiet_NaN();
  Rng rng(9);
  try {
    evaluate(p, mol, random_state(rng, mol.zspec), 0.5);
    FAIL() << "expected a numerical error";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 1"), std::string::npos);
  }
}

TEST(Forward, MismatchedStateRejected) {
  const MoleculeContext mol = make_context(branched_graph());
  const MoleculeContext other = make_context(testing::chain_graph(4));
  Rng rng(10);
  EXPECT_THROW(evaluate(init_params(small_config()), mol, random_state(rng, other.zspec), 0.5), StructuralError);
}

TEST(Forward, ParameterGradientsMatchFiniteDifferences) {
  const MoleculeContext mol = make_context(branched_graph());
  const NetParams base = noisy_params(small_config());
  Rng rng(11);
  const DecomposedState s = random_state(rng, mol.zspec);
  // Fixed random read-out of all three heads.
  const VecX wt = VecX::Random(3), wr = VecX::Random(3), wc = VecX::Random(mol.zspec.m());
  auto objective = [&](const NetParams& p, std::map<std::string, MatX>* grads) {
    ad::Tape tape;
    const ParamVars vars = bind_params(tape, p, [](const std::string&) { return true; });
    VecX t(1);
    t[0] = 0.45;
    const FieldVars f = forward(tape, vars, p.config, {&mol}, state_constants(tape, {&s}), t);
    const ad::Var loss = ad::add(
        ad::add(ad::sum(ad::mul(ad::square(f.v_trans), tape.constant(wt.transpose()))),
                ad::sum(ad::mul(f.omega, tape.constant(wr.transpose())))),
        ad::sum(ad::mul(ad::square(f.v_conf), tape.constant(wc))));
    if (grads) {
      tape.backward(loss);
      for (const auto& [name, v] : vars) (*grads)[name] = tape.grad(v);
    }
    return loss.scalar();
  };
  std::map<std::string, MatX> grads;
  objective(base, &grads);
  const std::vector<std::string> probes{"trunk.embed.W", "trunk.time.W", "trunk.layer0.msg.W", "trunk.layer2.edge.W",
                                        "trunk.layer1.self.b", "trans.0.W", "rot.0.W", "conf.enc.W",
                                        "conf.0.b", "conf.1.W"};
  Rng pick(12);
  for (const std::string& name : probes) {
    const Eigen::Index i = static_cast<Eigen::Index>(pick.index(static_cast<std::size_t>(base.at(name).size())));
    const double h = 1e-5;
    NetParams plus = base, minus = base;
    plus.values[name].data()[i] += h;
    minus.values[name].data()[i] -= h;
    const double fd = (objective(plus, nullptr) - objective(minus, nullptr)) / (2 * h);
    const double an = grads[name].data()[i];
    EXPECT_LE(std::abs(an - fd), 1e-4 * std::max(std::abs(fd), 1e-3)) << name << "[" << i << "]";
  }
}

TEST(Forward, DetachedFrameHeadsDoNotBackpropagateIntoTrunk) {
  const MoleculeContext mol = make_context(branched_graph());
  const NetParams p = noisy_params(small_config());
  Rng rng(13);
  const DecomposedState s = random_state(rng, mol.zspec);
  ad::Tape tape;
  const ParamVars vars = bind_params(tape, p, [](const std::string&) { return true; });
  VecX t(1);
  t[0] = 0.5;
  const FieldVars f = forward(tape, vars, p.config, {&mol}, state_constants(tape, {&s}), t, true);
  tape.backward(ad::add(ad::sum(f.v_trans), ad::sum(f.omega)));
  EXPECT_EQ(tape.grad(vars.at("trunk.embed.W")).norm(), 0.0);
  EXPECT_GT(tape.grad(vars.at("trans.0.W")).norm(), 0.0);
}

}  // namespace
}  // namespace goflow
