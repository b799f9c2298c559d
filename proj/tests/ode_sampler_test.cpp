#include <cmath>
#include <numbers>
#include <vector>

#include <gtest/gtest.h>

#include "goflow/ode_sampler.hpp"
#include "test_util.hpp"

namespace goflow {
namespace {

constexpr double kPi = std::numbers::pi;

DecomposedState chain_state(std::uint64_t seed = 5) {
  Rng rng(seed);
  const ZMatrixSpec spec = build_zmatrix(testing::chain_graph(5));
  DecomposedState s;
  s.c = Vec3(rng.normal(), rng.normal(), rng.normal());
  s.q = random_rotation(rng);
  s.z = testing::random_internals(rng, spec);
  return s;
}

BatchField per_item(std::function<FieldOutput(const DecomposedState&, double)> f) {
  return [f](const std::vector<DecomposedState>& states, double t) {
    std::vector<FieldOutput> out;
    for (const auto& s : states) out.push_back(f(s, t));
    return out;
  };
}

FieldOutput zero_like(const DecomposedState& s) { return {Vec3::Zero(), RotVec::Zero(), VecX::Zero(s.z.size())}; }

SamplerConfig cfg(OdeMethod m, int steps) {
  SamplerConfig c;
  c.method = m;
  c.steps = steps;
  return c;
}

double rotation_distance(const UnitQuat& a, const UnitQuat& b) {
  return ((a).to_matrix() - (b).to_matrix()).norm();
}

// Body-frame angular velocity that turns over time; no closed form.
BatchField tumbling() {
  return per_item([](const DecomposedState& s, double t) {
    FieldOutput f = zero_like(s);
    f.omega_hat = s.q.to_matrix() * RotVec(1.0, 2.0 * t, std::cos(3.0 * t)) + RotVec(0.5, 0.0, 0.0);
    return f;
  });
}

// z' = -z on every channel (exact solution z0 exp(-t)); c' = 5 t^4.
BatchField decay_field() {
  return per_item([](const DecomposedState& s, double t) {
    FieldOutput f = zero_like(s);
    f.v_trans = Vec3::Constant(5 * std::pow(t, 4));
    f.v_conf = -s.z.to_vector();
    return f;
  });
}

double decay_error(OdeMethod m, int steps) {
  DecomposedState s = chain_state();
  s.z.phi.setConstant(0.5);
  const DecomposedState end = integrate(decay_field(), s, cfg(m, steps)).states.back();
  const double ez = (end.z.to_vector() - s.z.to_vector() * std::exp(-1.0)).cwiseAbs().maxCoeff();
  const double ec = (end.c - s.c - Vec3::Ones()).cwiseAbs().maxCoeff();
  return std::max(ez, ec);
}

double spin_error(OdeMethod m, int steps) {
  const DecomposedState s = chain_state();
  static const UnitQuat reference = integrate(tumbling(), s, cfg(OdeMethod::kRk4, 4096)).states.back().q;
  return rotation_distance(integrate(tumbling(), s, cfg(m, steps)).states.back().q, reference);
}

TEST(OdeSampler, ZeroFieldKeepsStateFixed) {
  const DecomposedState s = chain_state();
  for (OdeMethod m : {OdeMethod::kEuler, OdeMethod::kRk4, OdeMethod::kDopri}) {
    const Trajectory tr = integrate(per_item([](const DecomposedState& x, double) { return zero_like(x); }), s, cfg(m, 20));
    const DecomposedState& e = tr.states.back();
    EXPECT_EQ(e.c, s.c);
    EXPECT_EQ(e.q.coeffs(), s.q.coeffs());
    EXPECT_EQ(e.z.to_vector(), s.z.to_vector());
    EXPECT_DOUBLE_EQ(tr.times.back(), 1.0);
  }
}

TEST(OdeSampler, FixedStepTrajectoryLength) {
  const DecomposedState s = chain_state();
  const Trajectory tr = integrate(decay_field(), s, cfg(OdeMethod::kRk4, 37));
  ASSERT_EQ(tr.states.size(), 38u);
  ASSERT_EQ(tr.times.size(), 38u);
  EXPECT_EQ(tr.times.front(), 0.0);
  EXPECT_EQ(tr.times.back(), 1.0);
}

TEST(OdeSampler, ConstantTranslationVelocity) {
  const DecomposedState s = chain_state();
  const auto field = per_item([](const DecomposedState& x, double) {
    FieldOutput f = zero_like(x);
    f.v_trans = Vec3(1, 0, 0);
    return f;
  });
  for (OdeMethod m : {OdeMethod::kEuler, OdeMethod::kRk4, OdeMethod::kDopri}) {
    const DecomposedState e = integrate(field, s, cfg(m, 50)).states.back();
    EXPECT_LT((e.c - s.c - Vec3(1, 0, 0)).norm(), 1e-12);
  }
}

TEST(OdeSampler, ConstantAngularVelocityGivesHalfTurn) {
  const DecomposedState s = chain_state();
  const auto field = per_item([](const DecomposedState& x, double) {
    FieldOutput f = zero_like(x);
    f.omega_hat = RotVec(0, 0, kPi);
    return f;
  });
  const Eigen::Matrix3d half_turn = Vec3(-1, -1, 1).asDiagonal();
  for (OdeMethod m : {OdeMethod::kEuler, OdeMethod::kRk4, OdeMethod::kDopri}) {
    const DecomposedState e = integrate(field, s, cfg(m, 50)).states.back();
    EXPECT_LT(((e.q).to_matrix() - half_turn * (s.q).to_matrix()).norm(), 1e-9) << method_name(m);
  }
}

TEST(OdeSampler, QuaternionStaysUnit) {
  const DecomposedState s = chain_state();
  const auto field = per_item([](const DecomposedState& x, double t) {
    FieldOutput f = zero_like(x);
    f.omega_hat = RotVec(std::sin(7 * t) + x.q.x, 3 * x.q.w, -2.0 + x.q.z * t);
    return f;
  });
  for (OdeMethod m : {OdeMethod::kEuler, OdeMethod::kRk4, OdeMethod::kDopri})
    for (const DecomposedState& st : integrate(field, s, cfg(m, 50)).states)
      EXPECT_NEAR(st.q.coeffs().norm(), 1.0, 1e-12);
}

double observed_order(double (*err)(OdeMethod, int), OdeMethod m, int n) {
  return std::log2(err(m, n) / err(m, 2 * n));
}

TEST(OdeSampler, EulerIsFirstOrder) {
  EXPECT_GE(observed_order(decay_error, OdeMethod::kEuler, 64), 0.9);
  EXPECT_GE(observed_order(spin_error, OdeMethod::kEuler, 64), 0.9);
}

TEST(OdeSampler, Rk4IsFourthOrder) {
  EXPECT_GE(observed_order(decay_error, OdeMethod::kRk4, 8), 3.5);
  // State-dependent rotation field: checks the Lie-algebra correction.
  EXPECT_GE(observed_order(spin_error, OdeMethod::kRk4, 8), 3.5);
}

TEST(OdeSampler, AdaptiveMatchesFineRk4) {
  const DecomposedState s = chain_state();
  const auto field = per_item([](const DecomposedState& x, double t) {
    FieldOutput f = zero_like(x);
    f.v_trans = Vec3(std::cos(3 * t), x.c[0], -x.c[2]);
    f.omega_hat = (x.q).to_matrix() * RotVec(0.4, std::sin(2 * t), 1.0);
    f.v_conf = 0.3 * x.z.to_vector().array().sin().matrix();
    return f;
  });
  const Trajectory a = integrate(field, s, cfg(OdeMethod::kDopri, 10));
  const DecomposedState r = integrate(field, s, cfg(OdeMethod::kRk4, 200)).states.back();
  const DecomposedState& d = a.states.back();
  EXPECT_LT((d.c - r.c).cwiseAbs().maxCoeff(), 1e-4);
  EXPECT_LT(rotation_distance(d.q, r.q), 1e-4);
  EXPECT_LT((d.z.to_vector() - r.z.to_vector()).cwiseAbs().maxCoeff(), 1e-4);
  for (std::size_t i = 1; i < a.times.size(); ++i) EXPECT_GT(a.times[i], a.times[i - 1]);
}

TEST(OdeSampler, AdaptiveFailsAtMinimumStep) {
  const DecomposedState s = chain_state();
  const auto jump = per_item([](const DecomposedState& x, double t) {
    FieldOutput f = zero_like(x);
    f.v_trans = Vec3(t < 0.4567 ? 0.0 : 1e5, 0, 0);
    return f;
  });
  EXPECT_THROW(integrate(jump, s, cfg(OdeMethod::kDopri, 10)), ConvergenceError);
}

TEST(OdeSampler, NonFiniteFieldReportsStep) {
  const DecomposedState s = chain_state();
  const auto field = per_item([](const DecomposedState& x, double t) {
    FieldOutput f = zero_like(x);
    if (t > 0.3) f.v_trans[1] = std::nan("");
    return f;
  });
  try {
    integrate(field, s, cfg(OdeMethod::kEuler, 10));
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("step 3"), std::string::npos) << e.what();
  }
}

TEST(OdeSampler, InternalsStayInDomain) {
  const DecomposedState s = chain_state();
  const auto field = per_item([](const DecomposedState& x, double) {
    FieldOutput f = zero_like(x);
    const Eigen::Index nr = x.z.r.size(), nt = x.z.theta.size();
    f.v_conf.head(nr).setConstant(-10.0);
    f.v_conf.segment(nr, nt).setConstant(10.0);
    f.v_conf.tail(x.z.phi.size()).setConstant(25.0);
    return f;
  });
  for (const DecomposedState& st : integrate(field, s, cfg(OdeMethod::kRk4, 30)).states) {
    EXPECT_GE(st.z.r.minCoeff(), kSamplerMinBond);
    EXPECT_LT(st.z.theta.maxCoeff(), kPi);
    EXPECT_GT(st.z.phi.minCoeff(), -kPi);
    EXPECT_LE(st.z.phi.maxCoeff(), kPi);
  }
}

TEST(OdeSampler, BatchEqualsSingle) {
  std::vector<DecomposedState> start{chain_state(1), chain_state(2), chain_state(3)};
  const auto all = integrate_batch(decay_field(), start, cfg(OdeMethod::kRk4, 20));
  for (std::size_t b = 0; b < start.size(); ++b) {
    const DecomposedState one = integrate(decay_field(), start[b], cfg(OdeMethod::kRk4, 20)).states.back();
    EXPECT_EQ(one.c, all[b].states.back().c);
    EXPECT_EQ(one.z.to_vector(), all[b].states.back().z.to_vector());
  }
}

TEST(OdeSampler, CartesianModeAgreesWithDecomposed) {
  const MolecularGraph g = testing::chain_graph(5);
  const ZMatrixSpec spec = build_zmatrix(g);
  DecomposedState s = decompose(compose(chain_state(), spec), spec);
  const auto field = per_item([](const DecomposedState& x, double t) {
    FieldOutput f = zero_like(x);
    f.v_trans = Vec3(0.5, -t, 0.2);
    f.omega_hat = RotVec(0.3, 0.1, -0.4);
    f.v_conf = 0.1 * VecX::Ones(x.z.size());
    return f;
  });
  SamplerConfig c = cfg(OdeMethod::kRk4, 200);
  const Coords a = compose(integrate(field, s, c).states.back(), spec);
  c.cartesian = true;
  const Coords b = compose(integrate_cartesian(field, spec, s, c).states.back(), spec);
  EXPECT_LT(testing::rmsd_no_align(a, b), 1e-4);
}

TEST(OdeSampler, Validation) {
  EXPECT_THROW(parse_ode_method("midpoint"), ValidationError);
  EXPECT_EQ(parse_ode_method("dopri"), OdeMethod::kDopri);
  SamplerConfig c;
  c.steps = 0;
  EXPECT_THROW(c.validate(), ValidationError);
  c = SamplerConfig{};
  c.cartesian = true;
  c.method = OdeMethod::kDopri;
  EXPECT_THROW(c.validate(), ValidationError);
}

NetParams noisy_params(std::uint64_t seed) {
  NetConfig config;
  config.hidden_dim = 16;
  config.num_layers = 2;
  config.time_embed_dim = 8;
  NetParams p = init_params(config);
  Rng rng(seed);
  for (auto& [name, v] : p.values)
    for (Eigen::Index i = 0; i < v.size(); ++i) v.data()[i] += 0.2 * rng.normal();
  return p;
}

TEST(SampleConformers, ZeroSamples) {
  const MoleculeContext mol = make_context(testing::chain_graph(4));
  const SampleSet out = sample_conformers(noisy_params(1), mol, 0, SamplerConfig{});
  EXPECT_TRUE(out.conformers.empty());
  EXPECT_THROW(sample_conformers(noisy_params(1), mol, -1, SamplerConfig{}), ValidationError);
}

TEST(SampleConformers, SeedDeterminism) {
  const MoleculeContext mol = make_context(testing::chain_graph(4));
  const NetParams p = noisy_params(2);
  SamplerConfig c;
  c.steps = 10;
  c.seed = 9;
  const SampleSet a = sample_conformers(p, mol, 6, c);
  const SampleSet b = sample_conformers(p, mol, 6, c);
  ASSERT_EQ(a.conformers.size(), 6u);
  for (int k = 0; k < 6; ++k) EXPECT_EQ(a.conformers[k], b.conformers[k]);
  c.seed = 10;
  const SampleSet d = sample_conformers(p, mol, 6, c);
  EXPECT_GT((a.conformers[0] - d.conformers[0]).norm(), 1e-6);
}

TEST(SampleConformers, UntrainedNetworkReturnsPriorDraws) {
  // Freshly initialized output layers are zero, so the field vanishes.
  const MoleculeContext mol = make_context(testing::chain_graph(4));
  NetConfig config;
  config.hidden_dim = 8;
  const NetParams p = init_params(config);
  SamplerConfig c;
  c.steps = 5;
  c.seed = 4;
  const SampleSet out = sample_conformers(p, mol, 3, c);
  Rng rng(4);
  for (int k = 0; k < 3; ++k) {
    DecomposedState s = sample_prior(PriorSpec{}, mol.zspec, rng);
    detail::project_internals(s.z);
    EXPECT_LT(testing::rmsd_no_align(out.conformers[k], compose(s, mol.zspec)), 1e-12);
  }
}

TEST(SampleConformers, BondsRespectFloor) {
  const MoleculeContext mol = make_context(testing::chain_graph(6));
  SamplerConfig c;
  c.steps = 8;
  for (const DecomposedState& s : sample_conformers(noisy_params(3), mol, 10, c).states)
    EXPECT_GE(s.z.r.minCoeff(), kSamplerMinBond);
}

}  // namespace
}  // namespace goflow
