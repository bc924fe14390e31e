#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "opcb/errors.hpp"
#include "opcb/estim.hpp"
#include "opcb/oracle.hpp"
#include "opcb/synth.hpp"

using namespace opcb;

namespace {

LoggedDataset sample(const EnumerableInstance& inst, long long n, std::uint64_t seed) {
  auto d = sample_logged_data(inst.q, inst.sigma, inst.logging, n, seed);
  return d;
}

struct CcbFixture {
  CcbEnvironment env;
  PolicyPair pols;
  LoggedDataset data;
  Table model;
};

CcbFixture ccb_fixture(std::uint64_t seed) {
  CcbEnvConfig c;
  c.n_users = 20;
  c.d_x = 3;
  c.num_actions = 4;
  c.k_true = 2;
  CcbFixture f{generate_ccb_env(seed, c), {}, {}, {}};
  f.pols = standard_policies(f.env, -0.5, 0.2);
  f.data = sample_logged_data(f.env, f.pols.logging, 400, seed + 1);
  Rng rng = make_rng(seed, 7);
  f.model = random_model(rng, 20, 16);
  return f;
}

/// Two-slot slate instance with |A_l| = 2 on a few contexts, full-support factor policies.
struct SlateFixture {
  SlateEnvironment env;
  FactorizedSlatePolicy logging;
  FactorizedSlatePolicy target;
};

SlateFixture slate_fixture(std::uint64_t seed, SlateRewardKind kind) {
  Rng rng = make_rng(seed);
  Table f(3, 2);
  for (double& v : f.values()) v = normal(rng);
  auto env = generate_slate_env(seed, ContextPool{f}, {2, 2}, kind, 0.0);
  auto factors = [&] {
    std::vector<TabularPolicy> out;
    for (int l = 0; l < 2; ++l) out.push_back(random_full_support_policy(rng, 3, 3));
    return FactorizedSlatePolicy(env.space, std::move(out));
  };
  auto logging = factors();
  auto target = factors();
  return {std::move(env), std::move(logging), std::move(target)};
}

EnumerableInstance slate_instance(const SlateFixture& s) {
  const Table q = slate_reward_table(s.env);
  return {std::vector<double>(3, 1.0 / 3.0), q, Table(3, q.num_actions(), 0.0), s.target.joint(), s.logging.joint()};
}

void expect_bitwise_equal(const EstimateReport& a, const EstimateReport& b) {
  ASSERT_EQ(a.contributions.size(), b.contributions.size());
  for (std::size_t i = 0; i < a.contributions.size(); ++i) EXPECT_EQ(a.contributions[i], b.contributions[i]);
  EXPECT_EQ(a.estimate, b.estimate);
}

}  // namespace

TEST(DirectMethodTest, T1Examples) {
  const auto t1 = make_t1(1.0);
  const auto data = sample(t1, 50, 1);
  EXPECT_NEAR(estimate_dm({data, t1.logging, t1.target, &t1.q}).estimate, 2.4, 1e-12);
  const Table c(1, 4, -3.5);
  EXPECT_NEAR(estimate_dm({data, t1.logging, t1.target, &c}).estimate, -3.5, 1e-12);
  const Table zero(1, 4, 0.0);
  EXPECT_EQ(estimate_dm({data, t1.logging, t1.target, &zero}).estimate, 0.0);
  EXPECT_THROW(estimate_dm({data, t1.logging, t1.target}), FitError);
}

TEST(Ips, EqualPoliciesGiveTheMeanReward) {
  const auto f = ccb_fixture(2);
  const auto r = estimate_ips({f.data, f.pols.logging, f.pols.logging});
  double mean = 0.0;
  for (const auto& rec : f.data.records) mean += rec.reward;
  mean /= static_cast<double>(f.data.size());
  EXPECT_NEAR(r.estimate, mean, 1e-12);
  EXPECT_DOUBLE_EQ(r.max_weight, 1.0);
  EXPECT_NEAR(r.ess, static_cast<double>(f.data.size()), 1e-9);
}

TEST(Ips, T1ExactMoments) {
  const auto t1 = make_t1();
  const auto m = exact_moments(t1, *make_ips(t1.logging, t1.target));
  EXPECT_NEAR(m.mean, 2.4, 1e-12);
  EXPECT_NEAR(m.second_moment, 11.84, 1e-12);
  EXPECT_NEAR(m.variance, 6.08, 1e-12);
}

TEST(Ips, UnsupportedRecordNamesContextAndAction) {
  Table p0(1, 4, 0.0);
  p0(0, 0) = 0.5;
  p0(0, 1) = 0.5;
  const TabularPolicy logging{p0};
  const auto t1 = make_t1();
  LoggedDataset d;
  d.records = {{0, 0, 1.0}, {0, 3, 4.0}};
  d.num_contexts = 1;
  d.num_actions = 4;
  try {
    estimate_ips({d, logging, t1.target});
    FAIL() << "expected a support violation";
  } catch (const SupportViolation& e) {
    EXPECT_NE(std::string(e.what()).find("context 0, action 3"), std::string::npos);
  }
  const auto r = estimate_ips({d, logging, t1.target, nullptr, std::nullopt, true});
  EXPECT_EQ(r.n, 1u);
  EXPECT_EQ(r.dropped, 1u);
  EXPECT_DOUBLE_EQ(r.dropped_fraction(), 0.5);
}

TEST(Dr, ZeroModelIsIpsBitwise) {
  const auto f = ccb_fixture(3);
  const Table zero(20, 16, 0.0);
  expect_bitwise_equal(estimate_dr({f.data, f.pols.logging, f.pols.target, &zero}),
                       estimate_ips({f.data, f.pols.logging, f.pols.target}));
}

TEST(Dr, PerfectModelNoiselessSingleContextHasZeroVariance) {
  const auto t1 = make_t1();
  const auto r = estimate_dr({sample(t1, 100, 4), t1.logging, t1.target, &t1.q});
  for (double y : r.contributions) EXPECT_NEAR(y, 2.4, 1e-12);
  EXPECT_NEAR(exact_moments(t1, *make_dr(t1.logging, t1.target, t1.q)).mean, 2.4, 1e-12);
}

TEST(Opcb, T1Examples) {
  const auto t1 = make_t1();
  const Table zero(1, 4, 0.0);
  const auto m = exact_moments(t1, *make_opcb(t1.logging, t1.target, zero, t1_phi()));
  EXPECT_NEAR(m.mean, 1.9, 1e-12);
  EXPECT_NEAR(m.mean - true_value(t1), -0.5, 1e-12);
  EXPECT_NEAR(exact_estimator_mean(t1, *make_opcb(t1.logging, t1.target, t1.q, t1_phi())), 2.4, 1e-12);
}

TEST(Opcb, EmptySelectorUsesUnitWeights) {
  const auto f = ccb_fixture(5);
  const MainActionSelector empty(f.env.space, 0);
  const auto r = estimate_opcb({f.data, f.pols.logging, f.pols.target, &f.model, empty});
  double expected = 0.0;
  for (const auto& rec : f.data.records) {
    double e_pi = 0.0;
    for (std::uint32_t m = 0; m < 16; ++m) e_pi += f.pols.target.prob(rec.context_id, m) * f.model(rec.context_id, m);
    expected += rec.reward - f.model(rec.context_id, rec.action) + e_pi;
  }
  EXPECT_NEAR(r.estimate, expected / static_cast<double>(f.data.size()), 1e-10);
  EXPECT_DOUBLE_EQ(r.max_weight, 1.0);
  EXPECT_EQ(*r.phi_mask, "0000");
}

TEST(Opcb, FullSelectorIsDrBitwise) {
  const auto f = ccb_fixture(6);
  expect_bitwise_equal(estimate_opcb({f.data, f.pols.logging, f.pols.target, &f.model, MainActionSelector::full(f.env.space)}),
                       estimate_dr({f.data, f.pols.logging, f.pols.target, &f.model}));
}

TEST(Opcb, WeightDependsOnlyOnTheMainActions) {
  const auto f = ccb_fixture(7);
  for (std::uint32_t mask = 0; mask < 16; ++mask) {
    const MainActionSelector phi(f.env.space, mask);
    const MarginalWeightEstimator est("OPCB", f.pols.logging, f.pols.target, Grouping::from_selector(phi), f.model);
    for (std::size_t x = 0; x < 20; ++x) {
      for (std::uint32_t m = 0; m < 16; ++m) EXPECT_EQ(est.weight(x, m), est.weight(x, phi({m}).bits));
    }
  }
}

TEST(Opcb, MissingInputsAreErrors) {
  const auto f = ccb_fixture(8);
  EXPECT_THROW(estimate_opcb({f.data, f.pols.logging, f.pols.target, nullptr, MainActionSelector(f.env.space, 1)}), FitError);
  EXPECT_THROW(estimate_opcb({f.data, f.pols.logging, f.pols.target, &f.model}), DimensionError);
}

TEST(Opcb, ZeroGroupMarginalOnAnObservedRecordIsASupportViolation) {
  Table p0(1, 4, 0.0);
  p0(0, 0) = 0.5;
  p0(0, 2) = 0.5;
  const auto t1 = make_t1();
  LoggedDataset d;
  d.records = {{0, 1, 1.0}};
  d.num_contexts = 1;
  d.num_actions = 4;
  const Table zero(1, 4, 0.0);
  EXPECT_THROW(estimate_opcb({d, TabularPolicy{p0}, t1.target, &zero, t1_phi()}), SupportViolation);
  EXPECT_THROW(make_opcb(TabularPolicy{p0}, t1.target, zero, t1_phi())->check_support(), SupportViolation);
}

TEST(Lips, IdentityAbstractionIsIpsBitwise) {
  const auto f = ccb_fixture(9);
  expect_bitwise_equal(estimate_lips({f.data, f.pols.logging, f.pols.target}, Grouping::identity(16)),
                       estimate_ips({f.data, f.pols.logging, f.pols.target}));
}

TEST(Lips, ConstantAbstractionGivesTheMeanReward) {
  const auto f = ccb_fixture(10);
  const auto r = estimate_lips({f.data, f.pols.logging, f.pols.target}, Grouping::single(16));
  double mean = 0.0;
  for (const auto& rec : f.data.records) mean += rec.reward / static_cast<double>(f.data.size());
  EXPECT_NEAR(r.estimate, mean, 1e-12);
}

TEST(Pi, EqualPoliciesGiveTheMeanReward) {
  const auto s = slate_fixture(11, SlateRewardKind::Mean);
  const auto inst = slate_instance(s);
  const auto data = sample(inst, 300, 12);
  const auto r = estimate_pi(data, s.logging, s.logging);
  double mean = 0.0;
  for (const auto& rec : data.records) mean += rec.reward / static_cast<double>(data.size());
  EXPECT_NEAR(r.estimate, mean, 1e-12);
}

TEST(Pi, UnbiasedOnLinearRewardsBiasedOnGeometric) {
  const auto lin = slate_fixture(13, SlateRewardKind::Linear);
  const auto li = slate_instance(lin);
  EXPECT_NEAR(exact_estimator_mean(li, PseudoInverse(lin.logging, lin.target)), true_value(li), 1e-10);
  const auto geo = slate_fixture(13, SlateRewardKind::Geometric);
  const auto gi = slate_instance(geo);
  EXPECT_GT(std::abs(exact_estimator_mean(gi, PseudoInverse(geo.logging, geo.target)) - true_value(gi)), 1e-6);
}

TEST(Pi, ZeroSlotLoggingMarginalIsASupportViolation) {
  const SlateSpace space({1});
  Table p0(1, 2, 0.0);
  p0(0, 0) = 1.0;
  const FactorizedSlatePolicy logging(space, {TabularPolicy{p0}});
  const FactorizedSlatePolicy target(space, {TabularPolicy::uniform(1, 2)});
  EXPECT_THROW(PseudoInverse(logging, target).contribute(0, 1, 1.0), SupportViolation);
  EXPECT_THROW(PseudoInverse(logging, target).check_support(), SupportViolation);
}

TEST(OpcbPiTest, ZeroModelsMixTargetAndLoggingValuesOnLinearRewards) {
  // Each slot estimator reweights only its own slot: E = (V(pi) + (L - 1) V(pi0)) / L.
  const auto s = slate_fixture(14, SlateRewardKind::Linear);
  const auto inst = slate_instance(s);
  const std::vector<Table> zero(2, Table(3, inst.num_actions(), 0.0));
  const double mean = exact_estimator_mean(inst, OpcbPi(s.logging, s.target, zero));
  EXPECT_NEAR(mean, (true_value(inst) + true_value(inst, inst.logging)) / 2.0, 1e-10);
  const auto same = slate_instance({s.env, s.logging, s.logging});
  EXPECT_NEAR(exact_estimator_mean(same, OpcbPi(s.logging, s.logging, zero)),
              exact_estimator_mean(same, PseudoInverse(s.logging, s.logging)), 1e-10);
}

TEST(OpcbPiTest, PerfectModelsAreUnbiased) {
  const auto s = slate_fixture(15, SlateRewardKind::Geometric);
  const auto inst = slate_instance(s);
  const std::vector<Table> models(2, inst.q);
  EXPECT_NEAR(exact_estimator_mean(inst, OpcbPi(s.logging, s.target, models)), true_value(inst), 1e-10);
}

TEST(OpcbPiTest, OneSlotIsOpcbWithTheFullMask) {
  Rng rng = make_rng(16);
  const SlateSpace space({3});
  const FactorizedSlatePolicy logging(space, {random_full_support_policy(rng, 2, 4)});
  const FactorizedSlatePolicy target(space, {random_full_support_policy(rng, 2, 4)});
  const Table model = random_model(rng, 2, 4);
  const Table q = random_model(rng, 2, 4);
  const auto data = sample_logged_data(q, Table(2, 4, 1.0), logging.joint(), 200, 17);
  const auto a = estimate_opcb_pi(data, logging, target, {model});
  const auto b = run_estimator(*make_opcb(logging.joint(), target.joint(), model, Grouping::identity(4)), data);
  expect_bitwise_equal(a, b);
}

TEST(ExactUnbiasedness, TinyInstancesUnderTheirConditions) {
  Rng rng = make_rng(20);
  for (int trial = 0; trial < 50; ++trial) {
    const auto ri = random_instance(rng);
    const auto& inst = ri.instance;
    const double v = true_value(inst);
    const auto g = Grouping::from_selector(ri.phi);
    const Table model = random_model(rng, inst.num_contexts(), inst.num_actions());
    EXPECT_NEAR(exact_estimator_mean(inst, *make_ips(inst.logging, inst.target)), v, 1e-10);
    EXPECT_NEAR(exact_estimator_mean(inst, *make_dr(inst.logging, inst.target, model)), v, 1e-10);
    const Table f = group_offset_model(rng, inst.q, g);
    EXPECT_NEAR(exact_estimator_mean(inst, *make_opcb(inst.logging, inst.target, f, ri.phi)), v, 1e-10);
    // LIPS on rewards constant within latents.
    EnumerableInstance flat = inst;
    for (std::size_t x = 0; x < flat.num_contexts(); ++x) {
      for (std::uint32_t a = 0; a < flat.num_actions(); ++a) flat.q(x, a) = inst.q(x, g.group_of[a]);
    }
    EXPECT_NEAR(exact_estimator_mean(flat, *make_lips(flat.logging, flat.target, g)), true_value(flat), 1e-10);
  }
}

TEST(Affinity, ScalingRewardsScalesEstimates) {
  const auto f = ccb_fixture(30);
  const double c = -2.5;
  LoggedDataset scaled = f.data;
  for (auto& r : scaled.records) r.reward *= c;
  Table model = f.model;
  for (double& v : model.values()) v *= c;
  const auto ips = estimate_ips({f.data, f.pols.logging, f.pols.target}).estimate;
  EXPECT_NEAR(estimate_ips({scaled, f.pols.logging, f.pols.target}).estimate, c * ips, 1e-10);
  const auto dr = estimate_dr({f.data, f.pols.logging, f.pols.target, &f.model}).estimate;
  EXPECT_NEAR(estimate_dr({scaled, f.pols.logging, f.pols.target, &model}).estimate, c * dr, 1e-10);
  const MainActionSelector phi(f.env.space, 0b0101);
  const auto opcb = estimate_opcb({f.data, f.pols.logging, f.pols.target, &f.model, phi}).estimate;
  EXPECT_NEAR(estimate_opcb({scaled, f.pols.logging, f.pols.target, &model, phi}).estimate, c * opcb, 1e-10);
  const auto lips = estimate_lips({f.data, f.pols.logging, f.pols.target}, Grouping::from_selector(phi)).estimate;
  EXPECT_NEAR(estimate_lips({scaled, f.pols.logging, f.pols.target}, Grouping::from_selector(phi)).estimate, c * lips, 1e-10);
}

TEST(Diagnostics, EssIsNOverOnePlusCvSquared) {
  const auto f = ccb_fixture(31);
  const auto r = estimate_ips({f.data, f.pols.logging, f.pols.target});
  const MarginalWeightEstimator est("IPS", f.pols.logging, f.pols.target, Grouping::identity(16), std::nullopt);
  double mean = 0.0;
  double top = 0.0;
  std::vector<double> w;
  for (const auto& rec : f.data.records) {
    w.push_back(est.weight(rec.context_id, rec.action));
    mean += w.back() / static_cast<double>(w.size() == 0 ? 1 : f.data.size());
    top = std::max(top, w.back());
  }
  double var = 0.0;
  for (double v : w) var += (v - mean) * (v - mean) / static_cast<double>(w.size());
  const double n = static_cast<double>(w.size());
  EXPECT_NEAR(r.ess, n / (1.0 + var / (mean * mean)), 1e-8 * n);
  EXPECT_EQ(r.max_weight, top);
  double sum = 0.0;
  for (double y : r.contributions) sum += y;
  EXPECT_NEAR(r.estimate, sum / n, 1e-12);
}

TEST(EstimateCsv, HeaderAndRow) {
  std::ostringstream out;
  write_estimate_csv_header(out);
  EstimateReport r;
  r.estimator = "OPCB";
  r.phi_mask = "10";
  r.estimate = 1.5;
  r.max_weight = 2.0;
  r.ess = 3.0;
  r.n = 4;
  write_estimate_csv_row(out, r);
  EXPECT_EQ(out.str(), "estimator,phi_mask,estimate,max_weight,ess,n\nOPCB,10,1.5,2,3,4\n");
}
