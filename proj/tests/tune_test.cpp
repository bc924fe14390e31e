#include <gtest/gtest.h>

#include <cmath>
#include <set>
#include <sstream>

#include "opcb/errors.hpp"
#include "opcb/oracle.hpp"
#include "opcb/tune.hpp"

using namespace opcb;

namespace {

/// Small CCB problem with truth attached, for selection tests.
struct Problem {
  CcbEnvironment env;
  PolicyPair pols;
  EnumerableInstance truth;
  LoggedDataset data;
};

Problem problem(std::uint64_t seed, long long n, double lambda = 0.8, int L = 3, int k_true = 1) {
  CcbEnvConfig c;
  c.n_users = 10;
  c.d_x = 2;
  c.num_actions = L;
  c.k_true = k_true;
  c.lambda = lambda;
  auto env = generate_ccb_env(seed, c);
  auto pols = standard_policies(env, -0.5, 0.2);
  auto truth = to_instance(env, pols.logging, pols.target);
  auto data = sample_logged_data(env, pols.logging, n, seed + 1);
  return {std::move(env), std::move(pols), std::move(truth), std::move(data)};
}

SelectionInput input_for(const Problem& p, std::uint64_t seed = 3) {
  return SelectionInput{p.env.contexts, p.data, p.pols.logging, p.pols.target, {}, seed, false, 1, &p.truth};
}

/// Always fails, to exercise the failure paths of select_phi.
class Throwing final : public BiasEstimator {
 public:
  std::string name() const override { return "throwing"; }
  double squared_bias(const CandidateFit&) const override { throw NumericError("no bias available"); }
};

}  // namespace

TEST(SampleVariance, Examples) {
  EXPECT_EQ(sample_variance(std::vector<double>{1.5, 1.5, 1.5}), 0.0);
  EXPECT_DOUBLE_EQ(sample_variance(std::vector<double>{0.0, 2.0}), 0.5);
  EXPECT_THROW(sample_variance(std::vector<double>{1.0}), PreconditionError);
  EXPECT_THROW(sample_variance(std::vector<double>{}), PreconditionError);
}

TEST(SampleVariance, MatchesWelfordOnePass) {
  Rng rng = make_rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> y(2 + static_cast<std::size_t>(trial) * 37);
    for (double& v : y) v = normal(rng, 3.0, 2.0);
    double mean = 0.0;
    double m2 = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double d = y[i] - mean;
      mean += d / static_cast<double>(i + 1);
      m2 += d * (y[i] - mean);
    }
    const double n = static_cast<double>(y.size());
    EXPECT_NEAR(sample_variance(y), m2 / (n * n), 1e-12);
  }
}

TEST(SampleVariance, TimesNApproachesTheOracleVariance) {
  const auto t1 = make_t1(3.0);
  const Table zero(1, 4, 0.0);
  const auto est = make_opcb(t1.logging, t1.target, zero, t1_phi());
  const auto data = sample_logged_data(t1.q, t1.sigma, t1.logging, 100000, 2);
  const double scaled = sample_variance(run_estimator(*est, data)) * 100000.0;
  const double oracle = exact_moments(t1, *est).variance;
  EXPECT_LT(std::abs(scaled - oracle) / oracle, 0.05);
}

TEST(NoisyTrueBias, ZeroNoiseIsTheExactSquaredBias) {
  const auto t1 = make_t1();
  EXPECT_NEAR(noisy_true_bias(t1, t1_phi(), Table(1, 4, 0.0), 0.0, 7), 0.25, 1e-12);
  EXPECT_NEAR(noisy_true_bias(t1, t1_phi(), t1.q, 0.0, 7), 0.0, 1e-24);
  EXPECT_THROW(noisy_true_bias(t1, t1_phi(), t1.q, -1.0, 7), ConfigError);
}

TEST(NoisyTrueBias, FlooredAndDeterministicPerSeedAndMask) {
  const auto t1 = make_t1();
  const Table zero(1, 4, 0.0);
  std::set<double> values;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const double v = noisy_true_bias(t1, t1_phi(), zero, 2.5, seed);
    EXPECT_GE(v, 0.0);
    EXPECT_TRUE(std::isfinite(v));
    EXPECT_EQ(v, noisy_true_bias(t1, t1_phi(), zero, 2.5, seed));
    values.insert(v);
  }
  EXPECT_GT(values.size(), 10u);
  EXPECT_TRUE(values.count(0.0));
}

TEST(CandidateSetTest, RandomSearchIsDistinctNonzeroAndSeeded) {
  const FactoredSpace sp(8);
  const auto a = CandidateSet::random_search(sp, 30, 5);
  const auto b = CandidateSet::random_search(sp, 30, 5);
  const auto c = CandidateSet::random_search(sp, 30, 6);
  ASSERT_EQ(a.size(), 30u);
  std::set<std::uint32_t> masks;
  bool differs = false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_NE(a.selectors[i].mask(), 0u);
    masks.insert(a.selectors[i].mask());
    EXPECT_EQ(a.selectors[i].mask(), b.selectors[i].mask());
    differs = differs || a.selectors[i].mask() != c.selectors[i].mask();
  }
  EXPECT_EQ(masks.size(), 30u);
  EXPECT_TRUE(differs);
  EXPECT_EQ(CandidateSet::random_search(FactoredSpace(3), 30, 1).size(), 7u);
  EXPECT_THROW(CandidateSet::random_search(sp, 0, 1), ConfigError);
}

TEST(CandidateSetTest, ExhaustiveKAndAll) {
  const FactoredSpace sp(6);
  const int binom[] = {1, 6, 15, 20, 15, 6, 1};
  for (int k = 0; k <= 6; ++k) {
    const auto c = CandidateSet::exhaustive_k(sp, k);
    EXPECT_EQ(c.size(), static_cast<std::size_t>(binom[k]));
    for (const auto& s : c.selectors) EXPECT_EQ(s.size(), k);
  }
  EXPECT_THROW(CandidateSet::exhaustive_k(sp, 7), ConfigError);
  EXPECT_EQ(CandidateSet::all(sp).size(), 64u);
  EXPECT_EQ(CandidateSet::explicit_masks(sp, {3, 1, 3}).size(), 2u);
}

TEST(SelectPhi, TieBreakPrefersFewerMainActionsThenLowerMask) {
  EXPECT_TRUE(detail::better_candidate(1.0, 0b111, 2.0, 0b1));
  EXPECT_TRUE(detail::better_candidate(1.0, 0b100, 1.0, 0b011));
  EXPECT_TRUE(detail::better_candidate(1.0, 0b010, 1.0, 0b100));
  EXPECT_FALSE(detail::better_candidate(1.0, 0b100, 1.0, 0b010));
}

TEST(SelectPhi, SingleCandidateIsReturnedUnconditionally) {
  const auto p = problem(10, 300);
  const auto in = input_for(p);
  const auto one = CandidateSet::explicit_masks(p.env.space, {0b101});
  const auto s = select_phi(one, in, Throwing{});
  EXPECT_EQ(s.phi.mask(), 0b101u);
  ASSERT_EQ(s.table.size(), 1u);
  EXPECT_FALSE(s.table[0].ok());
  EXPECT_THROW(select_phi(CandidateSet::all(p.env.space), in, Throwing{}), SelectionError);
  EXPECT_THROW(select_phi(CandidateSet{}, in, Throwing{}), PreconditionError);
}

TEST(SelectPhi, ZeroNoiseExhaustiveSelectionMatchesTheTrueMseArgmin) {
  for (std::uint64_t seed : {20, 21, 22}) {
    const auto p = problem(seed, 20000, 0.8, 2, 1);
    const auto in = input_for(p);
    const NoiseInjectionBias bias(p.truth, 0.0, seed);
    const auto s = select_phi(CandidateSet::all(p.env.space), in, bias);
    double best = INFINITY;
    for (const auto& r : s.table) best = std::min(best, *r.true_mse());
    EXPECT_EQ(*s.chosen().true_mse(), best) << "seed " << seed;
  }
}

TEST(SelectPhi, MinimumEstimatedMseNeverIncreasesAsCandidatesGrow) {
  const auto p = problem(30, 1000);
  const auto in = input_for(p);
  const NoiseInjectionBias bias(p.truth, 2.5, 31);
  double previous = INFINITY;
  std::vector<std::uint32_t> masks;
  for (std::uint32_t m = 0; m < 8; ++m) {
    masks.push_back(m);
    const auto s = select_phi(CandidateSet::explicit_masks(p.env.space, masks), in, bias);
    EXPECT_LE(s.chosen().mse_hat, previous);
    previous = s.chosen().mse_hat;
  }
}

TEST(SelectPhi, TableIsIndependentOfWorkerCount) {
  const auto p = problem(40, 800);
  auto in = input_for(p);
  const NoiseInjectionBias bias(p.truth, 2.5, 41);
  const auto serial = select_phi(CandidateSet::all(p.env.space), in, bias);
  in.jobs = 3;
  const auto parallel = select_phi(CandidateSet::all(p.env.space), in, bias);
  EXPECT_EQ(serial.phi.mask(), parallel.phi.mask());
  ASSERT_EQ(serial.table.size(), parallel.table.size());
  for (std::size_t i = 0; i < serial.table.size(); ++i) {
    EXPECT_EQ(serial.table[i].mask, parallel.table[i].mask);
    EXPECT_EQ(serial.table[i].mse_hat, parallel.table[i].mse_hat);
    if (i > 0) {
      EXPECT_LT(serial.table[i - 1].mask, serial.table[i].mask);
    }
  }
}

TEST(SelectPhi, IpsGapBiasIsFiniteAndNonnegative) {
  const auto p = problem(50, 500);
  const auto s = select_phi(CandidateSet::all(p.env.space), input_for(p), IpsGapBias{});
  for (const auto& r : s.table) {
    ASSERT_TRUE(r.ok()) << *r.error;
    EXPECT_GE(r.bias_hat_sq, 0.0);
    EXPECT_TRUE(std::isfinite(r.mse_hat));
  }
}

TEST(ModeVariants, BestDominatesTrueWhenTheCandidatesContainIt) {
  const auto p = problem(60, 5000, 1.0);
  const auto v = mode_variants(p.env.phi_true, CandidateSet::all(p.env.space), input_for(p), 2.5, 61);
  EXPECT_EQ(v.phi_true.mask(), p.env.phi_true.mask());
  double true_row = NAN;
  double best_row = NAN;
  for (const auto& r : v.audit.table) {
    if (r.mask == v.phi_true.mask()) true_row = *r.true_mse();
    if (r.mask == v.phi_best.mask()) best_row = *r.true_mse();
  }
  EXPECT_LE(best_row, true_row);
  EXPECT_EQ(v.phi_ours.mask(), v.audit.phi.mask());
  auto no_truth = input_for(p);
  no_truth.truth = nullptr;
  EXPECT_THROW(mode_variants(p.env.phi_true, CandidateSet::all(p.env.space), no_truth, 2.5, 61), PreconditionError);
}

TEST(AuditCsv, HeaderRowsAndFailures) {
  std::vector<CandidateRow> rows(2);
  rows[0].mask = 0b01;
  rows[0].num_actions = 2;
  rows[0].bias_hat_sq = 0.25;
  rows[0].var_hat = 0.5;
  rows[0].mse_hat = 0.75;
  rows[0].true_bias_sq = 0.25;
  rows[0].true_var = 0.125;
  rows[1].mask = 0b10;
  rows[1].num_actions = 2;
  rows[1].error = "support";
  std::ostringstream out;
  write_audit_csv(out, rows);
  EXPECT_EQ(out.str(), "phi_mask,bias_hat_sq,var_hat,mse_hat,true_bias_sq,true_var\n10,0.25,0.5,0.75,0.25,0.125\n01,,,,,\n");
}
