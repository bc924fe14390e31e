#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "opcb/errors.hpp"
#include "opcb/estim.hpp"
#include "opcb/opl.hpp"

using namespace opcb;

namespace {

ContextPool random_pool(Rng& rng, std::size_t contexts, std::size_t dim) {
  Table f(contexts, dim);
  for (double& v : f.values()) v = normal(rng, 0.0, 1.0);
  return ContextPool(f);
}

ParametrizedPolicy random_policy(Rng& rng, const ContextPool& pool, std::size_t actions, double scale = 0.5) {
  ParametrizedPolicy p(pool, actions, std::make_unique<CellLinearModel>(actions, pool.dim()));
  std::vector<double> z(p.num_params());
  for (double& v : z) v = normal(rng, 0.0, scale);
  p.set_params(z);
  return p;
}

void expect_bitwise(const std::vector<double>& a, const std::vector<double>& b) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_EQ(a[k], b[k]) << "component " << k;
}

void expect_close(const std::vector<double>& a, const std::vector<double>& b, double tol) {
  ASSERT_EQ(a.size(), b.size());
  for (std::size_t k = 0; k < a.size(); ++k) EXPECT_NEAR(a[k], b[k], tol) << "component " << k;
}

struct Setup {
  RandomInstance ri;
  ContextPool pool;
  ParametrizedPolicy policy;
  LoggedDataset data;
};

Setup setup(std::uint64_t seed, long long n = 200) {
  Rng rng = make_rng(seed);
  auto ri = random_instance(rng, 3, 3);
  auto pool = random_pool(rng, ri.instance.num_contexts(), 2);
  auto policy = random_policy(rng, pool, ri.instance.num_actions());
  ri.instance.target = policy.tabulate();
  auto data = sample_logged_data(ri.instance.q, ri.instance.sigma, ri.instance.logging, n, seed + 100);
  return {std::move(ri), std::move(pool), std::move(policy), std::move(data)};
}

}  // namespace

TEST(PolicyGradient, ReductionIdentitiesAreBitwise) {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto s = setup(seed);
    const auto& inst = s.ri.instance;
    const Table zero(inst.num_contexts(), inst.num_actions(), 0.0);
    Rng rng = make_rng(seed, 9);
    const Table f = random_model(rng, inst.num_contexts(), inst.num_actions());
    expect_bitwise(grad_dr(s.data, s.policy, inst.logging, zero).gradient, grad_ips(s.data, s.policy, inst.logging).gradient);
    expect_bitwise(grad_opcb(s.data, s.policy, inst.logging, f, MainActionSelector::full(s.ri.space)).gradient,
                   grad_dr(s.data, s.policy, inst.logging, f).gradient);
  }
}

TEST(PolicyGradient, OnPolicyIpsIsRewardTimesCenteredFeatures) {
  Rng rng = make_rng(2);
  auto ri = random_instance(rng, 3, 2);
  const auto pool = random_pool(rng, ri.instance.num_contexts(), 3);
  const auto policy = random_policy(rng, pool, ri.instance.num_actions());
  const auto logging = policy.tabulate();
  const auto data = sample_logged_data(ri.instance.q, ri.instance.sigma, logging, 50, 3);
  const auto g = grad_ips(data, policy, logging, true);
  ASSERT_EQ(g.contributions.size(), 50u);
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto& rec = data.records[i];
    std::vector<double> expected(policy.num_params(), 0.0);
    policy.accumulate_score_gradient(rec.context_id, rec.action, 1.0, expected);
    const auto mean = policy.mean_score_gradient(rec.context_id, policy.probs(rec.context_id));
    for (std::size_t k = 0; k < expected.size(); ++k) expected[k] = rec.reward * (expected[k] - mean[k]);
    expect_close(g.contributions[i], expected, 1e-12);
  }
}

TEST(PolicyGradient, ExactExpectationMatchesTheTrueGradient) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto s = setup(seed);
    const auto& inst = s.ri.instance;
    const auto truth = true_gradient(inst, s.policy);
    const auto n = inst.num_actions();
    Rng rng = make_rng(seed, 7);
    const Table zero(inst.num_contexts(), n, 0.0);
    const Table f = random_model(rng, inst.num_contexts(), n);
    const auto phi_grouping = Grouping::from_selector(s.ri.phi);
    const Table offset = group_offset_model(rng, inst.q, phi_grouping);
    expect_close(exact_expected_gradient(inst, s.policy, Grouping::identity(n), zero), truth, 1e-10);
    expect_close(exact_expected_gradient(inst, s.policy, Grouping::identity(n), f), truth, 1e-10);
    expect_close(exact_expected_gradient(inst, s.policy, phi_grouping, offset), truth, 1e-10);
  }
}

TEST(PolicyGradient, OpcbIsBiasedWhenTheModelIsNotPairwiseCorrect) {
  double worst = 0.0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto s = setup(seed);
    const auto& inst = s.ri.instance;
    if (s.ri.phi.mask() == s.ri.space.full_mask()) continue;
    const Table zero(inst.num_contexts(), inst.num_actions(), 0.0);
    const auto got = exact_expected_gradient(inst, s.policy, Grouping::from_selector(s.ri.phi), zero);
    const auto truth = true_gradient(inst, s.policy);
    for (std::size_t k = 0; k < got.size(); ++k) worst = std::max(worst, std::abs(got[k] - truth[k]));
  }
  EXPECT_GT(worst, 1e-3);
}

TEST(PolicyGradient, FiniteDifferencesOfTheScalarEstimate) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto s = setup(seed);
    const auto& inst = s.ri.instance;
    Rng rng = make_rng(seed, 11);
    const Table f = random_model(rng, inst.num_contexts(), inst.num_actions());
    const auto g = grad_opcb(s.data, s.policy, inst.logging, f, s.ri.phi);
    auto value_at = [&](const ParametrizedPolicy& p) {
      return run_estimator(*make_opcb(inst.logging, p.tabulate(), f, s.ri.phi), s.data).estimate;
    };
    EXPECT_NEAR(g.value, value_at(s.policy), 1e-12);
    const auto gi = grad_ips(s.data, s.policy, inst.logging);
    auto ips_at = [&](const ParametrizedPolicy& p) {
      return run_estimator(*make_ips(inst.logging, p.tabulate()), s.data).estimate;
    };
    const double h = 1e-6;
    std::vector<double> z(s.policy.params().begin(), s.policy.params().end());
    for (std::size_t k = 0; k < z.size(); ++k) {
      auto plus = s.policy;
      auto minus = s.policy;
      auto zp = z;
      auto zm = z;
      zp[k] += h;
      zm[k] -= h;
      plus.set_params(zp);
      minus.set_params(zm);
      const double fd = (value_at(plus) - value_at(minus)) / (2 * h);
      EXPECT_NEAR(g.gradient[k], fd, 1e-4 * std::max(1.0, std::abs(fd)));
      const double fd_ips = (ips_at(plus) - ips_at(minus)) / (2 * h);
      EXPECT_NEAR(gi.gradient[k], fd_ips, 1e-4 * std::max(1.0, std::abs(fd_ips)));
    }
  }
}

TEST(PolicyGradient, DrWithTheTrueModelAndNoNoiseIsTheEmpiricalContextGradient) {
  auto s = setup(4, 300);
  auto& inst = s.ri.instance;
  inst.sigma = Table(inst.num_contexts(), inst.num_actions(), 0.0);
  const auto data = sample_logged_data(inst.q, inst.sigma, inst.logging, 300, 5);
  auto empirical = inst;
  std::fill(empirical.p.begin(), empirical.p.end(), 0.0);
  for (const auto& r : data.records) empirical.p[r.context_id] += 1.0 / 300.0;
  expect_close(grad_dr(data, s.policy, inst.logging, inst.q).gradient, true_gradient(empirical, s.policy), 1e-12);
}

TEST(PolicyGradient, ErrorCases) {
  const auto s = setup(6);
  const auto& inst = s.ri.instance;
  Table p0 = inst.logging.table();
  const auto a = s.data.records[0].action;
  const auto x = s.data.records[0].context_id;
  for (std::uint32_t b = 0; b < inst.num_actions(); ++b) p0(x, b) = (b == a) ? 0.0 : 1.0 / (inst.num_actions() - 1);
  EXPECT_THROW(grad_ips(s.data, s.policy, TabularPolicy{p0}), SupportViolation);
  EXPECT_THROW(grad_ips(LoggedDataset{}, s.policy, inst.logging), SizeError);
  EXPECT_THROW(grad_dr(s.data, s.policy, inst.logging, Table(1, 1, 0.0)), DimensionError);
}

TEST(RegBased, DefaultsAndLimits) {
  EXPECT_EQ(kRegBasedBeta, 10.0);
  Rng rng = make_rng(8);
  auto ri = random_instance(rng, 3, 3);
  const auto pool = random_pool(rng, ri.instance.num_contexts(), 2);
  auto data = sample_logged_data(ri.instance.q, ri.instance.sigma, ri.instance.logging, 500, 9);
  for (auto& r : data.records) r.reward = 1.25;
  const auto uniform = reg_based_policy(pool, data, ApproximatorSpec{});
  for (double v : uniform.table().values()) EXPECT_NEAR(v, 1.0 / ri.instance.num_actions(), 1e-6);
  EXPECT_THROW(reg_based_policy(pool, LoggedDataset{}, ApproximatorSpec{}), FitError);

  double best = 0.0;
  for (std::size_t x = 0; x < ri.instance.num_contexts(); ++x) {
    double m = -INFINITY;
    for (std::uint32_t a = 0; a < ri.instance.num_actions(); ++a) m = std::max(m, ri.instance.q(x, a));
    best += ri.instance.p[x] * m;
  }
  EXPECT_NEAR(true_value(ri.instance, softmax_from_scores(ri.instance.q, 1e4)), best, 1e-9);
}

TEST(Train, ZeroIterationsReturnsTheInitialPolicy) {
  const auto s = setup(10);
  TrainConfig c;
  c.iterations = 0;
  const auto r = train(s.policy, [](const ParametrizedPolicy&) -> GradientEstimate { throw NumericError("unused"); }, c);
  expect_bitwise({r.policy.params().begin(), r.policy.params().end()}, {s.policy.params().begin(), s.policy.params().end()});
  ASSERT_EQ(r.trace.size(), 1u);
  EXPECT_EQ(r.trace[0].iteration, 0);
}

TEST(Train, ExactGradientAscentIsMonotone) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto s = setup(seed);
    const auto& inst = s.ri.instance;
    TrainConfig c;
    c.iterations = 200;
    const GradientFn exact = [&](const ParametrizedPolicy& p) {
      GradientEstimate g;
      g.gradient = true_gradient(inst, p);
      g.value = true_value(inst, p.tabulate());
      return g;
    };
    const auto r = train(s.policy, exact, c, [&](const TabularPolicy& p) { return true_value(inst, p); });
    ASSERT_EQ(r.trace.size(), 201u);
    for (std::size_t t = 1; t < r.trace.size(); ++t) {
      EXPECT_GE(r.trace[t].true_value, r.trace[t - 1].true_value - 1e-12) << "seed " << seed << " step " << t;
    }
    EXPECT_GT(r.trace.back().true_value, r.trace.front().true_value);
  }
}

TEST(Train, DeterministicAndCadence) {
  const auto s = setup(12);
  const auto& inst = s.ri.instance;
  const GradientFn g = [&](const ParametrizedPolicy& p) { return grad_opcb(s.data, p, inst.logging, inst.q, s.ri.phi); };
  TrainConfig c;
  c.iterations = 7;
  c.eval_every = 3;
  const auto a = train(s.policy, g, c);
  const auto b = train(s.policy, g, c);
  expect_bitwise({a.policy.params().begin(), a.policy.params().end()}, {b.policy.params().begin(), b.policy.params().end()});
  ASSERT_EQ(a.trace.size(), 4u);
  EXPECT_EQ(a.trace[1].iteration, 3);
  EXPECT_EQ(a.trace[3].iteration, 7);
  EXPECT_TRUE(std::isnan(a.trace[3].grad_norm));
  EXPECT_TRUE(std::isnan(a.trace[0].true_value));
}

TEST(Train, NonFiniteGradientAborts) {
  const auto s = setup(13);
  TrainConfig c;
  c.iterations = 3;
  const GradientFn bad = [](const ParametrizedPolicy& p) {
    GradientEstimate g;
    g.gradient.assign(p.num_params(), 0.0);
    g.gradient[0] = NAN;
    return g;
  };
  EXPECT_THROW(train(s.policy, bad, c), NumericError);
}

TEST(Train, ConfigValidation) {
  TrainConfig c;
  EXPECT_EQ(c.learning_rate, 0.05);
  EXPECT_EQ(c.iterations, 500);
  EXPECT_NO_THROW(c.validate());
  c.learning_rate = 0.0;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.iterations = -1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.eval_every = 0;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(TraceCsv, Format) {
  std::ostringstream out;
  write_trace_csv(out, {{0, 1.5, 1.25, 0.5}, {1, NAN, NAN, NAN}});
  EXPECT_EQ(out.str(), "iteration,true_value,estimated_value,grad_norm\n0,1.5,1.25,0.5\n1,,,\n");
}

TEST(PolicyGradient, OpcbVarianceDoesNotExceedIpsAtDefaults) {
  CcbEnvConfig cfg;
  const auto env = generate_ccb_env(1, cfg);
  const auto pols = standard_policies(env, -0.5, 0.2);
  Rng rng = make_rng(2);
  const auto policy = random_policy(rng, env.contexts, env.space.subset_count(), 0.1);
  Table f(env.contexts.size(), env.space.subset_count());
  for (std::size_t x = 0; x < f.num_contexts(); ++x) {
    for (std::uint32_t a = 0; a < f.num_actions(); ++a) f(x, a) = (1.0 - env.lambda) * env.h(x, SubsetAction{a});
  }
  const int seeds = 100;
  const std::size_t d = policy.num_params();
  std::vector<double> s_ips(d, 0.0), ss_ips(d, 0.0), s_op(d, 0.0), ss_op(d, 0.0);
  for (int i = 0; i < seeds; ++i) {
    const auto data = sample_logged_data(env, pols.logging, 500, 1000 + i);
    const auto gi = grad_ips(data, policy, pols.logging);
    const auto go = grad_opcb(data, policy, pols.logging, f, env.phi_true);
    for (std::size_t k = 0; k < d; ++k) {
      s_ips[k] += gi.gradient[k];
      ss_ips[k] += gi.gradient[k] * gi.gradient[k];
      s_op[k] += go.gradient[k];
      ss_op[k] += go.gradient[k] * go.gradient[k];
    }
  }
  int violations = 0;
  for (std::size_t k = 0; k < d; ++k) {
    const double vi = ss_ips[k] / seeds - (s_ips[k] / seeds) * (s_ips[k] / seeds);
    const double vo = ss_op[k] / seeds - (s_op[k] / seeds) * (s_op[k] / seeds);
    // Sample variances carry relative standard error about sqrt(2 / seeds).
    const double slack = 3.0 * std::sqrt(2.0 / seeds) * (vi + vo);
    if (vo > vi + slack) ++violations;
  }
  EXPECT_EQ(violations, 0);
}
