#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "opcb/combspace.hpp"
#include "opcb/csv.hpp"
#include "opcb/errors.hpp"
#include "opcb/estim.hpp"
#include "opcb/policy.hpp"
#include "opcb/regress.hpp"
#include "opcb/rng.hpp"
#include "opcb/synth.hpp"
#include "opcb/table.hpp"

namespace opcb {

/// Finite problem with every table known: p(x), q(x,a), sigma(x,a), target and logging policies.
struct EnumerableInstance {
  std::vector<double> p;
  Table q;
  Table sigma;
  TabularPolicy target;
  TabularPolicy logging;

  std::size_t num_contexts() const noexcept { return p.size(); }
  std::size_t num_actions() const noexcept { return q.num_actions(); }

  void validate() const {
    if (p.empty()) throw DimensionError("instance has no contexts");
    if (q.num_contexts() != p.size() || !q.same_shape(sigma) || !q.same_shape(target.table()) ||
        !q.same_shape(logging.table())) {
      throw DimensionError("instance tables are incomplete or differ in shape");
    }
    CompensatedSum total;
    for (double v : p) {
      if (!(v >= 0.0)) throw NumericError("context distribution has a negative entry");
      total += v;
    }
    if (std::abs(total.value() - 1.0) > kNormalizationTolerance) throw NumericError("context distribution does not sum to 1");
  }
};

inline EnumerableInstance to_instance(const CcbEnvironment& env, const TabularPolicy& logging, const TabularPolicy& target) {
  EnumerableInstance inst{std::vector<double>(env.num_contexts(), 1.0 / static_cast<double>(env.num_contexts())), env.q,
                          env.sigma_table(), target, logging};
  inst.validate();
  return inst;
}

/// V(pi) = sum_x p(x) sum_a pi(a|x) q(x,a).
inline double true_value(const EnumerableInstance& inst, const TabularPolicy& policy) {
  if (policy.num_contexts() != inst.num_contexts() || policy.num_actions() != inst.num_actions()) {
    throw DimensionError("policy does not match the instance");
  }
  CompensatedSum v;
  for (std::size_t x = 0; x < inst.num_contexts(); ++x) {
    for (std::size_t a = 0; a < inst.num_actions(); ++a) v += inst.p[x] * policy.table()(x, a) * inst.q(x, a);
  }
  return v.value();
}

inline double true_value(const EnumerableInstance& inst) { return true_value(inst, inst.target); }

struct ExactMoments {
  double mean = 0.0;
  double second_moment = 0.0;
  double variance = 0.0;  // per-record variance, i.e. n * Var[V_hat] for any n
};

/// Exact first and second moments of one record's contribution under p(x) pi0(a|x) N(q, sigma^2).
///
/// Contributions are affine in r, so evaluating them at r = q +/- sigma gives
/// E_r[Y] and E_r[Y^2] exactly.
inline ExactMoments exact_moments(const EnumerableInstance& inst, const Estimator& est) {
  if (est.num_contexts() != inst.num_contexts() || est.num_actions() != inst.num_actions()) {
    throw DimensionError("estimator does not match the instance");
  }
  est.check_support();
  CompensatedSum m1;
  CompensatedSum m2;
  for (std::size_t x = 0; x < inst.num_contexts(); ++x) {
    for (std::uint32_t a = 0; a < inst.num_actions(); ++a) {
      const double mass = inst.p[x] * inst.logging.table()(x, a);
      if (mass <= 0.0) continue;
      const double q = inst.q(x, a);
      const double s = inst.sigma(x, a);
      const double hi = est.contribute(x, a, q + s).value;
      const double lo = est.contribute(x, a, q - s).value;
      m1 += mass * 0.5 * (hi + lo);
      m2 += mass * 0.5 * (hi * hi + lo * lo);
    }
  }
  ExactMoments out{m1.value(), m2.value(), 0.0};
  out.variance = std::max(0.0, out.second_moment - out.mean * out.mean);
  return out;
}

/// E_D[V_hat]; by the i.i.d. structure this is the expectation of one record's contribution.
inline double exact_estimator_mean(const EnumerableInstance& inst, const Estimator& est) {
  return exact_moments(inst, est).mean;
}

struct MseBreakdown {
  double bias = 0.0;
  double variance = 0.0;  // per-record
  double mse = 0.0;
};

/// Bias^2 + per-record variance / n, from exact enumeration (valid for any estimator).
inline MseBreakdown true_mse(const EnumerableInstance& inst, const Estimator& est, std::size_t n) {
  if (n == 0) throw SizeError("sample size must be positive");
  const auto m = exact_moments(inst, est);
  MseBreakdown out;
  out.bias = m.mean - true_value(inst);
  out.variance = m.variance;
  out.mse = out.bias * out.bias + out.variance / static_cast<double>(n);
  return out;
}

namespace detail {

inline void require_group_support(const Table& target_marginal, const Table& logging_marginal) {
  for (std::size_t x = 0; x < target_marginal.num_contexts(); ++x) {
    for (std::size_t g = 0; g < target_marginal.num_actions(); ++g) {
      if (target_marginal(x, g) > 0.0 && !(logging_marginal(x, g) > 0.0)) {
        throw SupportViolation("common support w.r.t. the main actions fails for group " + std::to_string(g) + " in context " +
                               std::to_string(x));
      }
    }
  }
}

inline std::vector<std::vector<std::uint32_t>> members_by_group(const Grouping& grouping) {
  std::vector<std::vector<std::uint32_t>> out(grouping.num_groups);
  for (std::uint32_t a = 0; a < grouping.num_actions(); ++a) out[grouping.group_of[a]].push_back(a);
  return out;
}

}  // namespace detail

/// Bias of OPCB as the sum over contexts, groups and ascending same-group pairs (m < m') of
///   pi(g|x) * pi0(m|x,g) pi0(m'|x,g) * (pi(m'|x,g)/pi0(m'|x,g) - pi(m|x,g)/pi0(m|x,g))
///           * (Delta_q(x,m,m') - Delta_f(x,m,m')).
/// The first two factors are multiplied out as pi0(m|g) pi(m'|g) - pi0(m'|g) pi(m|g), which is
/// the same quantity and stays finite when a single member has zero logging probability.
inline double closed_form_bias(const EnumerableInstance& inst, const Grouping& grouping, const Table& f_hat) {
  inst.validate();
  if (!f_hat.same_shape(inst.q) || grouping.num_actions() != inst.num_actions()) throw DimensionError("model or grouping mismatch");
  const auto target_marginal = group_marginals(inst.target, grouping);
  const auto logging_marginal = group_marginals(inst.logging, grouping);
  detail::require_group_support(target_marginal, logging_marginal);
  const auto groups = detail::members_by_group(grouping);
  CompensatedSum bias;
  for (std::size_t x = 0; x < inst.num_contexts(); ++x) {
    for (std::uint32_t g = 0; g < grouping.num_groups; ++g) {
      const double pg = target_marginal(x, g);
      if (pg <= 0.0) continue;
      const double p0g = logging_marginal(x, g);
      const auto& members = groups[g];
      CompensatedSum inner;
      for (std::size_t i = 0; i < members.size(); ++i) {
        const auto m = members[i];
        const double c0m = inst.logging.table()(x, m) / p0g;
        const double cm = inst.target.table()(x, m) / pg;
        for (std::size_t j = i + 1; j < members.size(); ++j) {
          const auto mp = members[j];
          const double c0mp = inst.logging.table()(x, mp) / p0g;
          const double cmp = inst.target.table()(x, mp) / pg;
          const double shift = c0m * cmp - c0mp * cm;
          const double err = (inst.q(x, m) - inst.q(x, mp)) - (f_hat(x, m) - f_hat(x, mp));
          inner += shift * err;
        }
      }
      bias += inst.p[x] * pg * inner.value();
    }
  }
  return bias.value();
}

inline double closed_form_bias(const EnumerableInstance& inst, const MainActionSelector& phi, const Table& f_hat) {
  return closed_form_bias(inst, Grouping::from_selector(phi), f_hat);
}

inline constexpr double kPairwiseCorrectnessTolerance = 1e-9;

/// n Var[V_OPCB] as E[w^2 sigma^2] + E_x[Var_pi0[w (q - f)]] + Var_x[E_pi[q]].
/// Only valid under conditional pairwise correctness; refuses otherwise.
inline double closed_form_variance(const EnumerableInstance& inst, const Grouping& grouping, const Table& f_hat) {
  inst.validate();
  if (!f_hat.same_shape(inst.q) || grouping.num_actions() != inst.num_actions()) throw DimensionError("model or grouping mismatch");
  const auto check = check_conditional_pairwise_correctness(f_hat, inst.q, grouping, kPairwiseCorrectnessTolerance);
  if (!check.passed) {
    throw PreconditionError("conditional pairwise correctness fails (max deviation " + csv::format(check.max_deviation) +
                            "); the variance expression does not apply");
  }
  const auto target_marginal = group_marginals(inst.target, grouping);
  const auto logging_marginal = group_marginals(inst.logging, grouping);
  detail::require_group_support(target_marginal, logging_marginal);

  CompensatedSum noise_term;
  CompensatedSum model_term;
  CompensatedSum value_sq;
  CompensatedSum value_mean;
  for (std::size_t x = 0; x < inst.num_contexts(); ++x) {
    CompensatedSum e1;
    CompensatedSum e2;
    CompensatedSum ev;
    for (std::uint32_t a = 0; a < inst.num_actions(); ++a) {
      const double p0 = inst.logging.table()(x, a);
      ev += inst.target.table()(x, a) * inst.q(x, a);
      if (p0 <= 0.0) continue;
      const auto g = grouping.group_of[a];
      const double w = target_marginal(x, g) / logging_marginal(x, g);
      const double s = inst.sigma(x, a);
      noise_term += inst.p[x] * p0 * w * w * s * s;
      const double y = w * (inst.q(x, a) - f_hat(x, a));
      e1 += p0 * y;
      e2 += p0 * y * y;
    }
    model_term += inst.p[x] * (e2.value() - e1.value() * e1.value());
    value_mean += inst.p[x] * ev.value();
    value_sq += inst.p[x] * ev.value() * ev.value();
  }
  const double context_term = value_sq.value() - value_mean.value() * value_mean.value();
  return noise_term.value() + model_term.value() + context_term;
}

inline double closed_form_variance(const EnumerableInstance& inst, const MainActionSelector& phi, const Table& f_hat) {
  return closed_form_variance(inst, Grouping::from_selector(phi), f_hat);
}

// ---------------------------------------------------------------------------
// Fixtures

/// One context, two actions; q = [0, 1, 2, 4] by bitmask (bit 0 = a_1), uniform logging,
/// target [.1, .2, .3, .4], noiseless. V(target) = 2.4.
inline EnumerableInstance make_t1(double reward_sigma = 0.0) {
  Table q(1, 4);
  q(0, 0) = 0.0;
  q(0, 1) = 1.0;
  q(0, 2) = 2.0;
  q(0, 3) = 4.0;
  Table pi(1, 4);
  pi(0, 0) = 0.1;
  pi(0, 1) = 0.2;
  pi(0, 2) = 0.3;
  pi(0, 3) = 0.4;
  return {{1.0}, q, Table(1, 4, reward_sigma), TabularPolicy{pi}, TabularPolicy::uniform(1, 4)};
}

inline MainActionSelector t1_phi() { return MainActionSelector(FactoredSpace(2), 0b01); }

struct RandomInstance {
  EnumerableInstance instance;
  FactoredSpace space{1};
  MainActionSelector phi{FactoredSpace{1}, 0};
};

inline TabularPolicy random_full_support_policy(Rng& rng, std::size_t contexts, std::size_t actions, double scale = 1.0) {
  Table s(contexts, actions);
  for (double& v : s.values()) v = normal(rng, 0.0, scale);
  return softmax_from_scores(s, 1.0);
}

/// |X| in [1, max_contexts], L in [1, max_actions], random tables with full-support policies and a random selector.
inline RandomInstance random_instance(Rng& rng, std::size_t max_contexts = 3, int max_actions = 3) {
  const auto contexts = std::uniform_int_distribution<std::size_t>(1, max_contexts)(rng);
  const int actions = std::uniform_int_distribution<int>(1, max_actions)(rng);
  const FactoredSpace space(actions);
  std::vector<double> p(contexts);
  double total = 0.0;
  for (double& v : p) total += (v = uniform(rng, 0.2, 1.0));
  for (double& v : p) v /= total;
  Table q(contexts, space.subset_count());
  for (double& v : q.values()) v = normal(rng, 0.0, 2.0);
  Table sigma(contexts, space.subset_count());
  for (double& v : sigma.values()) v = uniform(rng, 0.0, 2.0);
  auto target = random_full_support_policy(rng, contexts, space.subset_count());
  auto logging = random_full_support_policy(rng, contexts, space.subset_count());
  const auto mask = std::uniform_int_distribution<std::uint32_t>(0, space.full_mask())(rng);
  return {EnumerableInstance{std::move(p), std::move(q), std::move(sigma), std::move(target), std::move(logging)}, space,
          MainActionSelector(space, mask)};
}

/// f = q + c(x, group(m)): satisfies conditional pairwise correctness by construction.
inline Table group_offset_model(Rng& rng, const Table& q, const Grouping& grouping, double scale = 1.0) {
  Table offsets(q.num_contexts(), grouping.num_groups);
  for (double& v : offsets.values()) v = normal(rng, 0.0, scale);
  Table f = q;
  for (std::size_t x = 0; x < q.num_contexts(); ++x) {
    for (std::uint32_t a = 0; a < q.num_actions(); ++a) f(x, a) += offsets(x, grouping.group_of[a]);
  }
  return f;
}

inline Table random_model(Rng& rng, std::size_t contexts, std::size_t actions, double scale = 2.0) {
  Table f(contexts, actions);
  for (double& v : f.values()) v = normal(rng, 0.0, scale);
  return f;
}

// ---------------------------------------------------------------------------
// Instance bundle: a directory of CSV tables.
//   p.csv         context_id,p
//   q.csv         context_id,subset_bits,q
//   sigma.csv     context_id,subset_bits,sigma
//   pi.csv        context_id,subset_bits,prob
//   pi0.csv       context_id,subset_bits,prob
//   f_hat.csv     context_id,subset_bits,f_hat   (optional)

struct InstanceBundle {
  EnumerableInstance instance;
  int num_actions = 1;
  std::optional<Table> f_hat;
};

inline void write_instance_bundle(const std::filesystem::path& dir, const EnumerableInstance& inst, int num_actions,
                                  const Table* f_hat = nullptr) {
  std::filesystem::create_directories(dir);
  {
    auto out = csv::open_out((dir / "p.csv").string());
    out << "context_id,p\n";
    for (std::size_t x = 0; x < inst.p.size(); ++x) out << x << ',' << csv::format(inst.p[x]) << '\n';
  }
  auto table = [&](const char* file, const Table& t, const char* column) {
    auto out = csv::open_out((dir / file).string());
    write_subset_table_csv(out, t, num_actions, column);
  };
  table("q.csv", inst.q, "q");
  table("sigma.csv", inst.sigma, "sigma");
  table("pi.csv", inst.target.table(), "prob");
  table("pi0.csv", inst.logging.table(), "prob");
  if (f_hat != nullptr) table("f_hat.csv", *f_hat, "f_hat");
}

inline InstanceBundle read_instance_bundle(const std::filesystem::path& dir) {
  InstanceBundle bundle;
  std::vector<double> p;
  {
    auto in = csv::open_in((dir / "p.csv").string());
    for (const auto& r : csv::read_rows(in, "context_id,p")) {
      const auto x = csv::parse_index(r[0]);
      if (x >= p.size()) p.resize(x + 1, 0.0);
      p[x] = csv::parse_double(r[1]);
    }
  }
  auto table = [&](const char* file, const char* column) {
    auto in = csv::open_in((dir / file).string());
    int actions = 0;
    Table t = read_subset_table_csv(in, std::string("context_id,subset_bits,") + column, &actions);
    bundle.num_actions = actions;
    if (t.num_contexts() < p.size()) {
      Table padded(p.size(), t.num_actions(), 0.0);
      for (std::size_t x = 0; x < t.num_contexts(); ++x) std::copy(t.row(x).begin(), t.row(x).end(), padded.row(x).begin());
      t = std::move(padded);
    }
    return t;
  };
  Table q = table("q.csv", "q");
  Table sigma = table("sigma.csv", "sigma");
  Table pi = table("pi.csv", "prob");
  Table pi0 = table("pi0.csv", "prob");
  bundle.instance = EnumerableInstance{std::move(p), std::move(q), std::move(sigma), TabularPolicy{std::move(pi)},
                                       TabularPolicy{std::move(pi0)}};
  if (std::filesystem::exists(dir / "f_hat.csv")) bundle.f_hat = table("f_hat.csv", "f_hat");
  bundle.instance.validate();
  return bundle;
}

}  // namespace opcb
