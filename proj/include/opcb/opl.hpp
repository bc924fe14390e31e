#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include "opcb/approx.hpp"
#include "opcb/combspace.hpp"
#include "opcb/csv.hpp"
#include "opcb/errors.hpp"
#include "opcb/oracle.hpp"
#include "opcb/parametrized_policy.hpp"
#include "opcb/policy.hpp"
#include "opcb/regress.hpp"
#include "opcb/synth.hpp"
#include "opcb/table.hpp"

namespace opcb {

struct GradientEstimate {
  std::string estimator;
  std::vector<double> gradient;
  double value = 0.0;                              // the scalar estimate the gradient differentiates
  std::vector<std::vector<double>> contributions;  // per record; empty unless requested
  std::size_t n = 0;

  double norm() const {
    double s = 0.0;
    for (double g : gradient) s += g * g;
    return std::sqrt(s);
  }
};

namespace detail {

/// Per-context quantities of pi_zeta shared by every record from that context.
class PolicyGradientCache {
 public:
  PolicyGradientCache(const ParametrizedPolicy& policy, const Grouping& grouping, const Table& model)
      : policy_{policy}, grouping_{grouping}, model_{model} {}

  struct Context {
    std::vector<double> probs;
    std::vector<double> mean_grad;   // E_pi[grad s(x, .)]
    std::vector<double> model_term;  // E_pi[f(x, .) grad log pi(.|x)]
    double model_mean = 0.0;         // E_pi[f(x, .)]
    std::vector<double> group_prob;
    std::unordered_map<std::uint32_t, std::vector<double>> group_score;  // grad log pi(g|x)
  };

  Context& context(std::size_t x) {
    auto it = contexts_.find(x);
    if (it != contexts_.end()) return it->second;
    Context c;
    c.probs = policy_.probs(x);
    c.mean_grad = policy_.mean_score_gradient(x, c.probs);
    c.model_term.assign(policy_.num_params(), 0.0);
    for (std::uint32_t a = 0; a < policy_.num_actions(); ++a) {
      const double pf = c.probs[a] * model_(x, a);
      c.model_mean += pf;
      policy_.accumulate_score_gradient(x, a, pf, c.model_term);
    }
    for (std::size_t k = 0; k < c.model_term.size(); ++k) c.model_term[k] -= c.model_mean * c.mean_grad[k];
    c.group_prob.assign(grouping_.num_groups, 0.0);
    for (std::uint32_t a = 0; a < policy_.num_actions(); ++a) c.group_prob[grouping_.group_of[a]] += c.probs[a];
    return contexts_.emplace(x, std::move(c)).first->second;
  }

  /// grad log pi(g|x) = E_{pi(.|x, g)}[grad s] - E_pi[grad s].
  const std::vector<double>& group_score(Context& c, std::size_t x, std::uint32_t g) {
    auto it = c.group_score.find(g);
    if (it != c.group_score.end()) return it->second;
    if (!(c.group_prob[g] > 0.0)) throw SupportViolation("target policy gives zero mass to group " + std::to_string(g));
    std::vector<double> s(policy_.num_params(), 0.0);
    for (std::uint32_t a = 0; a < policy_.num_actions(); ++a) {
      if (grouping_.group_of[a] == g) policy_.accumulate_score_gradient(x, a, c.probs[a] / c.group_prob[g], s);
    }
    for (std::size_t k = 0; k < s.size(); ++k) s[k] -= c.mean_grad[k];
    return c.group_score.emplace(g, std::move(s)).first->second;
  }

 private:
  const ParametrizedPolicy& policy_;
  const Grouping& grouping_;
  const Table& model_;
  std::unordered_map<std::size_t, Context> contexts_;
};

inline void check_gradient_inputs(const ParametrizedPolicy& policy, const TabularPolicy& logging, const Grouping& grouping,
                                  const Table& model) {
  if (policy.num_actions() != logging.num_actions() || policy.num_contexts() != logging.num_contexts()) {
    throw DimensionError("learned and logging policies differ in shape");
  }
  if (grouping.num_actions() != policy.num_actions()) throw DimensionError("grouping does not match the policy");
  if (!model.same_shape(logging.table())) throw DimensionError("model table does not match the policy");
}

}  // namespace detail

/// (1/n) sum_i [ w_g(x_i, a_i) (r_i - f(x_i, a_i)) grad log pi(g(a_i)|x_i) + E_pi[f grad log pi] ],
/// w_g = pi(g|x) / pi0(g|x). IPS-PG, DR-PG and OPCB-PG are instances of this form.
inline GradientEstimate marginal_weight_gradient(std::string name, const LoggedDataset& data, const ParametrizedPolicy& policy,
                                                 const TabularPolicy& logging, const Grouping& grouping, const Table& model,
                                                 bool keep_contributions = false) {
  detail::check_gradient_inputs(policy, logging, grouping, model);
  if (data.empty()) throw SizeError("no records to estimate a gradient from");
  const auto logging_marginal = group_marginals(logging, grouping);
  detail::PolicyGradientCache cache(policy, grouping, model);
  GradientEstimate out;
  out.estimator = std::move(name);
  out.n = data.size();
  out.gradient.assign(policy.num_params(), 0.0);
  std::vector<double> y(policy.num_params());
  double value = 0.0;
  for (const auto& rec : data.records) {
    auto& c = cache.context(rec.context_id);
    const auto g = grouping.group_of.at(rec.action);
    const double p0 = logging_marginal(rec.context_id, g);
    if (!(p0 > 0.0)) throw SupportViolation("zero logging probability for context " + std::to_string(rec.context_id) +
                                            ", action " + std::to_string(rec.action));
    const double w = c.group_prob[g] / p0;
    const double residual = rec.reward - model(rec.context_id, rec.action);
    const double coef = w * residual;
    value += coef + c.model_mean;
    if (coef != 0.0 || keep_contributions) {
      const auto& s = cache.group_score(c, rec.context_id, g);
      for (std::size_t k = 0; k < y.size(); ++k) y[k] = coef * s[k] + c.model_term[k];
    } else {
      std::copy(c.model_term.begin(), c.model_term.end(), y.begin());
    }
    for (std::size_t k = 0; k < y.size(); ++k) out.gradient[k] += y[k];
    if (keep_contributions) out.contributions.push_back(y);
  }
  const double inv = 1.0 / static_cast<double>(out.n);
  for (double& v : out.gradient) v *= inv;
  out.value = value * inv;
  for (double v : out.gradient) {
    if (!std::isfinite(v)) throw NumericError(out.estimator + " gradient is not finite");
  }
  return out;
}

inline GradientEstimate grad_ips(const LoggedDataset& data, const ParametrizedPolicy& policy, const TabularPolicy& logging,
                                 bool keep_contributions = false) {
  const Table zero(logging.num_contexts(), logging.num_actions(), 0.0);
  return marginal_weight_gradient("IPS-PG", data, policy, logging, Grouping::identity(policy.num_actions()), zero,
                                  keep_contributions);
}

inline GradientEstimate grad_dr(const LoggedDataset& data, const ParametrizedPolicy& policy, const TabularPolicy& logging,
                                const Table& q_hat, bool keep_contributions = false) {
  return marginal_weight_gradient("DR-PG", data, policy, logging, Grouping::identity(policy.num_actions()), q_hat,
                                  keep_contributions);
}

inline GradientEstimate grad_opcb(const LoggedDataset& data, const ParametrizedPolicy& policy, const TabularPolicy& logging,
                                  const Table& f_hat, const MainActionSelector& phi, bool keep_contributions = false) {
  if (phi.space().subset_count() != policy.num_actions()) throw DimensionError("selector and policy spaces differ");
  return marginal_weight_gradient("OPCB-PG", data, policy, logging, Grouping::from_selector(phi), f_hat, keep_contributions);
}

// ---------------------------------------------------------------------------
// Enumeration oracles for policy gradients.

/// grad V(pi_zeta) = sum_x p(x) sum_a pi(a|x) q(x,a) grad log pi(a|x).
inline std::vector<double> true_gradient(const EnumerableInstance& inst, const ParametrizedPolicy& policy) {
  if (policy.num_contexts() != inst.num_contexts() || policy.num_actions() != inst.num_actions()) {
    throw DimensionError("policy does not match the instance");
  }
  std::vector<CompensatedSum> acc(policy.num_params());
  std::vector<double> g(policy.num_params());
  for (std::size_t x = 0; x < inst.num_contexts(); ++x) {
    const auto probs = policy.probs(x);
    const auto mean = policy.mean_score_gradient(x, probs);
    for (std::uint32_t a = 0; a < inst.num_actions(); ++a) {
      const double c = inst.p[x] * probs[a] * inst.q(x, a);
      std::fill(g.begin(), g.end(), 0.0);
      policy.accumulate_score_gradient(x, a, 1.0, g);
      for (std::size_t k = 0; k < g.size(); ++k) acc[k] += c * (g[k] - mean[k]);
    }
  }
  std::vector<double> out(acc.size());
  for (std::size_t k = 0; k < acc.size(); ++k) out[k] = acc[k].value();
  return out;
}

/// E over one record (x ~ p, a ~ pi0, r with mean q) of the per-record gradient contribution.
/// Contributions are affine in r, so evaluating at r = q is exact.
inline std::vector<double> exact_expected_gradient(const EnumerableInstance& inst, const ParametrizedPolicy& policy,
                                                   const Grouping& grouping, const Table& model) {
  detail::check_gradient_inputs(policy, inst.logging, grouping, model);
  const auto logging_marginal = group_marginals(inst.logging, grouping);
  std::vector<CompensatedSum> acc(policy.num_params());
  for (std::size_t x = 0; x < inst.num_contexts(); ++x) {
    for (std::uint32_t g = 0; g < grouping.num_groups; ++g) {
      if (!(logging_marginal(x, g) > 0.0)) {
        double reach = 0.0;
        const auto probs = policy.probs(x);
        for (std::uint32_t a = 0; a < inst.num_actions(); ++a) {
          if (grouping.group_of[a] == g) reach += probs[a];
        }
        if (reach > 0.0) throw SupportViolation("gradient oracle: group " + std::to_string(g) + " unsupported by logging");
      }
    }
    for (std::uint32_t a = 0; a < inst.num_actions(); ++a) {
      const double mass = inst.p[x] * inst.logging.table()(x, a);
      if (mass <= 0.0) continue;
      LoggedDataset one;
      one.num_contexts = inst.num_contexts();
      one.num_actions = inst.num_actions();
      one.records.push_back({x, a, inst.q(x, a)});
      const auto est = marginal_weight_gradient("oracle", one, policy, inst.logging, grouping, model);
      for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += mass * est.gradient[k];
    }
  }
  std::vector<double> out(acc.size());
  for (std::size_t k = 0; k < acc.size(); ++k) out[k] = acc[k].value();
  return out;
}

// ---------------------------------------------------------------------------

inline constexpr double kRegBasedBeta = 10.0;

/// Reg-based baseline: softmax(beta * q_hat) with q_hat from a direct fit.
inline TabularPolicy reg_based_policy(const ContextPool& pool, const LoggedDataset& data, const ApproximatorSpec& spec,
                                      double beta = kRegBasedBeta) {
  if (data.empty()) throw FitError("Reg-based policy needs logged data");
  return softmax_from_scores(fit_direct(pool, data, spec).tabulate(), beta);
}

struct TrainConfig {
  double learning_rate = 0.05;
  int iterations = 500;
  int eval_every = 1;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be positive");
    if (iterations < 0) throw ConfigError("iteration count must be nonnegative");
    if (eval_every < 1) throw ConfigError("evaluation cadence must be at least 1");
  }
};

struct TraceRow {
  int iteration = 0;
  double true_value = NAN;
  double estimated_value = NAN;
  double grad_norm = NAN;
};

struct TrainResult {
  ParametrizedPolicy policy;
  std::vector<TraceRow> trace;
};

using GradientFn = std::function<GradientEstimate(const ParametrizedPolicy&)>;
using ValueFn = std::function<double(const TabularPolicy&)>;

/// Full-batch gradient ascent zeta <- zeta + eta * grad. Row t of the trace describes the policy
/// before update t; the last row is the returned policy.
inline TrainResult train(ParametrizedPolicy policy, const GradientFn& gradient, const TrainConfig& config,
                         const ValueFn& true_value_fn = {}) {
  config.validate();
  TrainResult out{std::move(policy), {}};
  std::vector<double> params(out.policy.params().begin(), out.policy.params().end());
  auto record = [&](int t, const GradientEstimate* g) {
    TraceRow row;
    row.iteration = t;
    if (true_value_fn) row.true_value = true_value_fn(out.policy.tabulate());
    if (g != nullptr) {
      row.estimated_value = g->value;
      row.grad_norm = g->norm();
    }
    out.trace.push_back(row);
  };
  for (int t = 0; t < config.iterations; ++t) {
    const auto g = gradient(out.policy);
    if (g.gradient.size() != params.size()) throw DimensionError("gradient length does not match the policy");
    for (double v : g.gradient) {
      if (!std::isfinite(v)) throw NumericError("non-finite gradient at iteration " + std::to_string(t));
    }
    if (t % config.eval_every == 0) record(t, &g);
    for (std::size_t k = 0; k < params.size(); ++k) params[k] += config.learning_rate * g.gradient[k];
    out.policy.set_params(params);
  }
  record(config.iterations, nullptr);
  return out;
}

inline void write_trace_csv(std::ostream& out, const std::vector<TraceRow>& trace) {
  out << "iteration,true_value,estimated_value,grad_norm\n";
  auto f = [](double v) { return std::isnan(v) ? std::string() : csv::format(v); };
  for (const auto& r : trace) {
    out << r.iteration << ',' << f(r.true_value) << ',' << f(r.estimated_value) << ',' << f(r.grad_norm) << '\n';
  }
}

}  // namespace opcb
