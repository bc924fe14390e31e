#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "opcb/approx.hpp"
#include "opcb/combspace.hpp"
#include "opcb/csv.hpp"
#include "opcb/errors.hpp"
#include "opcb/policy.hpp"
#include "opcb/rng.hpp"
#include "opcb/slate.hpp"
#include "opcb/table.hpp"

namespace opcb {

struct CcbEnvConfig {
  std::size_t n_users = 200;
  std::size_t d_x = 5;
  int num_actions = 8;
  int k_true = 3;
  double lambda = 0.8;
  double reward_sigma = 3.0;
};

/// Synthetic combinatorial-bandit environment with q = lambda * g(x, phi_true(m)) + (1 - lambda) * h(x, m).
///
/// Every random table is drawn before lambda is applied, so environments built
/// from the same seed share contexts, g, h and behavior scores for any lambda.
struct CcbEnvironment {
  FactoredSpace space{1};
  ContextPool contexts;
  MainActionSelector phi_true{FactoredSpace{1}, 0};
  Table main_effect;      // contexts x 2^K: g(x, c) for each group c of phi_true
  Table residual;         // contexts x 2^L: h(x, m)
  Table q;                // contexts x 2^L
  Table behavior_scores;  // contexts x 2^L, lambda-free linear logits for the lambda-sweep logging policy
  double lambda = 0.8;
  double reward_sigma = 3.0;

  std::size_t num_contexts() const noexcept { return contexts.size(); }
  double g(std::size_t x, SubsetAction m) const { return main_effect(x, phi_true.group_index(m)); }
  double h(std::size_t x, SubsetAction m) const { return residual(x, m.bits); }
  Table sigma_table() const { return Table(q.num_contexts(), q.num_actions(), reward_sigma); }
};

inline double compose_reward(double lambda, double g, double h) { return lambda * g + (1.0 - lambda) * h; }

inline CcbEnvironment generate_ccb_env(std::uint64_t seed, const CcbEnvConfig& cfg) {
  const FactoredSpace space(cfg.num_actions);
  if (cfg.k_true < 0 || cfg.k_true > cfg.num_actions) throw DimensionError("K_true must lie in [0, L]");
  if (!(cfg.lambda >= 0.0 && cfg.lambda <= 1.0)) throw DimensionError("lambda must lie in [0, 1]");
  if (cfg.n_users == 0) throw DimensionError("need at least one user");
  if (!(cfg.reward_sigma >= 0.0)) throw DimensionError("reward sigma must be non-negative");

  Rng rng = make_rng(seed, 0xE27);
  CcbEnvironment env;
  env.space = space;
  env.lambda = cfg.lambda;
  env.reward_sigma = cfg.reward_sigma;

  Table ctx(cfg.n_users, cfg.d_x);
  for (double& v : ctx.values()) v = normal(rng);
  env.contexts = ContextPool{std::move(ctx)};

  std::vector<int> order(static_cast<std::size_t>(cfg.num_actions));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::uint32_t mask = 0;
  for (int k = 0; k < cfg.k_true; ++k) mask |= std::uint32_t{1} << order[static_cast<std::size_t>(k)];
  env.phi_true = MainActionSelector(space, mask);

  // g(x, c) = x . W[:, c] + b_c
  const std::uint32_t groups = env.phi_true.group_count();
  Table weights(cfg.d_x, groups);
  for (double& v : weights.values()) v = uniform(rng, -1.0, 1.0);
  std::vector<double> bias(groups);
  for (double& v : bias) v = uniform(rng, -1.0, 1.0);
  env.main_effect = Table(cfg.n_users, groups);
  for (std::size_t x = 0; x < cfg.n_users; ++x) {
    for (std::uint32_t c = 0; c < groups; ++c) {
      double v = bias[c];
      for (std::size_t j = 0; j < cfg.d_x; ++j) v += env.contexts[x][j] * weights(j, c);
      env.main_effect(x, c) = v;
    }
  }

  // h(x, m) = (theta_x . x)(theta_m . m) + eps_{x,m}
  std::vector<double> theta_x(cfg.d_x);
  std::vector<double> theta_m(static_cast<std::size_t>(cfg.num_actions));
  for (double& v : theta_x) v = uniform(rng, -1.5, 1.5);
  for (double& v : theta_m) v = uniform(rng, -1.5, 1.5);
  env.residual = Table(cfg.n_users, space.subset_count());
  for (std::size_t x = 0; x < cfg.n_users; ++x) {
    double tx = 0.0;
    for (std::size_t j = 0; j < cfg.d_x; ++j) tx += theta_x[j] * env.contexts[x][j];
    for (std::uint32_t b = 0; b < space.subset_count(); ++b) {
      double tm = 0.0;
      for (int l = 0; l < cfg.num_actions; ++l) {
        if ((b >> l) & 1U) tm += theta_m[static_cast<std::size_t>(l)];
      }
      env.residual(x, b) = tx * tm + uniform(rng, -2.5, 2.5);
    }
  }

  // Behavior logits: x . V . bits(m) + c . bits(m).
  Table behavior_w(cfg.d_x, static_cast<std::size_t>(cfg.num_actions));
  for (double& v : behavior_w.values()) v = uniform(rng, -1.0, 1.0);
  std::vector<double> behavior_c(static_cast<std::size_t>(cfg.num_actions));
  for (double& v : behavior_c) v = uniform(rng, -1.0, 1.0);
  env.behavior_scores = Table(cfg.n_users, space.subset_count());
  for (std::size_t x = 0; x < cfg.n_users; ++x) {
    for (std::uint32_t b = 0; b < space.subset_count(); ++b) {
      double s = 0.0;
      for (int l = 0; l < cfg.num_actions; ++l) {
        if (!((b >> l) & 1U)) continue;
        const auto li = static_cast<std::size_t>(l);
        s += behavior_c[li];
        for (std::size_t j = 0; j < cfg.d_x; ++j) s += env.contexts[x][j] * behavior_w(j, li);
      }
      env.behavior_scores(x, b) = s;
    }
  }

  env.q = Table(cfg.n_users, space.subset_count());
  for (std::size_t x = 0; x < cfg.n_users; ++x) {
    for (std::uint32_t b = 0; b < space.subset_count(); ++b) {
      env.q(x, b) = compose_reward(env.lambda, env.g(x, {b}), env.h(x, {b}));
    }
  }
  return env;
}

/// Same random tables, recomposed at a different main-effect weight.
inline CcbEnvironment with_lambda(CcbEnvironment env, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw DimensionError("lambda must lie in [0, 1]");
  env.lambda = lambda;
  for (std::size_t x = 0; x < env.num_contexts(); ++x) {
    for (std::uint32_t b = 0; b < env.space.subset_count(); ++b) {
      env.q(x, b) = compose_reward(lambda, env.g(x, {b}), env.h(x, {b}));
    }
  }
  return env;
}

struct PolicyPair {
  TabularPolicy logging;
  TabularPolicy target;
};

/// Logging = softmax(beta * q), target = epsilon-greedy on q.
inline PolicyPair standard_policies(const CcbEnvironment& env, double beta, double epsilon) {
  return {softmax_from_scores(env.q, beta), epsilon_greedy_from_scores(env.q, epsilon)};
}

/// Policies for lambda sweeps. Neither reads env.lambda: logging is a softmax over the
/// behavior logits; target is softmax(beta_target * z) with z ~ Normal(q_ref, noise_sigma),
/// q_ref the reward recomposed at the fixed reference weight `reference_lambda`.
inline PolicyPair lambda_free_policies(const CcbEnvironment& env, std::uint64_t seed, double reference_lambda = 0.8,
                                       double beta_target = 3.0, double noise_sigma = 3.0) {
  Rng rng = make_rng(seed, 0x7A26E7);
  Table z(env.num_contexts(), env.space.subset_count());
  for (std::size_t x = 0; x < env.num_contexts(); ++x) {
    for (std::uint32_t b = 0; b < env.space.subset_count(); ++b) {
      z(x, b) = normal(rng, compose_reward(reference_lambda, env.g(x, {b}), env.h(x, {b})), noise_sigma);
    }
  }
  return {softmax_from_scores(env.behavior_scores, 1.0), softmax_from_scores(z, beta_target)};
}

struct LoggedRecord {
  std::size_t context_id = 0;
  std::uint32_t action = 0;  // subset bitmask, or slate code
  double reward = 0.0;

  SubsetAction subset() const noexcept { return {action}; }
  friend bool operator==(const LoggedRecord&, const LoggedRecord&) = default;
};

/// n records (x_i, m_i, r_i) drawn i.i.d. under a logging policy.
struct LoggedDataset {
  std::vector<LoggedRecord> records;
  std::size_t num_contexts = 0;
  std::size_t num_actions = 0;
  std::uint64_t seed = 0;

  std::size_t size() const noexcept { return records.size(); }
  bool empty() const noexcept { return records.empty(); }
};

inline std::uint32_t sample_action(std::span<const double> probs, double u) {
  double acc = 0.0;
  std::uint32_t last_positive = 0;
  for (std::uint32_t a = 0; a < probs.size(); ++a) {
    if (probs[a] <= 0.0) continue;
    last_positive = a;
    acc += probs[a];
    if (u < acc) return a;
  }
  return last_positive;  // u landed in the rounding slack at the top
}

/// Draws x uniformly from the pool, a ~ logging(.|x), r ~ Normal(q(x,a), sigma(x,a)).
inline LoggedDataset sample_logged_data(const Table& q, const Table& sigma, const TabularPolicy& logging, long long n,
                                        std::uint64_t seed) {
  if (n <= 0) throw SizeError("number of logged records must be positive");
  if (!q.same_shape(logging.table()) || !q.same_shape(sigma)) throw DimensionError("reward and policy tables differ in shape");
  Rng rng = make_rng(seed, 0xDA7A);
  std::uniform_int_distribution<std::size_t> pick(0, q.num_contexts() - 1);
  LoggedDataset data;
  data.num_contexts = q.num_contexts();
  data.num_actions = q.num_actions();
  data.seed = seed;
  data.records.reserve(static_cast<std::size_t>(n));
  for (long long i = 0; i < n; ++i) {
    const std::size_t x = pick(rng);
    const std::uint32_t a = sample_action(logging.row(x), uniform(rng, 0.0, 1.0));
    const double s = sigma(x, a);
    const double r = s > 0.0 ? normal(rng, q(x, a), s) : q(x, a);
    data.records.push_back({x, a, r});
  }
  return data;
}

inline LoggedDataset sample_logged_data(const CcbEnvironment& env, const TabularPolicy& logging, long long n,
                                        std::uint64_t seed) {
  return sample_logged_data(env.q, env.sigma_table(), logging, n, seed);
}

/// Geometric mean of the base rewards of the included actions; the empty subset maps to 1.
inline double geometric_subset_reward(std::span<const double> base_rewards, SubsetAction m) {
  if (m.bits >> std::min<std::size_t>(base_rewards.size(), 31) != 0) {
    throw DimensionError("subset includes actions beyond the base-reward table");
  }
  if (m.bits == 0) return 1.0;
  double log_sum = 0.0;
  for (std::size_t l = 0; l < base_rewards.size(); ++l) {
    if (!m.contains(static_cast<int>(l))) continue;
    if (!(base_rewards[l] > 0.0)) throw NumericError("base reward of an included action must be positive");
    log_sum += std::log(base_rewards[l]);
  }
  return std::exp(log_sum / static_cast<double>(m.size()));
}

/// q table for every (x, m) from a (context x action) base-reward table.
inline Table geometric_reward_table(const Table& base_rewards) {
  const FactoredSpace space(static_cast<int>(base_rewards.num_actions()));
  Table q(base_rewards.num_contexts(), space.subset_count());
  for (std::size_t x = 0; x < q.num_contexts(); ++x) {
    for (std::uint32_t b = 0; b < space.subset_count(); ++b) q(x, b) = geometric_subset_reward(base_rewards.row(x), {b});
  }
  return q;
}

// Base-reward table CSV: context_id,action_index,q_tilde (action_index 0-based).
inline Table read_base_reward_csv(std::istream& in) {
  const auto rows = csv::read_rows(in, "context_id,action_index,q_tilde");
  std::size_t contexts = 0;
  std::size_t actions = 0;
  for (const auto& r : rows) {
    contexts = std::max(contexts, csv::parse_index(r[0]) + 1);
    actions = std::max(actions, csv::parse_index(r[1]) + 1);
  }
  Table t(contexts, actions, 0.0);
  for (const auto& r : rows) t(csv::parse_index(r[0]), csv::parse_index(r[1])) = csv::parse_double(r[2]);
  return t;
}

// LoggedDataset CSV: context_id,subset_bits,reward

inline void write_dataset_csv(std::ostream& out, const LoggedDataset& data, int num_actions) {
  out << "context_id,subset_bits,reward\n";
  for (const auto& r : data.records) {
    out << r.context_id << ',' << to_bit_string(r.subset(), num_actions) << ',' << csv::format(r.reward) << '\n';
  }
}

inline LoggedDataset read_dataset_csv(std::istream& in, std::size_t num_contexts, int num_actions) {
  const FactoredSpace space(num_actions);
  LoggedDataset data;
  data.num_contexts = num_contexts;
  data.num_actions = space.subset_count();
  for (const auto& r : csv::read_rows(in, "context_id,subset_bits,reward")) {
    if (r[1].size() != static_cast<std::size_t>(num_actions)) throw IoError("subset_bits width does not match the space");
    LoggedRecord rec{csv::parse_index(r[0]), parse_bit_string(r[1]).bits, csv::parse_double(r[2])};
    if (rec.context_id >= num_contexts) throw LookupError("unknown context id " + r[0]);
    data.records.push_back(rec);
  }
  return data;
}

inline void write_env_csv(std::ostream& out, const CcbEnvironment& env) {
  write_subset_table_csv(out, env.q, env.space.num_actions(), "q");
}

// ---------------------------------------------------------------------------
// Slates

enum class SlateRewardKind { Mean, Linear, Geometric };

/// Slate environment; slot l's reward table is (contexts x (|A_l| + 1)) with column 0 unused.
struct SlateEnvironment {
  SlateSpace space{{1}};
  std::vector<Table> slot_rewards;
  SlateRewardKind kind = SlateRewardKind::Mean;
  double reward_sigma = 0.0;

  std::size_t num_contexts() const noexcept { return slot_rewards.front().num_contexts(); }
};

/// Mean of per-slot rewards over non-empty slots (0 for the all-empty slate); the Linear
/// kind sums them and the Geometric kind takes their geometric mean (1 when all empty).
inline double slate_reward(const SlateEnvironment& env, std::size_t x, const std::vector<int>& slate) {
  if (static_cast<int>(slate.size()) != env.space.num_slots()) throw DimensionError("slate has the wrong number of slots");
  double sum = 0.0;
  double log_sum = 0.0;
  int filled = 0;
  for (int l = 0; l < env.space.num_slots(); ++l) {
    const int a = slate[static_cast<std::size_t>(l)];
    if (a < 0 || a > env.space.slot_size(l)) {
      throw DimensionError("slot " + std::to_string(l) + " action " + std::to_string(a) + " outside A_l");
    }
    if (a == 0) continue;
    const double v = env.slot_rewards[static_cast<std::size_t>(l)].at(x, static_cast<std::size_t>(a));
    sum += v;
    if (env.kind == SlateRewardKind::Geometric) {
      if (!(v > 0.0)) throw NumericError("geometric slate reward needs positive slot rewards");
      log_sum += std::log(v);
    }
    ++filled;
  }
  switch (env.kind) {
    case SlateRewardKind::Linear:
      return sum;
    case SlateRewardKind::Geometric:
      return filled == 0 ? 1.0 : std::exp(log_sum / filled);
    case SlateRewardKind::Mean:
      break;
  }
  return filled == 0 ? 0.0 : sum / filled;
}

inline Table slate_reward_table(const SlateEnvironment& env) {
  Table q(env.num_contexts(), env.space.slate_count());
  for (std::size_t x = 0; x < q.num_contexts(); ++x) {
    for (std::uint32_t s = 0; s < env.space.slate_count(); ++s) q(x, s) = slate_reward(env, x, env.space.decode(s));
  }
  return q;
}

/// Per-slot rewards q_l(x, a) = exp(0.5 * theta_{l,a} . x / sqrt(d) + b_{l,a}), all positive.
inline SlateEnvironment generate_slate_env(std::uint64_t seed, const ContextPool& contexts, std::vector<int> slot_sizes,
                                           SlateRewardKind kind, double reward_sigma) {
  SlateEnvironment env;
  env.space = SlateSpace(std::move(slot_sizes));
  env.kind = kind;
  env.reward_sigma = reward_sigma;
  Rng rng = make_rng(seed, 0x51A7E);
  const double scale = contexts.dim() == 0 ? 0.0 : 0.5 / std::sqrt(static_cast<double>(contexts.dim()));
  for (int l = 0; l < env.space.num_slots(); ++l) {
    const auto choices = static_cast<std::size_t>(env.space.slot_choices(l));
    Table t(contexts.size(), choices, 0.0);
    for (std::size_t a = 1; a < choices; ++a) {
      std::vector<double> theta(contexts.dim());
      for (double& v : theta) v = uniform(rng, -1.0, 1.0);
      const double b = uniform(rng, -1.0, 1.0);
      for (std::size_t x = 0; x < contexts.size(); ++x) {
        double s = 0.0;
        for (std::size_t j = 0; j < contexts.dim(); ++j) s += theta[j] * contexts[x][j];
        t(x, a) = std::exp(scale * s + b);
      }
    }
    env.slot_rewards.push_back(std::move(t));
  }
  return env;
}

/// Factorizable logging (per-slot softmax of beta * q_l) and target (per-slot epsilon-greedy on q_l).
/// The empty choice scores 0 in both.
inline std::pair<FactorizedSlatePolicy, FactorizedSlatePolicy> slate_policies(const SlateEnvironment& env, double beta,
                                                                              double epsilon) {
  std::vector<TabularPolicy> logging;
  std::vector<TabularPolicy> target;
  for (const auto& t : env.slot_rewards) {
    logging.push_back(softmax_from_scores(t, beta));
    target.push_back(epsilon_greedy_from_scores(t, epsilon));
  }
  return {FactorizedSlatePolicy(env.space, std::move(logging)), FactorizedSlatePolicy(env.space, std::move(target))};
}

}  // namespace opcb
