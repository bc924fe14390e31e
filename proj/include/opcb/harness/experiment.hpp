#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "opcb/estim.hpp"
#include "opcb/harness/config.hpp"
#include "opcb/harness/results.hpp"
#include "opcb/opl.hpp"
#include "opcb/oracle.hpp"
#include "opcb/parallel.hpp"
#include "opcb/regress.hpp"
#include "opcb/synth.hpp"
#include "opcb/tune.hpp"

namespace opcb::harness {

struct RunOptions {
  int jobs = 1;
  bool permissive = false;
};

/// Config with the sweep axis set to `value`.
inline ExperimentConfig at_axis(ExperimentConfig c, double value) {
  switch (c.axis) {
    case Axis::None: break;
    case Axis::N: c.n = static_cast<long long>(std::llround(value)); break;
    case Axis::NumActions: c.num_actions = static_cast<int>(std::lround(value)); break;
    case Axis::Lambda: c.lambda = value; break;
    case Axis::K: c.K = static_cast<int>(std::lround(value)); break;
    case Axis::RewardSigma: c.reward_sigma = value; break;
    case Axis::Epsilon: c.epsilon = value; break;
    case Axis::BiasNoise: c.bias_noise = value; break;
    case Axis::SlateL: c.slate_L = static_cast<int>(std::lround(value)); break;
  }
  c.k_true = std::min(c.k_true, c.num_actions);
  return c;
}

/// Seeds of one replication. They depend only on (master seed, replication), never on the
/// replication count or the axis position, so shrinking a run keeps its prefix unchanged.
struct ReplicationSeeds {
  std::uint64_t env;
  std::uint64_t policy;
  std::uint64_t data;
  std::uint64_t candidates;
  std::uint64_t fit;
  std::uint64_t bias;
};

inline ReplicationSeeds replication_seeds(const ExperimentConfig& c, int replication) {
  const auto r = mix_seed(c.seed, static_cast<std::uint64_t>(replication));
  return {c.freeze_env ? mix_seed(c.seed, 0xF0F0F0F0ULL) : mix_seed(r, 1), mix_seed(r, 2), mix_seed(r, 3), mix_seed(r, 4),
          mix_seed(r, 5), mix_seed(r, 6)};
}

/// Environment, policies and logged data of one replication at one axis value.
struct CcbReplication {
  CcbEnvironment env;
  PolicyPair policies;
  LoggedDataset data;
  EnumerableInstance instance;
  double truth = 0.0;
};

inline CcbReplication make_ccb_replication(const ExperimentConfig& c, const ReplicationSeeds& s) {
  CcbEnvConfig ec;
  ec.n_users = c.users;
  ec.d_x = c.d_x;
  ec.num_actions = c.num_actions;
  ec.k_true = c.k_true;
  ec.lambda = c.lambda;
  ec.reward_sigma = c.reward_sigma;
  auto env = generate_ccb_env(s.env, ec);
  const bool lambda_free =
      c.policies == PolicyScheme::LambdaFree || (c.policies == PolicyScheme::Auto && c.axis == Axis::Lambda);
  auto policies = lambda_free ? lambda_free_policies(env, s.policy) : standard_policies(env, c.beta, c.epsilon);
  auto data = sample_logged_data(env, policies.logging, c.n, s.data);
  auto inst = to_instance(env, policies.logging, policies.target);
  const double truth = true_value(inst);
  return {std::move(env), std::move(policies), std::move(data), std::move(inst), truth};
}

inline const std::vector<std::string>& ope_estimator_names() {
  static const std::vector<std::string> names{"DM", "IPS", "DR", "OPCB-true", "OPCB-best", "OPCB-ours"};
  return names;
}

inline void require_known(const std::vector<std::string>& requested, const std::vector<std::string>& known) {
  for (const auto& e : requested) {
    if (std::find(known.begin(), known.end(), e) == known.end()) throw ConfigError("unknown estimator '" + e + "'");
  }
}

inline ApproximatorSpec approximator_spec(const ExperimentConfig& c, std::uint64_t seed) {
  ApproximatorSpec spec;
  spec.kind = c.approximator;
  spec.mlp.seed = seed;
  return spec;
}

inline CandidateSet candidate_set(const ExperimentConfig& c, const FactoredSpace& space, std::uint64_t seed) {
  return c.K > 0 ? CandidateSet::exhaustive_k(space, c.K) : CandidateSet::random_search(space, c.candidates, seed);
}

inline bool wants(const ExperimentConfig& c, const char* name) {
  return std::find(c.estimators.begin(), c.estimators.end(), name) != c.estimators.end();
}

/// All estimators of one OPE replication, in the configured order.
inline std::vector<ReplicationRecord> run_ope_replication(const ExperimentConfig& base, std::size_t axis_index, int replication,
                                                          const RunOptions& options) {
  const double axis_value = base.axis_values()[axis_index];
  const auto c = at_axis(base, axis_value);
  const auto seeds = replication_seeds(base, replication);
  std::vector<ReplicationRecord> out;
  auto blank = [&](const std::string& name) {
    ReplicationRecord r;
    r.axis_index = axis_index;
    r.axis_value = axis_value;
    r.replication = replication;
    r.estimator = name;
    return r;
  };
  std::optional<CcbReplication> made;
  try {
    made.emplace(make_ccb_replication(c, seeds));
  } catch (const Error& e) {
    for (const auto& name : c.estimators) {
      auto r = blank(name);
      r.error = e.what();
      out.push_back(std::move(r));
    }
    return out;
  }
  const auto& rep = *made;
  const auto& pool = rep.env.contexts;
  const auto spec = approximator_spec(c, seeds.fit);

  // Lazily computed shared pieces.
  std::optional<Table> q_hat;
  auto direct_model = [&]() -> const Table& {
    if (!q_hat) q_hat = fit_direct(pool, rep.data, spec).tabulate();
    return *q_hat;
  };
  std::optional<ModeVariants> modes;
  auto selection = [&]() -> const ModeVariants& {
    if (!modes) {
      SelectionInput sel{pool, rep.data, rep.policies.logging, rep.policies.target, spec, seeds.fit, options.permissive, 1,
                         &rep.instance};
      modes = mode_variants(rep.env.phi_true, candidate_set(c, rep.env.space, seeds.candidates), sel, c.bias_noise, seeds.bias);
    }
    return *modes;
  };
  auto opcb_for = [&](const MainActionSelector& phi, ReplicationRecord& r) {
    const auto fit = fit_two_stage(pool, rep.data, phi, spec, mix_seed(seeds.fit, phi.mask()));
    const Table f_hat = fit.model.tabulate();
    const auto est = make_opcb(rep.policies.logging, rep.policies.target, f_hat, phi);
    r.estimate = run_estimator(*est, rep.data, options.permissive).estimate;
    r.oracle_bias = exact_estimator_mean(rep.instance, *est) - rep.truth;
    r.mask = phi.mask();
  };

  for (const auto& name : c.estimators) {
    auto r = blank(name);
    r.truth = rep.truth;
    try {
      if (name == "DM") {
        const DirectMethod est(rep.policies.target, direct_model());
        r.estimate = run_estimator(est, rep.data, options.permissive).estimate;
        r.oracle_bias = exact_estimator_mean(rep.instance, est) - rep.truth;
      } else if (name == "IPS") {
        const auto est = make_ips(rep.policies.logging, rep.policies.target);
        r.estimate = run_estimator(*est, rep.data, options.permissive).estimate;
        r.oracle_bias = exact_estimator_mean(rep.instance, *est) - rep.truth;
      } else if (name == "DR") {
        const auto est = make_dr(rep.policies.logging, rep.policies.target, direct_model());
        r.estimate = run_estimator(*est, rep.data, options.permissive).estimate;
        r.oracle_bias = exact_estimator_mean(rep.instance, *est) - rep.truth;
      } else if (name == "OPCB-true") {
        opcb_for(rep.env.phi_true, r);
      } else if (name == "OPCB-best") {
        opcb_for(selection().phi_best, r);
      } else if (name == "OPCB-ours") {
        opcb_for(selection().phi_ours, r);
      } else {
        throw ConfigError("unknown estimator '" + name + "'");
      }
    } catch (const Error& e) {
      r.error = e.what();
    }
    out.push_back(std::move(r));
  }
  return out;
}

struct ExperimentResult {
  ResultTable table;
  std::vector<ReplicationRecord> records;
};

/// Runs every (axis value, replication) cell of a sweep on `jobs` workers and aggregates.
template <class ReplicationFn>
ExperimentResult run_cells(const ExperimentConfig& c, const RunOptions& options, ReplicationFn&& fn) {
  c.validate();
  const auto values = c.axis_values();
  const auto cells = values.size() * static_cast<std::size_t>(c.replications);
  std::vector<std::vector<ReplicationRecord>> per_cell(cells);
  parallel_for(cells, options.jobs, [&](std::size_t k) {
    const auto axis_index = k / static_cast<std::size_t>(c.replications);
    const auto replication = static_cast<int>(k % static_cast<std::size_t>(c.replications));
    per_cell[k] = fn(c, axis_index, replication, options);
  });
  ExperimentResult out;
  for (auto& v : per_cell) {
    for (auto& r : v) out.records.push_back(std::move(r));
  }
  out.table = aggregate(c.axis, values, c.estimators, out.records, c.bootstrap_resamples, c.seed);
  return out;
}

inline ExperimentResult run_experiment(const ExperimentConfig& c, const RunOptions& options = {}) {
  require_known(c.estimators, ope_estimator_names());
  return run_cells(c, options, run_ope_replication);
}

// ---------------------------------------------------------------------------
// Slates

inline const std::vector<std::string>& slate_estimator_names() {
  static const std::vector<std::string> names{"PI", "OPCB-PI", "IPS"};
  return names;
}

inline ContextPool random_context_pool(std::uint64_t seed, std::size_t users, std::size_t dim) {
  Rng rng = make_rng(seed, 0xC0);
  Table t(users, dim);
  for (double& v : t.values()) v = normal(rng, 0.0, 1.0);
  return ContextPool{std::move(t)};
}

inline std::vector<ReplicationRecord> run_slate_replication(const ExperimentConfig& base, std::size_t axis_index,
                                                            int replication, const RunOptions& options) {
  const double axis_value = base.axis_values()[axis_index];
  const auto c = at_axis(base, axis_value);
  const auto seeds = replication_seeds(base, replication);
  std::vector<ReplicationRecord> out;
  try {
    const auto pool = random_context_pool(seeds.env, c.users, c.d_x);
    const auto env = generate_slate_env(seeds.env, pool, std::vector<int>(static_cast<std::size_t>(c.slate_L), c.slot_size),
                                        c.slate_reward, c.reward_sigma);
    const auto [logging, target] = slate_policies(env, c.beta, c.epsilon);
    const auto q = slate_reward_table(env);
    const auto joint_logging = logging.joint();
    const auto joint_target = target.joint();
    const Table sigma(q.num_contexts(), q.num_actions(), c.reward_sigma);
    const auto data = sample_logged_data(q, sigma, joint_logging, c.n, seeds.data);
    const EnumerableInstance inst{std::vector<double>(q.num_contexts(), 1.0 / static_cast<double>(q.num_contexts())), q, sigma,
                                  joint_target, joint_logging};
    const double truth = true_value(inst);
    const auto spec = approximator_spec(c, seeds.fit);
    for (const auto& name : c.estimators) {
      ReplicationRecord r;
      r.axis_index = axis_index;
      r.axis_value = axis_value;
      r.replication = replication;
      r.estimator = name;
      r.truth = truth;
      try {
        std::unique_ptr<Estimator> est;
        if (name == "PI") {
          est = std::make_unique<PseudoInverse>(logging, target);
        } else if (name == "IPS") {
          est = make_ips(joint_logging, joint_target);
        } else if (name == "OPCB-PI") {
          std::vector<Table> models;
          for (int l = 0; l < env.space.num_slots(); ++l) {
            models.push_back(fit_two_stage(pool, data, env.space.slot_grouping(l), spec, mix_seed(seeds.fit, l)).model.tabulate());
          }
          est = std::make_unique<OpcbPi>(logging, target, models);
        } else {
          throw ConfigError("unknown slate estimator '" + name + "'");
        }
        r.estimate = run_estimator(*est, data, options.permissive).estimate;
        r.oracle_bias = exact_estimator_mean(inst, *est) - truth;
      } catch (const Error& e) {
        r.error = e.what();
      }
      out.push_back(std::move(r));
    }
  } catch (const Error& e) {
    for (const auto& name : c.estimators) {
      ReplicationRecord r;
      r.axis_index = axis_index;
      r.axis_value = axis_value;
      r.replication = replication;
      r.estimator = name;
      r.error = e.what();
      out.push_back(std::move(r));
    }
  }
  return out;
}

inline ExperimentResult run_slate_experiment(const ExperimentConfig& c, const RunOptions& options = {}) {
  require_known(c.estimators, slate_estimator_names());
  return run_cells(c, options, run_slate_replication);
}

// ---------------------------------------------------------------------------
// Off-policy learning

inline const std::vector<std::string>& opl_method_names() {
  static const std::vector<std::string> names{"IPS-PG", "DR-PG", "OPCB-PG", "Reg-based"};
  return names;
}

struct OplRecord {
  std::size_t axis_index = 0;
  double axis_value = 0.0;
  int replication = 0;
  std::string method;
  double value = NAN;          // true value of the learned policy
  double logging_value = NAN;  // V(pi_0)
  std::vector<TraceRow> trace;
  std::optional<std::string> error;
  bool ok() const noexcept { return !error.has_value(); }
};

inline ParametrizedPolicy initial_policy(const ContextPool& pool, std::size_t actions, const ExperimentConfig& c,
                                         std::uint64_t seed) {
  if (c.approximator == ApproximatorKind::Linear) {
    return ParametrizedPolicy(pool, actions, std::make_unique<CellLinearModel>(actions, pool.dim()));
  }
  MlpOptions o;
  o.seed = seed;
  return ParametrizedPolicy(pool, actions, std::make_unique<Mlp>(actions, pool.dim(), o));
}

inline std::vector<OplRecord> run_opl_replication(const ExperimentConfig& base, std::size_t axis_index, int replication,
                                                  bool keep_traces) {
  const double axis_value = base.axis_values()[axis_index];
  auto c = at_axis(base, axis_value);
  c.policies = PolicyScheme::Standard;
  const auto seeds = replication_seeds(base, replication);
  std::vector<OplRecord> out;
  auto blank = [&](const std::string& m) {
    OplRecord r;
    r.axis_index = axis_index;
    r.axis_value = axis_value;
    r.replication = replication;
    r.method = m;
    return r;
  };
  try {
    const auto rep = make_ccb_replication(c, seeds);
    const auto& pool = rep.env.contexts;
    const auto spec = approximator_spec(c, seeds.fit);
    const double v0 = true_value(rep.instance, rep.policies.logging);
    const auto actions = rep.env.space.subset_count();
    TrainConfig tc;
    tc.learning_rate = c.learning_rate;
    tc.iterations = c.iterations;
    tc.eval_every = c.eval_every;
    tc.seed = seeds.fit;
    const ValueFn value_fn = [&](const TabularPolicy& p) { return true_value(rep.instance, p); };
    std::optional<Table> q_hat;
    auto direct = [&]() -> const Table& {
      if (!q_hat) q_hat = fit_direct(pool, rep.data, spec).tabulate();
      return *q_hat;
    };
    for (const auto& m : c.estimators) {
      auto r = blank(m);
      r.logging_value = v0;
      try {
        if (m == "Reg-based") {
          r.value = true_value(rep.instance, reg_based_policy(pool, rep.data, spec, c.reg_beta));
        } else {
          GradientFn grad;
          Table f_hat;
          if (m == "IPS-PG") {
            grad = [&](const ParametrizedPolicy& p) { return grad_ips(rep.data, p, rep.policies.logging); };
          } else if (m == "DR-PG") {
            f_hat = direct();
            grad = [&](const ParametrizedPolicy& p) { return grad_dr(rep.data, p, rep.policies.logging, f_hat); };
          } else if (m == "OPCB-PG") {
            f_hat = fit_two_stage(pool, rep.data, rep.env.phi_true, spec, mix_seed(seeds.fit, rep.env.phi_true.mask()))
                        .model.tabulate();
            grad = [&](const ParametrizedPolicy& p) {
              return grad_opcb(rep.data, p, rep.policies.logging, f_hat, rep.env.phi_true);
            };
          } else {
            throw ConfigError("unknown learning method '" + m + "'");
          }
          auto result = train(initial_policy(pool, actions, c, seeds.fit), grad, tc, keep_traces ? value_fn : ValueFn{});
          r.value = true_value(rep.instance, result.policy.tabulate());
          if (keep_traces) r.trace = std::move(result.trace);
        }
      } catch (const Error& e) {
        r.error = e.what();
      }
      out.push_back(std::move(r));
    }
  } catch (const Error& e) {
    for (const auto& m : c.estimators) {
      auto r = blank(m);
      r.error = e.what();
      out.push_back(std::move(r));
    }
  }
  return out;
}

struct OplRow {
  double axis_value = 0.0;
  std::string method;
  double value = NAN;
  double relative_value = NAN;  // mean of V(pi_learned) / V(pi_0)
  double ci_low = NAN;
  double ci_high = NAN;
  int replications = 0;
  int failures = 0;
};

struct OplResult {
  Axis axis = Axis::None;
  std::vector<OplRow> rows;
  std::vector<OplRecord> records;
};

inline OplResult run_opl_experiment(ExperimentConfig c, const RunOptions& options = {}) {
  if (c.estimators == ExperimentConfig{}.estimators) c.estimators = opl_method_names();
  require_known(c.estimators, opl_method_names());
  c.validate();
  const auto values = c.axis_values();
  const auto cells = values.size() * static_cast<std::size_t>(c.replications);
  std::vector<std::vector<OplRecord>> per_cell(cells);
  parallel_for(cells, options.jobs, [&](std::size_t k) {
    const auto axis_index = k / static_cast<std::size_t>(c.replications);
    const auto replication = static_cast<int>(k % static_cast<std::size_t>(c.replications));
    per_cell[k] = run_opl_replication(c, axis_index, replication, replication == 0);
  });
  OplResult out;
  out.axis = c.axis;
  for (auto& v : per_cell) {
    for (auto& r : v) out.records.push_back(std::move(r));
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    for (std::size_t m = 0; m < c.estimators.size(); ++m) {
      OplRow row;
      row.axis_value = values[i];
      row.method = c.estimators[m];
      std::vector<double> vals;
      std::vector<double> rel;
      for (const auto& r : out.records) {
        if (r.axis_index != i || r.method != row.method) continue;
        if (r.ok() && std::isfinite(r.value)) {
          vals.push_back(r.value);
          rel.push_back(r.value / r.logging_value);
        } else {
          ++row.failures;
        }
      }
      row.replications = static_cast<int>(vals.size());
      if (!vals.empty()) {
        double s = 0.0;
        double sr = 0.0;
        for (std::size_t k = 0; k < vals.size(); ++k) {
          s += vals[k];
          sr += rel[k];
        }
        row.value = s / static_cast<double>(vals.size());
        row.relative_value = sr / static_cast<double>(vals.size());
        if (rel.size() >= 2) {
          std::tie(row.ci_low, row.ci_high) = bootstrap_ci(rel, 0.95, c.bootstrap_resamples, mix_seed(c.seed, i * 131 + m));
        } else {
          row.ci_low = row.ci_high = row.relative_value;
        }
      }
      out.rows.push_back(row);
    }
  }
  return out;
}

inline void emit_opl_outputs(const OplResult& result, const std::filesystem::path& dir, const ExperimentConfig& config,
                             const std::string& command) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "results.csv");
    if (!out) throw IoError("cannot write results.csv in " + dir.string());
    out << "axis,axis_value,method,value,relative_value,ci_low,ci_high,replications,failures\n";
    for (const auto& r : result.rows) {
      out << axis_name(result.axis) << ',' << csv::format(r.axis_value) << ',' << r.method << ',' << format_cell(r.value) << ','
          << format_cell(r.relative_value) << ',' << format_cell(r.ci_low) << ',' << format_cell(r.ci_high) << ','
          << r.replications << ',' << r.failures << '\n';
    }
  }
  std::ofstream manifest(dir / "manifest.txt");
  if (result.rows.empty()) return;
  std::vector<double> xs;
  std::vector<std::string> names;
  for (const auto& r : result.rows) {
    if (std::find(xs.begin(), xs.end(), r.axis_value) == xs.end()) xs.push_back(r.axis_value);
    if (std::find(names.begin(), names.end(), r.method) == names.end()) names.push_back(r.method);
  }
  const std::pair<const char*, double OplRow::*> metrics[] = {{"value", &OplRow::value},
                                                              {"relative_value", &OplRow::relative_value}};
  for (const auto& [metric, field] : metrics) {
    std::vector<Series> series;
    for (const auto& name : names) {
      Series s{name, std::vector<double>(xs.size(), NAN)};
      for (const auto& r : result.rows) {
        if (r.method != name) continue;
        const auto i = static_cast<std::size_t>(std::find(xs.begin(), xs.end(), r.axis_value) - xs.begin());
        s.y[i] = r.*field;
      }
      series.push_back(std::move(s));
    }
    std::ofstream svg(dir / ("plot_" + std::string(metric) + ".svg"));
    svg << render_line_chart(metric, axis_name(result.axis), xs, series);
  }
  std::filesystem::create_directories(dir / "traces");
  for (const auto& r : result.records) {
    if (r.trace.empty()) continue;
    std::ofstream t(dir / "traces" / (r.method + "_axis" + std::to_string(r.axis_index) + ".csv"));
    write_trace_csv(t, r.trace);
  }
  manifest << manifest_text(config, command);
}

// ---------------------------------------------------------------------------
// Tuning audit

struct TuneAudit {
  MainActionSelector phi_true;
  MainActionSelector phi_best;
  MainActionSelector phi_ours;
  std::vector<CandidateRow> table;
  double truth = 0.0;
};

inline TuneAudit run_tune_audit(const ExperimentConfig& c, const RunOptions& options = {}) {
  c.validate();
  const auto cfg = at_axis(c, c.axis_values().front());
  const auto seeds = replication_seeds(cfg, 0);
  const auto rep = make_ccb_replication(cfg, seeds);
  SelectionInput sel{rep.env.contexts, rep.data, rep.policies.logging, rep.policies.target, approximator_spec(cfg, seeds.fit),
                     seeds.fit, options.permissive, options.jobs, &rep.instance};
  auto modes = mode_variants(rep.env.phi_true, candidate_set(cfg, rep.env.space, seeds.candidates), sel, cfg.bias_noise,
                             seeds.bias);
  return {modes.phi_true, modes.phi_best, modes.phi_ours, std::move(modes.audit.table), rep.truth};
}

inline void emit_tune_outputs(const TuneAudit& audit, const std::filesystem::path& dir, const ExperimentConfig& config,
                              const std::string& command) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "audit.csv");
    if (!out) throw IoError("cannot write audit.csv in " + dir.string());
    write_audit_csv(out, audit.table);
  }
  const int L = audit.phi_true.space().num_actions();
  std::ofstream sel(dir / "selection.txt");
  sel << "phi_true = " << to_bit_string({audit.phi_true.mask()}, L) << '\n'
      << "phi_best = " << to_bit_string({audit.phi_best.mask()}, L) << '\n'
      << "phi_ours = " << to_bit_string({audit.phi_ours.mask()}, L) << '\n'
      << "true_value = " << csv::format(audit.truth) << '\n';
  std::ofstream manifest(dir / "manifest.txt");
  manifest << manifest_text(config, command);
}

}  // namespace opcb::harness
