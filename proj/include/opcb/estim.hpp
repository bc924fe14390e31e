#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "opcb/combspace.hpp"
#include "opcb/csv.hpp"
#include "opcb/errors.hpp"
#include "opcb/policy.hpp"
#include "opcb/slate.hpp"
#include "opcb/synth.hpp"
#include "opcb/table.hpp"

namespace opcb {

/// Y_i of one record together with the importance weight that produced it.
struct Contribution {
  double value = 0.0;
  double weight = 1.0;
};

/// An off-policy estimator in per-record form: V_hat = (1/n) sum_i Y(x_i, a_i, r_i).
///
/// Every estimator here is affine in the reward, and all policy- and
/// model-dependent quantities are precomputed per context on construction, so
/// a contribution costs O(1) (O(L) for slate estimators).
class Estimator {
 public:
  virtual ~Estimator() = default;
  virtual std::string name() const = 0;
  virtual std::size_t num_contexts() const noexcept = 0;
  virtual std::size_t num_actions() const noexcept = 0;
  /// Throws SupportViolation when (x, a) lies outside the logging support the estimator needs.
  virtual Contribution contribute(std::size_t x, std::uint32_t a, double r) const = 0;
  /// Throws SupportViolation when the estimator's population-level support condition fails.
  virtual void check_support() const = 0;
};

namespace detail {

inline void check_same_space(const TabularPolicy& a, const TabularPolicy& b) {
  if (!a.table().same_shape(b.table())) throw DimensionError("logging and target policies differ in shape");
}

/// E_{pi(.|x)}[f(x, .)] for every context, summed in ascending action order.
inline std::vector<double> policy_expectations(const TabularPolicy& pi, const Table& f) {
  if (!pi.table().same_shape(f)) throw DimensionError("model table and policy differ in shape");
  std::vector<double> out(pi.num_contexts());
  for (std::size_t x = 0; x < pi.num_contexts(); ++x) {
    const auto p = pi.row(x);
    const auto v = f.row(x);
    double e = 0.0;
    for (std::size_t a = 0; a < p.size(); ++a) e += p[a] * v[a];
    out[x] = e;
  }
  return out;
}

inline std::string describe(std::size_t x, std::uint32_t a) {
  return "context " + std::to_string(x) + ", action " + std::to_string(a);
}

}  // namespace detail

class DirectMethod final : public Estimator {
 public:
  DirectMethod(const TabularPolicy& target, const Table& q_hat)
      : contexts_{target.num_contexts()}, actions_{target.num_actions()},
        expectation_{detail::policy_expectations(target, q_hat)} {}

  std::string name() const override { return "DM"; }
  std::size_t num_contexts() const noexcept override { return contexts_; }
  std::size_t num_actions() const noexcept override { return actions_; }
  Contribution contribute(std::size_t x, std::uint32_t, double) const override { return {expectation_.at(x), 1.0}; }
  void check_support() const override {}

 private:
  std::size_t contexts_;
  std::size_t actions_;
  std::vector<double> expectation_;
};

/// Group-marginal importance weighting with an optional regression control variate:
/// Y = w(x, g(a)) (r - f(x, a)) + E_pi[f(x, .)],  w(x, g) = pi(g|x) / pi0(g|x).
///
/// Identity grouping without a model is IPS, identity grouping with one is DR,
/// a main-action grouping with a model is OPCB, and a latent grouping without a
/// model is LIPS.
class MarginalWeightEstimator : public Estimator {
 public:
  MarginalWeightEstimator(std::string name, const TabularPolicy& logging, const TabularPolicy& target, Grouping grouping,
                          std::optional<Table> model)
      : name_{std::move(name)}, grouping_{std::move(grouping)} {
    detail::check_same_space(logging, target);
    if (grouping_.num_actions() != target.num_actions()) throw DimensionError("grouping and policies differ in action count");
    logging_marginal_ = group_marginals(logging, grouping_);
    target_marginal_ = group_marginals(target, grouping_);
    if (model) {
      expectation_ = detail::policy_expectations(target, *model);
      model_ = std::move(model);
    }
  }

  std::string name() const override { return name_; }
  std::size_t num_contexts() const noexcept override { return target_marginal_.num_contexts(); }
  std::size_t num_actions() const noexcept override { return grouping_.num_actions(); }
  const Grouping& grouping() const noexcept { return grouping_; }

  double weight(std::size_t x, std::uint32_t a) const {
    const auto g = grouping_.group_of.at(a);
    const double p0 = logging_marginal_.at(x, g);
    if (!(p0 > 0.0)) throw SupportViolation("zero logging probability at " + detail::describe(x, a));
    return target_marginal_(x, g) / p0;
  }

  Contribution contribute(std::size_t x, std::uint32_t a, double r) const override {
    const double w = weight(x, a);
    if (!model_) return {w * r, w};
    return {w * (r - (*model_)(x, a)) + expectation_[x], w};
  }

  void check_support() const override {
    for (std::size_t x = 0; x < target_marginal_.num_contexts(); ++x) {
      for (std::uint32_t g = 0; g < grouping_.num_groups; ++g) {
        if (target_marginal_(x, g) > 0.0 && !(logging_marginal_(x, g) > 0.0)) {
          throw SupportViolation(name_ + ": target reaches group " + std::to_string(g) + " in context " +
                                 std::to_string(x) + " where logging has no mass");
        }
      }
    }
  }

 private:
  std::string name_;
  Grouping grouping_;
  Table logging_marginal_;
  Table target_marginal_;
  std::optional<Table> model_;
  std::vector<double> expectation_;
};

inline std::unique_ptr<Estimator> make_ips(const TabularPolicy& logging, const TabularPolicy& target) {
  return std::make_unique<MarginalWeightEstimator>("IPS", logging, target, Grouping::identity(target.num_actions()),
                                                   std::nullopt);
}

inline std::unique_ptr<Estimator> make_dr(const TabularPolicy& logging, const TabularPolicy& target, const Table& q_hat) {
  return std::make_unique<MarginalWeightEstimator>("DR", logging, target, Grouping::identity(target.num_actions()), q_hat);
}

inline std::unique_ptr<Estimator> make_opcb(const TabularPolicy& logging, const TabularPolicy& target, const Table& f_hat,
                                            const MainActionSelector& phi) {
  if (phi.space().subset_count() != target.num_actions()) throw DimensionError("selector and policy spaces differ");
  return std::make_unique<MarginalWeightEstimator>("OPCB", logging, target, Grouping::from_selector(phi), f_hat);
}

inline std::unique_ptr<Estimator> make_opcb(const TabularPolicy& logging, const TabularPolicy& target, const Table& f_hat,
                                            Grouping grouping) {
  return std::make_unique<MarginalWeightEstimator>("OPCB", logging, target, std::move(grouping), f_hat);
}

inline std::unique_ptr<Estimator> make_lips(const TabularPolicy& logging, const TabularPolicy& target, Grouping abstraction) {
  return std::make_unique<MarginalWeightEstimator>("LIPS", logging, target, std::move(abstraction), std::nullopt);
}

/// Pseudo-inverse estimator on factorizable slate policies: Y = (sum_l w_l - L + 1) r.
class PseudoInverse final : public Estimator {
 public:
  PseudoInverse(const FactorizedSlatePolicy& logging, const FactorizedSlatePolicy& target)
      : space_{target.space()}, logging_{logging}, target_{target} {
    if (!(logging.space() == target.space())) throw DimensionError("slate policies live in different spaces");
  }

  std::string name() const override { return "PI"; }
  std::size_t num_contexts() const noexcept override { return target_.num_contexts(); }
  std::size_t num_actions() const noexcept override { return space_.slate_count(); }

  Contribution contribute(std::size_t x, std::uint32_t s, double r) const override {
    const auto c = space_.decode(s);
    double w = 0.0;
    for (int l = 0; l < space_.num_slots(); ++l) {
      const int choice = c[static_cast<std::size_t>(l)];
      const double p0 = logging_.slot_prob(x, l, choice);
      if (!(p0 > 0.0)) throw SupportViolation("zero slot-" + std::to_string(l) + " logging probability at " + detail::describe(x, s));
      w += target_.slot_prob(x, l, choice) / p0;
    }
    w = w - space_.num_slots() + 1;
    return {w * r, w};
  }

  void check_support() const override {
    for (std::size_t x = 0; x < num_contexts(); ++x) {
      for (int l = 0; l < space_.num_slots(); ++l) {
        for (int c = 0; c < space_.slot_choices(l); ++c) {
          if (target_.slot_prob(x, l, c) > 0.0 && !(logging_.slot_prob(x, l, c) > 0.0)) {
            throw SupportViolation("PI: slot " + std::to_string(l) + " choice " + std::to_string(c) + " unsupported in context " +
                                   std::to_string(x));
          }
        }
      }
    }
  }

 private:
  SlateSpace space_;
  FactorizedSlatePolicy logging_;
  FactorizedSlatePolicy target_;
};

/// Average over slots l of the single-main-slot OPCB estimate with model f_l.
class OpcbPi final : public Estimator {
 public:
  OpcbPi(const FactorizedSlatePolicy& logging, const FactorizedSlatePolicy& target, const std::vector<Table>& slot_models)
      : space_{target.space()} {
    if (static_cast<int>(slot_models.size()) != space_.num_slots()) throw DimensionError("one model per slot required");
    const auto joint_logging = logging.joint();
    const auto joint_target = target.joint();
    for (int l = 0; l < space_.num_slots(); ++l) {
      slots_.emplace_back("OPCB-slot" + std::to_string(l), joint_logging, joint_target, space_.slot_grouping(l),
                          slot_models[static_cast<std::size_t>(l)]);
    }
  }

  std::string name() const override { return "OPCB-PI"; }
  std::size_t num_contexts() const noexcept override { return slots_.front().num_contexts(); }
  std::size_t num_actions() const noexcept override { return space_.slate_count(); }

  Contribution contribute(std::size_t x, std::uint32_t s, double r) const override {
    double value = 0.0;
    double weight = 0.0;
    for (const auto& e : slots_) {
      const auto c = e.contribute(x, s, r);
      value += c.value;
      weight += c.weight;
    }
    const double inv = 1.0 / static_cast<double>(slots_.size());
    return {value * inv, weight * inv};
  }

  void check_support() const override {
    for (const auto& e : slots_) e.check_support();
  }

 private:
  SlateSpace space_;
  std::vector<MarginalWeightEstimator> slots_;
};

struct EstimateReport {
  std::string estimator;
  std::optional<std::string> phi_mask;
  double estimate = 0.0;
  std::vector<double> contributions;
  double max_weight = 0.0;
  double ess = 0.0;
  std::size_t n = 0;
  std::size_t dropped = 0;

  double dropped_fraction() const noexcept {
    const auto total = n + dropped;
    return total == 0 ? 0.0 : static_cast<double>(dropped) / static_cast<double>(total);
  }
};

/// Runs an estimator over logged data. In permissive mode records violating support are
/// dropped and counted instead of raising.
inline EstimateReport run_estimator(const Estimator& est, const LoggedDataset& data, bool permissive = false) {
  if (data.num_actions != 0 && data.num_actions != est.num_actions()) throw DimensionError("dataset and estimator spaces differ");
  EstimateReport report;
  report.estimator = est.name();
  report.contributions.reserve(data.size());
  double sum = 0.0;
  double sum_w = 0.0;
  double sum_w2 = 0.0;
  for (const auto& rec : data.records) {
    if (rec.context_id >= est.num_contexts()) throw LookupError("unknown context id " + std::to_string(rec.context_id));
    Contribution c;
    try {
      c = est.contribute(rec.context_id, rec.action, rec.reward);
    } catch (const SupportViolation&) {
      if (!permissive) throw;
      ++report.dropped;
      continue;
    }
    report.contributions.push_back(c.value);
    sum += c.value;
    sum_w += c.weight;
    sum_w2 += c.weight * c.weight;
    report.max_weight = std::max(report.max_weight, c.weight);
  }
  report.n = report.contributions.size();
  if (report.n == 0) throw SizeError("no records left to estimate from");
  report.estimate = sum / static_cast<double>(report.n);
  report.ess = sum_w2 > 0.0 ? sum_w * sum_w / sum_w2 : 0.0;
  return report;
}

/// Inputs shared by the combinatorial estimators.
struct EstimatorInput {
  const LoggedDataset& data;
  const TabularPolicy& logging;
  const TabularPolicy& target;
  const Table* model = nullptr;
  std::optional<MainActionSelector> phi;
  bool permissive = false;
};

inline EstimateReport estimate_dm(const EstimatorInput& in) {
  if (in.model == nullptr) throw FitError("DM needs a reward model");
  return run_estimator(DirectMethod(in.target, *in.model), in.data, in.permissive);
}

inline EstimateReport estimate_ips(const EstimatorInput& in) {
  return run_estimator(*make_ips(in.logging, in.target), in.data, in.permissive);
}

inline EstimateReport estimate_dr(const EstimatorInput& in) {
  if (in.model == nullptr) throw FitError("DR needs a reward model");
  return run_estimator(*make_dr(in.logging, in.target, *in.model), in.data, in.permissive);
}

inline EstimateReport estimate_opcb(const EstimatorInput& in) {
  if (in.model == nullptr) throw FitError("OPCB needs a reward model");
  if (!in.phi) throw DimensionError("OPCB needs a main-action selector");
  auto report = run_estimator(*make_opcb(in.logging, in.target, *in.model, *in.phi), in.data, in.permissive);
  report.phi_mask = to_bit_string({in.phi->mask()}, in.phi->space().num_actions());
  return report;
}

inline EstimateReport estimate_lips(const EstimatorInput& in, Grouping abstraction) {
  return run_estimator(*make_lips(in.logging, in.target, std::move(abstraction)), in.data, in.permissive);
}

inline EstimateReport estimate_pi(const LoggedDataset& data, const FactorizedSlatePolicy& logging,
                                  const FactorizedSlatePolicy& target, bool permissive = false) {
  return run_estimator(PseudoInverse(logging, target), data, permissive);
}

inline EstimateReport estimate_opcb_pi(const LoggedDataset& data, const FactorizedSlatePolicy& logging,
                                       const FactorizedSlatePolicy& target, const std::vector<Table>& slot_models,
                                       bool permissive = false) {
  return run_estimator(OpcbPi(logging, target, slot_models), data, permissive);
}

inline void write_estimate_csv_header(std::ostream& out) { out << "estimator,phi_mask,estimate,max_weight,ess,n\n"; }

inline void write_estimate_csv_row(std::ostream& out, const EstimateReport& r) {
  out << r.estimator << ',' << r.phi_mask.value_or("") << ',' << csv::format(r.estimate) << ',' << csv::format(r.max_weight)
      << ',' << csv::format(r.ess) << ',' << r.n << '\n';
}

}  // namespace opcb
