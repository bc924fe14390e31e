#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "opcb/approx.hpp"
#include "opcb/combspace.hpp"
#include "opcb/csv.hpp"
#include "opcb/errors.hpp"
#include "opcb/estim.hpp"
#include "opcb/oracle.hpp"
#include "opcb/parallel.hpp"
#include "opcb/policy.hpp"
#include "opcb/regress.hpp"
#include "opcb/rng.hpp"
#include "opcb/synth.hpp"

namespace opcb {

/// (1/n^2) sum_i (Y_i - mean)^2: the estimated variance of the mean of n contributions.
inline double sample_variance(std::span<const double> values) {
  if (values.size() < 2) throw PreconditionError("variance is undefined for fewer than two contributions");
  const auto n = static_cast<double>(values.size());
  double sum = 0.0;
  for (double v : values) sum += v;
  const double mean = sum / n;
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  return ss / (n * n);
}

inline double sample_variance(const EstimateReport& report) { return sample_variance(report.contributions); }

enum class CandidateMode { RandomSearch, ExhaustiveK, All, Explicit };

struct CandidateSet {
  CandidateMode mode = CandidateMode::Explicit;
  std::vector<MainActionSelector> selectors;

  std::size_t size() const noexcept { return selectors.size(); }
  bool empty() const noexcept { return selectors.empty(); }

  static CandidateSet explicit_masks(const FactoredSpace& space, std::vector<std::uint32_t> masks) {
    std::sort(masks.begin(), masks.end());
    masks.erase(std::unique(masks.begin(), masks.end()), masks.end());
    CandidateSet c;
    for (auto m : masks) c.selectors.emplace_back(space, m);
    return c;
  }

  /// B distinct nonzero masks drawn uniformly without replacement (all of them when B >= 2^L - 1).
  static CandidateSet random_search(const FactoredSpace& space, std::size_t budget, std::uint64_t seed) {
    if (budget == 0) throw ConfigError("random search needs at least one candidate");
    std::vector<std::uint32_t> pool(space.full_mask());
    for (std::uint32_t m = 1; m <= space.full_mask(); ++m) pool[m - 1] = m;
    Rng rng = make_rng(seed, 0xCA4D);
    std::shuffle(pool.begin(), pool.end(), rng);
    pool.resize(std::min(budget, pool.size()));
    auto c = explicit_masks(space, std::move(pool));
    c.mode = CandidateMode::RandomSearch;
    return c;
  }

  /// Phi_K: every selector with exactly K main actions.
  static CandidateSet exhaustive_k(const FactoredSpace& space, int k) {
    if (k < 0 || k > space.num_actions()) throw ConfigError("K must lie in [0, L]");
    std::vector<std::uint32_t> masks;
    for (std::uint32_t m = 0; m <= space.full_mask(); ++m) {
      if (std::popcount(m) == k) masks.push_back(m);
    }
    auto c = explicit_masks(space, std::move(masks));
    c.mode = CandidateMode::ExhaustiveK;
    return c;
  }

  /// All 2^L selectors, including the empty one.
  static CandidateSet all(const FactoredSpace& space) {
    std::vector<std::uint32_t> masks(space.subset_count());
    for (std::uint32_t m = 0; m < masks.size(); ++m) masks[m] = m;
    auto c = explicit_masks(space, std::move(masks));
    c.mode = CandidateMode::All;
    return c;
  }
};

/// Everything a candidate evaluation needs. `truth` enables the oracle audit columns.
struct SelectionInput {
  const ContextPool& pool;
  const LoggedDataset& data;
  const TabularPolicy& logging;
  const TabularPolicy& target;
  ApproximatorSpec spec{};
  std::uint64_t seed = 0;
  bool permissive = false;
  int jobs = 1;
  const EnumerableInstance* truth = nullptr;
};

/// One candidate after fitting its model and running OPCB.
struct CandidateFit {
  const SelectionInput& input;
  const MainActionSelector& phi;
  const Table& f_hat;
  const EstimateReport& report;
};

class BiasEstimator {
 public:
  virtual ~BiasEstimator() = default;
  virtual std::string name() const = 0;
  /// Finite, nonnegative estimate of Bias(V_OPCB)^2 for this candidate.
  virtual double squared_bias(const CandidateFit& fit) const = 0;
};

/// max(0, Bias^2 + delta), delta ~ N(0, sigma_b), drawn independently per (seed, mask).
inline double noisy_true_bias(const EnumerableInstance& truth, const MainActionSelector& phi, const Table& f_hat, double sigma_b,
                              std::uint64_t seed) {
  if (sigma_b < 0.0) throw ConfigError("bias noise scale must be nonnegative");
  const double b = closed_form_bias(truth, phi, f_hat);
  double noise = 0.0;
  if (sigma_b > 0.0) {
    Rng rng = make_rng(mix_seed(seed, phi.mask()), 0xB1A5);
    noise = normal(rng, 0.0, sigma_b);
  }
  return std::max(0.0, b * b + noise);
}

/// Simulation-only surrogate: exact bias from the oracle plus Gaussian noise.
class NoiseInjectionBias final : public BiasEstimator {
 public:
  NoiseInjectionBias(const EnumerableInstance& truth, double sigma_b, std::uint64_t seed)
      : truth_{truth}, sigma_b_{sigma_b}, seed_{seed} {
    if (sigma_b < 0.0) throw ConfigError("bias noise scale must be nonnegative");
  }
  std::string name() const override { return "noise-injection"; }
  double squared_bias(const CandidateFit& fit) const override {
    return noisy_true_bias(truth_, fit.phi, fit.f_hat, sigma_b_, seed_);
  }

 private:
  const EnumerableInstance& truth_;
  double sigma_b_;
  std::uint64_t seed_;
};

/// Crude plug-in: squared gap between the candidate's OPCB estimate and the IPS estimate on the same data.
class IpsGapBias final : public BiasEstimator {
 public:
  std::string name() const override { return "ips-gap"; }
  double squared_bias(const CandidateFit& fit) const override {
    const auto ips = run_estimator(*make_ips(fit.input.logging, fit.input.target), fit.input.data, fit.input.permissive);
    const double gap = fit.report.estimate - ips.estimate;
    return gap * gap;
  }
};

struct CandidateRow {
  std::uint32_t mask = 0;
  int num_actions = 0;
  double estimate = NAN;
  double bias_hat_sq = NAN;
  double var_hat = NAN;
  double mse_hat = NAN;
  std::optional<double> true_bias_sq;
  std::optional<double> true_var;
  std::optional<std::string> error;

  bool ok() const noexcept { return !error.has_value(); }
  std::optional<double> true_mse() const {
    if (!true_bias_sq || !true_var) return std::nullopt;
    return *true_bias_sq + *true_var;
  }
};

struct Selection {
  MainActionSelector phi;
  std::vector<CandidateRow> table;  // ascending mask order
  const CandidateRow& chosen() const {
    for (const auto& r : table) {
      if (r.mask == phi.mask()) return r;
    }
    throw LookupError("selected mask missing from the audit table");
  }
};

namespace detail {

/// Lexicographic (value, |mask|, mask).
inline bool better_candidate(double a_value, std::uint32_t a_mask, double b_value, std::uint32_t b_mask) {
  if (a_value != b_value) return a_value < b_value;
  if (std::popcount(a_mask) != std::popcount(b_mask)) return std::popcount(a_mask) < std::popcount(b_mask);
  return a_mask < b_mask;
}

inline CandidateRow evaluate_candidate(const SelectionInput& in, const MainActionSelector& phi, const BiasEstimator& bias) {
  CandidateRow row;
  row.mask = phi.mask();
  row.num_actions = phi.space().num_actions();
  try {
    const auto fit = fit_two_stage(in.pool, in.data, phi, in.spec, mix_seed(in.seed, phi.mask()));
    const Table f_hat = fit.model.tabulate();
    const auto report =
        run_estimator(*make_opcb(in.logging, in.target, f_hat, phi), in.data, in.permissive);
    row.estimate = report.estimate;
    row.var_hat = sample_variance(report);
    row.bias_hat_sq = bias.squared_bias({in, phi, f_hat, report});
    if (!std::isfinite(row.bias_hat_sq) || row.bias_hat_sq < 0.0) throw NumericError("bias estimate is not a finite nonnegative number");
    row.mse_hat = row.bias_hat_sq + row.var_hat;
    if (in.truth != nullptr) {
      const double b = closed_form_bias(*in.truth, phi, f_hat);
      row.true_bias_sq = b * b;
      row.true_var = exact_moments(*in.truth, *make_opcb(in.logging, in.target, f_hat, phi)).variance /
                     static_cast<double>(in.data.size());
    }
  } catch (const Error& e) {
    row.error = e.what();
  }
  return row;
}

}  // namespace detail

/// argmin over candidates of Bias_hat^2 + Var_hat; ties go to fewer main actions, then the lower mask.
inline Selection select_phi(const CandidateSet& candidates, const SelectionInput& in, const BiasEstimator& bias) {
  if (candidates.empty()) throw PreconditionError("no candidate selectors");
  std::vector<CandidateRow> rows(candidates.size());
  parallel_for(candidates.size(), in.jobs,
               [&](std::size_t i) { rows[i] = detail::evaluate_candidate(in, candidates.selectors[i], bias); });
  std::vector<std::size_t> order(rows.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return rows[a].mask < rows[b].mask; });

  std::optional<std::size_t> best;
  for (std::size_t i : order) {
    if (!rows[i].ok()) continue;
    if (!best || detail::better_candidate(rows[i].mse_hat, rows[i].mask, rows[*best].mse_hat, rows[*best].mask)) best = i;
  }
  if (!best) {
    if (candidates.size() == 1) best = 0;
    else throw SelectionError("every candidate selector failed: " + rows[order.front()].error.value_or(""));
  }
  Selection out{candidates.selectors[*best], {}};
  for (std::size_t i : order) out.table.push_back(std::move(rows[i]));
  return out;
}

/// The candidate with the smallest oracle MSE in an audited table (same tie-break as select_phi).
inline std::uint32_t true_mse_argmin(const std::vector<CandidateRow>& table) {
  std::optional<std::size_t> best;
  for (std::size_t i = 0; i < table.size(); ++i) {
    const auto m = table[i].true_mse();
    if (!table[i].ok() || !m) continue;
    if (!best || detail::better_candidate(*m, table[i].mask, *table[*best].true_mse(), table[*best].mask)) best = i;
  }
  if (!best) throw SelectionError("no candidate has oracle MSE columns");
  return table[*best].mask;
}

struct ModeVariants {
  MainActionSelector phi_true;
  MainActionSelector phi_best;
  MainActionSelector phi_ours;
  Selection audit;
};

/// OPCB (true): the environment's selector. OPCB (best): true-MSE argmin over the candidates.
/// OPCB (ours): select_phi with the noise-injection bias surrogate.
inline ModeVariants mode_variants(const MainActionSelector& phi_true, const CandidateSet& candidates, SelectionInput in,
                                  double sigma_b, std::uint64_t bias_seed) {
  if (in.truth == nullptr) throw PreconditionError("true and best variants need the environment truth");
  const NoiseInjectionBias bias(*in.truth, sigma_b, bias_seed);
  auto audit = select_phi(candidates, in, bias);
  const MainActionSelector best(phi_true.space(), true_mse_argmin(audit.table));
  return {phi_true, best, audit.phi, std::move(audit)};
}

inline void write_audit_csv(std::ostream& out, const std::vector<CandidateRow>& table) {
  out << "phi_mask,bias_hat_sq,var_hat,mse_hat,true_bias_sq,true_var\n";
  auto opt = [](const std::optional<double>& v) { return v ? csv::format(*v) : std::string(); };
  for (const auto& r : table) {
    out << to_bit_string({r.mask}, r.num_actions) << ',';
    if (r.ok()) {
      out << csv::format(r.bias_hat_sq) << ',' << csv::format(r.var_hat) << ',' << csv::format(r.mse_hat);
    } else {
      out << ",,";
    }
    out << ',' << opt(r.true_bias_sq) << ',' << opt(r.true_var) << '\n';
  }
}

}  // namespace opcb
