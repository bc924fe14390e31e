#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "opcb/approx.hpp"
#include "opcb/combspace.hpp"
#include "opcb/errors.hpp"
#include "opcb/policy.hpp"
#include "opcb/rng.hpp"
#include "opcb/synth.hpp"
#include "opcb/table.hpp"

namespace opcb {

/// f_hat(x, m) = g_hat(x, group(m)) + h_hat(x, m).
///
/// The main part is indexed by the compact group id, the residual by the full
/// action index. A missing residual is the zero function; DM's q_hat is the
/// special case of identity grouping and no residual.
class RewardModel {
 public:
  RewardModel(ContextPool pool, Grouping grouping, std::shared_ptr<const Approximator> main,
              std::shared_ptr<const Approximator> residual = nullptr)
      : pool_{std::move(pool)}, grouping_{std::move(grouping)}, main_{std::move(main)}, residual_{std::move(residual)} {
    if (!main_) throw FitError("reward model needs a main component");
  }

  const ContextPool& pool() const noexcept { return pool_; }
  const Grouping& grouping() const noexcept { return grouping_; }
  std::size_t num_actions() const noexcept { return grouping_.num_actions(); }
  bool has_residual() const noexcept { return residual_ != nullptr; }

  double main(std::size_t x, std::uint32_t a) const { return main_->predict(pool_[x], grouping_.group_of.at(a)); }
  double residual(std::size_t x, std::uint32_t a) const { return residual_ ? residual_->predict(pool_[x], a) : 0.0; }
  double predict(std::size_t x, std::uint32_t a) const { return main(x, a) + residual(x, a); }

  Table tabulate() const {
    Table t(pool_.size(), num_actions());
    for (std::size_t x = 0; x < pool_.size(); ++x) {
      for (std::uint32_t a = 0; a < num_actions(); ++a) t(x, a) = predict(x, a);
    }
    return t;
  }

 private:
  ContextPool pool_;
  Grouping grouping_;
  std::shared_ptr<const Approximator> main_;
  std::shared_ptr<const Approximator> residual_;
};

/// Two logged records sharing a context and a main-action group.
struct PairRecord {
  std::size_t context_id = 0;
  std::uint32_t first = 0;
  std::uint32_t second = 0;
  double first_reward = 0.0;
  double second_reward = 0.0;
  std::size_t first_record = 0;
  std::size_t second_record = 0;
};

struct PairwiseDataset {
  std::vector<PairRecord> pairs;
  bool subsampled = false;

  std::size_t size() const noexcept { return pairs.size(); }
  bool empty() const noexcept { return pairs.empty(); }
};

inline constexpr std::size_t kPairBudgetPerRecord = 200;

/// Every unordered pair of distinct records with equal context and equal group, ordered by
/// (context, group, first record, second record). Above 200 * n pairs a uniform subsample of exactly
/// that size is kept.
inline PairwiseDataset build_pairwise_dataset(const LoggedDataset& data, const Grouping& grouping,
                                              std::uint64_t subsample_seed = 0) {
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  auto key = [&](std::size_t i) {
    const auto& r = data.records[i];
    return std::pair{r.context_id, grouping.group_of.at(r.action)};
  };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return key(a) < key(b); });

  std::vector<std::pair<std::size_t, std::size_t>> blocks;
  std::uint64_t total = 0;
  for (std::size_t lo = 0; lo < order.size();) {
    std::size_t hi = lo + 1;
    while (hi < order.size() && key(order[hi]) == key(order[lo])) ++hi;
    const std::uint64_t k = hi - lo;
    total += k * (k - 1) / 2;
    if (k > 1) blocks.emplace_back(lo, hi);
    lo = hi;
  }

  PairwiseDataset out;
  const std::uint64_t budget = kPairBudgetPerRecord * data.size();
  out.subsampled = total > budget;
  out.pairs.reserve(static_cast<std::size_t>(std::min(total, budget)));
  // Selection sampling keeps exactly `budget` pairs, each subset equally likely, in enumeration order.
  Rng rng = make_rng(subsample_seed, 0x9A12);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uint64_t seen = 0;
  for (const auto& [lo, hi] : blocks) {
    for (std::size_t i = lo; i < hi; ++i) {
      for (std::size_t j = i + 1; j < hi; ++j) {
        if (out.subsampled) {
          const auto needed = budget - out.pairs.size();
          const auto remaining = total - seen++;
          if (needed == 0) break;
          if (static_cast<double>(remaining) * unit(rng) >= static_cast<double>(needed)) continue;
        }
        const auto& a = data.records[order[i]];
        const auto& b = data.records[order[j]];
        out.pairs.push_back({a.context_id, a.action, b.action, a.reward, b.reward, order[i], order[j]});
      }
    }
  }
  return out;
}

inline PairwiseDataset build_pairwise_dataset(const LoggedDataset& data, const MainActionSelector& phi,
                                              std::uint64_t subsample_seed = 0) {
  return build_pairwise_dataset(data, Grouping::from_selector(phi), subsample_seed);
}

struct ResidualFit {
  std::shared_ptr<const Approximator> model;
  FitSummary summary;
  std::optional<std::string> warning;
};

/// Pairwise regression: h_hat(x, m) - h_hat(x, m') fitted to r_m - r_m' under squared loss.
/// An empty pair set yields the zero function and a warning.
inline ResidualFit fit_residual(const ContextPool& pool, const PairwiseDataset& pairs, std::unique_ptr<Approximator> approx) {
  ResidualFit out;
  if (pairs.empty()) {
    approx->set_params(std::vector<double>(approx->num_params(), 0.0));
    out.warning = "pairwise dataset is empty; residual model set to zero";
    out.model = std::move(approx);
    return out;
  }
  std::vector<TrainingRow> rows;
  rows.reserve(pairs.size());
  for (const auto& p : pairs.pairs) rows.push_back({p.context_id, p.first, p.second, p.first_reward - p.second_reward});
  out.summary = approx->fit(pool, rows);
  out.model = std::move(approx);
  return out;
}

/// Ordinary regression of the residual-corrected reward r - h_hat(x, m) on (x, group(m)).
inline RewardModel fit_main(const ContextPool& pool, const LoggedDataset& data, std::shared_ptr<const Approximator> residual,
                            const Grouping& grouping, std::unique_ptr<Approximator> approx) {
  if (data.empty()) throw FitError("cannot fit the main effect on an empty dataset");
  std::vector<TrainingRow> rows;
  rows.reserve(data.size());
  for (const auto& r : data.records) {
    const double h = residual ? residual->predict(pool[r.context_id], r.action) : 0.0;
    rows.push_back({r.context_id, grouping.group_of.at(r.action), std::nullopt, r.reward - h});
  }
  approx->fit(pool, rows);
  return RewardModel(pool, grouping, std::shared_ptr<const Approximator>(std::move(approx)), std::move(residual));
}

struct TwoStageFit {
  RewardModel model;
  std::size_t pair_count = 0;
  std::optional<std::string> warning;
};

inline TwoStageFit fit_two_stage(const ContextPool& pool, const LoggedDataset& data, const Grouping& grouping,
                                 const ApproximatorSpec& spec, std::uint64_t seed = 0) {
  const auto pairs = build_pairwise_dataset(data, grouping, seed);
  auto residual = fit_residual(pool, pairs, spec.make(grouping.num_actions(), pool.dim()));
  auto model = fit_main(pool, data, residual.model, grouping, spec.make(grouping.num_groups, pool.dim()));
  return {std::move(model), pairs.size(), residual.warning};
}

inline TwoStageFit fit_two_stage(const ContextPool& pool, const LoggedDataset& data, const MainActionSelector& phi,
                                 const ApproximatorSpec& spec, std::uint64_t seed = 0) {
  return fit_two_stage(pool, data, Grouping::from_selector(phi), spec, seed);
}

/// Single-stage squared-loss fit of r on (x, m).
inline RewardModel fit_direct(const ContextPool& pool, const LoggedDataset& data, const ApproximatorSpec& spec) {
  if (data.empty()) throw FitError("cannot fit a direct model on an empty dataset");
  const auto grouping = Grouping::identity(data.num_actions);
  return fit_main(pool, data, nullptr, grouping, spec.make(data.num_actions, pool.dim()));
}

struct PairwiseCorrectnessReport {
  double max_deviation = 0.0;
  bool passed = true;
};

/// max over x and same-group (m, m') of |Delta_q(x,m,m') - Delta_f(x,m,m')|; passes iff <= tol.
inline PairwiseCorrectnessReport check_conditional_pairwise_correctness(const Table& f_hat, const Table& q,
                                                                        const Grouping& grouping, double tol) {
  if (!f_hat.same_shape(q) || grouping.num_actions() != q.num_actions()) throw DimensionError("tables differ in shape");
  PairwiseCorrectnessReport report;
  std::vector<double> lo(grouping.num_groups);
  std::vector<double> hi(grouping.num_groups);
  for (std::size_t x = 0; x < q.num_contexts(); ++x) {
    std::fill(lo.begin(), lo.end(), INFINITY);
    std::fill(hi.begin(), hi.end(), -INFINITY);
    for (std::uint32_t a = 0; a < q.num_actions(); ++a) {
      const double e = q(x, a) - f_hat(x, a);
      const auto g = grouping.group_of[a];
      lo[g] = std::min(lo[g], e);
      hi[g] = std::max(hi[g], e);
    }
    for (std::uint32_t g = 0; g < grouping.num_groups; ++g) {
      if (hi[g] >= lo[g]) report.max_deviation = std::max(report.max_deviation, hi[g] - lo[g]);
    }
  }
  report.passed = report.max_deviation <= tol;
  return report;
}

inline void write_model_csv(std::ostream& out, const RewardModel& model, int num_actions) {
  write_subset_table_csv(out, model.tabulate(), num_actions, "f_hat");
}

}  // namespace opcb
