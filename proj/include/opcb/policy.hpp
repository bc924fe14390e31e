#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <limits>
#include <ostream>
#include <string>
#include <vector>

#include "opcb/combspace.hpp"
#include "opcb/csv.hpp"
#include "opcb/errors.hpp"
#include "opcb/table.hpp"

namespace opcb {

inline constexpr double kNormalizationTolerance = 1e-9;

/// A partition of an action index space into groups.
///
/// Main-action selectors, per-slot projections and latent abstractions all
/// reduce to one of these: estimators only ever need "which group is this
/// action in".
struct Grouping {
  std::vector<std::uint32_t> group_of;
  std::uint32_t num_groups = 0;

  std::size_t num_actions() const noexcept { return group_of.size(); }

  static Grouping identity(std::size_t num_actions) {
    Grouping g;
    g.group_of.resize(num_actions);
    for (std::size_t a = 0; a < num_actions; ++a) g.group_of[a] = static_cast<std::uint32_t>(a);
    g.num_groups = static_cast<std::uint32_t>(num_actions);
    return g;
  }

  static Grouping single(std::size_t num_actions) {
    return Grouping{std::vector<std::uint32_t>(num_actions, 0), 1};
  }

  static Grouping from_selector(const MainActionSelector& phi) {
    Grouping g;
    g.group_of.resize(phi.space().subset_count());
    for (std::uint32_t b = 0; b < phi.space().subset_count(); ++b) g.group_of[b] = phi.group_index({b});
    g.num_groups = phi.group_count();
    return g;
  }

  /// Arbitrary labels, compacted to [0, number of distinct labels) in order of first appearance.
  static Grouping from_labels(const std::vector<std::uint32_t>& labels) {
    Grouping g;
    g.group_of.resize(labels.size());
    std::vector<std::uint32_t> seen;
    for (std::size_t a = 0; a < labels.size(); ++a) {
      auto it = std::find(seen.begin(), seen.end(), labels[a]);
      if (it == seen.end()) {
        seen.push_back(labels[a]);
        it = seen.end() - 1;
      }
      g.group_of[a] = static_cast<std::uint32_t>(it - seen.begin());
    }
    g.num_groups = static_cast<std::uint32_t>(seen.size());
    return g;
  }
};

/// Stochastic policy pi(a|x) over a finite context pool and a finite action index space.
class TabularPolicy {
 public:
  TabularPolicy() = default;
  explicit TabularPolicy(Table probs) : probs_{std::move(probs)} {
    for (std::size_t x = 0; x < probs_.num_contexts(); ++x) {
      CompensatedSum total;
      for (double p : probs_.row(x)) {
        if (!(p >= 0.0) || !std::isfinite(p)) {
          throw NumericError("policy probability for context " + std::to_string(x) + " is negative or non-finite");
        }
        total += p;
      }
      if (std::abs(total.value() - 1.0) > kNormalizationTolerance) {
        throw NumericError("policy for context " + std::to_string(x) + " sums to " + csv::format(total.value()));
      }
    }
  }

  static TabularPolicy uniform(std::size_t num_contexts, std::size_t num_actions) {
    return TabularPolicy{Table(num_contexts, num_actions, 1.0 / static_cast<double>(num_actions))};
  }

  std::size_t num_contexts() const noexcept { return probs_.num_contexts(); }
  std::size_t num_actions() const noexcept { return probs_.num_actions(); }
  const Table& table() const noexcept { return probs_; }
  std::span<const double> row(std::size_t x) const noexcept { return probs_.row(x); }

  double prob(std::size_t x, std::uint32_t action) const { return probs_.at(x, action); }

 private:
  Table probs_;
};

inline double prob(const TabularPolicy& policy, std::size_t x, SubsetAction m) { return policy.prob(x, m.bits); }

/// Per-context group marginals pi(g|x) = sum of pi(a|x) over members, in ascending action order.
inline Table group_marginals(const TabularPolicy& policy, const Grouping& grouping) {
  if (grouping.num_actions() != policy.num_actions()) throw DimensionError("grouping and policy disagree on action count");
  Table out(policy.num_contexts(), grouping.num_groups, 0.0);
  for (std::size_t x = 0; x < policy.num_contexts(); ++x) {
    const auto row = policy.row(x);
    auto dst = out.row(x);
    for (std::size_t a = 0; a < row.size(); ++a) dst[grouping.group_of[a]] += row[a];
  }
  return out;
}

/// pi(phi_value|x): total probability of the group {m : phi(m) = phi_value}.
inline double marginal_prob(const TabularPolicy& policy, std::size_t x, SubsetAction phi_value,
                            const MainActionSelector& phi) {
  if (policy.num_actions() != phi.space().subset_count()) throw DimensionError("policy and selector spaces differ");
  if (x >= policy.num_contexts()) throw LookupError("unknown context id " + std::to_string(x));
  double total = 0.0;
  for (SubsetAction m : group_members(phi_value, phi, phi.space())) total += policy.prob(x, m.bits);
  return total;
}

/// pi(m | x, phi(m)) = pi(m|x) / pi(phi(m)|x).
inline double conditional_prob(const TabularPolicy& policy, std::size_t x, SubsetAction m,
                               const MainActionSelector& phi) {
  const double marginal = marginal_prob(policy, x, project_main(m, phi), phi);
  if (!(marginal > 0.0)) {
    throw SupportViolation("group " + to_bit_string(phi(m), phi.space().num_actions()) + " has zero probability in context " +
                           std::to_string(x));
  }
  return policy.prob(x, m.bits) / marginal;
}

/// pi(a|x) proportional to exp(beta * score(x, a)), computed with max subtraction.
inline TabularPolicy softmax_from_scores(const Table& scores, double beta) {
  if (!std::isfinite(beta)) throw NumericError("softmax inverse temperature must be finite");
  Table probs(scores.num_contexts(), scores.num_actions());
  for (std::size_t x = 0; x < scores.num_contexts(); ++x) {
    const auto in = scores.row(x);
    auto out = probs.row(x);
    double top = -std::numeric_limits<double>::infinity();
    for (double s : in) {
      if (!std::isfinite(s)) throw NumericError("non-finite score in context " + std::to_string(x));
      top = std::max(top, beta * s);
    }
    double total = 0.0;
    for (std::size_t a = 0; a < in.size(); ++a) {
      out[a] = std::exp(beta * in[a] - top);
      total += out[a];
    }
    for (double& p : out) p /= total;
  }
  return TabularPolicy{std::move(probs)};
}

/// Index of the largest score; ties go to the lowest index.
inline std::size_t argmax_lowest(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t a = 1; a < values.size(); ++a) {
    if (values[a] > values[best]) best = a;
  }
  return best;
}

/// (1 - eps) on the argmax plus eps spread uniformly over the whole space.
inline TabularPolicy epsilon_greedy_from_scores(const Table& scores, double epsilon) {
  if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw NumericError("epsilon must lie in [0, 1]");
  Table probs(scores.num_contexts(), scores.num_actions());
  const double floor = epsilon / static_cast<double>(scores.num_actions());
  for (std::size_t x = 0; x < scores.num_contexts(); ++x) {
    for (double s : scores.row(x)) {
      if (!std::isfinite(s)) throw NumericError("non-finite score in context " + std::to_string(x));
    }
    auto out = probs.row(x);
    std::fill(out.begin(), out.end(), floor);
    out[argmax_lowest(scores.row(x))] += 1.0 - epsilon;
  }
  return TabularPolicy{std::move(probs)};
}

// CSV: context_id,subset_bits,prob

inline void write_policy_csv(std::ostream& out, const TabularPolicy& policy, int num_actions) {
  out << "context_id,subset_bits,prob\n";
  for (std::size_t x = 0; x < policy.num_contexts(); ++x) {
    for (std::uint32_t b = 0; b < policy.num_actions(); ++b) {
      out << x << ',' << to_bit_string({b}, num_actions) << ',' << csv::format(policy.prob(x, b)) << '\n';
    }
  }
}

/// Reads a context-by-subset table; absent (context, subset) cells are zero.
inline Table read_subset_table_csv(std::istream& in, std::string_view header, int* num_actions_out = nullptr) {
  const auto rows = csv::read_rows(in, header);
  if (rows.empty()) throw IoError("table CSV has no rows");
  const auto width = rows.front()[1].size();
  const FactoredSpace space(static_cast<int>(width));
  std::size_t contexts = 0;
  for (const auto& r : rows) contexts = std::max(contexts, csv::parse_index(r[0]) + 1);
  Table t(contexts, space.subset_count(), 0.0);
  for (const auto& r : rows) {
    if (r[1].size() != width) throw IoError("inconsistent subset_bits width in table CSV");
    t(csv::parse_index(r[0]), parse_bit_string(r[1]).bits) = csv::parse_double(r[2]);
  }
  if (num_actions_out != nullptr) *num_actions_out = space.num_actions();
  return t;
}

inline TabularPolicy read_policy_csv(std::istream& in) {
  return TabularPolicy{read_subset_table_csv(in, "context_id,subset_bits,prob")};
}

inline void write_subset_table_csv(std::ostream& out, const Table& table, int num_actions, std::string_view value_column) {
  out << "context_id,subset_bits," << value_column << '\n';
  for (std::size_t x = 0; x < table.num_contexts(); ++x) {
    for (std::uint32_t b = 0; b < table.num_actions(); ++b) {
      out << x << ',' << to_bit_string({b}, num_actions) << ',' << csv::format(table(x, b)) << '\n';
    }
  }
}

}  // namespace opcb
