#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <span>
#include <vector>

#include "opcb/approx.hpp"
#include "opcb/policy.hpp"

namespace opcb {

/// Softmax policy pi_zeta(a|x) proportional to exp(score_zeta(x, a)); the score is any Approximator.
class ParametrizedPolicy {
 public:
  ParametrizedPolicy(ContextPool pool, std::size_t num_actions, std::unique_ptr<Approximator> scorer)
      : pool_{std::move(pool)}, num_actions_{num_actions}, scorer_{std::move(scorer)} {
    if (!scorer_) throw DimensionError("parametrized policy needs a score model");
  }

  ParametrizedPolicy(const ParametrizedPolicy& other)
      : pool_{other.pool_}, num_actions_{other.num_actions_}, scorer_{other.scorer_->clone()} {}
  ParametrizedPolicy& operator=(const ParametrizedPolicy& other) {
    if (this != &other) {
      pool_ = other.pool_;
      num_actions_ = other.num_actions_;
      scorer_ = other.scorer_->clone();
    }
    return *this;
  }
  ParametrizedPolicy(ParametrizedPolicy&&) noexcept = default;
  ParametrizedPolicy& operator=(ParametrizedPolicy&&) noexcept = default;

  const ContextPool& pool() const noexcept { return pool_; }
  std::size_t num_contexts() const noexcept { return pool_.size(); }
  std::size_t num_actions() const noexcept { return num_actions_; }
  std::size_t num_params() const noexcept { return scorer_->num_params(); }
  std::span<const double> params() const noexcept { return scorer_->params(); }
  void set_params(std::span<const double> p) { scorer_->set_params(p); }
  const Approximator& scorer() const noexcept { return *scorer_; }

  double score(std::size_t x, std::uint32_t a) const { return scorer_->predict(pool_[x], a); }

  std::vector<double> probs(std::size_t x) const {
    if (x >= pool_.size()) throw LookupError("unknown context id " + std::to_string(x));
    std::vector<double> out(num_actions_);
    double top = -std::numeric_limits<double>::infinity();
    for (std::uint32_t a = 0; a < num_actions_; ++a) {
      out[a] = score(x, a);
      if (!std::isfinite(out[a])) throw NumericError("non-finite policy score");
      top = std::max(top, out[a]);
    }
    double total = 0.0;
    for (double& v : out) {
      v = std::exp(v - top);
      total += v;
    }
    for (double& v : out) v /= total;
    return out;
  }

  TabularPolicy tabulate() const {
    Table t(pool_.size(), num_actions_);
    for (std::size_t x = 0; x < pool_.size(); ++x) {
      const auto p = probs(x);
      std::copy(p.begin(), p.end(), t.row(x).begin());
    }
    return TabularPolicy{std::move(t)};
  }

  /// grad += scale * d score(x, a) / d zeta.
  void accumulate_score_gradient(std::size_t x, std::uint32_t a, double scale, std::span<double> grad) const {
    scorer_->accumulate_gradient(pool_[x], a, scale, grad);
  }

  /// E_{pi(.|x)}[d score(x, a) / d zeta], given the context's probabilities.
  std::vector<double> mean_score_gradient(std::size_t x, std::span<const double> probs_x) const {
    std::vector<double> g(num_params(), 0.0);
    for (std::uint32_t a = 0; a < num_actions_; ++a) accumulate_score_gradient(x, a, probs_x[a], g);
    return g;
  }

  /// d/dzeta log pi_zeta(a|x) = grad score(x, a) - E_pi[grad score(x, .)].
  std::vector<double> score_gradient(std::size_t x, std::uint32_t a) const {
    const auto p = probs(x);
    auto g = mean_score_gradient(x, p);
    for (double& v : g) v = -v;
    accumulate_score_gradient(x, a, 1.0, g);
    return g;
  }

 private:
  ContextPool pool_;
  std::size_t num_actions_;
  std::unique_ptr<Approximator> scorer_;
};

}  // namespace opcb
