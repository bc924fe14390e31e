#pragma once

#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "opcb/errors.hpp"
#include "opcb/rng.hpp"
#include "opcb/table.hpp"

namespace opcb {

/// Finite pool of context vectors; row x is the feature vector of context x.
class ContextPool {
 public:
  ContextPool() = default;
  explicit ContextPool(Table features) : features_{std::move(features)} {}
  /// A pool of `n` contexts with no features (every context is identical to the model).
  static ContextPool featureless(std::size_t n) { return ContextPool{Table(n, 0)}; }

  std::size_t size() const noexcept { return features_.num_contexts(); }
  std::size_t dim() const noexcept { return features_.num_actions(); }
  std::span<const double> operator[](std::size_t x) const noexcept { return features_.row(x); }
  const Table& features() const noexcept { return features_; }

 private:
  Table features_;
};

/// One squared-loss target: predict(x, cell) - predict(x, baseline) should match `target`.
/// Without a baseline this is ordinary regression; with one it is a pairwise difference.
struct TrainingRow {
  std::size_t context = 0;
  std::uint32_t cell = 0;
  std::optional<std::uint32_t> baseline;
  double target = 0.0;
};

struct FitSummary {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  int iterations = 0;
};

/// Function approximator over (context vector, discrete cell) with a squared-loss fit.
class Approximator {
 public:
  virtual ~Approximator() = default;

  virtual std::unique_ptr<Approximator> clone() const = 0;
  virtual std::size_t num_params() const noexcept = 0;
  virtual std::span<const double> params() const noexcept = 0;
  virtual void set_params(std::span<const double> params) = 0;

  virtual double predict(std::span<const double> x, std::uint32_t cell) const = 0;
  /// grad += scale * d predict(x, cell) / d params.
  virtual void accumulate_gradient(std::span<const double> x, std::uint32_t cell, double scale,
                                   std::span<double> grad) const = 0;

  virtual FitSummary fit(const ContextPool& pool, std::span<const TrainingRow> rows) = 0;

  double predict_row(const ContextPool& pool, const TrainingRow& row) const {
    double v = predict(pool[row.context], row.cell);
    if (row.baseline) v -= predict(pool[row.context], *row.baseline);
    return v;
  }

  double mean_loss(const ContextPool& pool, std::span<const TrainingRow> rows) const {
    if (rows.empty()) return 0.0;
    double total = 0.0;
    for (const auto& r : rows) {
      const double e = predict_row(pool, r) - r.target;
      total += e * e;
    }
    return total / static_cast<double>(rows.size());
  }
};

/// Linear model on [1, x] tensored with onehot(cell): an independent affine map of x per cell.
/// Fitted in closed form by ridge regression.
class CellLinearModel final : public Approximator {
 public:
  CellLinearModel(std::size_t num_cells, std::size_t dim, double ridge = 1e-6)
      : num_cells_{num_cells}, dim_{dim}, ridge_{ridge}, params_(num_cells * (dim + 1), 0.0) {}

  std::unique_ptr<Approximator> clone() const override { return std::make_unique<CellLinearModel>(*this); }
  std::size_t num_params() const noexcept override { return params_.size(); }
  std::span<const double> params() const noexcept override { return params_; }
  void set_params(std::span<const double> p) override {
    if (p.size() != params_.size()) throw DimensionError("parameter vector has the wrong length");
    std::copy(p.begin(), p.end(), params_.begin());
  }

  std::size_t num_cells() const noexcept { return num_cells_; }
  std::size_t block_size() const noexcept { return dim_ + 1; }

  double predict(std::span<const double> x, std::uint32_t cell) const override {
    check(x, cell);
    const double* w = params_.data() + cell * block_size();
    double v = w[0];
    for (std::size_t j = 0; j < dim_; ++j) v += w[j + 1] * x[j];
    return v;
  }

  void accumulate_gradient(std::span<const double> x, std::uint32_t cell, double scale,
                           std::span<double> grad) const override {
    check(x, cell);
    double* g = grad.data() + cell * block_size();
    g[0] += scale;
    for (std::size_t j = 0; j < dim_; ++j) g[j + 1] += scale * x[j];
  }

  FitSummary fit(const ContextPool& pool, std::span<const TrainingRow> rows) override {
    if (pool.dim() != dim_) throw DimensionError("context dimension does not match the model");
    FitSummary summary;
    summary.initial_loss = mean_loss(pool, rows);
    const auto p = static_cast<Eigen::Index>(params_.size());
    const std::size_t b = block_size();
    // Normal equations accumulated per (cell, cell) block; pairwise rows touch two blocks.
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::vector<double>> blocks;
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(p);
    std::vector<double> phi(b);
    auto add = [&](std::uint32_t ci, std::uint32_t cj, double si, double sj) {
      auto& m = blocks[{ci, cj}];
      if (m.empty()) m.assign(b * b, 0.0);
      for (std::size_t i = 0; i < b; ++i) {
        const double fi = si * phi[i];
        for (std::size_t j = 0; j < b; ++j) m[i * b + j] += fi * sj * phi[j];
      }
    };
    for (const auto& row : rows) {
      const auto x = pool[row.context];
      check(x, row.cell);
      if (row.baseline) {
        check(x, *row.baseline);
        if (*row.baseline == row.cell) continue;  // zero feature vector
      }
      phi[0] = 1.0;
      for (std::size_t j = 0; j < dim_; ++j) phi[j + 1] = x[j];
      const auto base = static_cast<Eigen::Index>(row.cell * b);
      for (std::size_t i = 0; i < b; ++i) rhs[base + static_cast<Eigen::Index>(i)] += phi[i] * row.target;
      add(row.cell, row.cell, 1.0, 1.0);
      if (row.baseline) {
        const auto other = static_cast<Eigen::Index>(*row.baseline * b);
        for (std::size_t i = 0; i < b; ++i) rhs[other + static_cast<Eigen::Index>(i)] -= phi[i] * row.target;
        add(*row.baseline, *row.baseline, 1.0, 1.0);
        add(row.cell, *row.baseline, 1.0, -1.0);
        add(*row.baseline, row.cell, -1.0, 1.0);
      }
    }
    std::vector<Eigen::Triplet<double>> triplets;
    triplets.reserve(blocks.size() * b * b + params_.size());
    for (const auto& [key, m] : blocks) {
      const auto r0 = static_cast<Eigen::Index>(key.first * b);
      const auto c0 = static_cast<Eigen::Index>(key.second * b);
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < b; ++j) {
          triplets.emplace_back(r0 + static_cast<Eigen::Index>(i), c0 + static_cast<Eigen::Index>(j), m[i * b + j]);
        }
      }
    }
    for (Eigen::Index i = 0; i < p; ++i) triplets.emplace_back(i, i, ridge_);
    Eigen::SparseMatrix<double> gram(p, p);
    gram.setFromTriplets(triplets.begin(), triplets.end());
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver(gram);
    if (solver.info() != Eigen::Success) throw FitError("ridge normal equations could not be factorized");
    const Eigen::VectorXd w = solver.solve(rhs);
    if (solver.info() != Eigen::Success || !w.allFinite()) throw FitError("ridge solve failed");
    for (Eigen::Index i = 0; i < p; ++i) params_[static_cast<std::size_t>(i)] = w[i];
    summary.final_loss = mean_loss(pool, rows);
    summary.iterations = 1;
    return summary;
  }

 private:
  void check(std::span<const double> x, std::uint32_t cell) const {
    if (cell >= num_cells_) throw DimensionError("cell " + std::to_string(cell) + " outside the model");
    if (x.size() != dim_) throw DimensionError("context dimension does not match the model");
  }

  std::size_t num_cells_;
  std::size_t dim_;
  double ridge_;
  std::vector<double> params_;
};

struct MlpOptions {
  int hidden_layers = 3;
  int width = 32;
  double learning_rate = 1e-2;
  int max_epochs = 2000;
  int patience = 50;
  double min_improvement = 1e-8;
  std::uint64_t seed = 0;
};

/// Fully connected tanh network on [x, binary code of cell] with a scalar linear output,
/// trained by full-batch gradient descent with hand-written backpropagation.
class Mlp final : public Approximator {
 public:
  Mlp(std::size_t num_cells, std::size_t dim, MlpOptions options = {})
      : num_cells_{num_cells}, dim_{dim}, options_{options} {
    if (options.hidden_layers < 1 || options.width < 1) throw DimensionError("network needs at least one hidden unit");
    cell_bits_ = num_cells <= 1 ? 0 : static_cast<std::size_t>(std::bit_width(num_cells - 1));
    sizes_.push_back(dim_ + cell_bits_);
    for (int l = 0; l < options.hidden_layers; ++l) sizes_.push_back(static_cast<std::size_t>(options.width));
    sizes_.push_back(1);
    std::size_t total = 0;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      offsets_.push_back(total);
      total += sizes_[l + 1] * (sizes_[l] + 1);
    }
    params_.assign(total, 0.0);
    Rng rng = make_rng(options.seed, 0x4d4c50);
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      const double bound = std::sqrt(6.0 / static_cast<double>(sizes_[l] + sizes_[l + 1]));
      double* w = params_.data() + offsets_[l];
      for (std::size_t o = 0; o < sizes_[l + 1]; ++o) {
        for (std::size_t i = 0; i < sizes_[l]; ++i) w[o * (sizes_[l] + 1) + i] = uniform(rng, -bound, bound);
        w[o * (sizes_[l] + 1) + sizes_[l]] = 0.0;  // bias
      }
    }
  }

  std::unique_ptr<Approximator> clone() const override { return std::make_unique<Mlp>(*this); }
  std::size_t num_params() const noexcept override { return params_.size(); }
  std::span<const double> params() const noexcept override { return params_; }
  void set_params(std::span<const double> p) override {
    if (p.size() != params_.size()) throw DimensionError("parameter vector has the wrong length");
    std::copy(p.begin(), p.end(), params_.begin());
  }

  double predict(std::span<const double> x, std::uint32_t cell) const override {
    Activations act;
    forward(x, cell, act);
    return act.back()[0];
  }

  void accumulate_gradient(std::span<const double> x, std::uint32_t cell, double scale,
                           std::span<double> grad) const override {
    Activations act;
    forward(x, cell, act);
    backward(act, scale, grad);
  }

  FitSummary fit(const ContextPool& pool, std::span<const TrainingRow> rows) override {
    if (pool.dim() != dim_) throw DimensionError("context dimension does not match the model");
    FitSummary summary;
    summary.initial_loss = mean_loss(pool, rows);
    if (rows.empty()) {
      summary.final_loss = summary.initial_loss;
      return summary;
    }
    const double inv_n = 1.0 / static_cast<double>(rows.size());
    std::vector<double> grad(params_.size());
    double best = summary.initial_loss;
    int since_best = 0;
    Activations act;
    for (int epoch = 0; epoch < options_.max_epochs; ++epoch) {
      std::fill(grad.begin(), grad.end(), 0.0);
      double loss = 0.0;
      for (const auto& row : rows) {
        const auto x = pool[row.context];
        forward(x, row.cell, act);
        double pred = act.back()[0];
        Activations base_act;
        if (row.baseline) {
          forward(x, *row.baseline, base_act);
          pred -= base_act.back()[0];
        }
        const double err = pred - row.target;
        loss += err * err * inv_n;
        backward(act, 2.0 * err * inv_n, grad);
        if (row.baseline) backward(base_act, -2.0 * err * inv_n, grad);
      }
      for (std::size_t i = 0; i < params_.size(); ++i) params_[i] -= options_.learning_rate * grad[i];
      summary.iterations = epoch + 1;
      if (!std::isfinite(loss)) throw FitError("network training diverged");
      if (loss < best - options_.min_improvement) {
        best = loss;
        since_best = 0;
      } else if (++since_best >= options_.patience) {
        break;
      }
    }
    summary.final_loss = mean_loss(pool, rows);
    return summary;
  }

 private:
  using Activations = std::vector<std::vector<double>>;

  void forward(std::span<const double> x, std::uint32_t cell, Activations& act) const {
    if (cell >= num_cells_) throw DimensionError("cell " + std::to_string(cell) + " outside the model");
    if (x.size() != dim_) throw DimensionError("context dimension does not match the model");
    act.resize(sizes_.size());
    act[0].assign(x.begin(), x.end());
    for (std::size_t b = 0; b < cell_bits_; ++b) act[0].push_back(static_cast<double>((cell >> b) & 1U));
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      const std::size_t in = sizes_[l];
      const std::size_t out = sizes_[l + 1];
      const double* w = params_.data() + offsets_[l];
      act[l + 1].assign(out, 0.0);
      const bool hidden = l + 2 < sizes_.size();
      for (std::size_t o = 0; o < out; ++o) {
        double z = w[o * (in + 1) + in];
        for (std::size_t i = 0; i < in; ++i) z += w[o * (in + 1) + i] * act[l][i];
        act[l + 1][o] = hidden ? std::tanh(z) : z;
      }
    }
  }

  void backward(const Activations& act, double scale, std::span<double> grad) const {
    std::vector<double> delta{scale};  // d(scale * output)/d(pre-activation of the output layer)
    for (std::size_t l = sizes_.size() - 1; l-- > 0;) {
      const std::size_t in = sizes_[l];
      const std::size_t out = sizes_[l + 1];
      const double* w = params_.data() + offsets_[l];
      double* g = grad.data() + offsets_[l];
      std::vector<double> prev(in, 0.0);
      for (std::size_t o = 0; o < out; ++o) {
        for (std::size_t i = 0; i < in; ++i) {
          g[o * (in + 1) + i] += delta[o] * act[l][i];
          prev[i] += delta[o] * w[o * (in + 1) + i];
        }
        g[o * (in + 1) + in] += delta[o];
      }
      if (l > 0) {
        for (std::size_t i = 0; i < in; ++i) prev[i] *= 1.0 - act[l][i] * act[l][i];
      }
      delta = std::move(prev);
    }
  }

  std::size_t num_cells_;
  std::size_t dim_;
  MlpOptions options_;
  std::size_t cell_bits_ = 0;
  std::vector<std::size_t> sizes_;
  std::vector<std::size_t> offsets_;
  std::vector<double> params_;
};

enum class ApproximatorKind { Linear, Mlp };

struct ApproximatorSpec {
  ApproximatorKind kind = ApproximatorKind::Linear;
  double ridge = 1e-6;
  MlpOptions mlp{};

  std::unique_ptr<Approximator> make(std::size_t num_cells, std::size_t dim) const {
    if (kind == ApproximatorKind::Linear) return std::make_unique<CellLinearModel>(num_cells, dim, ridge);
    return std::make_unique<Mlp>(num_cells, dim, mlp);
  }
};

inline ApproximatorKind parse_approximator_kind(const std::string& name) {
  if (name == "linear") return ApproximatorKind::Linear;
  if (name == "mlp") return ApproximatorKind::Mlp;
  throw ConfigError("unknown approximator '" + name + "' (expected linear or mlp)");
}

}  // namespace opcb
