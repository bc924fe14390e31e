#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "opcb/errors.hpp"

namespace opcb {

/// Dense (context x action) table of doubles, row-major.
///
/// Used for policies, expected-reward tables, reward-model predictions and
/// noise levels. Actions are indexed by their canonical integer code (the
/// subset bitmask for combinatorial spaces, the mixed-radix code for slates).
class Table {
 public:
  Table() = default;
  Table(std::size_t num_contexts, std::size_t num_actions, double fill = 0.0)
      : rows_{num_contexts}, cols_{num_actions}, data_(num_contexts * num_actions, fill) {}

  std::size_t num_contexts() const noexcept { return rows_; }
  std::size_t num_actions() const noexcept { return cols_; }
  bool empty() const noexcept { return data_.empty(); }

  double operator()(std::size_t x, std::size_t a) const noexcept { return data_[x * cols_ + a]; }
  double& operator()(std::size_t x, std::size_t a) noexcept { return data_[x * cols_ + a]; }

  double at(std::size_t x, std::size_t a) const {
    if (x >= rows_) throw LookupError("unknown context id " + std::to_string(x));
    if (a >= cols_) throw LookupError("action index " + std::to_string(a) + " outside table");
    return (*this)(x, a);
  }

  std::span<const double> row(std::size_t x) const noexcept { return {data_.data() + x * cols_, cols_}; }
  std::span<double> row(std::size_t x) noexcept { return {data_.data() + x * cols_, cols_}; }

  std::span<const double> values() const noexcept { return data_; }
  std::span<double> values() noexcept { return data_; }

  bool same_shape(const Table& other) const noexcept { return rows_ == other.rows_ && cols_ == other.cols_; }

  friend bool operator==(const Table&, const Table&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Neumaier-compensated running sum.
class CompensatedSum {
 public:
  void add(double v) noexcept {
    const double t = sum_ + v;
    if (std::abs(sum_) >= std::abs(v)) {
      comp_ += (sum_ - t) + v;
    } else {
      comp_ += (v - t) + sum_;
    }
    sum_ = t;
  }
  CompensatedSum& operator+=(double v) noexcept {
    add(v);
    return *this;
  }
  double value() const noexcept { return sum_ + comp_; }

 private:
  double sum_ = 0.0;
  double comp_ = 0.0;
};

}  // namespace opcb
