#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "opcb/combspace.hpp"
#include "opcb/csv.hpp"
#include "opcb/errors.hpp"
#include "opcb/harness/config.hpp"
#include "opcb/rng.hpp"

namespace opcb::harness {

inline constexpr const char* kVersion = "1.0.0";

/// One estimator run in one replication at one axis value.
struct ReplicationRecord {
  std::size_t axis_index = 0;
  double axis_value = 0.0;
  int replication = 0;
  std::string estimator;
  double estimate = NAN;
  double truth = NAN;
  double oracle_bias = NAN;  // exact bias of this estimator given its fitted model, when known
  std::optional<std::uint32_t> mask;
  std::optional<std::string> error;

  bool ok() const noexcept { return !error.has_value(); }
  double error_value() const noexcept { return estimate - truth; }
};

struct ResultRow {
  double axis_value = 0.0;
  std::string estimator;
  double mse = NAN;
  double bias_sq = NAN;
  double variance = NAN;
  double ci_low = NAN;
  double ci_high = NAN;
  int replications = 0;
  int failures = 0;
};

struct ResultTable {
  Axis axis = Axis::None;
  std::vector<ResultRow> rows;

  const ResultRow* find(double axis_value, const std::string& estimator) const {
    for (const auto& r : rows) {
      if (r.axis_value == axis_value && r.estimator == estimator) return &r;
    }
    return nullptr;
  }
};

/// Percentile bootstrap interval for the mean.
inline std::pair<double, double> bootstrap_ci(const std::vector<double>& values, double level = 0.95, int resamples = 1000,
                                              std::uint64_t seed = 0) {
  if (values.size() < 2) throw SizeError("bootstrap needs at least two values");
  if (!(level > 0.0 && level < 1.0)) throw ConfigError("confidence level must lie in (0, 1)");
  if (resamples < 1) throw ConfigError("bootstrap needs at least one resample");
  Rng rng = make_rng(seed, 0xB007);
  std::uniform_int_distribution<std::size_t> pick(0, values.size() - 1);
  std::vector<double> means(static_cast<std::size_t>(resamples));
  for (double& m : means) {
    double s = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) s += values[pick(rng)];
    m = s / static_cast<double>(values.size());
  }
  std::sort(means.begin(), means.end());
  auto quantile = [&](double q) {
    const double pos = q * static_cast<double>(means.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const auto hi = std::min(lo + 1, means.size() - 1);
    return means[lo] + (pos - static_cast<double>(lo)) * (means[hi] - means[lo]);
  };
  const double tail = 0.5 * (1.0 - level);
  return {quantile(tail), quantile(1.0 - tail)};
}

/// MSE = mean squared error against the oracle value, bias^2 = squared mean error,
/// variance = mean squared deviation of the errors; CI is the bootstrap interval of the MSE.
inline ResultTable aggregate(Axis axis, const std::vector<double>& axis_values, const std::vector<std::string>& estimators,
                             const std::vector<ReplicationRecord>& records, int resamples, std::uint64_t seed) {
  ResultTable table{axis, {}};
  for (std::size_t i = 0; i < axis_values.size(); ++i) {
    for (std::size_t e = 0; e < estimators.size(); ++e) {
      ResultRow row;
      row.axis_value = axis_values[i];
      row.estimator = estimators[e];
      std::vector<double> errors;
      for (const auto& r : records) {
        if (r.axis_index != i || r.estimator != estimators[e]) continue;
        if (r.ok() && std::isfinite(r.error_value())) errors.push_back(r.error_value());
        else ++row.failures;
      }
      row.replications = static_cast<int>(errors.size());
      if (!errors.empty()) {
        const auto n = static_cast<double>(errors.size());
        double sum = 0.0;
        double sq = 0.0;
        for (double v : errors) {
          sum += v;
          sq += v * v;
        }
        const double mean = sum / n;
        double spread = 0.0;
        for (double v : errors) spread += (v - mean) * (v - mean);
        row.mse = sq / n;
        row.bias_sq = mean * mean;
        row.variance = spread / n;
        std::vector<double> squared(errors.size());
        for (std::size_t k = 0; k < errors.size(); ++k) squared[k] = errors[k] * errors[k];
        if (squared.size() >= 2) {
          std::tie(row.ci_low, row.ci_high) = bootstrap_ci(squared, 0.95, resamples, mix_seed(seed, i * 131 + e));
        } else {
          row.ci_low = row.ci_high = row.mse;
        }
      }
      table.rows.push_back(row);
    }
  }
  return table;
}

inline std::string format_cell(double v) { return std::isnan(v) ? std::string() : csv::format(v); }

inline void write_results_csv(std::ostream& out, const ResultTable& table) {
  out << "axis,axis_value,estimator,mse,bias_sq,variance,ci_low,ci_high,replications,failures\n";
  for (const auto& r : table.rows) {
    out << axis_name(table.axis) << ',' << csv::format(r.axis_value) << ',' << r.estimator << ',' << format_cell(r.mse) << ','
        << format_cell(r.bias_sq) << ',' << format_cell(r.variance) << ',' << format_cell(r.ci_low) << ','
        << format_cell(r.ci_high) << ',' << r.replications << ',' << r.failures << '\n';
  }
}

inline void write_replications_csv(std::ostream& out, const std::vector<ReplicationRecord>& records, Axis axis, int num_actions) {
  out << "axis,axis_value,replication,estimator,estimate,truth,oracle_bias,phi_mask,error\n";
  for (const auto& r : records) {
    std::string err = r.error.value_or("");
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    out << axis_name(axis) << ',' << csv::format(r.axis_value) << ',' << r.replication << ',' << r.estimator << ','
        << format_cell(r.estimate) << ',' << format_cell(r.truth) << ',' << format_cell(r.oracle_bias) << ','
        << (r.mask ? to_bit_string({*r.mask}, num_actions) : std::string()) << ',' << err << '\n';
  }
}

// ---------------------------------------------------------------------------
// SVG line charts

struct Series {
  std::string label;
  std::vector<double> y;  // aligned with the chart's x values; NaN = missing
};

namespace detail {

inline std::string escape_xml(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '&': o += "&amp;"; break;
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

inline std::string fmt(double v) {
  std::ostringstream o;
  o.precision(4);
  o << v;
  return o.str();
}

}  // namespace detail

/// True when all finite positive values span more than two decades.
inline bool wants_log_scale(const std::vector<Series>& series) {
  double lo = INFINITY;
  double hi = 0.0;
  for (const auto& s : series) {
    for (double v : s.y) {
      if (!std::isfinite(v)) continue;
      if (v <= 0.0) return false;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
  }
  return hi > 0.0 && std::isfinite(lo) && hi / lo > 100.0;
}

/// Self-contained SVG with one polyline per series over equally spaced x positions.
inline std::string render_line_chart(const std::string& title, const std::string& x_label, const std::vector<double>& xs,
                                     const std::vector<Series>& series) {
  static constexpr const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"};
  const double W = 720, H = 440, left = 80, right = 170, top = 40, bottom = 60;
  const double pw = W - left - right;
  const double ph = H - top - bottom;
  const bool log_y = wants_log_scale(series);
  auto tr = [&](double v) { return log_y ? std::log10(v) : v; };
  double lo = INFINITY;
  double hi = -INFINITY;
  for (const auto& s : series) {
    for (double v : s.y) {
      if (!std::isfinite(v) || (log_y && v <= 0.0)) continue;
      lo = std::min(lo, tr(v));
      hi = std::max(hi, tr(v));
    }
  }
  if (!std::isfinite(lo)) {
    lo = 0.0;
    hi = 1.0;
  }
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  }
  const double pad = 0.05 * (hi - lo);
  lo -= pad;
  hi += pad;
  auto px = [&](std::size_t i) { return left + (xs.size() <= 1 ? pw / 2 : pw * static_cast<double>(i) / static_cast<double>(xs.size() - 1)); };
  auto py = [&](double v) { return top + ph * (1.0 - (tr(v) - lo) / (hi - lo)); };

  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" viewBox=\"0 0 " << W << ' ' << H
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << left + pw / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" << detail::escape_xml(title)
    << (log_y ? " (log scale)" : "") << "</text>\n";
  o << "<rect x=\"" << left << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
    << "\" fill=\"none\" stroke=\"#444\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double t = lo + (hi - lo) * k / 4.0;
    const double y = top + ph * (1.0 - k / 4.0);
    o << "<line x1=\"" << left << "\" x2=\"" << left + pw << "\" y1=\"" << y << "\" y2=\"" << y
      << "\" stroke=\"#ddd\"/>\n";
    o << "<text x=\"" << left - 6 << "\" y=\"" << y + 4 << "\" text-anchor=\"end\">"
      << detail::fmt(log_y ? std::pow(10.0, t) : t) << "</text>\n";
  }
  for (std::size_t i = 0; i < xs.size(); ++i) {
    o << "<text x=\"" << px(i) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">" << detail::fmt(xs[i])
      << "</text>\n";
  }
  o << "<text x=\"" << left + pw / 2 << "\" y=\"" << H - 16 << "\" text-anchor=\"middle\">" << detail::escape_xml(x_label)
    << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* color = palette[s % std::size(palette)];
    std::ostringstream pts;
    for (std::size_t i = 0; i < xs.size() && i < series[s].y.size(); ++i) {
      const double v = series[s].y[i];
      if (!std::isfinite(v) || (log_y && v <= 0.0)) continue;
      pts << px(i) << ',' << py(v) << ' ';
      o << "<circle cx=\"" << px(i) << "\" cy=\"" << py(v) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
    }
    o << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"" << pts.str() << "\"/>\n";
    const double ly = top + 16 + 18 * static_cast<double>(s);
    o << "<line x1=\"" << left + pw + 12 << "\" x2=\"" << left + pw + 32 << "\" y1=\"" << ly - 4 << "\" y2=\"" << ly - 4
      << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
    o << "<text x=\"" << left + pw + 38 << "\" y=\"" << ly << "\">" << detail::escape_xml(series[s].label) << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

inline constexpr const char* kNormalizationReference = "OPCB-ours";

/// One chart per metric (mse, bias_sq, variance). In normalized mode every value is divided by
/// the OPCB-ours row at the same axis value.
inline std::vector<std::filesystem::path> write_plots(const std::filesystem::path& dir, const ResultTable& table,
                                                      bool normalized) {
  std::vector<double> xs;
  std::vector<std::string> names;
  for (const auto& r : table.rows) {
    if (std::find(xs.begin(), xs.end(), r.axis_value) == xs.end()) xs.push_back(r.axis_value);
    if (std::find(names.begin(), names.end(), r.estimator) == names.end()) names.push_back(r.estimator);
  }
  std::vector<std::filesystem::path> files;
  const std::pair<const char*, double ResultRow::*> metrics[] = {
      {"mse", &ResultRow::mse}, {"bias_sq", &ResultRow::bias_sq}, {"variance", &ResultRow::variance}};
  for (const auto& [metric, field] : metrics) {
    std::vector<Series> series;
    for (const auto& name : names) {
      Series s{name, std::vector<double>(xs.size(), NAN)};
      for (std::size_t i = 0; i < xs.size(); ++i) {
        const auto* r = table.find(xs[i], name);
        if (r == nullptr) continue;
        double v = r->*field;
        if (normalized) {
          const auto* ref = table.find(xs[i], kNormalizationReference);
          v = (ref != nullptr && ref->*field != 0.0) ? v / (ref->*field) : NAN;
        }
        s.y[i] = v;
      }
      series.push_back(std::move(s));
    }
    const std::string title = std::string(metric) + (normalized ? " relative to OPCB-ours" : "");
    const auto path = dir / ("plot_" + std::string(metric) + ".svg");
    std::ofstream out(path);
    if (!out) throw IoError("cannot write " + path.string());
    out << render_line_chart(title, axis_name(table.axis), xs, series);
    files.push_back(path);
  }
  return files;
}

inline std::string manifest_text(const ExperimentConfig& config, const std::string& command) {
  std::ostringstream o;
  o << "command = " << command << '\n'
    << "seed = " << config.seed << '\n'
    << "opcb_version = " << kVersion << '\n'
#if defined(__clang__)
    << "compiler = clang " << __clang_major__ << '.' << __clang_minor__ << '\n'
#elif defined(__GNUC__)
    << "compiler = gcc " << __GNUC__ << '.' << __GNUC_MINOR__ << '\n'
#endif
    << "cxx_standard = " << __cplusplus << '\n'
    << "[config]\n"
    << config.dump();
  return o.str();
}

/// results.csv, one plot per metric and a manifest; an empty table yields a header-only CSV,
/// no plots and an empty manifest.
inline void emit_outputs(const ResultTable& table, const std::filesystem::path& dir, const ExperimentConfig& config,
                         const std::string& command) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "results.csv");
    if (!out) throw IoError("cannot write results.csv in " + dir.string());
    write_results_csv(out, table);
  }
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) throw IoError("cannot write manifest.txt in " + dir.string());
  if (table.rows.empty()) return;
  write_plots(dir, table, config.normalize_plots);
  manifest << manifest_text(config, command);
}

}  // namespace opcb::harness
