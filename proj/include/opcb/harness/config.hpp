#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "opcb/approx.hpp"
#include "opcb/csv.hpp"
#include "opcb/errors.hpp"
#include "opcb/synth.hpp"

namespace opcb::harness {

enum class Axis { None, N, NumActions, Lambda, K, RewardSigma, Epsilon, BiasNoise, SlateL };

inline std::string axis_name(Axis a) {
  switch (a) {
    case Axis::None: return "none";
    case Axis::N: return "n";
    case Axis::NumActions: return "num_actions";
    case Axis::Lambda: return "lambda";
    case Axis::K: return "K";
    case Axis::RewardSigma: return "reward_sigma";
    case Axis::Epsilon: return "epsilon";
    case Axis::BiasNoise: return "bias_noise";
    case Axis::SlateL: return "slate_L";
  }
  return "none";
}

inline Axis parse_axis(std::string_view s) {
  for (Axis a : {Axis::None, Axis::N, Axis::NumActions, Axis::Lambda, Axis::K, Axis::RewardSigma, Axis::Epsilon,
                 Axis::BiasNoise, Axis::SlateL}) {
    if (axis_name(a) == s) return a;
  }
  throw ConfigError("unknown sweep axis '" + std::string(s) + "'");
}

enum class PolicyScheme { Auto, Standard, LambdaFree };

/// Flat experiment description. Every field maps to one config key of the same name.
struct ExperimentConfig {
  Axis axis = Axis::None;
  std::vector<double> values{};

  long long n = 2000;
  int num_actions = 8;
  double lambda = 0.8;
  double reward_sigma = 3.0;
  double beta = -0.5;
  double epsilon = 0.2;
  std::size_t users = 200;
  std::size_t d_x = 5;
  int k_true = 3;
  int K = 0;  // 0: random-search candidates of size B; otherwise exhaustive Phi_K
  std::size_t candidates = 30;
  double bias_noise = 2.5;
  int replications = 100;
  std::uint64_t seed = 0;
  bool freeze_env = false;
  PolicyScheme policies = PolicyScheme::Auto;
  ApproximatorKind approximator = ApproximatorKind::Linear;
  std::vector<std::string> estimators{"DM", "IPS", "DR", "OPCB-true", "OPCB-best", "OPCB-ours"};
  int bootstrap_resamples = 1000;
  bool normalize_plots = false;

  // off-policy learning
  double learning_rate = 0.05;
  int iterations = 500;
  int eval_every = 25;
  double reg_beta = 10.0;

  // slates
  int slate_L = 2;
  int slot_size = 2;
  SlateRewardKind slate_reward = SlateRewardKind::Linear;

  std::vector<double> axis_values() const { return axis == Axis::None ? std::vector<double>{0.0} : values; }

  void validate() const {
    if (axis != Axis::None && values.empty()) throw ConfigError("axis values must be nonempty");
    if (replications < 1) throw ConfigError("replications must be at least 1");
    if (n < 1) throw ConfigError("n must be positive");
    if (num_actions < 1 || num_actions > 20) throw ConfigError("num_actions must lie in [1, 20]");
    if (k_true < 0 || k_true > num_actions) throw ConfigError("k_true must lie in [0, num_actions]");
    if (users < 1) throw ConfigError("users must be positive");
    if (candidates < 1) throw ConfigError("candidates must be positive");
    if (bias_noise < 0.0) throw ConfigError("bias_noise must be nonnegative");
    if (epsilon < 0.0 || epsilon > 1.0) throw ConfigError("epsilon must lie in [0, 1]");
    if (estimators.empty()) throw ConfigError("estimator list must be nonempty");
    if (bootstrap_resamples < 1) throw ConfigError("bootstrap_resamples must be positive");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (iterations < 0 || eval_every < 1) throw ConfigError("invalid training schedule");
    if (slate_L < 1 || slot_size < 1) throw ConfigError("slate sizes must be positive");
  }

  /// Canonical key = value dump, one per line, in a fixed order.
  std::string dump() const;
};

namespace detail {

inline std::string trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

inline bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("key '" + std::string(key) + "' expects a boolean, got '" + std::string(v) + "'");
}

template <class Int>
Int parse_int(std::string_view key, std::string_view v) {
  try {
    std::size_t used = 0;
    const long long x = std::stoll(std::string(v), &used, 10);
    if (used != v.size()) throw std::invalid_argument("trailing");
    if constexpr (std::is_unsigned_v<Int>) {
      if (x < 0) throw std::out_of_range("negative");
    }
    return static_cast<Int>(x);
  } catch (const std::exception&) {
    throw ConfigError("key '" + std::string(key) + "' expects an integer, got '" + std::string(v) + "'");
  }
}

inline std::uint64_t parse_u64(std::string_view key, std::string_view v) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v.front() == '-') throw std::invalid_argument("negative");
    const unsigned long long x = std::stoull(std::string(v), &used, 10);
    if (used != v.size()) throw std::invalid_argument("trailing");
    return x;
  } catch (const std::exception&) {
    throw ConfigError("key '" + std::string(key) + "' expects an unsigned integer, got '" + std::string(v) + "'");
  }
}

inline double parse_real(std::string_view key, std::string_view v) {
  try {
    return csv::parse_double(v);
  } catch (const Error&) {
    throw ConfigError("key '" + std::string(key) + "' expects a number, got '" + std::string(v) + "'");
  }
}

inline std::vector<std::string> parse_list(std::string_view v) {
  std::vector<std::string> out;
  for (const auto& f : csv::split(v, ',')) {
    auto t = trim(f);
    if (!t.empty()) out.push_back(std::move(t));
  }
  return out;
}

inline std::string join_reals(const std::vector<double>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + csv::format(v[i]);
  return s;
}

inline std::string slate_reward_name(SlateRewardKind k) {
  switch (k) {
    case SlateRewardKind::Mean: return "mean";
    case SlateRewardKind::Linear: return "linear";
    case SlateRewardKind::Geometric: return "geometric";
  }
  return "linear";
}

inline SlateRewardKind parse_slate_reward(std::string_view v) {
  if (v == "mean") return SlateRewardKind::Mean;
  if (v == "linear") return SlateRewardKind::Linear;
  if (v == "geometric") return SlateRewardKind::Geometric;
  throw ConfigError("slate_reward must be mean, linear or geometric");
}

inline std::string policy_scheme_name(PolicyScheme p) {
  switch (p) {
    case PolicyScheme::Auto: return "auto";
    case PolicyScheme::Standard: return "standard";
    case PolicyScheme::LambdaFree: return "lambda_free";
  }
  return "auto";
}

inline PolicyScheme parse_policy_scheme(std::string_view v) {
  if (v == "auto") return PolicyScheme::Auto;
  if (v == "standard") return PolicyScheme::Standard;
  if (v == "lambda_free") return PolicyScheme::LambdaFree;
  throw ConfigError("policies must be auto, standard or lambda_free");
}

}  // namespace detail

/// Applies one key = value assignment. Unknown keys are errors.
inline void set_config_value(ExperimentConfig& c, std::string_view key, std::string_view raw) {
  using namespace detail;
  const std::string v = trim(raw);
  if (key == "axis") c.axis = parse_axis(v);
  else if (key == "values") {
    c.values.clear();
    for (const auto& f : parse_list(v)) c.values.push_back(parse_real(key, f));
  } else if (key == "n") c.n = parse_int<long long>(key, v);
  else if (key == "num_actions") c.num_actions = parse_int<int>(key, v);
  else if (key == "lambda") c.lambda = parse_real(key, v);
  else if (key == "reward_sigma") c.reward_sigma = parse_real(key, v);
  else if (key == "beta") c.beta = parse_real(key, v);
  else if (key == "epsilon") c.epsilon = parse_real(key, v);
  else if (key == "users") c.users = parse_int<std::size_t>(key, v);
  else if (key == "d_x") c.d_x = parse_int<std::size_t>(key, v);
  else if (key == "k_true") c.k_true = parse_int<int>(key, v);
  else if (key == "K") c.K = parse_int<int>(key, v);
  else if (key == "candidates") c.candidates = parse_int<std::size_t>(key, v);
  else if (key == "bias_noise") c.bias_noise = parse_real(key, v);
  else if (key == "replications") c.replications = parse_int<int>(key, v);
  else if (key == "seed") c.seed = parse_u64(key, v);
  else if (key == "freeze_env") c.freeze_env = parse_bool(key, v);
  else if (key == "policies") c.policies = parse_policy_scheme(v);
  else if (key == "approximator") c.approximator = parse_approximator_kind(v);
  else if (key == "estimators") c.estimators = parse_list(v);
  else if (key == "bootstrap_resamples") c.bootstrap_resamples = parse_int<int>(key, v);
  else if (key == "normalize_plots") c.normalize_plots = parse_bool(key, v);
  else if (key == "learning_rate") c.learning_rate = parse_real(key, v);
  else if (key == "iterations") c.iterations = parse_int<int>(key, v);
  else if (key == "eval_every") c.eval_every = parse_int<int>(key, v);
  else if (key == "reg_beta") c.reg_beta = parse_real(key, v);
  else if (key == "slate_L") c.slate_L = parse_int<int>(key, v);
  else if (key == "slot_size") c.slot_size = parse_int<int>(key, v);
  else if (key == "slate_reward") c.slate_reward = parse_slate_reward(v);
  else throw ConfigError("unknown config key '" + std::string(key) + "'");
}

/// Parses `key = value` lines; blank lines and lines starting with '#' are ignored.
inline ExperimentConfig parse_config(std::istream& in, ExperimentConfig base = {}) {
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto t = detail::trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key = value");
    const auto key = detail::trim(std::string_view(t).substr(0, eq));
    try {
      set_config_value(base, key, std::string_view(t).substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  base.validate();
  return base;
}

inline ExperimentConfig load_config(const std::string& path, ExperimentConfig base = {}) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  return parse_config(in, std::move(base));
}

inline std::string ExperimentConfig::dump() const {
  using namespace detail;
  std::ostringstream o;
  std::string est;
  for (std::size_t i = 0; i < estimators.size(); ++i) est += (i ? "," : "") + estimators[i];
  o << "axis = " << axis_name(axis) << '\n'
    << "values = " << join_reals(values) << '\n'
    << "n = " << n << '\n'
    << "num_actions = " << num_actions << '\n'
    << "lambda = " << csv::format(lambda) << '\n'
    << "reward_sigma = " << csv::format(reward_sigma) << '\n'
    << "beta = " << csv::format(beta) << '\n'
    << "epsilon = " << csv::format(epsilon) << '\n'
    << "users = " << users << '\n'
    << "d_x = " << d_x << '\n'
    << "k_true = " << k_true << '\n'
    << "K = " << K << '\n'
    << "candidates = " << candidates << '\n'
    << "bias_noise = " << csv::format(bias_noise) << '\n'
    << "replications = " << replications << '\n'
    << "seed = " << seed << '\n'
    << "freeze_env = " << (freeze_env ? "true" : "false") << '\n'
    << "policies = " << policy_scheme_name(policies) << '\n'
    << "approximator = " << (approximator == ApproximatorKind::Linear ? "linear" : "mlp") << '\n'
    << "estimators = " << est << '\n'
    << "bootstrap_resamples = " << bootstrap_resamples << '\n'
    << "normalize_plots = " << (normalize_plots ? "true" : "false") << '\n'
    << "learning_rate = " << csv::format(learning_rate) << '\n'
    << "iterations = " << iterations << '\n'
    << "eval_every = " << eval_every << '\n'
    << "reg_beta = " << csv::format(reg_beta) << '\n'
    << "slate_L = " << slate_L << '\n'
    << "slot_size = " << slot_size << '\n'
    << "slate_reward = " << slate_reward_name(slate_reward) << '\n';
  return o.str();
}

}  // namespace opcb::harness
