// Command-line front end for the experiment harness and the enumeration oracle.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "opcb/harness/experiment.hpp"
#include "opcb/oracle.hpp"

namespace {

using namespace opcb;
using namespace opcb::harness;

struct CommonFlags {
  std::string config;
  std::string out = "out";
  std::optional<std::uint64_t> seed;
  int jobs = 1;
  bool permissive = false;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "flat key = value experiment file")->check(CLI::ExistingFile);
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--seed", f.seed, "master seed (overrides the config)");
  cmd->add_option("--jobs", f.jobs, "worker threads")->check(CLI::PositiveNumber);
  cmd->add_flag("--permissive", f.permissive, "drop records that violate support instead of failing");
}

ExperimentConfig resolve(const CommonFlags& f, ExperimentConfig base) {
  auto c = f.config.empty() ? base : load_config(f.config, base);
  if (f.seed) c.seed = *f.seed;
  c.validate();
  return c;
}

std::string command_line(int argc, char** argv) {
  std::string s;
  for (int i = 0; i < argc; ++i) s += (i ? " " : "") + std::string(argv[i]);
  return s;
}

void write_replications(const ExperimentResult& r, const ExperimentConfig& c, const std::filesystem::path& dir) {
  std::ofstream out(dir / "replications.csv");
  write_replications_csv(out, r.records, c.axis, c.num_actions);
}

void print_table(const ResultTable& t) {
  for (const auto& r : t.rows) {
    std::cout << axis_name(t.axis) << '=' << csv::format(r.axis_value) << "  " << r.estimator << "  mse=" << format_cell(r.mse)
              << "  bias_sq=" << format_cell(r.bias_sq) << "  variance=" << format_cell(r.variance)
              << (r.failures ? "  failures=" + std::to_string(r.failures) : std::string()) << '\n';
  }
}

int oracle_check(const std::string& instance_dir, const std::string& phi_bits, const std::string& out_dir) {
  EnumerableInstance inst = make_t1();
  int L = 2;
  std::optional<Table> f_hat;
  if (!instance_dir.empty()) {
    auto bundle = read_instance_bundle(instance_dir);
    inst = std::move(bundle.instance);
    L = bundle.num_actions;
    f_hat = std::move(bundle.f_hat);
  }
  const FactoredSpace space(L);
  const auto bits = phi_bits.empty() ? SubsetAction{1} : parse_bit_string(phi_bits);
  if (!phi_bits.empty() && static_cast<int>(phi_bits.size()) != L) {
    throw DimensionError("--phi needs " + std::to_string(L) + " characters");
  }
  const MainActionSelector phi(space, bits.bits);
  const Table model = f_hat.value_or(Table(inst.num_contexts(), inst.num_actions(), 0.0));

  std::ostringstream o;
  o << "quantity,value\n";
  const double v = true_value(inst);
  o << "true_value," << csv::format(v) << '\n';
  const auto ips = exact_moments(inst, *make_ips(inst.logging, inst.target));
  o << "ips_mean," << csv::format(ips.mean) << '\n' << "ips_variance," << csv::format(ips.variance) << '\n';
  const auto opcb = exact_moments(inst, *make_opcb(inst.logging, inst.target, model, phi));
  o << "opcb_mean," << csv::format(opcb.mean) << '\n'
    << "opcb_enumerated_bias," << csv::format(opcb.mean - v) << '\n'
    << "opcb_closed_form_bias," << csv::format(closed_form_bias(inst, phi, model)) << '\n'
    << "opcb_variance," << csv::format(opcb.variance) << '\n';
  std::string closed_variance;
  try {
    closed_variance = csv::format(closed_form_variance(inst, phi, model));
  } catch (const PreconditionError&) {
  }
  o << "opcb_closed_form_variance," << closed_variance << '\n';
  const double b = opcb.mean - v;
  o << "opcb_mse_n1," << csv::format(b * b + opcb.variance) << '\n';
  std::cout << o.str();
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    std::ofstream f(std::filesystem::path(out_dir) / "oracle.csv");
    if (!f) throw IoError("cannot write oracle.csv");
    f << o.str();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Off-policy evaluation and learning for combinatorial bandits"};
  app.require_subcommand(1);

  CommonFlags ope_flags, opl_flags, tune_flags, slate_flags;
  auto* ope = app.add_subcommand("ope-sweep", "off-policy evaluation sweep (MSE, bias, variance per estimator)");
  add_common(ope, ope_flags);
  auto* opl = app.add_subcommand("opl-sweep", "off-policy learning sweep (value of learned policies)");
  add_common(opl, opl_flags);
  auto* tune = app.add_subcommand("tune-audit", "selector tuning audit on one replication");
  add_common(tune, tune_flags);
  auto* slate = app.add_subcommand("slate-sweep", "slate estimator sweep");
  add_common(slate, slate_flags);

  std::string instance_dir, phi_bits, oracle_out;
  auto* oracle = app.add_subcommand("oracle-check", "exact oracle quantities on an instance bundle (default: T1)");
  oracle->add_option("--instance", instance_dir, "directory with p.csv, q.csv, sigma.csv, pi.csv, pi0.csv[, f_hat.csv]");
  oracle->add_option("--phi", phi_bits, "main-action mask as a bit string, leftmost character = a_1");
  oracle->add_option("--out", oracle_out, "directory for oracle.csv");

  CLI11_PARSE(app, argc, argv);
  const std::string cmd = command_line(argc, argv);

  try {
    if (ope->parsed()) {
      const auto c = resolve(ope_flags, {});
      const auto r = run_experiment(c, {ope_flags.jobs, ope_flags.permissive});
      emit_outputs(r.table, ope_flags.out, c, cmd);
      write_replications(r, c, ope_flags.out);
      print_table(r.table);
    } else if (slate->parsed()) {
      ExperimentConfig base;
      base.estimators = slate_estimator_names();
      const auto c = resolve(slate_flags, base);
      const auto r = run_slate_experiment(c, {slate_flags.jobs, slate_flags.permissive});
      emit_outputs(r.table, slate_flags.out, c, cmd);
      write_replications(r, c, slate_flags.out);
      print_table(r.table);
    } else if (opl->parsed()) {
      ExperimentConfig base;
      base.estimators = opl_method_names();
      const auto c = resolve(opl_flags, base);
      const auto r = run_opl_experiment(c, {opl_flags.jobs, opl_flags.permissive});
      emit_opl_outputs(r, opl_flags.out, c, cmd);
      for (const auto& row : r.rows) {
        std::cout << axis_name(r.axis) << '=' << csv::format(row.axis_value) << "  " << row.method
                  << "  value=" << format_cell(row.value) << "  relative=" << format_cell(row.relative_value) << '\n';
      }
    } else if (tune->parsed()) {
      const auto c = resolve(tune_flags, {});
      const auto a = run_tune_audit(c, {tune_flags.jobs, tune_flags.permissive});
      emit_tune_outputs(a, tune_flags.out, c, cmd);
      const int L = a.phi_true.space().num_actions();
      std::cout << "phi_true " << to_bit_string({a.phi_true.mask()}, L) << "\nphi_best " << to_bit_string({a.phi_best.mask()}, L)
                << "\nphi_ours " << to_bit_string({a.phi_ours.mask()}, L) << '\n';
    } else if (oracle->parsed()) {
      return oracle_check(instance_dir, phi_bits, oracle_out);
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
