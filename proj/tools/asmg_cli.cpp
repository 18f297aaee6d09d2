// SPDX-License-Identifier: Apache-2.0
//
// asmg: prepare | pretrain | run | report | gen-synthetic | check-grads
//
// Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical failure,
// 4 report --check found a failed trend.

#include <CLI11.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "asmg/config.hpp"
#include "asmg/experiment.hpp"
#include "asmg/gradcheck_suite.hpp"
#include "asmg/synthetic.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;
constexpr int kExitTrend = 4;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string variant;
  std::string out;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool with_variant) {
  cmd->add_option("--config", f.config, "key=value configuration file");
  cmd->add_option("--seed", f.seed, "run seed (default: every configured seed)");
  if (with_variant) cmd->add_option("--variant", f.variant, "single variant, e.g. IU, BU-3, ASMG-GRUmulti");
  cmd->add_option("--out", f.out, "output directory");
  cmd->add_option("--set", f.overrides, "override a config key (key=value), repeatable");
}

asmg::ExperimentConfig resolve(const CommonFlags& f) {
  asmg::ExperimentConfig cfg = f.config.empty() ? asmg::ExperimentConfig{} : asmg::load_config(f.config);
  for (const auto& kv : f.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw asmg::UsageError("--set expects key=value, got '" + kv + "'");
    asmg::set_config_value(cfg, asmg::detail::trim(std::string_view(kv).substr(0, eq)),
                           asmg::detail::trim(std::string_view(kv).substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

std::filesystem::path out_dir(const CommonFlags& f, const asmg::ExperimentConfig& cfg) {
  return f.out.empty() ? std::filesystem::path(cfg.work_dir) : std::filesystem::path(f.out);
}

std::vector<std::uint64_t> seeds_of(const CommonFlags& f, const asmg::ExperimentConfig& cfg) {
  return f.seed ? std::vector<std::uint64_t>{*f.seed} : cfg.run_seeds();
}

int cmd_gen_synthetic(const CommonFlags& f) {
  auto cfg = resolve(f);
  if (f.seed) cfg.synthetic.seed = *f.seed;
  const std::filesystem::path path = f.out.empty() ? std::filesystem::path(cfg.data_path) : std::filesystem::path(f.out);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto xs = asmg::gen_synthetic(cfg.synthetic);
  std::ofstream os(path, std::ios::binary);
  if (!os) throw asmg::DataError("cannot write " + path.string());
  asmg::write_interactions(os, xs);
  std::cout << "wrote " << xs.size() << " interactions over " << cfg.synthetic.periods << " periods to " << path.string()
            << '\n';
  return kExitOk;
}

int cmd_prepare(const CommonFlags& f) {
  const auto cfg = resolve(f);
  const auto m = asmg::prepare(cfg, out_dir(f, cfg));
  std::cout << "prepared " << m.periods.size() << " periods (" << m.scheme << "), " << m.schema.num_users << " users, "
            << m.schema.num_items << " items\n";
  return kExitOk;
}

int cmd_pretrain(const CommonFlags& f) {
  const auto cfg = resolve(f);
  const auto seeds = seeds_of(f, cfg);
  asmg::pretrain(cfg, out_dir(f, cfg), seeds);
  std::cout << "pre-trained " << seeds.size() << " model(s) on periods 1.." << cfg.pretrain_periods << '\n';
  return kExitOk;
}

int cmd_run(const CommonFlags& f, std::optional<int> stop_after, bool verbose) {
  const auto cfg = resolve(f);
  const auto out = out_dir(f, cfg);
  const auto variants = f.variant.empty() ? cfg.variant_list() : std::vector<asmg::Variant>{asmg::Variant::parse(f.variant)};
  const auto stream = asmg::load_stream(cfg, out);
  asmg::RunOptions opt;
  opt.stop_after_period = stop_after;
  opt.quiet = !verbose;
  for (const auto& v : variants) {
    for (auto seed : seeds_of(f, cfg)) {
      const auto start = std::chrono::steady_clock::now();
      const auto logs = asmg::run_one(cfg, stream, out, v, seed, opt);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      std::cout << v.name() << " seed " << seed << ": " << logs.size() << " logged periods, "
                << asmg::format_fixed(secs, 1) << " s\n";
    }
  }
  return kExitOk;
}

int cmd_report(const CommonFlags& f, bool check) {
  const auto cfg = resolve(f);
  const auto out = out_dir(f, cfg);
  const auto r = asmg::report(cfg, out);
  if (!r.has_iu) std::cerr << "warning: no IU runs found, improvement columns omitted\n";
  std::cout << asmg::summary_markdown(r.rows, r.checks);
  const bool ok = std::all_of(r.checks.begin(), r.checks.end(), [](const auto& c) { return c.pass; });
  return check && !ok ? kExitTrend : kExitOk;
}

int cmd_check_grads(std::uint64_t seed, std::size_t instances, double tolerance) {
  const auto cases = asmg::run_grad_suite(instances, seed);
  double worst = 0.0;
  for (const auto& c : cases) {
    worst = std::max(worst, c.result.max_relative_error);
    std::cout << (c.result.max_relative_error < tolerance ? "ok   " : "FAIL ") << c.name << ": max rel err "
              << c.result.max_relative_error << " over " << c.result.coords_checked << " coordinates\n";
  }
  std::cout << cases.size() << " instances, worst relative error " << worst << '\n';
  return worst < tolerance ? kExitOk : kExitNumerical;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive sequential model generation for incremental recommender training"};
  app.require_subcommand(1);

  CommonFlags flags;
  auto* gen = app.add_subcommand("gen-synthetic", "write a synthetic drifting interaction stream");
  add_common(gen, flags, false);
  auto* prep = app.add_subcommand("prepare", "split interactions into period shards");
  add_common(prep, flags, false);
  auto* pre = app.add_subcommand("pretrain", "train the initial model on the pre-training periods");
  add_common(pre, flags, false);
  auto* run = app.add_subcommand("run", "warm-up and online periods for each variant and seed");
  add_common(run, flags, true);
  std::optional<int> stop_after;
  bool verbose = false;
  run->add_option("--stop-after-period", stop_after, "stop once this period's state is committed");
  run->add_flag("--verbose", verbose, "log every period to stderr");
  auto* rep = app.add_subcommand("report", "aggregate test-period metrics into results.csv");
  add_common(rep, flags, false);
  bool check = false;
  rep->add_flag("--check", check, "exit 4 when an expected ordering does not hold");
  auto* grads = app.add_subcommand("check-grads", "finite-difference check of both training losses");
  std::uint64_t grad_seed = 0;
  std::size_t instances = 10;
  double tolerance = 1e-4;
  grads->add_option("--seed", grad_seed, "instance seed");
  grads->add_option("--instances", instances, "instances per loss");
  grads->add_option("--tolerance", tolerance, "maximum relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (*gen) return cmd_gen_synthetic(flags);
    if (*prep) return cmd_prepare(flags);
    if (*pre) return cmd_pretrain(flags);
    if (*run) return cmd_run(flags, stop_after, verbose);
    if (*rep) return cmd_report(flags, check);
    if (*grads) return cmd_check_grads(grad_seed, instances, tolerance);
  } catch (const asmg::UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const asmg::NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}
