// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 when any
// criterion fails.

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "asmg/experiment.hpp"
#include "asmg/gradcheck_suite.hpp"
#include "asmg/metrics.hpp"
#include "asmg/trainer.hpp"
#include "test_support.hpp"

namespace {

namespace fs = std::filesystem;
using namespace asmg;
using Clock = std::chrono::steady_clock;

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(double v, int digits = 3) { return format_fixed(v, digits); }

std::string sci(double v) {
  std::ostringstream os;
  os.precision(2);
  os << std::scientific << v;
  return os.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

// ---- gradients ----------------------------------------------------------------

Outcome gradient_suite() {
  const auto start = Clock::now();
  const auto cases = run_grad_suite(20, 2024);
  const double secs = seconds_since(start);
  double worst = 0.0;
  for (const auto& c : cases) worst = std::max(worst, c.result.max_relative_error);
  const bool ok = cases.size() >= 40 && worst < 1e-4 && secs < 120.0;
  return {ok, std::to_string(cases.size()) + " instances, max rel err " + sci(worst) + ", " + fmt(secs, 1) + " s"};
}

// ---- GRU cell -------------------------------------------------------------------

double logistic(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Scalar loops over the gate rows; shares nothing with the library cell.
std::vector<double> scalar_gru(const GruGroupParams& g, const std::vector<double>& h, double theta) {
  const std::size_t d = g.hidden;
  auto gate = [&](const std::vector<double>& w, std::size_t i, const std::vector<double>& x) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += w[i * (d + 1) + j] * x[j];
    return acc + w[i * (d + 1) + d] * theta;
  };
  std::vector<double> rh(d), out(d);
  for (std::size_t i = 0; i < d; ++i) rh[i] = logistic(gate(g.w_r, i, h)) * h[i];
  for (std::size_t i = 0; i < d; ++i) {
    const double z = logistic(gate(g.w_z, i, h));
    out[i] = (1.0 - z) * h[i] + z * std::tanh(gate(g.w_h, i, rh));
  }
  return out;
}

Outcome gru_oracle() {
  Rng rng(4242);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t d = 1 + static_cast<std::size_t>(trial % 6);
    GruGroupParams g;
    g.hidden = d;
    g.w_r = random_vector(d * (d + 1), 1.5, rng);
    g.w_z = random_vector(d * (d + 1), 1.5, rng);
    g.w_h = random_vector(d * (d + 1), 1.5, rng);
    g.w_out = random_vector(d, 1.0, rng);
    g.b_out = 0.0;
    const auto h = random_vector(d, 0.99, rng);
    const double theta = random_vector(1, 3.0, rng)[0];
    const auto got = gru_step(g, h, theta);
    const auto want = scalar_gru(g, h, theta);
    for (std::size_t i = 0; i < d; ++i) worst = std::max(worst, std::abs(got[i] - want[i]));
  }
  return {worst < 1e-12, "1000 triples, max abs diff " + sci(worst)};
}

// ---- decay weights -------------------------------------------------------------

Outcome decay() {
  bool ok = true;
  double worst_sum = 0.0;
  for (std::size_t k = 1; k <= 10; ++k) {
    const auto w = decay_weights(k, DecayMode::kLinearDecay);
    const double total = static_cast<double>(k * (k + 1) / 2);
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      ok = ok && w[j] == static_cast<double>(j + 1) / total;
      sum += w[j];
    }
    worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
  }
  ok = ok && worst_sum < 1e-15;
  return {ok, "k = 1..10, max |sum - 1| " + sci(worst_sum)};
}

// ---- variant collapse -----------------------------------------------------------

bool same_run(const TrainerState& a, const TrainerState& b) {
  if (a.logs.size() != b.logs.size()) return false;
  for (std::size_t i = 0; i < a.logs.size(); ++i) {
    if (a.logs[i].auc != b.logs[i].auc || a.logs[i].logloss != b.logs[i].logloss) return false;
  }
  return a.meta == b.meta;
}

Outcome collapse() {
  const testing::TinyWorld w(9);
  const auto ctx = w.context();
  const auto pre = testing::tiny_pretrained(w);

  // objective level: one window, value and gradient
  auto multi_cfg = testing::tiny_trainer({VariantKind::kGruMulti, 1});
  multi_cfg.decay = DecayMode::kLastOnly;
  const auto single_cfg = testing::tiny_trainer({VariantKind::kGruSingle, 1});
  const TrainerState s = warmup(multi_cfg, ctx, pre);
  const auto periods = window_periods(multi_cfg, s);
  const auto h = detail::input_hidden(multi_cfg, ctx, s, periods);
  const MetaProblem p = detail::make_problem(multi_cfg, ctx, s, periods, h);
  std::vector<Batch> batches;
  for (const auto& ds : p.datasets) batches.push_back(make_batch(w.layout, ds));
  std::vector<double> g_multi, g_single;
  const double v_multi = meta_loss_and_grad(s.meta, p, batches, ObjectiveKind::kMultiStep, true, &g_multi);
  const double v_single = meta_loss_and_grad(s.meta, p, batches, ObjectiveKind::kSingleStep, true, &g_single);
  const bool objective_ok = v_multi == v_single && g_multi == g_single;

  // run level: every logged metric and the final ω
  const auto a = run_trainer(multi_cfg, ctx, initial_state(multi_cfg, ctx, pre));
  const auto b = run_trainer(single_cfg, ctx, initial_state(single_cfg, ctx, pre));
  const bool single_ok = same_run(a, b);

  const auto zero_cfg = testing::tiny_trainer({VariantKind::kGruZero, 1});
  auto reset_cfg = testing::tiny_trainer({VariantKind::kGruMulti, 1});
  reset_cfg.reset_hidden = true;
  const auto c = run_trainer(zero_cfg, ctx, initial_state(zero_cfg, ctx, pre));
  const auto d = run_trainer(reset_cfg, ctx, initial_state(reset_cfg, ctx, pre));
  const bool zero_ok = same_run(c, d);

  return {objective_ok && single_ok && zero_ok,
          std::string("multi(last_only) vs single: objective ") + (objective_ok ? "equal" : "differs") + ", run " +
              (single_ok ? "equal" : "differs") + "; zero vs multi(h=0): " + (zero_ok ? "equal" : "differs")};
}

// ---- base chain -----------------------------------------------------------------

Outcome base_chain() {
  const testing::TinyWorld w(9);
  const auto ctx = w.context();
  const auto pre = testing::tiny_pretrained(w);
  std::vector<std::uint64_t> reference;
  std::size_t variants = 0;
  bool ok = true;
  for (VariantKind kind : {VariantKind::kGruMulti, VariantKind::kGruSingle, VariantKind::kGruZero,
                           VariantKind::kGruFull, VariantKind::kGruUnif, VariantKind::kLinear, VariantKind::kIU}) {
    const auto cfg = testing::tiny_trainer({kind, 1});
    std::vector<std::uint64_t> chain;
    run_trainer(cfg, ctx, initial_state(cfg, ctx, pre),
                [&](const TrainerState& s) { chain.push_back(checksum(s.latest().theta)); });
    if (variants++ == 0) reference = chain;
    ok = ok && chain == reference;
  }
  return {ok, std::to_string(variants) + " variants, " + std::to_string(reference.size()) + " checksums each"};
}

// ---- synthetic trend ------------------------------------------------------------

Outcome synthetic_trend(const fs::path& work) {
  const auto start = Clock::now();
  ExperimentConfig cfg;  // default stream, protocol, variants and 5 seeds
  fs::remove_all(work);
  fs::create_directories(work);
  cfg.data_path = (work / "data.csv").string();
  {
    std::ofstream os(cfg.data_path, std::ios::binary);
    write_interactions(os, gen_synthetic(cfg.synthetic));
  }
  prepare(cfg, work);
  pretrain(cfg, work, cfg.run_seeds());
  const auto stream = load_stream(cfg, work);
  for (const auto& v : cfg.variant_list()) {
    for (auto seed : cfg.run_seeds()) run_one(cfg, stream, work, v, seed);
  }
  const auto rep = report(cfg, work);
  const double minutes = seconds_since(start) / 60.0;

  bool ok = minutes < 30.0 && rep.checks.size() == 6;
  std::string failed;
  for (const auto& c : rep.checks) {
    if (!c.pass) failed += (failed.empty() ? "" : "; ") + c.name + " (" + c.detail + ")";
    ok = ok && c.pass;
  }
  std::string detail;
  for (const auto& r : rep.rows) detail += r.method + " " + fmt(r.agg.auc.mean, 4) + ", ";
  detail += fmt(minutes, 1) + " min";
  if (!failed.empty()) detail += "; failed: " + failed;
  return {ok, detail};
}

// ---- runtime scaling ------------------------------------------------------------

Outcome runtime_scaling(const fs::path& work) {
  ExperimentConfig cfg;
  fs::remove_all(work);
  fs::create_directories(work);
  cfg.synthetic.users = 3000;
  cfg.synthetic.items = 500;
  cfg.synthetic.periods = 20;
  cfg.synthetic.events_per_period = 2000;
  cfg.pretrain_periods = 1;
  cfg.train_periods = 10;
  cfg.val_periods = 3;
  cfg.test_periods = 5;
  cfg.k = 3;
  cfg.runs = 1;
  cfg.variants = {"ASMG-GRUmulti", "ASMG-GRUfull"};
  cfg.data_path = (work / "data.csv").string();
  {
    std::ofstream os(cfg.data_path, std::ios::binary);
    write_interactions(os, gen_synthetic(cfg.synthetic));
  }
  prepare(cfg, work);
  pretrain(cfg, work, {0});
  const auto stream = load_stream(cfg, work);
  const auto multi = run_one(cfg, stream, work, Variant::parse("ASMG-GRUmulti"), 0);
  const auto full = run_one(cfg, stream, work, Variant::parse("ASMG-GRUfull"), 0);
  if (multi.empty() || full.empty() || multi.back().period != full.back().period) {
    return {false, "runs did not log the same final period"};
  }
  const double ratio = full.back().meta_seconds / multi.back().meta_seconds;
  return {ratio >= 3.0 && ratio <= 14.0,
          "period " + std::to_string(full.back().period) + " of " + std::to_string(cfg.required_periods()) +
              ", full " + fmt(full.back().meta_seconds) + " s / multi " + fmt(multi.back().meta_seconds) +
              " s = " + fmt(ratio, 2)};
}

// ---- AUC -------------------------------------------------------------------------

double brute_auc(const std::vector<double>& s, const std::vector<double>& y) {
  double wins = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] == 1.0 && y[j] == 0.0) {
        pairs += 1.0;
        wins += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
      }
    }
  }
  return wins / pairs;
}

Outcome auc_oracle() {
  Rng rng(77);
  std::uniform_int_distribution<int> grid(0, 5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  std::size_t instances = 0;
  for (std::size_t m = 2; m <= 12; ++m) {
    std::vector<double> s(m);
    for (double& x : s) x = grid(rng) / 5.0;
    for (std::uint32_t mask = 1; mask + 1 < (1u << m); ++mask) {
      std::vector<double> y(m);
      for (std::size_t i = 0; i < m; ++i) y[i] = (mask >> i) & 1u ? 1.0 : 0.0;
      worst = std::max(worst, std::abs(auc(s, y) - brute_auc(s, y)));
      ++instances;
    }
  }
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> s(100), y(100);
    for (std::size_t i = 0; i < 100; ++i) {
      s[i] = trial % 2 ? u(rng) : grid(rng) / 5.0;
      y[i] = i < 2 ? static_cast<double>(i) : (u(rng) < 0.5 ? 1.0 : 0.0);
    }
    worst = std::max(worst, std::abs(auc(s, y) - brute_auc(s, y)));
    ++instances;
  }
  return {worst < 1e-12, std::to_string(instances) + " instances, max abs diff " + sci(worst)};
}

// ---- determinism and resume ------------------------------------------------------

ExperimentConfig small_experiment(const fs::path& dir) {
  ExperimentConfig c;
  c.synthetic.users = 600;
  c.synthetic.items = 120;
  c.synthetic.periods = 12;
  c.synthetic.events_per_period = 400;
  c.pretrain_periods = 3;
  c.train_periods = 3;
  c.val_periods = 1;
  c.test_periods = 4;
  c.hidden_layers = {16, 8};
  c.base_batch = 64;
  c.meta_batch = 128;
  c.meta_epochs = 2;
  c.runs = 2;
  c.variants = {"IU", "BU-3", "ASMG-GRUmulti", "ASMG-GRUsingle"};
  c.data_path = (dir / "data.csv").string();
  return c;
}

fs::path fresh_experiment(const fs::path& dir) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  const auto cfg = small_experiment(dir);
  std::ofstream os(cfg.data_path, std::ios::binary);
  write_interactions(os, gen_synthetic(cfg.synthetic));
  os.close();
  prepare(cfg, dir);
  pretrain(cfg, dir, cfg.run_seeds());
  return dir;
}

Outcome determinism_and_resume(const fs::path& work) {
  std::vector<std::string> csv;
  for (const char* name : {"first", "second"}) {
    const fs::path dir = fresh_experiment(work / name);
    const auto cfg = small_experiment(dir);
    const auto stream = load_stream(cfg, dir);
    for (const auto& v : cfg.variant_list()) {
      for (auto seed : cfg.run_seeds()) run_one(cfg, stream, dir, v, seed);
    }
    report(cfg, dir);
    csv.push_back(slurp(dir / "results.csv"));
  }
  const bool identical = !csv[0].empty() && csv[0] == csv[1];

  // interrupt after every possible period, then resume
  const fs::path reference = work / "first";
  const auto ref_cfg = small_experiment(reference);
  const Variant v = Variant::parse("ASMG-GRUmulti");
  const auto ref_logs = detail::read_period_log(run_dir(reference, v, 1) / "periodlog.csv");
  const int last = ref_cfg.required_periods() - 1;
  const std::string ref_meta = slurp(run_dir(reference, v, 1) / ("meta_" + std::to_string(last) + ".ckpt"));
  bool resumes = true;
  int interruptions = 0;
  for (int stop = ref_cfg.pretrain_periods + 1; stop < last; stop += 2) {
    const fs::path dir = fresh_experiment(work / "resumed");
    const auto cfg = small_experiment(dir);
    const auto stream = load_stream(cfg, dir);
    RunOptions opt;
    opt.stop_after_period = stop;
    run_one(cfg, stream, dir, v, 1, opt);
    const auto logs = run_one(cfg, stream, dir, v, 1);
    bool same = logs.size() == ref_logs.size();
    for (std::size_t i = 0; same && i < logs.size(); ++i) {
      same = logs[i].period == ref_logs[i].period && format_fixed(logs[i].auc, 12) == format_fixed(ref_logs[i].auc, 12) &&
             format_fixed(logs[i].logloss, 12) == format_fixed(ref_logs[i].logloss, 12);
    }
    same = same && slurp(run_dir(dir, v, 1) / ("meta_" + std::to_string(last) + ".ckpt")) == ref_meta;
    resumes = resumes && same;
    ++interruptions;
  }
  return {identical && resumes, std::string("results.csv ") + (identical ? "byte-identical" : "differs") + ", " +
                                    std::to_string(interruptions) + " interrupted runs " +
                                    (resumes ? "match" : "diverge")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ASMG acceptance suite"};
  std::string work = "acceptance_work";
  std::string only;
  app.add_option("--work", work, "scratch directory");
  app.add_option("--only", only, "run only criteria whose name contains this text");
  CLI11_PARSE(app, argc, argv);
  const fs::path root(work);
  fs::create_directories(root);

  struct Criterion {
    std::string name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {"gradient-correctness", gradient_suite},
      {"gru-cell-oracle", gru_oracle},
      {"decay-weights", decay},
      {"variant-collapse", collapse},
      {"base-chain-invariance", base_chain},
      {"synthetic-trend", [&] { return synthetic_trend(root / "trend"); }},
      {"runtime-scaling", [&] { return runtime_scaling(root / "scaling"); }},
      {"auc-oracle", auc_oracle},
      {"determinism-resume", [&] { return determinism_and_resume(root / "determinism"); }},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && c.name.find(only) == std::string::npos) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    if (!o.pass) ++failures;
    std::cout << (o.pass ? "PASS " : "FAIL ") << c.name << ": " << o.detail << std::endl;
  }
  return failures == 0 ? 0 : 1;
}
