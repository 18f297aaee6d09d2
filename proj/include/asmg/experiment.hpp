// SPDX-License-Identifier: Apache-2.0
//
// Experiment lifecycle on disk: prepare -> pretrain -> run -> report.
//
//   <out>/shards/                      manifest.json, period_<t>.tsv
//   <out>/pretrain/seed_<s>/           base_<P>.ckpt
//   <out>/runs/<variant>/seed_<s>/     run_manifest.json, periodlog.csv,
//                                      progress.json, base_<t>.ckpt, meta_<t>.ckpt
//   <out>/results.csv, <out>/summary.md
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "asmg/base_model.hpp"
#include "asmg/config.hpp"
#include "asmg/data_stream.hpp"
#include "asmg/meta_generator.hpp"
#include "asmg/metrics.hpp"
#include "asmg/trainer.hpp"

namespace asmg {

namespace fs = std::filesystem;

inline fs::path shards_dir(const fs::path& out) { return out / "shards"; }
inline fs::path pretrain_path(const fs::path& out, std::uint64_t seed, int period) {
  return out / "pretrain" / ("seed_" + std::to_string(seed)) / ("base_" + std::to_string(period) + ".ckpt");
}
inline fs::path run_dir(const fs::path& out, const Variant& v, std::uint64_t seed) {
  return out / "runs" / v.name() / ("seed_" + std::to_string(seed));
}

namespace detail {

/// Replaces `path` with `text` through a temporary file and a rename.
inline void write_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw DataError("cannot write " + tmp.string());
    os << text;
    if (!os) throw DataError("write failed for " + tmp.string());
  }
  fs::rename(tmp, path);
}

inline std::string read_text(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

}  // namespace detail

// ---- prepare ----------------------------------------------------------------

inline ShardManifest prepare(const ExperimentConfig& cfg, const fs::path& out) {
  std::ifstream in(cfg.data_path);
  if (!in) throw DataError("cannot read interaction file " + cfg.data_path);
  const auto xs = read_interactions(in, cfg.delimiter);
  const auto ps = prepare_stream(xs, cfg.split_scheme(), cfg.negatives, cfg.data_seed);
  write_shards(shards_dir(out), ps);
  return read_manifest(shards_dir(out));
}

/// Shards plus everything derived from them that every run shares.
struct LoadedStream {
  ShardManifest manifest;
  std::vector<PeriodDataset> periods;
  ModelLayout layout;
  ParameterGroupMap groups;
};

inline LoadedStream load_stream(const ExperimentConfig& cfg, const fs::path& out) {
  auto m = read_manifest(shards_dir(out));
  auto periods = load_periods(shards_dir(out), m);
  ModelLayout layout = layout_for_schema(m.schema, cfg.embed_dim, cfg.hidden_layers);
  ParameterGroupMap groups(layout);
  return {std::move(m), std::move(periods), std::move(layout), std::move(groups)};
}

// ---- pretrain ---------------------------------------------------------------

/// Θ_P from init_params, trained on the union of periods 1..P.
inline BaseModelParams pretrain_model(const ExperimentConfig& cfg, const LoadedStream& s, std::uint64_t seed) {
  const int P = cfg.pretrain_periods;
  if (static_cast<int>(s.periods.size()) < P) {
    throw DataError("pretrain needs " + std::to_string(P) + " periods, the prepared stream has " +
                    std::to_string(s.periods.size()));
  }
  std::vector<Sample> data;
  for (int t = 0; t < P; ++t) data.insert(data.end(), s.periods[t].samples.begin(), s.periods[t].samples.end());
  OptimConfig oc;
  oc.adam.learning_rate = cfg.base_lr;
  oc.epochs = cfg.pretrain_epochs;
  oc.batch_size = cfg.base_batch;
  oc.seed = derive_seed(seed, {tag(SeedTag::kPretrainShuffle)});
  return incremental_update(s.layout, init_params(s.layout, seed, cfg.dense_init), data, oc, P);
}

inline void pretrain(const ExperimentConfig& cfg, const fs::path& out, const std::vector<std::uint64_t>& seeds) {
  const auto s = load_stream(cfg, out);
  for (auto seed : seeds) {
    const auto path = pretrain_path(out, seed, cfg.pretrain_periods);
    fs::create_directories(path.parent_path());
    save_checkpoint(path, pretrain_model(cfg, s, seed));
  }
}

// ---- run --------------------------------------------------------------------

struct RunOptions {
  std::optional<int> stop_after_period;  // simulate an interruption
  bool quiet = true;
};

namespace detail {

inline std::string period_log_csv(const Variant& v, const std::vector<PeriodLog>& logs) {
  std::string out = "period,variant,auc,logloss,meta_seconds,base_seconds\n";
  for (const auto& l : logs) {
    out += std::to_string(l.period) + "," + v.name() + "," + fmt_double(l.auc) + "," + fmt_double(l.logloss) + "," +
           format_fixed(l.meta_seconds, 6) + "," + format_fixed(l.base_seconds, 6) + "\n";
  }
  return out;
}

inline std::vector<PeriodLog> read_period_log(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path.string());
  std::string line;
  std::getline(is, line);
  std::vector<PeriodLog> out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto cols = split(line, ',');
    PeriodLog l;
    if (cols.size() != 6 || !parse_int(cols[0], l.period)) {
      throw DataError(path.string() + ": line " + std::to_string(lineno) + ": malformed period log row");
    }
    l.auc = parse_double("auc", cols[2]);
    l.logloss = parse_double("logloss", cols[3]);
    l.meta_seconds = parse_double("meta_seconds", cols[4]);
    l.base_seconds = parse_double("base_seconds", cols[5]);
    out.push_back(l);
  }
  return out;
}

inline nlohmann::json log_to_json(const PeriodLog& l) {
  return {{"period", l.period}, {"auc", l.auc}, {"logloss", l.logloss},
          {"meta_seconds", l.meta_seconds}, {"base_seconds", l.base_seconds}};
}

inline std::string base_file(int t) { return "base_" + std::to_string(t) + ".ckpt"; }

/// Persists a committed state: checkpoints first, progress.json last.
inline void commit_state(const fs::path& dir, const TrainerConfig& tc, const ParameterGroupMap& groups,
                         const Variant& v, const TrainerState& s) {
  for (const auto& [t, m] : s.models) {
    if (!fs::exists(dir / base_file(t))) save_checkpoint(dir / base_file(t), m);
  }
  MetaCheckpoint mc;
  mc.group_map_hash = groups.hash();
  mc.k = tc.k;
  mc.period = s.t;
  mc.meta = s.meta;
  mc.hidden = s.hidden;
  mc.linear = s.linear;
  save_meta_checkpoint(dir / ("meta_" + std::to_string(s.t) + ".ckpt"), mc);
  write_atomic(dir / "periodlog.csv", period_log_csv(v, s.logs));

  nlohmann::json models = nlohmann::json::array();
  for (const auto& [t, m] : s.models) models.push_back(t);
  nlohmann::json logs = nlohmann::json::array();
  for (const auto& l : s.logs) logs.push_back(log_to_json(l));
  const nlohmann::json progress = {{"t", s.t},
                                   {"pretrain_period", s.pretrain_period},
                                   {"meta_updates", s.meta_updates},
                                   {"models", models},
                                   {"meta", "meta_" + std::to_string(s.t) + ".ckpt"},
                                   {"logs", logs}};
  write_atomic(dir / "progress.json", progress.dump(2) + "\n");

  // drop files the committed state no longer references
  for (const auto& entry : fs::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    const bool base = name.starts_with("base_") && name.ends_with(".ckpt");
    const bool meta = name.starts_with("meta_") && name.ends_with(".ckpt");
    if (base) {
      int t = 0;
      if (parse_int(std::string_view(name).substr(5, name.size() - 10), t) && !s.models.contains(t)) fs::remove(entry);
    } else if (meta && name != "meta_" + std::to_string(s.t) + ".ckpt") {
      fs::remove(entry);
    }
  }
}

inline std::optional<TrainerState> load_state(const fs::path& dir, const ModelLayout& layout,
                                              const ParameterGroupMap& groups) {
  if (!fs::exists(dir / "progress.json")) return std::nullopt;
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(dir / "progress.json"));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(dir.string() + "/progress.json: " + e.what());
  }
  TrainerState s;
  s.t = j.at("t").get<int>();
  s.pretrain_period = j.at("pretrain_period").get<int>();
  s.meta_updates = j.at("meta_updates").get<int>();
  for (int t : j.at("models").get<std::vector<int>>()) s.models.emplace(t, load_checkpoint(dir / base_file(t), layout.hash()));
  const auto mc = load_meta_checkpoint(dir / j.at("meta").get<std::string>(), groups.hash());
  s.meta = mc.meta;
  s.hidden = mc.hidden;
  s.linear = mc.linear;
  for (const auto& l : j.at("logs")) {
    s.logs.push_back({l.at("period").get<int>(), l.at("auc").get<double>(), l.at("logloss").get<double>(),
                      l.at("meta_seconds").get<double>(), l.at("base_seconds").get<double>()});
  }
  return s;
}

}  // namespace detail

/// Runs (or resumes) one variant for one seed; returns its period logs.
inline std::vector<PeriodLog> run_one(const ExperimentConfig& cfg, const LoadedStream& stream, const fs::path& out,
                                      const Variant& v, std::uint64_t seed, const RunOptions& opt = {}) {
  if (static_cast<int>(stream.periods.size()) != cfg.required_periods()) {
    throw DataError("the protocol " + std::to_string(cfg.pretrain_periods) + "+" + std::to_string(cfg.train_periods) +
                    "/" + std::to_string(cfg.val_periods) + "/" + std::to_string(cfg.test_periods) + " needs " +
                    std::to_string(cfg.required_periods()) + " periods, the prepared stream has " +
                    std::to_string(stream.periods.size()));
  }
  const TrainerConfig tc = cfg.trainer_config(v, seed);
  const TrainerContext ctx{&stream.layout, &stream.groups, &stream.periods};
  const fs::path dir = run_dir(out, v, seed);
  fs::create_directories(dir);

  nlohmann::json manifest = {{"variant", v.name()},
                             {"seed", seed},
                             {"meta_init_seed", tc.seed},
                             {"decay", to_string(tc.decay)},
                             {"layout", stream.layout.describe()},
                             {"config", to_config_text(cfg)}};
  // progress made under another configuration is not resumable
  const fs::path manifest_path = dir / "run_manifest.json";
  if (fs::exists(manifest_path)) {
    const auto previous = nlohmann::json::parse(detail::read_text(manifest_path), nullptr, false);
    if (previous != manifest) {
      fs::remove_all(dir);
      fs::create_directories(dir);
    }
  }
  detail::write_atomic(manifest_path, manifest.dump(2) + "\n");

  auto resumed = detail::load_state(dir, stream.layout, stream.groups);
  TrainerState state;
  if (resumed) {
    state = std::move(*resumed);
  } else {
    const auto ckpt = pretrain_path(out, seed, cfg.pretrain_periods);
    if (!fs::exists(ckpt)) throw DataError("missing pre-trained model " + ckpt.string() + " (run pretrain first)");
    state = initial_state(tc, ctx, load_checkpoint(ckpt, stream.layout.hash()));
    detail::commit_state(dir, tc, stream.groups, v, state);
  }
  state = run_trainer(
      tc, ctx, std::move(state),
      [&](const TrainerState& s) {
        detail::commit_state(dir, tc, stream.groups, v, s);
        if (!opt.quiet) {
          std::cerr << v.name() << " seed " << seed << ": period " << s.t;
          if (!s.logs.empty() && s.logs.back().period + 1 == s.t) {
            std::cerr << " auc " << format_fixed(s.logs.back().auc, 4);
          }
          std::cerr << '\n';
        }
      },
      opt.stop_after_period);
  return state.logs;
}

// ---- report -----------------------------------------------------------------

/// Display order: IU, BU by window, then the ASMG variants.
inline bool variant_order(const Variant& a, const Variant& b) {
  if (a.kind != b.kind) return static_cast<int>(a.kind) < static_cast<int>(b.kind);
  return a.window < b.window;
}

/// Per-variant aggregates over the test periods of every finished seed.
inline std::vector<ResultRow> collect_results(const ExperimentConfig& cfg, const fs::path& out) {
  const fs::path runs = out / "runs";
  if (!fs::exists(runs)) throw DataError("no runs under " + out.string());
  std::vector<std::pair<Variant, std::vector<std::vector<PeriodLog>>>> found;
  const auto wanted = cfg.test_log_periods();
  for (const auto& vdir : fs::directory_iterator(runs)) {
    if (!vdir.is_directory()) continue;
    const Variant v = Variant::parse(vdir.path().filename().string());
    std::vector<fs::path> seeds;
    for (const auto& sdir : fs::directory_iterator(vdir.path())) {
      if (sdir.is_directory() && fs::exists(sdir.path() / "periodlog.csv")) seeds.push_back(sdir.path());
    }
    std::sort(seeds.begin(), seeds.end());
    std::vector<std::vector<PeriodLog>> logs;
    for (const auto& sdir : seeds) {
      auto l = detail::read_period_log(sdir / "periodlog.csv");
      std::set<int> have;
      for (const auto& x : l) have.insert(x.period);
      const bool complete = std::all_of(wanted.begin(), wanted.end(), [&](int p) { return have.contains(p); });
      if (complete) logs.push_back(std::move(l));
    }
    if (!logs.empty()) found.emplace_back(v, std::move(logs));
  }
  if (found.empty()) throw DataError("no finished runs under " + runs.string());
  std::sort(found.begin(), found.end(), [](const auto& a, const auto& b) { return variant_order(a.first, b.first); });
  std::vector<ResultRow> rows;
  for (const auto& [v, logs] : found) rows.push_back({v.name(), cfg.dataset_name, aggregate(logs, wanted)});
  return rows;
}

struct TrendCheck {
  std::string name;
  bool pass = false;
  std::string detail;
};

/// Orderings expected on a drifting stream; only pairs present are checked.
inline std::vector<TrendCheck> check_trends(const std::vector<ResultRow>& rows) {
  std::map<std::string, double> auc;
  for (const auto& r : rows) auc[r.method] = r.agg.auc.mean;
  std::vector<TrendCheck> out;
  auto cmp = [&](const std::string& a, const std::string& b, bool strict, double margin = 0.0) {
    if (!auc.contains(a) || !auc.contains(b)) return;
    const double diff = auc[a] - auc[b];
    const bool pass = strict ? diff > margin : diff >= margin;
    std::string name = a + (strict ? " > " : " >= ") + b;
    if (margin > 0.0) name = a + " - " + b + " >= " + format_fixed(margin, 3);
    out.push_back({name, pass, format_fixed(auc[a], 4) + " vs " + format_fixed(auc[b], 4)});
  };
  cmp("IU", "BU-3", true);
  cmp("BU-3", "BU-5", true);
  cmp("BU-5", "BU-7", true);
  cmp("ASMG-GRUmulti", "ASMG-GRUsingle", false);
  cmp("ASMG-GRUsingle", "IU", false);
  cmp("ASMG-GRUmulti", "IU", false, 0.005);
  return out;
}

inline std::string summary_markdown(const std::vector<ResultRow>& rows, const std::vector<TrendCheck>& checks) {
  std::optional<Aggregate> iu;
  for (const auto& r : rows) {
    if (r.method == "IU") iu = r.agg;
  }
  std::ostringstream os;
  os << "| Method | Runs | AUC | LogLoss |" << (iu ? " AUC imp% | LogLoss imp% |" : "") << "\n";
  os << "|---|---|---|---|" << (iu ? "---|---|" : "") << "\n";
  for (const auto& r : rows) {
    os << "| " << r.method << " | " << r.agg.runs << " | " << format_fixed(r.agg.auc.mean, 4) << " ± "
       << format_fixed(r.agg.auc.std, 4) << " | " << format_fixed(r.agg.logloss.mean, 4) << " ± "
       << format_fixed(r.agg.logloss.std, 4) << " |";
    if (iu) {
      os << ' ' << format_fixed(auc_improvement(r.agg.auc.mean, iu->auc.mean), 2) << "% | "
         << format_fixed(logloss_improvement(r.agg.logloss.mean, iu->logloss.mean), 2) << "% |";
    }
    os << '\n';
  }
  if (!checks.empty()) {
    os << "\n";
    for (const auto& c : checks) os << "- " << (c.pass ? "PASS" : "FAIL") << " " << c.name << " (" << c.detail << ")\n";
  }
  return os.str();
}

struct ReportResult {
  std::vector<ResultRow> rows;
  std::vector<TrendCheck> checks;
  bool has_iu = false;
};

inline ReportResult report(const ExperimentConfig& cfg, const fs::path& out) {
  ReportResult r;
  r.rows = collect_results(cfg, out);
  r.checks = check_trends(r.rows);
  std::ostringstream csv;
  r.has_iu = write_results_csv(csv, r.rows);
  detail::write_atomic(out / "results.csv", csv.str());
  detail::write_atomic(out / "summary.md", summary_markdown(r.rows, r.checks));
  return r;
}

}  // namespace asmg
