// SPDX-License-Identifier: Apache-2.0
//
// Flat key=value experiment configuration. Blank lines and lines starting
// with '#' are ignored; unknown keys are rejected.
#pragma once

#include <cstdint>
#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "asmg/data_stream.hpp"
#include "asmg/error.hpp"
#include "asmg/trainer.hpp"

namespace asmg {

/// Knobs of the synthetic drifting stream.
struct SyntheticDriftSpec {
  std::size_t users = 10000;
  std::size_t items = 1000;
  int periods = 31;
  std::size_t events_per_period = 3000;
  std::size_t categories = 20;
  std::size_t latent_dim = 8;
  double hot_fraction = 0.1;
  double rotation = 0.3;  // share of the hot set replaced every period
  double drift = 0.1;     // user preference drift per period
  double noise = 0.5;     // per-period item score noise
  double affinity = 1.0;  // weight of the user-item match term
  double hot_boost = 3.0; // weight of hot-set membership
  int ramp = 5;           // periods an item takes to rise into or fade out of the hot set
  std::uint64_t seed = 1;

  void validate() const {
    if (users == 0 || items < 2 || periods < 1 || events_per_period == 0 || categories == 0 || latent_dim == 0) {
      throw UsageError("synthetic: sizes must be positive (items at least 2)");
    }
    auto unit = [](double v, const char* name) {
      if (!(v >= 0.0 && v <= 1.0)) throw UsageError(std::string("synthetic: ") + name + " must lie in [0, 1]");
    };
    unit(rotation, "rotation");
    unit(drift, "drift");
    unit(hot_fraction, "hot_fraction");
    if (noise < 0.0) throw UsageError("synthetic: noise must be non-negative");
    if (ramp < 1) throw UsageError("synthetic: ramp must be at least 1");
  }

  friend bool operator==(const SyntheticDriftSpec&, const SyntheticDriftSpec&) = default;
};

struct ExperimentConfig {
  // data
  std::string data_path = "data/interactions.csv";
  char delimiter = ',';
  std::string split = "calendar_day";
  NegativeMode negatives = NegativeMode::kSample;
  std::uint64_t data_seed = 7;
  std::string work_dir = "work";

  // protocol
  int pretrain_periods = 10;
  int train_periods = 10;  // also the meta warm-up length τ
  int val_periods = 3;
  int test_periods = 7;

  // base model
  std::size_t embed_dim = 8;
  std::vector<std::size_t> hidden_layers{64, 32};
  double base_lr = 1e-3;
  int base_epochs = 3;
  std::size_t base_batch = 256;
  DenseInit dense_init = DenseInit::kFanIn;
  int pretrain_epochs = 1;

  // meta generator
  std::size_t k = 3;
  std::size_t meta_hidden = 4;
  double meta_lr = 1e-3;
  int meta_epochs = 5;
  std::size_t meta_batch = 1024;
  double meta_init_scale = 0.1;
  bool residual_readout = true;  // the plain readout starts from a near-zero Θ*
  HiddenAdvance advance = HiddenAdvance::kFinal;
  EarlyWindow early_window = EarlyWindow::kDelay;
  std::string decay = "auto";  // or a fixed λ mode for every ASMG variant
  bool touched_only = true;

  // runs
  std::vector<std::string> variants{"IU", "BU-3", "BU-5", "BU-7", "ASMG-GRUmulti", "ASMG-GRUsingle"};
  int runs = 5;
  std::uint64_t seed = 0;
  std::string dataset_name = "synthetic";

  SyntheticDriftSpec synthetic;

  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;

  void validate() const {
    if (pretrain_periods < 1) throw UsageError("config: periods.pretrain must be at least 1");
    if (train_periods < 1 || val_periods < 0 || test_periods < 1) {
      throw UsageError("config: periods.train and periods.test must be at least 1, periods.val non-negative");
    }
    if (runs < 1) throw UsageError("config: run.count must be at least 1");
    if (variants.empty()) throw UsageError("config: run.variants is empty");
    for (const auto& v : variants) Variant::parse(v);
    if (decay != "auto") parse_decay_mode(decay);
    if (delimiter != ',' && delimiter != '\t') throw UsageError("config: data.format must be csv or tsv");
    if (split != "calendar_day") SplitScheme::parse(split);
    synthetic.validate();
  }

  /// Periods a prepared stream must contain: pre-training, warm-up,
  /// validation and test transitions, plus the final evaluation target.
  int required_periods() const { return pretrain_periods + train_periods + val_periods + test_periods + 1; }

  /// Serving-model periods t whose D_{t+1} metrics enter the results table.
  std::vector<int> test_log_periods() const {
    std::vector<int> out;
    const int first = pretrain_periods + train_periods + val_periods + 1;
    for (int t = first; t < first + test_periods; ++t) out.push_back(t);
    return out;
  }

  SplitScheme split_scheme() const { return split == "calendar_day" ? SplitScheme::calendar_day() : SplitScheme::parse(split); }

  /// Parsed variant list with duplicates (BU-1 next to IU) removed.
  std::vector<Variant> variant_list() const {
    std::vector<Variant> out;
    for (const auto& s : variants) {
      const Variant v = Variant::parse(s);
      if (std::find(out.begin(), out.end(), v) == out.end()) out.push_back(v);
    }
    return out;
  }

  TrainerConfig trainer_config(const Variant& v, std::uint64_t run_seed) const {
    TrainerConfig c;
    c.k = k;
    c.warmup = train_periods;
    c.hidden = meta_hidden;
    c.meta_init_scale = meta_init_scale;
    c.residual_readout = residual_readout;
    c.advance = advance;
    c.early_window = early_window;
    c.base.adam.learning_rate = base_lr;
    c.base.epochs = base_epochs;
    c.base.batch_size = base_batch;
    c.base.seed = run_seed;
    c.meta.adam.learning_rate = meta_lr;
    c.meta.epochs = meta_epochs;
    c.meta.batch_size = meta_batch;
    c.meta.touched_only = touched_only;
    c.meta.seed = run_seed;
    c.seed = run_seed;
    c = TrainerConfig::for_variant(v, c);
    if (decay != "auto" && v.is_gru()) c.decay = parse_decay_mode(decay);
    return c;
  }

  std::vector<std::uint64_t> run_seeds() const {
    std::vector<std::uint64_t> out;
    for (int r = 0; r < runs; ++r) out.push_back(seed + static_cast<std::uint64_t>(r));
    return out;
  }
};

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
std::string join_list(const std::vector<T>& xs) {
  std::ostringstream os;
  for (std::size_t i = 0; i < xs.size(); ++i) os << (i ? "," : "") << xs[i];
  return os.str();
}

/// Typed binding between a key and a config field.
struct ConfigField {
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, std::string_view)> set;
};

inline double parse_double(std::string_view key, std::string_view v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(std::string(v), &used);
    if (used == v.size()) return d;
  } catch (const std::exception&) {
  }
  throw UsageError("config: " + std::string(key) + " expects a number, got '" + std::string(v) + "'");
}

template <class T>
T parse_integral(std::string_view key, std::string_view v) {
  T out{};
  if (!parse_int(v, out)) {
    throw UsageError("config: " + std::string(key) + " expects an integer, got '" + std::string(v) + "'");
  }
  return out;
}

inline bool parse_bool(std::string_view key, std::string_view v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw UsageError("config: " + std::string(key) + " expects true or false, got '" + std::string(v) + "'");
}

inline std::vector<std::string> split_list(std::string_view v) {
  std::vector<std::string> out;
  for (auto part : split(v, ',')) {
    const auto t = trim(part);
    if (!t.empty()) out.emplace_back(t);
  }
  return out;
}

#define ASMG_FIELD_INT(key, member, type)                                                   \
  {key, {[](const ExperimentConfig& c) { return std::to_string(c.member); },                \
         [](ExperimentConfig& c, std::string_view v) { c.member = parse_integral<type>(key, v); }}}
#define ASMG_FIELD_DOUBLE(key, member)                                            \
  {key, {[](const ExperimentConfig& c) { return fmt_double(c.member); },          \
         [](ExperimentConfig& c, std::string_view v) { c.member = parse_double(key, v); }}}
#define ASMG_FIELD_STRING(key, member)                                    \
  {key, {[](const ExperimentConfig& c) { return c.member; },              \
         [](ExperimentConfig& c, std::string_view v) { c.member = std::string(v); }}}
#define ASMG_FIELD_BOOL(key, member)                                                    \
  {key, {[](const ExperimentConfig& c) { return std::string(c.member ? "true" : "false"); }, \
         [](ExperimentConfig& c, std::string_view v) { c.member = parse_bool(key, v); }}}

inline const std::map<std::string, ConfigField>& config_fields() {
  static const std::map<std::string, ConfigField> fields = {
      ASMG_FIELD_STRING("data.path", data_path),
      {"data.format",
       {[](const ExperimentConfig& c) { return std::string(c.delimiter == '\t' ? "tsv" : "csv"); },
        [](ExperimentConfig& c, std::string_view v) {
          if (v == "csv") c.delimiter = ',';
          else if (v == "tsv") c.delimiter = '\t';
          else throw UsageError("config: data.format must be csv or tsv");
        }}},
      ASMG_FIELD_STRING("data.split", split),
      {"data.negatives",
       {[](const ExperimentConfig& c) { return to_string(c.negatives); },
        [](ExperimentConfig& c, std::string_view v) { c.negatives = parse_negative_mode(v); }}},
      ASMG_FIELD_INT("data.seed", data_seed, std::uint64_t),
      ASMG_FIELD_STRING("data.name", dataset_name),
      ASMG_FIELD_STRING("paths.work", work_dir),
      ASMG_FIELD_INT("periods.pretrain", pretrain_periods, int),
      ASMG_FIELD_INT("periods.train", train_periods, int),
      ASMG_FIELD_INT("periods.val", val_periods, int),
      ASMG_FIELD_INT("periods.test", test_periods, int),
      ASMG_FIELD_INT("base.embed_dim", embed_dim, std::size_t),
      {"base.hidden",
       {[](const ExperimentConfig& c) { return join_list(c.hidden_layers); },
        [](ExperimentConfig& c, std::string_view v) {
          c.hidden_layers.clear();
          for (const auto& s : split_list(v)) c.hidden_layers.push_back(parse_integral<std::size_t>("base.hidden", s));
        }}},
      ASMG_FIELD_DOUBLE("base.lr", base_lr),
      ASMG_FIELD_INT("base.epochs", base_epochs, int),
      ASMG_FIELD_INT("base.batch_size", base_batch, std::size_t),
      {"base.init",
       {[](const ExperimentConfig& c) { return std::string(c.dense_init == DenseInit::kFanIn ? "fan_in" : "small_uniform"); },
        [](ExperimentConfig& c, std::string_view v) {
          if (v == "fan_in") {
            c.dense_init = DenseInit::kFanIn;
          } else if (v == "small_uniform") {
            c.dense_init = DenseInit::kSmallUniform;
          } else {
            throw UsageError("config: base.init must be fan_in or small_uniform, got '" + std::string(v) + "'");
          }
        }}},
      ASMG_FIELD_INT("base.pretrain_epochs", pretrain_epochs, int),
      ASMG_FIELD_INT("meta.k", k, std::size_t),
      ASMG_FIELD_INT("meta.hidden", meta_hidden, std::size_t),
      ASMG_FIELD_DOUBLE("meta.lr", meta_lr),
      ASMG_FIELD_INT("meta.epochs", meta_epochs, int),
      ASMG_FIELD_INT("meta.batch_size", meta_batch, std::size_t),
      ASMG_FIELD_DOUBLE("meta.init_scale", meta_init_scale),
      ASMG_FIELD_BOOL("meta.residual_readout", residual_readout),
      {"meta.hidden_advance",
       {[](const ExperimentConfig& c) { return std::string(c.advance == HiddenAdvance::kFinal ? "final" : "stale"); },
        [](ExperimentConfig& c, std::string_view v) {
          if (v == "final") c.advance = HiddenAdvance::kFinal;
          else if (v == "stale") c.advance = HiddenAdvance::kStale;
          else throw UsageError("config: meta.hidden_advance must be final or stale");
        }}},
      {"meta.early_window",
       {[](const ExperimentConfig& c) { return std::string(c.early_window == EarlyWindow::kDelay ? "delay" : "pad"); },
        [](ExperimentConfig& c, std::string_view v) {
          if (v == "delay") c.early_window = EarlyWindow::kDelay;
          else if (v == "pad") c.early_window = EarlyWindow::kPad;
          else throw UsageError("config: meta.early_window must be delay or pad");
        }}},
      ASMG_FIELD_STRING("meta.decay", decay),
      ASMG_FIELD_BOOL("meta.touched_only", touched_only),
      {"run.variants",
       {[](const ExperimentConfig& c) { return join_list(c.variants); },
        [](ExperimentConfig& c, std::string_view v) { c.variants = split_list(v); }}},
      ASMG_FIELD_INT("run.count", runs, int),
      ASMG_FIELD_INT("run.seed", seed, std::uint64_t),
      ASMG_FIELD_INT("synthetic.users", synthetic.users, std::size_t),
      ASMG_FIELD_INT("synthetic.items", synthetic.items, std::size_t),
      ASMG_FIELD_INT("synthetic.periods", synthetic.periods, int),
      ASMG_FIELD_INT("synthetic.events_per_period", synthetic.events_per_period, std::size_t),
      ASMG_FIELD_INT("synthetic.categories", synthetic.categories, std::size_t),
      ASMG_FIELD_INT("synthetic.latent_dim", synthetic.latent_dim, std::size_t),
      ASMG_FIELD_DOUBLE("synthetic.hot_fraction", synthetic.hot_fraction),
      ASMG_FIELD_DOUBLE("synthetic.rotation", synthetic.rotation),
      ASMG_FIELD_DOUBLE("synthetic.drift", synthetic.drift),
      ASMG_FIELD_DOUBLE("synthetic.noise", synthetic.noise),
      ASMG_FIELD_DOUBLE("synthetic.affinity", synthetic.affinity),
      ASMG_FIELD_DOUBLE("synthetic.hot_boost", synthetic.hot_boost),
      ASMG_FIELD_INT("synthetic.ramp", synthetic.ramp, int),
      ASMG_FIELD_INT("synthetic.seed", synthetic.seed, std::uint64_t),
  };
  return fields;
}

#undef ASMG_FIELD_INT
#undef ASMG_FIELD_DOUBLE
#undef ASMG_FIELD_STRING
#undef ASMG_FIELD_BOOL

}  // namespace detail

/// Applies one key=value assignment.
inline void set_config_value(ExperimentConfig& c, std::string_view key, std::string_view value) {
  const auto& fields = detail::config_fields();
  const auto it = fields.find(std::string(key));
  if (it == fields.end()) throw UsageError("config: unknown key '" + std::string(key) + "'");
  it->second.set(c, value);
}

/// Overlays the assignments in `text` on `base`.
inline ExperimentConfig parse_config(std::string_view text, ExperimentConfig base = {}) {
  std::size_t lineno = 0;
  for (auto raw : detail::split(text, '\n')) {
    ++lineno;
    const auto line = detail::trim(raw);
    if (line.empty() || line.front() == '#') continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw UsageError("config: line " + std::to_string(lineno) + ": expected key=value, got '" + std::string(line) + "'");
    }
    const auto key = detail::trim(line.substr(0, eq));
    const auto value = detail::trim(line.substr(eq + 1));
    try {
      set_config_value(base, key, value);
    } catch (const UsageError& e) {
      throw UsageError("line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw UsageError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

/// Every key with its resolved value, one per line in key order.
inline std::string to_config_text(const ExperimentConfig& c) {
  std::string out;
  for (const auto& [key, field] : detail::config_fields()) out += key + " = " + field.get(c) + "\n";
  return out;
}

}  // namespace asmg
