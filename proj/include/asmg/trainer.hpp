// SPDX-License-Identifier: Apache-2.0
//
// Period-by-period orchestration: incremental base training, meta-generator
// training on a window of base snapshots, carried hidden states, serving-model
// generation and prequential evaluation, for ASMG and the IU/BU baselines.
//
// Periods are absolute. The pretrained model Θ_P closes the pre-training
// window; Θ_{P+1}, Θ_{P+2}, ... are the incremental chain. Θ_P never enters a
// meta-generator window.
#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "asmg/adam.hpp"
#include "asmg/base_model.hpp"
#include "asmg/error.hpp"
#include "asmg/meta_generator.hpp"
#include "asmg/metrics.hpp"
#include "asmg/rng.hpp"
#include "asmg/tape.hpp"

namespace asmg {

// ---- variants and configuration ----------------------------------------------

enum class VariantKind { kIU, kBU, kGruMulti, kGruSingle, kGruZero, kGruFull, kGruUnif, kLinear };

struct Variant {
  VariantKind kind = VariantKind::kIU;
  int window = 1;  // BU-w only

  bool is_asmg() const { return kind != VariantKind::kIU && kind != VariantKind::kBU; }
  bool is_gru() const { return is_asmg() && kind != VariantKind::kLinear; }
  bool full_history() const { return kind == VariantKind::kGruFull; }

  std::string name() const {
    switch (kind) {
      case VariantKind::kIU: return "IU";
      case VariantKind::kBU: return "BU-" + std::to_string(window);
      case VariantKind::kGruMulti: return "ASMG-GRUmulti";
      case VariantKind::kGruSingle: return "ASMG-GRUsingle";
      case VariantKind::kGruZero: return "ASMG-GRUzero";
      case VariantKind::kGruFull: return "ASMG-GRUfull";
      case VariantKind::kGruUnif: return "ASMG-GRUunif";
      case VariantKind::kLinear: return "ASMG-Linear";
    }
    return "?";
  }

  /// Accepts the names above, with or without the "ASMG-" prefix. BU-1 is IU.
  static Variant parse(std::string_view s) {
    std::string v(s);
    if (v.starts_with("ASMG-")) v = v.substr(5);
    if (v == "IU") return {VariantKind::kIU, 1};
    if (v.starts_with("BU-")) {
      int w = 0;
      if (!detail::parse_int(std::string_view(v).substr(3), w) || w < 1) {
        throw UsageError("bad batch-update window in variant '" + std::string(s) + "'");
      }
      return w == 1 ? Variant{VariantKind::kIU, 1} : Variant{VariantKind::kBU, w};
    }
    if (v == "GRUmulti") return {VariantKind::kGruMulti, 1};
    if (v == "GRUsingle") return {VariantKind::kGruSingle, 1};
    if (v == "GRUzero") return {VariantKind::kGruZero, 1};
    if (v == "GRUfull") return {VariantKind::kGruFull, 1};
    if (v == "GRUunif") return {VariantKind::kGruUnif, 1};
    if (v == "Linear") return {VariantKind::kLinear, 1};
    throw UsageError("unknown variant '" + std::string(s) +
                     "' (expected IU, BU-<w>, ASMG-GRUmulti, ASMG-GRUsingle, ASMG-GRUzero, "
                     "ASMG-GRUfull, ASMG-GRUunif or ASMG-Linear)");
  }

  friend bool operator==(const Variant&, const Variant&) = default;
};

enum class DecayMode { kLinearDecay, kUniform, kLastOnly };

inline std::string to_string(DecayMode m) {
  switch (m) {
    case DecayMode::kLinearDecay: return "linear_decay";
    case DecayMode::kUniform: return "uniform";
    case DecayMode::kLastOnly: return "last_only";
  }
  return "?";
}

inline DecayMode parse_decay_mode(std::string_view s) {
  if (s == "linear_decay") return DecayMode::kLinearDecay;
  if (s == "uniform") return DecayMode::kUniform;
  if (s == "last_only") return DecayMode::kLastOnly;
  throw UsageError("unknown decay mode '" + std::string(s) + "'");
}

inline DecayMode default_decay(const Variant& v) {
  switch (v.kind) {
    case VariantKind::kGruSingle:
    case VariantKind::kLinear: return DecayMode::kLastOnly;
    case VariantKind::kGruUnif: return DecayMode::kUniform;
    default: return DecayMode::kLinearDecay;
  }
}

/// Loss weights λ for a window of k steps, oldest first; they sum to one.
/// Linear decay gives step j the weight j / (1 + 2 + ... + k).
inline std::vector<double> decay_weights(std::size_t k, DecayMode mode) {
  if (k == 0) throw UsageError("decay_weights: k must be at least 1");
  std::vector<double> w(k, 0.0);
  switch (mode) {
    case DecayMode::kLinearDecay: {
      const double total = static_cast<double>(k * (k + 1) / 2);
      for (std::size_t j = 1; j <= k; ++j) w[j - 1] = static_cast<double>(j) / total;
      break;
    }
    case DecayMode::kUniform:
      std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(k));
      break;
    case DecayMode::kLastOnly:
      w.back() = 1.0;
      break;
  }
  return w;
}

/// How the carried hidden state is advanced after a meta update.
enum class HiddenAdvance {
  kFinal,  // recompute the step with the freshly trained ω
  kStale,  // reuse the step computed with ω before this period's training
};

/// Whether meta training waits for a full window of k incremental models.
enum class EarlyWindow {
  kDelay,  // first meta update once k models exist
  kPad,    // start immediately with min(t, k) models and a zero hidden state
};

struct MetaTrainConfig {
  AdamConfig adam{1e-3, 0.9, 0.999, 1e-8};
  int epochs = 5;
  std::size_t batch_size = 1024;
  /// Generate only the coordinates a mini-batch reads; exact because every
  /// coordinate's GRU is independent of the others.
  bool touched_only = true;
  std::uint64_t seed = 0;
};

struct TrainerConfig {
  Variant variant;
  std::size_t k = 3;
  int warmup = 10;  // τ
  DecayMode decay = DecayMode::kLinearDecay;
  std::size_t hidden = 4;  // d
  double meta_init_scale = 0.1;
  bool residual_readout = false;
  /// Zero input hidden state at every period (the GRUzero behaviour).
  bool reset_hidden = false;
  HiddenAdvance advance = HiddenAdvance::kFinal;
  EarlyWindow early_window = EarlyWindow::kDelay;
  OptimConfig base;
  MetaTrainConfig meta;
  std::uint64_t seed = 0;

  /// Applies the variant's implied λ mode and hidden-state handling.
  static TrainerConfig for_variant(Variant v, TrainerConfig base_cfg) {
    base_cfg.variant = v;
    base_cfg.decay = default_decay(v);
    base_cfg.reset_hidden = v.kind == VariantKind::kGruZero || v.kind == VariantKind::kGruFull;
    return base_cfg;
  }

  void validate() const {
    if (k < 1) throw UsageError("trainer: k must be at least 1");
    if (warmup < 1) throw UsageError("trainer: warm-up periods must be at least 1");
    if (variant.kind == VariantKind::kGruSingle && decay != DecayMode::kLastOnly) {
      throw UsageError("trainer: ASMG-GRUsingle requires last_only loss weights");
    }
    if (variant.kind == VariantKind::kGruUnif && decay != DecayMode::kUniform) {
      throw UsageError("trainer: ASMG-GRUunif requires uniform loss weights");
    }
    if (variant.is_gru() && hidden == 0) throw UsageError("trainer: GRU hidden size must be positive");
  }
};

// ---- meta objective -------------------------------------------------------------

enum class ObjectiveKind {
  kMultiStep,   // Σ λ_i L(Θ*_i | D_{i+1})
  kSingleStep,  // L(Θ*_last | D_{last+1}) only
};

/// Everything the meta objective reads besides ω. Step i of the window pairs
/// model Θ_{p_i} with dataset D_{p_i + 1}.
struct MetaProblem {
  const ModelLayout* layout = nullptr;
  const ParameterGroupMap* groups = nullptr;
  std::vector<std::span<const double>> window;
  std::span<const double> h_init;  // [n, d]
  std::vector<std::span<const Sample>> datasets;
  std::vector<int> dataset_periods;
  std::vector<double> lambda;
  int period = 0;  // t: the newest model in the window

  void validate() const {
    const std::size_t k = window.size();
    if (k == 0) throw ShapeError("meta objective: empty window");
    if (datasets.size() != k || lambda.size() != k) {
      throw ShapeError("meta objective: window, datasets and loss weights must align (" + std::to_string(k) +
                       " models, " + std::to_string(datasets.size()) + " datasets, " +
                       std::to_string(lambda.size()) + " weights)");
    }
    if (!dataset_periods.empty() && dataset_periods.size() != k) {
      throw ShapeError("meta objective: dataset period list does not align with the window");
    }
    double total = 0.0;
    for (double l : lambda) {
      if (l < 0.0) throw UsageError("meta objective: loss weights must be non-negative");
      total += l;
    }
    if (std::abs(total - 1.0) > 1e-12) {
      throw UsageError("meta objective: loss weights must sum to 1, got " + std::to_string(total));
    }
  }
};

namespace detail {

/// Sorted coordinates read by any of the batches: the embedding rows they
/// look up plus every MLP coordinate.
inline IndexList touched_coordinates(const ModelLayout& layout, std::span<const Batch> batches) {
  std::vector<char> mark(layout.size(), 0);
  const std::size_t d = layout.embed_dim();
  for (const Batch& b : batches) {
    if (b.indices.empty()) continue;  // placeholder for a step without a loss term
    for (std::size_t f = 0; f < layout.features().size(); ++f) {
      const std::size_t base = layout.table_offset(f);
      for (Index row : *b.indices[f]) std::fill_n(mark.begin() + static_cast<std::ptrdiff_t>(base + row * d), d, 1);
    }
  }
  std::fill(mark.begin() + static_cast<std::ptrdiff_t>(layout.embedding_size()), mark.end(), 1);
  std::vector<Index> out;
  for (std::size_t c = 0; c < mark.size(); ++c) {
    if (mark[c]) out.push_back(static_cast<Index>(c));
  }
  return make_index(std::move(out));
}

inline Tensor gather_coords(std::span<const double> src, const IndexList& coords, std::size_t width) {
  if (!coords) return Tensor(width == 1 ? Shape{src.size()} : Shape{src.size() / width, width},
                             std::vector<double>(src.begin(), src.end()));
  std::vector<double> out(coords->size() * width);
  for (std::size_t j = 0; j < coords->size(); ++j) {
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>((*coords)[j] * width), width, out.begin() + static_cast<std::ptrdiff_t>(j * width));
  }
  return Tensor(width == 1 ? Shape{coords->size()} : Shape{coords->size(), width}, std::move(out));
}

/// Full parameter vector Var for a step output defined on `coords`.
inline Var assemble(Tape& tape, std::span<const double> fallback, Var out, const IndexList& coords) {
  if (!coords) return out;
  const Var base = tape.constant(Tensor(Shape{fallback.size()}, std::vector<double>(fallback.begin(), fallback.end())));
  return tape.scatter_overwrite(base, out, coords);
}

}  // namespace detail

/// Records the GRU meta objective on `tape` for one set of step batches.
/// With `coords` set, only those coordinates are generated; all others keep
/// the input model's values, which the batches never read.
inline Var record_gru_objective(Tape& tape, const GruVars& w, bool residual, const MetaProblem& p,
                                std::span<const Batch> batches, const IndexList& coords, ObjectiveKind kind) {
  const std::size_t k = p.window.size();
  const std::size_t d = tape.value(w.w_r).dim(1);
  const IndexList group_ids = [&] {
    if (!coords) return p.groups->all_group_ids();
    std::vector<Index> g(coords->size());
    for (std::size_t j = 0; j < coords->size(); ++j) g[j] = p.groups->group_of((*coords)[j]);
    return make_index(std::move(g));
  }();
  Var h = tape.constant(detail::gather_coords(p.h_init, coords, d));
  std::optional<Var> total;
  for (std::size_t i = 0; i < k; ++i) {
    const Var theta = tape.constant(detail::gather_coords(p.window[i], coords, 1));
    h = gru_step(tape, w, group_ids, h, theta);
    if (kind == ObjectiveKind::kSingleStep && i + 1 < k) continue;
    const Var out = readout(tape, w, group_ids, h, theta, residual);
    const Var full = detail::assemble(tape, p.window[i], out, coords);
    const Var loss = log_loss(tape, forward(tape, *p.layout, full, batches[i]), batches[i].labels);
    const Var term = kind == ObjectiveKind::kMultiStep ? tape.affine(loss, p.lambda[i], 0.0) : loss;
    total = total ? tape.add(*total, term) : term;
  }
  return *total;
}

/// ASMG-Linear: Θ* = Σ α_i Θ_i evaluated on the newest dataset only.
inline Var record_linear_objective(Tape& tape, Var alpha, const MetaProblem& p, const Batch& batch,
                                   const IndexList& coords) {
  const std::size_t k = p.window.size();
  std::optional<Var> acc;
  for (std::size_t i = 0; i < k; ++i) {
    const Var theta = tape.constant(detail::gather_coords(p.window[i], coords, 1));
    const Var term = tape.scalar_mul(tape.slice(alpha, i, {}), theta);
    acc = acc ? tape.add(*acc, term) : term;
  }
  const Var full = detail::assemble(tape, p.window.back(), *acc, coords);
  return log_loss(tape, forward(tape, *p.layout, full, batch), batch.labels);
}

/// Value of the meta objective with every dataset used whole.
inline double meta_objective(const MetaGeneratorParams& meta, const MetaProblem& p,
                             ObjectiveKind kind = ObjectiveKind::kMultiStep) {
  p.validate();
  std::vector<Batch> batches;
  for (const auto& ds : p.datasets) batches.push_back(make_batch(*p.layout, ds));
  Tape tape;
  const auto w = register_meta(tape, meta, false);
  return tape.value(record_gru_objective(tape, w, meta.residual_readout, p, batches, nullptr, kind)).item();
}

/// Objective value and flat ω gradient for given step batches.
inline double meta_loss_and_grad(const MetaGeneratorParams& meta, const MetaProblem& p, std::span<const Batch> batches,
                                 ObjectiveKind kind, bool touched_only, std::vector<double>* grad) {
  const IndexList coords = touched_only ? detail::touched_coordinates(*p.layout, batches) : nullptr;
  Tape tape;
  const auto w = register_meta(tape, meta, grad != nullptr);
  const Var loss = record_gru_objective(tape, w, meta.residual_readout, p, batches, coords, kind);
  const double value = tape.value(loss).item();
  if (grad) {
    tape.backward(loss);
    grad->clear();
    for (Var v : {w.w_r, w.w_z, w.w_h, w.w_out, w.b_out}) {
      const Tensor g = tape.grad(v);
      grad->insert(grad->end(), g.data.begin(), g.data.end());
    }
  }
  return value;
}

namespace detail {

/// Mini-batch schedule for meta training: one batch per step of the window,
/// batch b of dataset j is slice (b mod batches_j) of that dataset's
/// per-(t, period, epoch) shuffle. The epoch length follows the newest dataset.
class MetaBatcher {
 public:
  MetaBatcher(const MetaProblem& p, const MetaTrainConfig& cfg, int epoch) : p_(p), cfg_(cfg) {
    for (std::size_t j = 0; j < p.datasets.size(); ++j) {
      const int dp = p.dataset_periods.empty() ? static_cast<int>(j) : p.dataset_periods[j];
      orders_.push_back(shuffled_rows(
          p.datasets[j].size(),
          derive_seed(cfg.seed, {tag(SeedTag::kMetaShuffle), static_cast<std::uint64_t>(p.period),
                                 static_cast<std::uint64_t>(dp), static_cast<std::uint64_t>(epoch)})));
    }
    const std::size_t newest = p.datasets.back().size();
    count_ = newest == 0 ? 0 : (newest + cfg.batch_size - 1) / cfg.batch_size;
  }

  std::size_t count() const { return count_; }

  std::vector<Batch> batches(std::size_t b, bool only_last = false) const {
    std::vector<Batch> out;
    for (std::size_t j = 0; j < p_.datasets.size(); ++j) {
      if (only_last && j + 1 < p_.datasets.size()) {
        out.emplace_back();
        continue;
      }
      out.push_back(batch_of(j, b));
    }
    return out;
  }

  Batch batch_of(std::size_t j, std::size_t b) const {
    const auto& order = orders_[j];
    const std::size_t nb = (order.size() + cfg_.batch_size - 1) / cfg_.batch_size;
    if (nb == 0) throw DataError("meta update: empty dataset for period " + std::to_string(p_.period));
    const std::size_t start = (b % nb) * cfg_.batch_size;
    const std::size_t len = std::min(cfg_.batch_size, order.size() - start);
    return make_batch(*p_.layout, p_.datasets[j], std::span<const std::size_t>(order).subspan(start, len));
  }

 private:
  const MetaProblem& p_;
  const MetaTrainConfig& cfg_;
  std::vector<std::vector<std::size_t>> orders_;
  std::size_t count_ = 0;
};

}  // namespace detail

struct MetaUpdateResult {
  MetaGeneratorParams meta;
  std::vector<double> epoch_losses;  // mean mini-batch objective per epoch
};

/// Adam steps on ω (the window models stay constant), starting from `meta`.
inline MetaUpdateResult meta_update(const MetaGeneratorParams& meta, const MetaProblem& p, ObjectiveKind kind,
                                    const MetaTrainConfig& cfg) {
  p.validate();
  MetaUpdateResult res{meta, {}};
  if (cfg.epochs <= 0) return res;
  std::vector<double> flat = meta.flatten();
  Adam adam(flat.size(), cfg.adam);
  std::vector<double> grad;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const detail::MetaBatcher batcher(p, cfg, epoch);
    double sum = 0.0;
    for (std::size_t b = 0; b < batcher.count(); ++b) {
      const auto batches = batcher.batches(b, kind == ObjectiveKind::kSingleStep);
      const double loss = meta_loss_and_grad(res.meta, p, batches, kind, cfg.touched_only, &grad);
      if (!std::isfinite(loss) ||
          std::any_of(grad.begin(), grad.end(), [](double g) { return !std::isfinite(g); })) {
        throw NumericalError("meta_update: non-finite objective at period " + std::to_string(p.period) + ", epoch " +
                             std::to_string(epoch) + ", batch " + std::to_string(b));
      }
      adam.step(flat, grad);
      res.meta.unflatten(flat);
      sum += loss;
    }
    res.epoch_losses.push_back(batcher.count() ? sum / static_cast<double>(batcher.count()) : 0.0);
  }
  return res;
}

struct LinearUpdateResult {
  LinearMetaParams linear;
  std::vector<double> epoch_losses;
};

/// Adam steps on α against the newest dataset.
inline LinearUpdateResult linear_update(const LinearMetaParams& lin, const MetaProblem& p, const MetaTrainConfig& cfg) {
  p.validate();
  if (lin.alpha.size() != p.window.size()) throw ShapeError("linear_update: α length does not match the window");
  LinearUpdateResult res{lin, {}};
  if (cfg.epochs <= 0) return res;
  Adam adam(lin.alpha.size(), cfg.adam);
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const detail::MetaBatcher batcher(p, cfg, epoch);
    double sum = 0.0;
    for (std::size_t b = 0; b < batcher.count(); ++b) {
      const Batch batch = batcher.batch_of(p.datasets.size() - 1, b);
      const Batch one[] = {batch};
      const IndexList coords = cfg.touched_only ? detail::touched_coordinates(*p.layout, one) : nullptr;
      Tape tape;
      const Var alpha = tape.leaf(Tensor::vector(res.linear.alpha));
      const Var loss = record_linear_objective(tape, alpha, p, batch, coords);
      const double v = tape.value(loss).item();
      if (!std::isfinite(v)) {
        throw NumericalError("linear_update: non-finite objective at period " + std::to_string(p.period));
      }
      tape.backward(loss);
      adam.step(res.linear.alpha, tape.grad(alpha).data);
      sum += v;
    }
    res.epoch_losses.push_back(batcher.count() ? sum / static_cast<double>(batcher.count()) : 0.0);
  }
  return res;
}

/// h of every coordinate after one GRU step on `theta`.
inline std::vector<double> step_hidden(const MetaGeneratorParams& meta, const ParameterGroupMap& groups,
                                       std::span<const double> h, std::span<const double> theta) {
  const std::size_t n = groups.num_coordinates();
  if (theta.size() != n || h.size() != n * meta.hidden) throw ShapeError("step_hidden: size mismatch");
  Tape tape;
  const auto w = register_meta(tape, meta, false);
  const Var hv = tape.constant(Tensor(Shape{n, meta.hidden}, std::vector<double>(h.begin(), h.end())));
  const Var th = tape.constant(Tensor(Shape{n}, std::vector<double>(theta.begin(), theta.end())));
  return tape.value(gru_step(tape, w, groups.all_group_ids(), hv, th)).data;
}

/// Folds the oldest window model Θ_{tag+1} into the carried state.
inline HiddenStateStore advance_hidden_state(const MetaGeneratorParams& meta, const ParameterGroupMap& groups,
                                             const BaseModelParams& oldest, const HiddenStateStore& store) {
  if (oldest.period != store.tag + 1) {
    throw Error("advance_hidden_state: store holds period " + std::to_string(store.tag) + " but the next model is period " +
                std::to_string(oldest.period));
  }
  return {store.tag + 1, store.hidden, step_hidden(meta, groups, store.h, oldest.theta)};
}

// ---- trainer state machine ------------------------------------------------------

/// Inputs shared by every period of one run. periods[i] must be period i+1.
struct TrainerContext {
  const ModelLayout* layout = nullptr;
  const ParameterGroupMap* groups = nullptr;
  const std::vector<PeriodDataset>* periods = nullptr;

  const PeriodDataset& dataset(int period) const {
    if (period < 1 || static_cast<std::size_t>(period) > periods->size()) {
      throw DataError("no data for period " + std::to_string(period));
    }
    const auto& ds = (*periods)[static_cast<std::size_t>(period - 1)];
    if (ds.period != period) throw DataError("period list is not contiguous at " + std::to_string(period));
    return ds;
  }
  int last_period() const { return static_cast<int>(periods->size()); }
};

struct TrainerState {
  int pretrain_period = 0;  // P
  int t = 0;                // newest base model period
  std::map<int, BaseModelParams> models;
  MetaGeneratorParams meta;
  LinearMetaParams linear;
  HiddenStateStore hidden;
  int meta_updates = 0;
  std::vector<PeriodLog> logs;

  const BaseModelParams& latest() const { return models.at(t); }
};

inline TrainerState initial_state(const TrainerConfig& cfg, const TrainerContext& ctx, const BaseModelParams& pretrained) {
  cfg.validate();
  TrainerState s;
  s.pretrain_period = pretrained.period;
  s.t = pretrained.period;
  s.models.emplace(pretrained.period, pretrained);
  if (cfg.variant.is_gru()) {
    s.meta = init_meta(ctx.groups->num_groups(), cfg.hidden, cfg.seed, cfg.meta_init_scale, cfg.residual_readout);
    s.hidden = HiddenStateStore::zeros(ctx.groups->num_coordinates(), cfg.hidden, pretrained.period);
  }
  if (cfg.variant.kind == VariantKind::kLinear) {
    s.linear.alpha.assign(cfg.k, 1.0 / static_cast<double>(cfg.k));
  }
  return s;
}

/// Periods of the models in the generator's window at state t (oldest first).
inline std::vector<int> window_periods(const TrainerConfig& cfg, const TrainerState& s) {
  const int first_chain = s.pretrain_period + 1;
  if (s.t < first_chain) return {};
  const int len = cfg.variant.full_history() ? s.t - s.pretrain_period
                                             : std::min<int>(static_cast<int>(cfg.k), s.t - s.pretrain_period);
  std::vector<int> out;
  for (int p = s.t - len + 1; p <= s.t; ++p) out.push_back(p);
  return out;
}

/// Whether the meta generator trains at state t.
inline bool meta_trains_at(const TrainerConfig& cfg, const TrainerState& s) {
  if (!cfg.variant.is_asmg() || s.t <= s.pretrain_period) return false;
  if (cfg.variant.full_history()) return true;
  const bool full = s.t - s.pretrain_period >= static_cast<int>(cfg.k);
  if (cfg.variant.kind == VariantKind::kLinear) return full;
  return full || cfg.early_window == EarlyWindow::kPad;
}

namespace detail {

inline std::vector<std::span<const double>> window_views(const TrainerState& s, const std::vector<int>& periods) {
  std::vector<std::span<const double>> out;
  for (int p : periods) out.emplace_back(s.models.at(p).theta);
  return out;
}

inline bool window_is_full(const TrainerConfig& cfg, const std::vector<int>& periods) {
  return periods.size() == cfg.k;
}

/// Input hidden state for a window.
inline HiddenStateStore input_hidden(const TrainerConfig& cfg, const TrainerContext& ctx, const TrainerState& s,
                                     const std::vector<int>& periods) {
  if (cfg.reset_hidden || cfg.variant.full_history() || !window_is_full(cfg, periods)) {
    return HiddenStateStore::zeros(ctx.groups->num_coordinates(), cfg.hidden, periods.front() - 1);
  }
  if (s.hidden.tag != periods.front() - 1) {
    throw Error("trainer: carried hidden state is at period " + std::to_string(s.hidden.tag) + ", window starts at " +
                std::to_string(periods.front()));
  }
  return s.hidden;
}

inline MetaProblem make_problem(const TrainerConfig& cfg, const TrainerContext& ctx, const TrainerState& s,
                                const std::vector<int>& periods, const HiddenStateStore& h) {
  MetaProblem p;
  p.layout = ctx.layout;
  p.groups = ctx.groups;
  p.window = window_views(s, periods);
  p.h_init = h.h;
  for (int q : periods) {
    p.datasets.emplace_back(ctx.dataset(q + 1).samples);
    p.dataset_periods.push_back(q + 1);
  }
  p.lambda = decay_weights(periods.size(), cfg.decay);
  p.period = s.t;
  return p;
}

inline std::vector<Sample> union_of(const TrainerContext& ctx, int first, int last) {
  std::vector<Sample> out;
  for (int q = std::max(1, first); q <= last; ++q) {
    const auto& ds = ctx.dataset(q).samples;
    out.insert(out.end(), ds.begin(), ds.end());
  }
  return out;
}

inline double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

}  // namespace detail

/// Serving model for period t+1 at state t.
inline std::vector<double> serving_model(const TrainerConfig& cfg, const TrainerContext& ctx, const TrainerState& s) {
  const auto periods = window_periods(cfg, s);
  if (!cfg.variant.is_asmg() || periods.empty()) return s.latest().theta;
  if (cfg.variant.kind == VariantKind::kLinear) {
    if (!detail::window_is_full(cfg, periods)) return s.latest().theta;
    return linear_combine(s.linear.alpha, detail::window_views(s, periods));
  }
  const auto h = detail::input_hidden(cfg, ctx, s, periods);
  auto gen = generate(s.meta, *ctx.groups, detail::window_views(s, periods), h);
  return std::move(gen.outputs.back());
}

/// Base-model training data for period `period` (D_period, or the BU window).
inline std::vector<Sample> base_training_data(const TrainerConfig& cfg, const TrainerContext& ctx, int period) {
  const int w = cfg.variant.kind == VariantKind::kBU ? cfg.variant.window : 1;
  return detail::union_of(ctx, period - w + 1, period);
}

struct StepOutcome {
  std::optional<PeriodLog> log;
  TrainerState state;
  std::vector<double> meta_epoch_losses;
};

/// One period transition t -> t+1: (1) generate Θ*_t, (2) evaluate it on
/// D_{t+1} when `evaluate`, (3) train Θ_{t+1} on D_{t+1}, (4) train ω on the
/// window ending at t, (5) advance the carried hidden state. The input state
/// is never modified.
inline StepOutcome period_step(const TrainerConfig& cfg, const TrainerContext& ctx, const TrainerState& in, bool evaluate) {
  if (in.t + 1 > ctx.last_period()) throw DataError("period_step: no data for period " + std::to_string(in.t + 1));
  StepOutcome out{std::nullopt, in, {}};
  TrainerState& s = out.state;
  const int next = in.t + 1;

  if (evaluate) {
    const auto serving = serving_model(cfg, ctx, in);
    const auto& target = ctx.dataset(next).samples;
    const auto scores = predict(*ctx.layout, serving, target);
    std::vector<double> labels;
    labels.reserve(target.size());
    for (const auto& smp : target) labels.push_back(static_cast<double>(smp.label));
    out.log = PeriodLog{in.t, auc(scores, labels), log_loss(scores, labels), 0.0, 0.0};
  }

  auto clock = std::chrono::steady_clock::now();
  const auto train = base_training_data(cfg, ctx, next);
  s.models.emplace(next, incremental_update(*ctx.layout, in.latest(), train, cfg.base, next));
  const double base_seconds = detail::seconds_since(clock);

  clock = std::chrono::steady_clock::now();
  if (meta_trains_at(cfg, in)) {
    const auto periods = window_periods(cfg, in);
    // ASMG-Linear carries no hidden state
    const auto h = cfg.variant.is_gru() ? detail::input_hidden(cfg, ctx, in, periods) : HiddenStateStore{};
    const MetaProblem problem = detail::make_problem(cfg, ctx, in, periods, h);
    if (cfg.variant.kind == VariantKind::kLinear) {
      auto r = linear_update(in.linear, problem, cfg.meta);
      s.linear = std::move(r.linear);
      out.meta_epoch_losses = std::move(r.epoch_losses);
    } else {
      const ObjectiveKind kind =
          cfg.variant.kind == VariantKind::kGruSingle ? ObjectiveKind::kSingleStep : ObjectiveKind::kMultiStep;
      auto r = meta_update(in.meta, problem, kind, cfg.meta);
      s.meta = std::move(r.meta);
      out.meta_epoch_losses = std::move(r.epoch_losses);
      const bool carries = !cfg.reset_hidden && !cfg.variant.full_history() && detail::window_is_full(cfg, periods);
      if (carries) {
        const auto& oldest = in.models.at(periods.front());
        s.hidden = advance_hidden_state(cfg.advance == HiddenAdvance::kFinal ? s.meta : in.meta, *ctx.groups, oldest,
                                        in.hidden);
      }
    }
    ++s.meta_updates;
  }
  const double meta_seconds = detail::seconds_since(clock);

  s.t = next;
  // keep only what the next window can read
  const int keep_from = !cfg.variant.is_asmg()     ? next
                        : cfg.variant.full_history() ? s.pretrain_period + 1
                                                     : next - static_cast<int>(cfg.k) + 1;
  std::erase_if(s.models, [&](const auto& kv) { return kv.first < keep_from && kv.first != next; });

  if (out.log) {
    out.log->meta_seconds = meta_seconds;
    out.log->base_seconds = base_seconds;
    s.logs.push_back(*out.log);
  }
  return out;
}

/// Offline warm-up: base updates from Θ_P through Θ_{P+τ+1} with meta
/// training at t = P+1 .. P+τ wherever a window is available.
inline TrainerState warmup(const TrainerConfig& cfg, const TrainerContext& ctx, const BaseModelParams& pretrained) {
  const int needed = pretrained.period + cfg.warmup + 1;
  if (ctx.last_period() < needed) {
    throw DataError("warm-up needs data through period " + std::to_string(needed) + " (pre-training period " +
                    std::to_string(pretrained.period) + " + τ=" + std::to_string(cfg.warmup) + " + 1), only " +
                    std::to_string(ctx.last_period()) + " available");
  }
  TrainerState s = initial_state(cfg, ctx, pretrained);
  while (s.t < needed) s = period_step(cfg, ctx, s, false).state;
  return s;
}

/// Online deployment step at state t with D_{t+1}.
inline StepOutcome online_step(const TrainerConfig& cfg, const TrainerContext& ctx, const TrainerState& s) {
  if (s.t < s.pretrain_period + cfg.warmup + 1) throw Error("online_step: meta warm-up has not finished");
  return period_step(cfg, ctx, s, true);
}

/// Full run: warm-up, then online steps until the last period's data has
/// been used for evaluation. `on_period` sees every committed state.
inline TrainerState run_trainer(const TrainerConfig& cfg, const TrainerContext& ctx, TrainerState s,
                                const std::function<void(const TrainerState&)>& on_period = {},
                                std::optional<int> stop_after = std::nullopt) {
  const int online_from = s.pretrain_period + cfg.warmup + 1;
  if (ctx.last_period() < online_from + 1) {
    throw DataError("run needs data through period " + std::to_string(online_from + 1) + ", only " +
                    std::to_string(ctx.last_period()) + " available");
  }
  while (s.t < ctx.last_period()) {
    if (stop_after && s.t >= *stop_after) break;
    s = period_step(cfg, ctx, s, s.t >= online_from).state;
    if (on_period) on_period(s);
  }
  return s;
}

/// BU-w baseline (BU-1 is IU): logs of every online period.
inline std::vector<PeriodLog> run_baseline_bu(int w, const TrainerConfig& cfg, const TrainerContext& ctx,
                                              const BaseModelParams& pretrained) {
  if (w < 1) throw UsageError("run_baseline_bu: window must be at least 1");
  TrainerConfig c = cfg;
  c.variant = w == 1 ? Variant{VariantKind::kIU, 1} : Variant{VariantKind::kBU, w};
  return run_trainer(c, ctx, initial_state(c, ctx, pretrained)).logs;
}

}  // namespace asmg
