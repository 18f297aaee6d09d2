// SPDX-License-Identifier: Apache-2.0

#include <gmock/gmock.h>
#include <gtest/gtest.h>

#include <numeric>

#include "asmg/gradcheck_suite.hpp"
#include "asmg/metrics.hpp"
#include "asmg/trainer.hpp"
#include "test_support.hpp"

namespace asmg {
namespace {

using testing::TinyWorld;
using testing::tiny_pretrained;
using testing::tiny_trainer;

constexpr Variant kMulti{VariantKind::kGruMulti, 1};
constexpr Variant kSingle{VariantKind::kGruSingle, 1};
constexpr Variant kIU{VariantKind::kIU, 1};

// ---- loss weights ----------------------------------------------------------------

TEST(DecayWeights, Examples) {
  const auto w = decay_weights(3, DecayMode::kLinearDecay);
  EXPECT_DOUBLE_EQ(w[0], 1.0 / 6.0);
  EXPECT_DOUBLE_EQ(w[1], 2.0 / 6.0);
  EXPECT_DOUBLE_EQ(w[2], 3.0 / 6.0);
  for (auto m : {DecayMode::kLinearDecay, DecayMode::kUniform, DecayMode::kLastOnly}) {
    EXPECT_EQ(decay_weights(1, m), std::vector<double>{1.0});
  }
  EXPECT_EQ(decay_weights(4, DecayMode::kUniform), std::vector<double>(4, 0.25));
  EXPECT_EQ(decay_weights(3, DecayMode::kLastOnly), (std::vector<double>{0.0, 0.0, 1.0}));
  EXPECT_THROW(decay_weights(0, DecayMode::kUniform), UsageError);
}

TEST(DecayWeights, LinearDecayIsIncreasingAndNormalized) {
  for (std::size_t k = 1; k <= 10; ++k) {
    const auto w = decay_weights(k, DecayMode::kLinearDecay);
    const double denom = static_cast<double>(k * (k + 1)) / 2.0;
    for (std::size_t j = 0; j < k; ++j) EXPECT_EQ(w[j], static_cast<double>(j + 1) / denom);
    for (std::size_t j = 1; j < k; ++j) EXPECT_GT(w[j], w[j - 1]);
    EXPECT_NEAR(std::accumulate(w.begin(), w.end(), 0.0), 1.0, 1e-15);
  }
}

TEST(TrainerConfig, ValidatesVariantConsistency) {
  auto cfg = tiny_trainer(kSingle);
  EXPECT_EQ(cfg.decay, DecayMode::kLastOnly);
  EXPECT_NO_THROW(cfg.validate());
  cfg.decay = DecayMode::kLinearDecay;
  EXPECT_THROW(cfg.validate(), UsageError);
  auto unif = tiny_trainer({VariantKind::kGruUnif, 1});
  unif.decay = DecayMode::kLastOnly;
  EXPECT_THROW(unif.validate(), UsageError);
  auto zero_k = tiny_trainer(kMulti);
  zero_k.k = 0;
  EXPECT_THROW(zero_k.validate(), UsageError);
  auto zero_tau = tiny_trainer(kMulti);
  zero_tau.warmup = 0;
  EXPECT_THROW(zero_tau.validate(), UsageError);
}

TEST(Variant, NamesRoundTrip) {
  for (const char* name : {"IU", "BU-3", "ASMG-GRUmulti", "ASMG-GRUsingle", "ASMG-GRUzero", "ASMG-GRUfull",
                           "ASMG-GRUunif", "ASMG-Linear"}) {
    EXPECT_EQ(Variant::parse(name).name(), name);
  }
  EXPECT_THROW(Variant::parse("BU-0"), UsageError);
  EXPECT_THROW(Variant::parse("GRU"), UsageError);
}

// ---- meta objective -----------------------------------------------------------------

/// A hand-built window over a kink-free layout.
struct Problem {
  TinyWorld world{6, {}};
  std::size_t k;
  std::size_t d = 2;
  std::vector<std::vector<double>> models;
  std::vector<double> h;
  MetaProblem p;
  MetaGeneratorParams meta;

  Problem(std::size_t k_, DecayMode mode, bool residual = false) : k(k_) {
    Rng rng(31);
    for (std::size_t i = 0; i < k; ++i) models.push_back(random_vector(world.layout.size(), 0.5, rng));
    h = random_vector(world.layout.size() * d, 0.5, rng);
    p.layout = &world.layout;
    p.groups = &world.groups;
    for (std::size_t i = 0; i < k; ++i) {
      p.window.emplace_back(models[i]);
      p.datasets.emplace_back(world.stream.periods[i + 1].samples);
      p.dataset_periods.push_back(static_cast<int>(i) + 2);
    }
    p.h_init = h;
    p.lambda = decay_weights(k, mode);
    p.period = static_cast<int>(k);
    meta = init_meta(world.groups.num_groups(), d, 3, 0.5, residual);
  }

  std::vector<Batch> batches() const {
    std::vector<Batch> out;
    for (const auto& ds : p.datasets) out.push_back(make_batch(world.layout, ds));
    return out;
  }
};

TEST(MetaObjective, RejectsMisalignedOrDegenerateWeights) {
  Problem pr(2, DecayMode::kLinearDecay);
  pr.p.lambda = {0.0, 0.0};
  EXPECT_THROW(meta_objective(pr.meta, pr.p), UsageError);
  pr.p.lambda = {1.0};
  EXPECT_THROW(meta_objective(pr.meta, pr.p), ShapeError);
  pr.p.lambda = {0.5, 0.5};
  pr.p.datasets.pop_back();
  EXPECT_THROW(meta_objective(pr.meta, pr.p), ShapeError);
}

TEST(MetaObjective, SingleWindowEqualsBaseLossOfGeneratedModel) {
  Problem pr(1, DecayMode::kLinearDecay);
  HiddenStateStore h{0, pr.d, pr.h};
  const auto gen = generate(pr.meta, pr.world.groups, pr.p.window, h);
  const auto scores = predict(pr.world.layout, gen.outputs[0], pr.p.datasets[0]);
  std::vector<double> labels;
  for (const auto& s : pr.p.datasets[0]) labels.push_back(s.label);
  EXPECT_NEAR(meta_objective(pr.meta, pr.p), log_loss(scores, labels), 1e-12);
}

TEST(MetaObjective, LastOnlyWeightsCollapseToSingleStep) {
  for (bool touched : {false, true}) {
    Problem pr(3, DecayMode::kLastOnly);
    const auto batches = pr.batches();
    std::vector<double> g_multi, g_single;
    const double multi = meta_loss_and_grad(pr.meta, pr.p, batches, ObjectiveKind::kMultiStep, touched, &g_multi);
    const double single = meta_loss_and_grad(pr.meta, pr.p, batches, ObjectiveKind::kSingleStep, touched, &g_single);
    EXPECT_EQ(multi, single);
    EXPECT_EQ(g_multi, g_single);
    EXPECT_EQ(meta_objective(pr.meta, pr.p, ObjectiveKind::kMultiStep),
              meta_objective(pr.meta, pr.p, ObjectiveKind::kSingleStep));
  }
  Problem two(2, DecayMode::kLinearDecay);
  two.p.lambda = {0.0, 1.0};
  EXPECT_EQ(meta_objective(two.meta, two.p, ObjectiveKind::kMultiStep),
            meta_objective(two.meta, two.p, ObjectiveKind::kSingleStep));
}

TEST(MetaObjective, TouchedCoordinatesGiveTheFullObjective) {
  Problem pr(2, DecayMode::kLinearDecay);
  const auto batches = pr.batches();
  std::vector<double> g_all, g_touched;
  const double all = meta_loss_and_grad(pr.meta, pr.p, batches, ObjectiveKind::kMultiStep, false, &g_all);
  const double touched = meta_loss_and_grad(pr.meta, pr.p, batches, ObjectiveKind::kMultiStep, true, &g_touched);
  EXPECT_NEAR(all, touched, 1e-13);
  ASSERT_EQ(g_all.size(), g_touched.size());
  for (std::size_t i = 0; i < g_all.size(); ++i) EXPECT_NEAR(g_all[i], g_touched[i], 1e-12);
}

TEST(MetaUpdate, ZeroEpochsLeaveOmegaUnchanged) {
  Problem pr(2, DecayMode::kLinearDecay);
  MetaTrainConfig cfg;
  cfg.epochs = 0;
  const auto r = meta_update(pr.meta, pr.p, ObjectiveKind::kMultiStep, cfg);
  EXPECT_EQ(r.meta, pr.meta);
  EXPECT_TRUE(r.epoch_losses.empty());
}

TEST(MetaUpdate, ObjectiveDecreasesAndIsDeterministic) {
  Problem pr(2, DecayMode::kLinearDecay, true);
  MetaTrainConfig cfg;
  cfg.adam.learning_rate = 1e-2;
  cfg.epochs = 15;
  cfg.batch_size = 64;
  cfg.seed = 4;
  const double before = meta_objective(pr.meta, pr.p);
  const auto r = meta_update(pr.meta, pr.p, ObjectiveKind::kMultiStep, cfg);
  ASSERT_EQ(r.epoch_losses.size(), 15u);
  EXPECT_LT(r.epoch_losses.back(), r.epoch_losses.front());
  EXPECT_LT(meta_objective(r.meta, pr.p), before);
  EXPECT_EQ(meta_update(pr.meta, pr.p, ObjectiveKind::kMultiStep, cfg).meta, r.meta);
}

TEST(MetaUpdate, GradientReachesEveryGroup) {
  Problem pr(2, DecayMode::kLinearDecay);
  std::vector<double> grad;
  meta_loss_and_grad(pr.meta, pr.p, pr.batches(), ObjectiveKind::kMultiStep, false, &grad);
  auto shaped = MetaGeneratorParams::zeros(pr.meta.groups, pr.d);
  shaped.unflatten(grad);
  for (std::size_t g = 0; g < pr.meta.groups; ++g) {
    const auto gg = shaped.group(g);
    double mag = std::abs(gg.b_out);
    for (double x : gg.w_out) mag += std::abs(x);
    for (double x : gg.w_h) mag += std::abs(x);
    EXPECT_GT(mag, 0.0) << "group " << g;
  }
}

// ---- hidden state -----------------------------------------------------------------

TEST(HiddenState, ConsecutiveAdvancesMatchARollout) {
  Problem pr(2, DecayMode::kLinearDecay);
  HiddenStateStore s0{4, pr.d, pr.h};
  BaseModelParams m5{pr.models[0], pr.world.layout.hash(), 5};
  BaseModelParams m6{pr.models[1], pr.world.layout.hash(), 6};
  const auto s1 = advance_hidden_state(pr.meta, pr.world.groups, m5, s0);
  const auto s2 = advance_hidden_state(pr.meta, pr.world.groups, m6, s1);
  EXPECT_EQ(s1.tag, 5);
  EXPECT_EQ(s2.tag, 6);
  const auto roll = generate(pr.meta, pr.world.groups, pr.p.window, s0);
  EXPECT_EQ(s1.h, roll.hidden[0]);
  EXPECT_EQ(s2.h, roll.hidden[1]);
  EXPECT_THROW(advance_hidden_state(pr.meta, pr.world.groups, m6, s0), Error);
}

TEST(HiddenState, WholeHistoryFromZeroMatchesFirstFullHistoryStep) {
  Problem pr(3, DecayMode::kLinearDecay);
  const auto zero = HiddenStateStore::zeros(pr.world.layout.size(), pr.d, 0);
  const auto full = generate(pr.meta, pr.world.groups, pr.p.window, zero);
  const auto one = advance_hidden_state(pr.meta, pr.world.groups, {pr.models[0], 0, 1}, zero);
  EXPECT_EQ(one.h, full.hidden[0]);
}

TEST(HiddenState, TagsTrailTheWindowAcrossARun) {
  const TinyWorld w(10);
  const auto ctx = w.context();
  const auto cfg = tiny_trainer(kMulti);
  std::vector<std::pair<int, int>> seen;
  run_trainer(cfg, ctx, initial_state(cfg, ctx, tiny_pretrained(w)),
              [&](const TrainerState& s) { seen.emplace_back(s.t, s.hidden.tag); });
  ASSERT_FALSE(seen.empty());
  int last_tag = -1;
  for (auto [t, tag] : seen) {
    EXPECT_GE(tag, last_tag);
    if (t - 3 > static_cast<int>(cfg.k)) {
      EXPECT_EQ(tag, t - static_cast<int>(cfg.k));
      EXPECT_GT(tag, last_tag);
    }
    last_tag = tag;
  }
}

// ---- warm-up and online protocol ------------------------------------------------------

TEST(Warmup, SmallestCaseTrainsOnce) {
  const TinyWorld w(7);
  const auto ctx = w.context();
  auto cfg = tiny_trainer(kMulti);
  cfg.k = 1;
  cfg.warmup = 1;
  const auto s = warmup(cfg, ctx, tiny_pretrained(w));
  EXPECT_EQ(s.meta_updates, 1);
  EXPECT_EQ(s.t, 5);
  EXPECT_TRUE(s.logs.empty());
}

TEST(Warmup, InsufficientPeriodsNameTheMinimum) {
  const TinyWorld w(5);
  const auto ctx = w.context();
  auto cfg = tiny_trainer(kMulti);
  cfg.warmup = 3;
  try {
    warmup(cfg, ctx, tiny_pretrained(w));
    FAIL();
  } catch (const DataError& e) {
    EXPECT_THAT(e.what(), ::testing::HasSubstr("period 7"));
  }
  EXPECT_THROW(online_step(cfg, ctx, initial_state(cfg, ctx, tiny_pretrained(w))), Error);
}

TEST(Protocol, EarlyWindowRule) {
  const TinyWorld w(6);
  const auto ctx = w.context();
  auto cfg = tiny_trainer(kMulti);
  cfg.k = 3;
  TrainerState s = initial_state(cfg, ctx, tiny_pretrained(w));
  EXPECT_FALSE(meta_trains_at(cfg, s));
  s.t = 5;
  EXPECT_EQ(window_periods(cfg, s), (std::vector<int>{4, 5}));
  EXPECT_FALSE(meta_trains_at(cfg, s));
  cfg.early_window = EarlyWindow::kPad;
  EXPECT_TRUE(meta_trains_at(cfg, s));
  s.t = 6;
  cfg.early_window = EarlyWindow::kDelay;
  EXPECT_TRUE(meta_trains_at(cfg, s));
  EXPECT_EQ(window_periods(cfg, s), (std::vector<int>{4, 5, 6}));
}

TEST(Protocol, BaseChainIsIdenticalAcrossVariants) {
  const TinyWorld w(9);
  const auto ctx = w.context();
  const auto pre = tiny_pretrained(w);
  std::vector<std::vector<std::uint64_t>> chains;
  for (VariantKind kind : {VariantKind::kIU, VariantKind::kGruMulti, VariantKind::kGruSingle, VariantKind::kGruZero,
                           VariantKind::kGruFull, VariantKind::kGruUnif, VariantKind::kLinear}) {
    const auto cfg = tiny_trainer({kind, 1});
    std::vector<std::uint64_t> chain;
    run_trainer(cfg, ctx, initial_state(cfg, ctx, pre),
                [&](const TrainerState& s) { chain.push_back(checksum(s.latest().theta)); });
    chains.push_back(std::move(chain));
  }
  for (const auto& c : chains) EXPECT_EQ(c, chains.front());
}

TEST(Protocol, EvaluationUsesOnlyThePreUpdateState) {
  const TinyWorld w(8);
  const auto ctx = w.context();
  const auto cfg = tiny_trainer(kMulti);
  const TrainerState s = warmup(cfg, ctx, tiny_pretrained(w));
  const auto out = online_step(cfg, ctx, s);
  ASSERT_TRUE(out.log.has_value());
  EXPECT_EQ(out.log->period, s.t);

  // Scramble D_{t+1}: the serving model must not change.
  auto tampered = w.stream.periods;
  auto& target = tampered[static_cast<std::size_t>(s.t)].samples;
  for (auto& smp : target) smp.label = 1 - smp.label;
  const TrainerContext bad{&w.layout, &w.groups, &tampered};
  const auto serving = serving_model(cfg, ctx, s);
  EXPECT_EQ(serving_model(cfg, bad, s), serving);

  const auto& data = ctx.dataset(s.t + 1).samples;
  std::vector<double> labels;
  for (const auto& smp : data) labels.push_back(smp.label);
  const auto scores = predict(w.layout, serving, data);
  EXPECT_EQ(out.log->auc, auc(scores, labels));
  EXPECT_EQ(out.log->logloss, log_loss(scores, labels));
  // The model trained on D_{t+1} scores differently.
  EXPECT_NE(out.log->logloss, log_loss(predict(w.layout, out.state.latest().theta, data), labels));
}

TEST(Protocol, IncrementalUpdateServesTheLatestModel) {
  const TinyWorld w(8);
  const auto ctx = w.context();
  const auto cfg = tiny_trainer(kIU);
  TrainerState s = initial_state(cfg, ctx, tiny_pretrained(w));
  s = run_trainer(cfg, ctx, s, {}, 6);
  EXPECT_EQ(serving_model(cfg, ctx, s), s.latest().theta);
  const auto out = online_step(cfg, ctx, s);
  EXPECT_EQ(out.state.meta_updates, 0);
  const auto& data = ctx.dataset(s.t + 1).samples;
  std::vector<double> labels;
  for (const auto& smp : data) labels.push_back(smp.label);
  EXPECT_EQ(out.log->auc, auc(predict(w.layout, s.latest().theta, data), labels));
}

TEST(Protocol, FullHistoryWindowRestartsFromZero) {
  const TinyWorld w(9);
  const auto ctx = w.context();
  const auto cfg = tiny_trainer({VariantKind::kGruFull, 1});
  EXPECT_TRUE(cfg.reset_hidden);
  const auto s = run_trainer(cfg, ctx, initial_state(cfg, ctx, tiny_pretrained(w)), {}, 8);
  EXPECT_EQ(window_periods(cfg, s), (std::vector<int>{4, 5, 6, 7, 8}));
  for (int p = 4; p <= 8; ++p) EXPECT_TRUE(s.models.contains(p));

  const auto periods = window_periods(cfg, s);
  std::vector<std::span<const double>> views;
  for (int p : periods) views.emplace_back(s.models.at(p).theta);
  const auto gen = generate(s.meta, w.groups, views, HiddenStateStore::zeros(w.layout.size(), cfg.hidden, 3));
  EXPECT_EQ(serving_model(cfg, ctx, s), gen.outputs.back());
}

TEST(Protocol, ZeroVariantIsMultiWithResetState) {
  const TinyWorld w(9);
  const auto ctx = w.context();
  const auto pre = tiny_pretrained(w);
  const auto zero = tiny_trainer({VariantKind::kGruZero, 1});
  auto multi = tiny_trainer(kMulti);
  multi.reset_hidden = true;
  const auto a = run_trainer(zero, ctx, initial_state(zero, ctx, pre));
  const auto b = run_trainer(multi, ctx, initial_state(multi, ctx, pre));
  ASSERT_EQ(a.logs.size(), b.logs.size());
  for (std::size_t i = 0; i < a.logs.size(); ++i) {
    EXPECT_EQ(a.logs[i].auc, b.logs[i].auc);
    EXPECT_EQ(a.logs[i].logloss, b.logs[i].logloss);
  }
  EXPECT_EQ(a.meta, b.meta);
}

TEST(Protocol, LinearVariantServesTheWeightedWindow) {
  const TinyWorld w(9);
  const auto ctx = w.context();
  const auto cfg = tiny_trainer({VariantKind::kLinear, 1});
  const auto init = initial_state(cfg, ctx, tiny_pretrained(w));
  EXPECT_EQ(init.linear.alpha, std::vector<double>(cfg.k, 0.5));
  const auto s = run_trainer(cfg, ctx, init, {}, 7);
  EXPECT_GT(s.meta_updates, 0);
  EXPECT_NE(s.linear.alpha, init.linear.alpha);
  const std::vector<std::span<const double>> window{s.models.at(6).theta, s.models.at(7).theta};
  EXPECT_EQ(serving_model(cfg, ctx, s), linear_combine(s.linear.alpha, window));
}

TEST(Protocol, OnlineLogsCoverEveryRemainingPeriod) {
  const TinyWorld w(9);
  const auto ctx = w.context();
  const auto cfg = tiny_trainer(kMulti);
  const auto s = run_trainer(cfg, ctx, initial_state(cfg, ctx, tiny_pretrained(w)));
  // P = 3, τ = 2: the first served period is 7.
  std::vector<int> periods;
  for (const auto& l : s.logs) periods.push_back(l.period);
  EXPECT_EQ(periods, (std::vector<int>{6, 7, 8}));
  EXPECT_EQ(s.t, 9);
  EXPECT_LE(s.models.size(), cfg.k);
}

// ---- batch update baseline ------------------------------------------------------------

TEST(BatchUpdate, WindowOfOneIsIncrementalUpdate) {
  const TinyWorld w(8);
  const auto ctx = w.context();
  const auto pre = tiny_pretrained(w);
  const auto cfg = tiny_trainer(kIU);
  const auto iu = run_trainer(cfg, ctx, initial_state(cfg, ctx, pre)).logs;
  const auto bu1 = run_baseline_bu(1, cfg, ctx, pre);
  ASSERT_EQ(iu.size(), bu1.size());
  for (std::size_t i = 0; i < iu.size(); ++i) {
    EXPECT_EQ(iu[i].auc, bu1[i].auc);
    EXPECT_EQ(iu[i].logloss, bu1[i].logloss);
  }
  EXPECT_THROW(run_baseline_bu(0, cfg, ctx, pre), UsageError);
}

TEST(BatchUpdate, TrainsOnTheUnionOfRecentPeriods) {
  const TinyWorld w(8);
  const auto ctx = w.context();
  auto cfg = tiny_trainer(kIU);
  cfg.variant = {VariantKind::kBU, 3};
  auto expect_union = [&](int period, int first) {
    std::vector<Sample> want;
    for (int q = first; q <= period; ++q) {
      const auto& s = ctx.dataset(q).samples;
      want.insert(want.end(), s.begin(), s.end());
    }
    EXPECT_EQ(base_training_data(cfg, ctx, period), want);
  };
  expect_union(6, 4);
  expect_union(2, 1);
  const auto bu3 = run_baseline_bu(3, cfg, ctx, tiny_pretrained(w));
  const auto iu = run_baseline_bu(1, cfg, ctx, tiny_pretrained(w));
  ASSERT_EQ(bu3.size(), iu.size());
  EXPECT_NE(bu3.front().logloss, iu.front().logloss);
}

}  // namespace
}  // namespace asmg
