// SPDX-License-Identifier: Apache-2.0
//
// Random tiny instances of the two training losses, checked against central
// differences: the base-model log loss w.r.t. Θ and the meta objective
// w.r.t. ω.
#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "asmg/base_model.hpp"
#include "asmg/finite_diff.hpp"
#include "asmg/meta_generator.hpp"
#include "asmg/rng.hpp"
#include "asmg/trainer.hpp"

namespace asmg {

inline constexpr double kGradCheckStep = 1e-5;
/// ω-gradients of weakly coupled coordinates reach 1e-10, below what central
/// differences at 1e-5 resolve against the rounding of the loss itself; the
/// meta check uses the extrapolated scheme at a wider step on a kink-free
/// base model (no hidden ReLU layer).
inline constexpr double kMetaGradCheckStep = 1e-3;

struct GradCheckCase {
  std::string name;
  FiniteDiffResult result;
};

/// A small layout with one user side feature and one item side feature and
/// up to `max_depth` hidden layers.
inline ModelLayout tiny_layout(Rng& rng, std::size_t max_depth = 2) {
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  const std::size_t users = pick(2, 4), items = pick(3, 5);
  std::vector<EmbeddingSpec> f{{"user_id", FeatureSource::kUserField, 0, users},
                               {"user_segment", FeatureSource::kUserField, 1, pick(2, 3)},
                               {"user_sequence", FeatureSource::kSequence, 0, items},
                               {"item_id", FeatureSource::kItemField, 0, items},
                               {"category", FeatureSource::kItemField, 1, pick(2, 3)}};
  std::vector<std::size_t> hidden;
  const std::size_t depth = pick(0, max_depth);
  for (std::size_t l = 0; l < depth; ++l) hidden.push_back(pick(3, 5));
  return ModelLayout(pick(2, 3), std::move(f), std::move(hidden));
}

inline std::vector<Sample> tiny_samples(const ModelLayout& layout, std::size_t n, Rng& rng) {
  auto below = [&](std::size_t n) { return static_cast<Index>(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng)); };
  const auto& f = layout.features();
  std::vector<Sample> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    Sample& s = out[i];
    s.label = static_cast<int>(i % 2);
    s.user_features = {below(f[0].vocab), below(f[1].vocab)};
    s.item_features = {below(f[3].vocab), below(f[4].vocab)};
    const std::size_t len = below(4);
    for (std::size_t j = 0; j < len; ++j) s.sequence.push_back(below(f[2].vocab));
  }
  return out;
}

inline std::vector<double> random_vector(std::size_t n, double scale, Rng& rng) {
  std::uniform_real_distribution<double> u(-scale, scale);
  std::vector<double> v(n);
  for (double& x : v) x = u(rng);
  return v;
}

/// Base-model log loss w.r.t. Θ on a 4-6 sample batch.
inline GradCheckCase check_base_instance(std::uint64_t seed) {
  Rng rng(seed);
  const ModelLayout layout = tiny_layout(rng);
  const auto samples = tiny_samples(layout, 4 + seed % 3, rng);
  const Batch batch = make_batch(layout, samples);
  const Tensor theta = Tensor::vector(random_vector(layout.size(), 0.8, rng));
  const TapeLossFn fn = [&](Tape& tape, std::span<const Var> leaves) {
    return log_loss(tape, forward(tape, layout, leaves[0], batch), batch.labels);
  };
  return {"base loss, seed " + std::to_string(seed), finite_diff_report(fn, {theta}, kGradCheckStep)};
}

/// Meta objective w.r.t. ω with k in 1..3, random λ mode and carried state.
inline GradCheckCase check_meta_instance(std::uint64_t seed) {
  Rng rng(seed);
  const ModelLayout layout = tiny_layout(rng, 0);
  const ParameterGroupMap groups(layout);
  const std::size_t k = 1 + seed % 3;
  const std::size_t d = 2 + seed % 2;
  const bool touched = seed % 2 == 0;
  const bool residual = seed % 5 == 0;
  const DecayMode mode = seed % 3 == 0 ? DecayMode::kUniform : DecayMode::kLinearDecay;

  std::vector<std::vector<double>> models;
  std::vector<std::vector<Sample>> data;
  for (std::size_t i = 0; i < k; ++i) {
    models.push_back(random_vector(layout.size(), 0.8, rng));
    data.push_back(tiny_samples(layout, 4, rng));
  }
  const std::vector<double> h = random_vector(groups.num_coordinates() * d, 0.9, rng);
  MetaProblem p;
  p.layout = &layout;
  p.groups = &groups;
  for (std::size_t i = 0; i < k; ++i) {
    p.window.emplace_back(models[i]);
    p.datasets.emplace_back(data[i]);
  }
  p.h_init = h;
  p.lambda = decay_weights(k, mode);
  std::vector<Batch> batches;
  for (const auto& ds : data) batches.push_back(make_batch(layout, ds));
  const IndexList coords = touched ? detail::touched_coordinates(layout, batches) : nullptr;

  const MetaGeneratorParams init = init_meta(groups.num_groups(), d, seed, 1.5, residual);
  std::vector<Tensor> leaves{init.w_r, init.w_z, init.w_h, init.w_out, init.b_out};
  const TapeLossFn fn = [&](Tape& tape, std::span<const Var> v) {
    const GruVars w{v[0], v[1], v[2], v[3], v[4]};
    return record_gru_objective(tape, w, residual, p, batches, coords, ObjectiveKind::kMultiStep);
  };
  return {"meta objective k=" + std::to_string(k) + ", seed " + std::to_string(seed),
          finite_diff_report(fn, std::move(leaves), kMetaGradCheckStep, FdScheme::kRichardson)};
}

/// `instances` cases of each kind.
inline std::vector<GradCheckCase> run_grad_suite(std::size_t instances, std::uint64_t seed) {
  std::vector<GradCheckCase> out;
  for (std::size_t i = 0; i < instances; ++i) {
    out.push_back(check_base_instance(derive_seed(seed, {1, i})));
    out.push_back(check_meta_instance(derive_seed(seed, {2, i})));
  }
  return out;
}

}  // namespace asmg
