// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cmath>

#include "asmg/gradcheck_suite.hpp"
#include "asmg/meta_generator.hpp"
#include "test_support.hpp"

namespace asmg {
namespace {

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Straight-line evaluation of one GRU cell, independent of the tape.
std::vector<double> oracle_step(const GruGroupParams& g, const std::vector<double>& h, double theta) {
  const std::size_t d = g.hidden;
  auto row = [&](const std::vector<double>& w, std::size_t i, const std::vector<double>& x) {
    double acc = w[i * (d + 1) + d] * theta;
    for (std::size_t j = 0; j < d; ++j) acc += w[i * (d + 1) + j] * x[j];
    return acc;
  };
  std::vector<double> r(d), z(d), rh(d), out(d);
  for (std::size_t i = 0; i < d; ++i) {
    r[i] = sigmoid(row(g.w_r, i, h));
    z[i] = sigmoid(row(g.w_z, i, h));
  }
  for (std::size_t i = 0; i < d; ++i) rh[i] = r[i] * h[i];
  for (std::size_t i = 0; i < d; ++i) out[i] = (1.0 - z[i]) * h[i] + z[i] * std::tanh(row(g.w_h, i, rh));
  return out;
}

GruGroupParams random_group(std::size_t d, Rng& rng, double scale = 1.0) {
  GruGroupParams g;
  g.hidden = d;
  g.w_r = random_vector(d * (d + 1), scale, rng);
  g.w_z = random_vector(d * (d + 1), scale, rng);
  g.w_h = random_vector(d * (d + 1), scale, rng);
  g.w_out = random_vector(d, scale, rng);
  g.b_out = random_vector(1, scale, rng)[0];
  return g;
}

GruGroupParams zero_group(std::size_t d) {
  Rng rng(0);
  GruGroupParams g = random_group(d, rng);
  for (auto* v : {&g.w_r, &g.w_z, &g.w_h, &g.w_out}) std::fill(v->begin(), v->end(), 0.0);
  g.b_out = 0.0;
  return g;
}

// ---- groups ---------------------------------------------------------------------

TEST(GroupMap, EmbeddingDimensionsPlusOneGroupPerDenseScalar) {
  const ModelLayout layout(4, {{"item_id", FeatureSource::kItemField, 0, 1000}}, {1});
  const ParameterGroupMap groups(layout);
  ASSERT_EQ(layout.embedding_size(), 4000u);
  EXPECT_EQ(groups.num_groups(), 4u + layout.mlp_size());
  std::size_t embedding_coords = 0;
  for (std::size_t g = 0; g < 4; ++g) {
    EXPECT_TRUE(groups.group(g).shared());
    EXPECT_EQ(groups.coordinates(g).size(), 1000u);
    embedding_coords += groups.coordinates(g).size();
  }
  EXPECT_EQ(embedding_coords, 4000u);
  for (std::size_t g = 4; g < groups.num_groups(); ++g) EXPECT_EQ(groups.coordinates(g).size(), 1u);
}

TEST(GroupMap, EmbeddingGroupCountIgnoresVocabulary) {
  for (std::size_t vocab : {3u, 50u, 700u}) {
    const ModelLayout layout(8,
                             {{"user_id", FeatureSource::kUserField, 0, vocab},
                              {"item_id", FeatureSource::kItemField, 0, vocab * 2 + 1}},
                             {});
    const ParameterGroupMap groups(layout);
    std::size_t shared = 0;
    for (std::size_t g = 0; g < groups.num_groups(); ++g) shared += groups.group(g).shared() ? 1 : 0;
    EXPECT_EQ(shared, 16u);
  }
}

TEST(GroupMap, PartitionsEveryCoordinate) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    const ModelLayout layout = tiny_layout(rng);
    const ParameterGroupMap groups(layout);
    std::vector<int> hits(layout.size(), 0);
    for (std::size_t g = 0; g < groups.num_groups(); ++g) {
      for (std::size_t c : groups.coordinates(g)) {
        ++hits[c];
        EXPECT_EQ(groups.group_of(c), g);
      }
    }
    for (int h : hits) EXPECT_EQ(h, 1);
    EXPECT_EQ(groups.num_groups(), layout.features().size() * layout.embed_dim() + layout.mlp_size());
  }
}

TEST(GroupMap, HashTracksLayout) {
  const ModelLayout a(4, {{"item_id", FeatureSource::kItemField, 0, 10}}, {2});
  const ModelLayout b(4, {{"item_id", FeatureSource::kItemField, 0, 11}}, {2});
  EXPECT_EQ(build_group_map(a).hash(), ParameterGroupMap(a).hash());
  EXPECT_NE(ParameterGroupMap(a).hash(), ParameterGroupMap(b).hash());
}

// ---- cell -----------------------------------------------------------------------

TEST(GruStep, ZeroWeightsHalveTheState) {
  const auto g = zero_group(3);
  const std::vector<double> h{0.4, -0.8, 0.2};
  const auto out = gru_step(g, h, 1.7);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(out[i], 0.5 * h[i]);
  for (double x : gru_step(g, std::vector<double>(3, 0.0), -3.0)) EXPECT_EQ(x, 0.0);
}

TEST(GruStep, MatchesScalarOracle) {
  Rng rng(99);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t d = 1 + trial % 4;
    const auto g = random_group(d, rng);
    const auto h = random_vector(d, 0.99, rng);
    const double theta = random_vector(1, 2.0, rng)[0];
    const auto got = gru_step(g, h, theta);
    const auto want = oracle_step(g, h, theta);
    for (std::size_t i = 0; i < d; ++i) ASSERT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(GruStep, HandPickedTwoDimensionalCell) {
  GruGroupParams g = zero_group(2);
  g.w_r = {0.5, -0.25, 1.0, 0.0, 0.75, -0.5};
  g.w_z = {0.1, 0.2, 0.3, -0.4, 0.5, 0.6};
  g.w_h = {1.0, 0.0, 0.5, 0.0, 1.0, -0.5};
  const std::vector<double> h{0.3, -0.6};
  const double theta = 0.8;
  const double r0 = sigmoid(0.5 * 0.3 - 0.25 * -0.6 + 1.0 * 0.8);
  const double r1 = sigmoid(0.0 * 0.3 + 0.75 * -0.6 - 0.5 * 0.8);
  const double z0 = sigmoid(0.1 * 0.3 + 0.2 * -0.6 + 0.3 * 0.8);
  const double z1 = sigmoid(-0.4 * 0.3 + 0.5 * -0.6 + 0.6 * 0.8);
  const double c0 = std::tanh(1.0 * r0 * 0.3 + 0.5 * 0.8);
  const double c1 = std::tanh(1.0 * r1 * -0.6 - 0.5 * 0.8);
  const auto out = gru_step(g, h, theta);
  EXPECT_NEAR(out[0], (1 - z0) * 0.3 + z0 * c0, 1e-15);
  EXPECT_NEAR(out[1], (1 - z1) * -0.6 + z1 * c1, 1e-15);
  EXPECT_THROW(gru_step(g, std::vector<double>{0.1}, 0.0), ShapeError);
}

TEST(Readout, Examples) {
  GruGroupParams g = zero_group(3);
  g.b_out = 0.25;
  EXPECT_EQ(readout(g, std::vector<double>{0.9, -0.4, 0.3}), 0.25);
  g.w_out = {1.0, 2.0, -1.0};
  EXPECT_EQ(readout(g, std::vector<double>(3, 0.0)), 0.25);
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const auto r = random_group(4, rng);
    const auto h = random_vector(4, 1.0, rng);
    double dot = r.b_out;
    for (std::size_t i = 0; i < 4; ++i) dot += r.w_out[i] * h[i];
    EXPECT_NEAR(readout(r, h), dot, 1e-14);
  }
}

// ---- generation -----------------------------------------------------------------

struct Fixture {
  Rng rng{17};
  ModelLayout layout = tiny_layout(rng);
  ParameterGroupMap groups{layout};
  std::size_t d = 3;
  MetaGeneratorParams meta = init_meta(groups.num_groups(), d, 4, 0.8);
  std::vector<std::vector<double>> models;

  explicit Fixture(std::size_t k) {
    for (std::size_t i = 0; i < k; ++i) models.push_back(random_vector(layout.size(), 0.5, rng));
  }
  std::vector<std::span<const double>> window() const { return {models.begin(), models.end()}; }
  HiddenStateStore h0() const { return HiddenStateStore::zeros(layout.size(), d, 0); }
};

TEST(Generate, SingleStepIsCellPlusReadoutPerCoordinate) {
  Fixture f(1);
  const auto res = generate(f.meta, f.groups, f.window(), f.h0(), 1);
  ASSERT_EQ(res.outputs.size(), 1u);
  for (std::size_t c = 0; c < f.layout.size(); ++c) {
    const auto g = f.meta.group(f.groups.group_of(c));
    const auto h = gru_step(g, std::vector<double>(f.d, 0.0), f.models[0][c]);
    EXPECT_NEAR(res.outputs[0][c], readout(g, h), 1e-14);
    for (std::size_t j = 0; j < f.d; ++j) EXPECT_NEAR(res.hidden[0][c * f.d + j], h[j], 1e-14);
  }
  EXPECT_THROW(generate(f.meta, f.groups, f.window(), f.h0(), 2), ShapeError);
}

TEST(Generate, ResidualReadoutAddsTheInput) {
  Fixture f(1);
  auto residual = f.meta;
  residual.residual_readout = true;
  const auto plain = generate(f.meta, f.groups, f.window(), f.h0());
  const auto res = generate(residual, f.groups, f.window(), f.h0());
  for (std::size_t c = 0; c < f.layout.size(); ++c) {
    EXPECT_NEAR(res.outputs[0][c], plain.outputs[0][c] + f.models[0][c], 1e-14);
  }
}

TEST(Generate, IsCausal) {
  Fixture f(4);
  const auto full = generate(f.meta, f.groups, f.window(), f.h0());
  for (std::size_t cut = 1; cut < 4; ++cut) {
    auto ablated = f.models;
    for (std::size_t i = cut; i < ablated.size(); ++i) std::fill(ablated[i].begin(), ablated[i].end(), 0.0);
    std::vector<std::span<const double>> w(ablated.begin(), ablated.end());
    const auto res = generate(f.meta, f.groups, w, f.h0());
    for (std::size_t i = 0; i < cut; ++i) EXPECT_EQ(res.outputs[i], full.outputs[i]);
  }
}

TEST(Generate, RepeatedInputSettlesTowardAFixedPoint) {
  Fixture f(1);
  const std::vector<std::vector<double>> same(40, f.models[0]);
  std::vector<std::span<const double>> w(same.begin(), same.end());
  const auto res = generate(f.meta, f.groups, w, f.h0());
  auto gap = [&](std::size_t i) {
    double m = 0.0;
    for (std::size_t c = 0; c < res.outputs[i].size(); ++c) {
      m = std::max(m, std::abs(res.outputs[i][c] - res.outputs[i - 1][c]));
    }
    return m;
  };
  EXPECT_LT(gap(39), gap(2));
  EXPECT_LT(gap(39), 1e-3);
}

TEST(Generate, HiddenStatesStayInsideTheUnitBox) {
  Fixture f(5);
  HiddenStateStore h0 = f.h0();
  Rng rng(3);
  h0.h = random_vector(h0.h.size(), 0.999, rng);
  const auto res = generate(init_meta(f.groups.num_groups(), f.d, 8, 2.0), f.groups, f.window(), h0);
  for (const auto& h : res.hidden) {
    for (double x : h) {
      EXPECT_GT(x, -1.0);
      EXPECT_LT(x, 1.0);
    }
  }
  // Saturated gates round to the boundary but never past it.
  for (auto& m : f.models) {
    for (double& x : m) x *= 40.0;
  }
  const auto hot = generate(init_meta(f.groups.num_groups(), f.d, 8, 3.0), f.groups, f.window(), h0);
  for (const auto& h : hot.hidden) {
    for (double x : h) EXPECT_LE(std::abs(x), 1.0);
  }
}

TEST(Generate, PerturbingOneGroupOnlyMovesThatGroup) {
  Fixture f(3);
  const auto base = generate(f.meta, f.groups, f.window(), f.h0());
  for (std::size_t g : {std::size_t{0}, f.groups.num_groups() - 1}) {
    auto moved = f.models;
    for (std::size_t c : f.groups.coordinates(g)) moved[1][c] += 0.3;
    std::vector<std::span<const double>> w(moved.begin(), moved.end());
    const auto res = generate(f.meta, f.groups, w, f.h0());
    for (std::size_t c = 0; c < f.layout.size(); ++c) {
      if (f.groups.group_of(c) != g) {
        for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(res.outputs[i][c], base.outputs[i][c]);
      }
    }
  }
}

TEST(Generate, RejectsMismatchedInputs) {
  Fixture f(2);
  EXPECT_THROW(generate(f.meta, f.groups, {}, f.h0()), ShapeError);
  EXPECT_THROW(generate(f.meta, f.groups, f.window(), HiddenStateStore::zeros(f.layout.size(), f.d + 1, 0)), ShapeError);
}

TEST(MetaParams, CountDoesNotGrowWithVocabulary) {
  for (std::size_t vocab : {10u, 10000u}) {
    const ModelLayout layout(4, {{"item_id", FeatureSource::kItemField, 0, vocab}}, {2});
    const ParameterGroupMap groups(layout);
    const auto m = init_meta(groups.num_groups(), 5, 1);
    EXPECT_EQ(m.parameter_count(), (4 + layout.mlp_size()) * (3 * 5 * 6 + 5 + 1));
  }
}

TEST(MetaParams, FlattenRoundTripAndGroupAccess) {
  auto m = init_meta(6, 3, 2);
  const auto flat = m.flatten();
  auto copy = MetaGeneratorParams::zeros(6, 3);
  copy.unflatten(flat);
  EXPECT_EQ(copy, m);
  EXPECT_THROW(copy.unflatten(std::vector<double>(3)), ShapeError);
  Rng rng(1);
  const auto g = random_group(3, rng);
  m.set_group(4, g);
  const auto back = m.group(4);
  EXPECT_EQ(back.w_r, g.w_r);
  EXPECT_EQ(back.w_out, g.w_out);
  EXPECT_EQ(back.b_out, g.b_out);
  for (double x : init_meta(6, 3, 2, 0.1).flatten()) EXPECT_LE(std::abs(x), 0.1);
  for (double b : init_meta(6, 3, 2).b_out.data) EXPECT_EQ(b, 0.0);
}

// ---- linear combination -----------------------------------------------------------

TEST(LinearCombine, Examples) {
  const std::vector<double> a{1.0, -2.0, 3.0}, b{0.5, 0.5, 0.5};
  const std::vector<std::span<const double>> w{a, b};
  EXPECT_EQ(linear_combine(std::vector<double>{0.0, 1.0}, w), b);
  const std::vector<std::span<const double>> same{a, a};
  EXPECT_EQ(linear_combine(std::vector<double>{0.5, 0.5}, same), a);
  EXPECT_THROW(linear_combine(std::vector<double>{1.0}, w), ShapeError);

  Rng rng(8);
  std::vector<std::vector<double>> models;
  for (int i = 0; i < 4; ++i) models.push_back(random_vector(20, 1.0, rng));
  const auto alpha = random_vector(4, 1.0, rng);
  const auto out = linear_combine(alpha, std::vector<std::span<const double>>(models.begin(), models.end()));
  for (std::size_t c = 0; c < 20; ++c) {
    double want = 0.0;
    for (std::size_t i = 0; i < 4; ++i) want += alpha[i] * models[i][c];
    EXPECT_NEAR(out[c], want, 1e-15);
  }
}

// ---- checkpoint -----------------------------------------------------------------

TEST(MetaCheckpointFile, RoundTrip) {
  testing::ScratchDir dir("meta");
  Fixture f(1);
  MetaCheckpoint c;
  c.group_map_hash = f.groups.hash();
  c.k = 3;
  c.period = 14;
  c.meta = f.meta;
  c.meta.residual_readout = true;
  c.hidden = f.h0();
  c.hidden.tag = 11;
  c.hidden.h[5] = 0.25;
  c.linear.alpha = {0.2, 0.3, 0.5};
  const auto path = dir.path() / "meta.bin";
  save_meta_checkpoint(path, c);
  EXPECT_EQ(load_meta_checkpoint(path), c);
  EXPECT_THROW(load_meta_checkpoint(path, c.group_map_hash ^ 1), DataError);
}

}  // namespace
}  // namespace asmg
