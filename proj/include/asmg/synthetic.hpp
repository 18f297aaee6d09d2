// SPDX-License-Identifier: Apache-2.0
//
// Drifting implicit-feedback stream: a rotating hot set of items and slowly
// moving user tastes, one calendar day per period, positives only. Items
// entering or leaving the hot set change their boost over `ramp` periods.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "asmg/config.hpp"
#include "asmg/data_stream.hpp"
#include "asmg/rng.hpp"

namespace asmg {

inline constexpr std::int64_t kSyntheticEpoch = 1'600'041'600;  // a UTC midnight

/// Interactions in time order. Each event picks a user uniformly and an item
/// from a softmax over affinity·(p_u·q_i) + hot_boost·level_i(t) + noise_i(t),
/// where level_i moves toward [i hot] by 1/ramp per period.
inline std::vector<Interaction> gen_synthetic(const SyntheticDriftSpec& spec) {
  spec.validate();
  Rng rng(derive_seed(spec.seed, {tag(SeedTag::kSynthetic)}));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const std::size_t r = spec.latent_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(r));

  std::vector<double> centers(spec.categories * r);
  for (double& c : centers) c = normal(rng);
  std::vector<std::size_t> category(spec.items);
  std::vector<double> q(spec.items * r);
  for (std::size_t i = 0; i < spec.items; ++i) {
    category[i] = std::uniform_int_distribution<std::size_t>(0, spec.categories - 1)(rng);
    for (std::size_t j = 0; j < r; ++j) q[i * r + j] = scale * (centers[category[i] * r + j] + 0.7 * normal(rng));
  }
  std::vector<double> p(spec.users * r);
  for (double& x : p) x = normal(rng);

  const std::size_t hot_size =
      std::clamp<std::size_t>(static_cast<std::size_t>(std::llround(spec.hot_fraction * static_cast<double>(spec.items))),
                              1, spec.items - 1);
  std::vector<std::size_t> perm(spec.items);
  for (std::size_t i = 0; i < spec.items; ++i) perm[i] = i;
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<char> hot(spec.items, 0);
  std::vector<std::size_t> hot_list(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(hot_size));
  for (std::size_t i : hot_list) hot[i] = 1;
  std::vector<double> level(hot.begin(), hot.end());
  const double ramp_step = 1.0 / static_cast<double>(spec.ramp);
  const auto rotate_count = static_cast<std::size_t>(std::llround(spec.rotation * static_cast<double>(hot_size)));

  const double keep = std::sqrt(1.0 - spec.drift);
  const double move = std::sqrt(spec.drift);

  std::vector<Interaction> out;
  out.reserve(static_cast<std::size_t>(spec.periods) * spec.events_per_period);
  std::vector<double> base_logit(spec.items), weight(spec.items);
  for (int t = 1; t <= spec.periods; ++t) {
    if (t > 1) {
      for (double& x : p) x = keep * x + move * normal(rng);
      // swap rotate_count hot members for cold items
      std::shuffle(hot_list.begin(), hot_list.end(), rng);
      for (std::size_t m = 0; m < rotate_count; ++m) {
        std::size_t cold = 0;
        do {
          cold = std::uniform_int_distribution<std::size_t>(0, spec.items - 1)(rng);
        } while (hot[cold]);
        hot[hot_list[m]] = 0;
        hot[cold] = 1;
        hot_list[m] = cold;
      }
    }
    for (std::size_t i = 0; i < spec.items; ++i) {
      level[i] = hot[i] ? std::min(1.0, level[i] + ramp_step) : std::max(0.0, level[i] - ramp_step);
      base_logit[i] = spec.hot_boost * level[i] + spec.noise * normal(rng);
    }
    std::vector<std::int64_t> stamps(spec.events_per_period);
    for (auto& s : stamps) s = std::uniform_int_distribution<std::int64_t>(0, kSecondsPerDay - 1)(rng);
    std::sort(stamps.begin(), stamps.end());
    const std::int64_t day = kSyntheticEpoch + static_cast<std::int64_t>(t - 1) * kSecondsPerDay;
    for (std::size_t e = 0; e < spec.events_per_period; ++e) {
      const std::size_t u = std::uniform_int_distribution<std::size_t>(0, spec.users - 1)(rng);
      double hi = -INFINITY;
      for (std::size_t i = 0; i < spec.items; ++i) {
        double dot = 0.0;
        for (std::size_t j = 0; j < r; ++j) dot += p[u * r + j] * q[i * r + j];
        weight[i] = base_logit[i] + spec.affinity * dot;
        hi = std::max(hi, weight[i]);
      }
      double total = 0.0;
      for (double& w : weight) total += (w = std::exp(w - hi));
      double x = unit(rng) * total;
      std::size_t item = 0;
      while (item + 1 < spec.items && x >= weight[item]) x -= weight[item++];

      Interaction it;
      it.user_id = "u" + std::to_string(u);
      it.item_id = "i" + std::to_string(item);
      it.label = 1;
      it.timestamp = day + stamps[e];
      it.side_features.emplace_back("category", "c" + std::to_string(category[item]));
      out.push_back(std::move(it));
    }
  }
  return out;
}

/// CSV with the interaction header; side features as name=value cells.
inline void write_interactions(std::ostream& os, const std::vector<Interaction>& xs) {
  os << "user_id,item_id,label,timestamp,side\n";
  for (const auto& x : xs) {
    os << x.user_id << ',' << x.item_id << ',' << x.label << ',' << x.timestamp;
    for (const auto& [name, value] : x.side_features) os << ',' << name << '=' << value;
    os << '\n';
  }
}

}  // namespace asmg
