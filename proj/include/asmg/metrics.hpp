// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "asmg/base_model.hpp"
#include "asmg/error.hpp"

namespace asmg {

/// Area under the ROC curve as the Mann-Whitney rank statistic: the fraction
/// of (positive, negative) pairs ranked correctly, ties counted one half.
inline double auc(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size()) throw ShapeError("auc: score/label count mismatch");
  const std::size_t m = scores.size();
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double pos_rank_sum = 0.0;
  std::size_t positives = 0;
  for (std::size_t i = 0; i < m;) {
    std::size_t j = i;
    while (j < m && scores[order[j]] == scores[order[i]]) ++j;
    // ranks i+1 .. j share their average
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t p = i; p < j; ++p) {
      if (labels[order[p]] > 0.5) {
        pos_rank_sum += avg_rank;
        ++positives;
      }
    }
    i = j;
  }
  const std::size_t negatives = m - positives;
  if (positives == 0 || negatives == 0) {
    throw DataError("auc: undefined for single-class input (" + std::to_string(positives) + " positives, " +
                    std::to_string(negatives) + " negatives)");
  }
  const double np = static_cast<double>(positives);
  const double u = pos_rank_sum - np * (np + 1.0) / 2.0;
  return u / (np * static_cast<double>(negatives));
}

/// Prediction quality of one serving model on the next period's data.
struct PeriodLog {
  int period = 0;
  double auc = 0.0;
  double logloss = 0.0;
  double meta_seconds = 0.0;
  double base_seconds = 0.0;
};

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for a single value
};

inline MeanStd mean_std(std::span<const double> xs) {
  if (xs.empty()) throw DataError("mean_std: no values");
  // Shifted by the first value, so equal inputs give that value and std 0 exactly.
  const double shift = xs[0];
  const double n = static_cast<double>(xs.size());
  double offset = 0.0;
  for (double x : xs) offset += x - shift;
  offset /= n;
  MeanStd r;
  r.mean = shift + offset;
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - shift - offset) * (x - shift - offset);
    r.std = std::sqrt(ss / (n - 1.0));
  }
  return r;
}

struct Aggregate {
  std::size_t runs = 0;
  MeanStd auc;      // of per-run averages over the selected periods
  MeanStd logloss;
  std::map<int, MeanStd> auc_by_period;
  std::map<int, MeanStd> logloss_by_period;
};

/// Averages each run over `periods` (all logged periods when empty), then
/// reports mean and sample std across runs; also per period across runs.
inline Aggregate aggregate(const std::vector<std::vector<PeriodLog>>& runs, std::span<const int> periods = {}) {
  if (runs.empty()) throw DataError("aggregate: no runs");
  auto selected = [&](int p) { return periods.empty() || std::find(periods.begin(), periods.end(), p) != periods.end(); };
  Aggregate out;
  out.runs = runs.size();
  std::vector<double> run_auc, run_ll;
  std::map<int, std::vector<double>> per_auc, per_ll;
  for (const auto& run : runs) {
    double a = 0.0, l = 0.0;
    std::size_t count = 0;
    for (const auto& log : run) {
      if (!selected(log.period)) continue;
      a += log.auc;
      l += log.logloss;
      ++count;
      per_auc[log.period].push_back(log.auc);
      per_ll[log.period].push_back(log.logloss);
    }
    if (count == 0) throw DataError("aggregate: a run has no logs in the selected periods");
    run_auc.push_back(a / static_cast<double>(count));
    run_ll.push_back(l / static_cast<double>(count));
  }
  out.auc = mean_std(run_auc);
  out.logloss = mean_std(run_ll);
  for (const auto& [p, v] : per_auc) out.auc_by_period[p] = mean_std(v);
  for (const auto& [p, v] : per_ll) out.logloss_by_period[p] = mean_std(v);
  return out;
}

/// Relative AUC improvement over the baseline, in percent.
inline double auc_improvement(double method, double baseline) { return (method - baseline) / baseline * 100.0; }
/// Relative LogLoss improvement over the baseline in percent; lower loss is positive.
inline double logloss_improvement(double method, double baseline) { return (baseline - method) / baseline * 100.0; }

struct ResultRow {
  std::string method;
  std::string dataset;
  Aggregate agg;
};

inline std::string format_fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

/// Writes the results table; the improvement columns are left out when no
/// IU row exists. Returns false in that case.
inline bool write_results_csv(std::ostream& os, const std::vector<ResultRow>& rows) {
  std::optional<Aggregate> iu;
  for (const auto& r : rows) {
    if (r.method == "IU") iu = r.agg;
  }
  os << "method,dataset,auc_mean,auc_std,logloss_mean,logloss_std";
  if (iu) os << ",auc_imp_pct,logloss_imp_pct";
  os << '\n';
  for (const auto& r : rows) {
    os << r.method << ',' << r.dataset << ',' << format_fixed(r.agg.auc.mean, 6) << ','
       << format_fixed(r.agg.auc.std, 6) << ',' << format_fixed(r.agg.logloss.mean, 6) << ','
       << format_fixed(r.agg.logloss.std, 6);
    if (iu) {
      os << ',' << format_fixed(auc_improvement(r.agg.auc.mean, iu->auc.mean), 2) << ','
         << format_fixed(logloss_improvement(r.agg.logloss.mean, iu->logloss.mean), 2);
    }
    os << '\n';
  }
  return iu.has_value();
}

}  // namespace asmg
