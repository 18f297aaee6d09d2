// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "asmg/error.hpp"
#include "asmg/tape.hpp"

namespace asmg {

/// Builds a scalar loss on `tape` from leaves registered in the same order
/// as the tensors handed to finite_diff_check.
using TapeLossFn = std::function<Var(Tape& tape, std::span<const Var> leaves)>;

enum class FdScheme {
  kCentral,     // (f(x+h) - f(x-h)) / 2h
  kRichardson,  // (4 D(h/2) - D(h)) / 3 on central differences, fourth order
};

struct FiniteDiffResult {
  double max_relative_error = 0.0;
  std::size_t worst_leaf = 0;
  std::size_t worst_coord = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coords_checked = 0;
};

namespace detail {

inline double eval_loss(const TapeLossFn& loss_fn, std::span<const Tensor> leaves) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(leaves.size());
  for (const Tensor& t : leaves) vars.push_back(tape.leaf(t));
  const double v = tape.value(loss_fn(tape, vars)).item();
  if (!std::isfinite(v)) throw NumericalError("finite_diff_check: non-finite loss at probe");
  return v;
}

}  // namespace detail

/// Compares reverse-mode gradients against central differences,
/// |analytic - numeric| / max(1e-8, |numeric|), maximised over every coordinate.
inline FiniteDiffResult finite_diff_report(const TapeLossFn& loss_fn, std::vector<Tensor> leaves,
                                           double step, FdScheme scheme = FdScheme::kCentral) {
  if (!(step > 0.0)) throw UsageError("finite_diff_check: step must be positive");

  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    for (const Tensor& t : leaves) vars.push_back(tape.leaf(t));
    const Var loss = loss_fn(tape, vars);
    if (!std::isfinite(tape.value(loss).item())) {
      throw NumericalError("finite_diff_check: non-finite loss at base point");
    }
    tape.backward(loss);
    for (Var v : vars) analytic.push_back(tape.grad(v));
  }

  FiniteDiffResult res;
  for (std::size_t l = 0; l < leaves.size(); ++l) {
    for (std::size_t c = 0; c < leaves[l].size(); ++c) {
      const double orig = leaves[l].data[c];
      auto central = [&](double h) {
        leaves[l].data[c] = orig + h;
        const double up = detail::eval_loss(loss_fn, leaves);
        leaves[l].data[c] = orig - h;
        const double down = detail::eval_loss(loss_fn, leaves);
        leaves[l].data[c] = orig;
        return (up - down) / (2.0 * h);
      };
      const double numeric = scheme == FdScheme::kCentral
                                 ? central(step)
                                 : (4.0 * central(step / 2.0) - central(step)) / 3.0;
      const double a = analytic[l].data[c];
      const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(numeric));
      ++res.coords_checked;
      if (res.coords_checked == 1 || err > res.max_relative_error) {
        res.max_relative_error = err;
        res.worst_leaf = l;
        res.worst_coord = c;
        res.analytic = a;
        res.numeric = numeric;
      }
    }
  }
  return res;
}

inline double finite_diff_check(const TapeLossFn& loss_fn, std::vector<Tensor> leaves,
                                double step, FdScheme scheme = FdScheme::kCentral) {
  return finite_diff_report(loss_fn, std::move(leaves), step, scheme).max_relative_error;
}

}  // namespace asmg
