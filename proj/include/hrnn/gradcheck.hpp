#pragma once

#include <cmath>
#include <vector>

#include "hrnn/autodiff.hpp"

namespace hrnn {

struct GradCheckResult {
  double max_rel_err = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0;
  double numeric = 0;
};

/// Compares tape gradients of the scalar `f(tape, vars)` against central
/// differences over every coordinate of `params`. The relative error of a
/// coordinate is |a − n| / max(|a|, |n|, floor).
///
/// `f` must be deterministic; a second evaluation at the unperturbed point
/// that differs from the first raises an Error.
template <class Real, class F>
GradCheckResult finite_diff_check(F&& f, const std::vector<Tensor<Real>>& params, double step,
                                  double floor = 1e-12) {
  if (!(step > 0)) throw Error("finite_diff_check: step must be positive");

  auto evaluate = [&](const std::vector<Tensor<Real>>& p, std::vector<Tensor<Real>>* grads) {
    Tape<Real> tape;
    std::vector<Var> vars;
    vars.reserve(p.size());
    for (const auto& t : p) vars.push_back(tape.leaf(t));
    Var loss = f(tape, vars);
    const double v = static_cast<double>(tape.value(loss).item());
    if (grads) {
      tape.backward(loss);
      grads->clear();
      for (auto var : vars) grads->push_back(tape.grad(var));
    }
    return v;
  };

  std::vector<Tensor<Real>> analytic;
  const double base = evaluate(params, &analytic);
  if (evaluate(params, nullptr) != base)
    throw Error("finite_diff_check: function is not deterministic");

  GradCheckResult res;
  auto work = params;
  for (std::size_t p = 0; p < work.size(); ++p) {
    for (std::size_t i = 0; i < work[p].numel(); ++i) {
      const Real orig = work[p][i];
      work[p][i] = orig + static_cast<Real>(step);
      const double up = evaluate(work, nullptr);
      work[p][i] = orig - static_cast<Real>(step);
      const double down = evaluate(work, nullptr);
      work[p][i] = orig;
      const double num = (up - down) / (2 * step);
      const double ana = static_cast<double>(analytic[p][i]);
      const double rel =
          std::abs(ana - num) / std::max({std::abs(ana), std::abs(num), floor});
      if (rel > res.max_rel_err) res = {rel, p, i, ana, num};
    }
  }
  return res;
}

}  // namespace hrnn
