#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pixpro/autograd.hpp"

namespace pixpro {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  std::size_t evaluations = 0;
};

/// Scalar function of a list of parameter tensors, built from differentiable ops.
using GradFn = std::function<Var<double>(const std::vector<Var<double>>&)>;

/// Compares reverse-mode gradients of `f` at `point` against central differences.
/// Error per entry is |analytic - numeric| / max(|analytic|, |numeric|, floor); the floor
/// makes gradients that are exactly zero compare in absolute terms.
inline GradCheckResult finite_diff_check(const GradFn& f, const std::vector<Tensor<double>>& point,
                                         double h = 1e-5, double floor = 1e-8) {
  std::vector<Var<double>> leaves;
  for (const auto& t : point) leaves.push_back(Var<double>::leaf(t, true));
  const auto analytic = grad_eval(f(leaves), leaves);

  auto eval_at = [&](std::size_t p, std::size_t k, double delta) {
    std::vector<Var<double>> in;
    for (std::size_t q = 0; q < point.size(); ++q) {
      Tensor<double> t = point[q];
      if (q == p) t[k] += delta;
      in.push_back(Var<double>::leaf(std::move(t), false));
    }
    double v;
    try {
      v = f(in).value().item();
    } catch (const NumericError& e) {
      throw NumericError("finite_diff_check: parameter " + std::to_string(p) + " index " + std::to_string(k) +
                         ": " + e.what());
    }
    if (!std::isfinite(v))
      throw NumericError("finite_diff_check: non-finite value at parameter " + std::to_string(p) + " index " +
                         std::to_string(k));
    return v;
  };

  GradCheckResult res;
  for (std::size_t p = 0; p < point.size(); ++p)
    for (std::size_t k = 0; k < point[p].numel(); ++k) {
      const double numeric = (eval_at(p, k, h) - eval_at(p, k, -h)) / (2 * h);
      const double a = analytic[p][k];
      const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      res.evaluations += 2;
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_param = p;
        res.worst_index = k;
      }
    }
  return res;
}

}  // namespace pixpro
