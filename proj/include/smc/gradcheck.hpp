#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "smc/autodiff.hpp"

namespace smc {

/// Builds a scalar graph on `tape` from variables bound to the check point.
using ScalarGraph = std::function<Var(Tape&, const std::vector<Var>&)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

namespace detail {

inline double evaluate_scalar(const ScalarGraph& f, const std::vector<Tensor>& point) {
  Tape tape;
  std::vector<Var> vars;
  vars.reserve(point.size());
  for (const auto& t : point) vars.push_back(tape.constant(t));
  const auto root = f(tape, vars);
  const double v = root.item();
  if (!std::isfinite(v)) throw NumericFault("finite_diff_check", "function is non-finite at a perturbed point");
  return v;
}

}  // namespace detail

/// Compares reverse-mode gradients against central differences:
/// max over coordinates of |g_analytic - g_fd| / max(1, |g_fd|).
/// `options` configures the tape used for the analytic pass.
inline GradCheckResult finite_diff_check(const ScalarGraph& f, const std::vector<Tensor>& point, double epsilon,
                                         const TapeOptions& options = {}) {
  require(epsilon > 0.0, "finite_diff_check: epsilon must be positive");
  std::vector<Tensor> analytic;
  {
    Tape tape(options);
    std::vector<Var> vars;
    for (const auto& t : point) vars.push_back(tape.variable(t));
    const auto root = f(tape, vars);
    analytic = tape.eval_with_grad(root, vars).grads;
  }

  GradCheckResult result;
  auto probe = point;
  for (std::size_t k = 0; k < probe.size(); ++k) {
    for (std::size_t i = 0; i < probe[k].size(); ++i) {
      const double saved = probe[k].values[i];
      probe[k].values[i] = saved + epsilon;
      const double up = detail::evaluate_scalar(f, probe);
      probe[k].values[i] = saved - epsilon;
      const double down = detail::evaluate_scalar(f, probe);
      probe[k].values[i] = saved;
      const double numeric = (up - down) / (2.0 * epsilon);
      const double a = analytic[k].values[i];
      const double err = std::abs(a - numeric) / std::max(1.0, std::abs(numeric));
      if (err > result.max_relative_error || (k == 0 && i == 0)) {
        result = {err, k, i, a, numeric};
      }
    }
  }
  return result;
}

}  // namespace smc
