#include "gradleak/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace gradleak {

namespace {

struct Probe {
  double value;
  std::vector<bool> pattern;
};

Probe evaluate(const ScalarFn& fn, const Tensor64& point) {
  Graph64 g;
  Var x = g.input(point, false);
  Var y = fn(g, x);
  const double v = g.scalar(y);
  if (!std::isfinite(v)) {
    throw std::domain_error("finite_diff_check: function value is not finite");
  }
  return {v, g.relu_pattern()};
}

}  // namespace

GradCheckReport finite_diff_check(const ScalarFn& fn, const Tensor64& point,
                                  double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("finite_diff_check: eps must be > 0");

  std::vector<double> analytic;
  {
    Graph64 g;
    Var x = g.input(point, true);
    Var y = fn(g, x);
    if (!std::isfinite(g.scalar(y))) {
      throw std::domain_error("finite_diff_check: function value is not finite");
    }
    g.backward(y);
    if (g.has_grad(x)) {
      auto gr = g.grad(x);
      analytic.assign(gr.begin(), gr.end());
    } else {
      analytic.assign(point.numel(), 0.0);
    }
  }

  GradCheckReport report;
  Tensor64 probe = point;
  for (std::size_t i = 0; i < point.numel(); ++i) {
    const double orig = point.data[i];
    probe.data[i] = orig + eps;
    const Probe plus = evaluate(fn, probe);
    probe.data[i] = orig - eps;
    const Probe minus = evaluate(fn, probe);
    probe.data[i] = orig;

    if (plus.pattern != minus.pattern) {
      report.excluded.push_back(i);
      continue;
    }
    const double numeric = (plus.value - minus.value) / (2.0 * eps);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-4});
    const double rel = std::abs(analytic[i] - numeric) / denom;
    ++report.checked;
    if (rel > report.max_relative_error) {
      report.max_relative_error = rel;
      report.worst_index = i;
    }
  }
  return report;
}

}  // namespace gradleak
