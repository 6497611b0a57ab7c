#pragma once

#include <cstddef>
#include <functional>
#include <vector>

#include "gradleak/graph.hpp"

namespace gradleak {

// Builds a scalar from `x` inside the supplied graph.
using ScalarFn = std::function<Var(Graph64&, Var x)>;

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  std::size_t checked = 0;
  // Coordinates whose +/- eps probes land on different sides of a ReLU kink.
  std::vector<std::size_t> excluded;
};

// Compares backward() against central differences
// (f(x + eps e_i) - f(x - eps e_i)) / 2 eps for every coordinate of `point`.
// Relative error is |a - n| / max(|a|, |n|, 1e-4).
// Throws std::domain_error if f is non-finite at any probe.
GradCheckReport finite_diff_check(const ScalarFn& fn, const Tensor64& point,
                                  double eps = 1e-4);

}  // namespace gradleak
