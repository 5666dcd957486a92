#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "cmkt/autodiff.hpp"

namespace cmkt {

struct GradReport {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t probes = 0;
};

// Builds a scalar on a fresh graph from the bound parameters.
using ScalarFn = std::function<Var(ParamBinder&)>;

struct GradCheckOptions {
  // Entries probed per parameter; 0 probes every entry, otherwise a seeded sample.
  std::size_t max_probes_per_parameter = 0;
  std::uint64_t seed = 0;
  // Relative error is |analytic - numeric| / max(|analytic|, |numeric|, floor).
  double floor = 1e-3;
};

// Compares reverse-mode gradients of `fn` against central differences with step h.
// Throws NumericalError if the function value is non-finite.
GradReport grad_check(const ScalarFn& fn, const ParameterTable& params, double h = 1e-5,
                      const GradCheckOptions& options = {});

}  // namespace cmkt
