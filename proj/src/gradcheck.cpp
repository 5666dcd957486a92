#include "cmkt/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "cmkt/errors.hpp"
#include "cmkt/rng.hpp"

namespace cmkt {

namespace {

double evaluate(const ScalarFn& fn, const ParameterTable& params) {
  Graph g;
  ParamBinder binder(g, params, false);
  const double v = fn(binder).scalar();
  if (!std::isfinite(v)) throw NumericalError("grad_check: non-finite function value");
  return v;
}

}  // namespace

GradReport grad_check(const ScalarFn& fn, const ParameterTable& params, double h, const GradCheckOptions& options) {
  if (!(h > 0.0)) throw ConfigError("grad_check: step must be positive");

  GradTable analytic;
  {
    Graph g;
    ParamBinder binder(g, params, true);
    Var out = fn(binder);
    if (!std::isfinite(out.scalar())) throw NumericalError("grad_check: non-finite function value");
    g.backward(out);
    analytic = binder.grads();
  }

  GradReport report;
  ParameterTable work = params;
  Rng rng(options.seed);
  for (auto& [name, tensor] : work) {
    const auto it = analytic.find(name);
    std::vector<std::size_t> idx(tensor.size());
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    if (options.max_probes_per_parameter > 0 && idx.size() > options.max_probes_per_parameter) {
      rng.shuffle(idx);
      idx.resize(options.max_probes_per_parameter);
    }
    for (std::size_t i : idx) {
      const double orig = tensor[i];
      tensor[i] = orig + h;
      const double fp = evaluate(fn, work);
      tensor[i] = orig - h;
      const double fm = evaluate(fn, work);
      tensor[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double a = it == analytic.end() ? 0.0 : it->second[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), options.floor});
      ++report.probes;
      if (rel > report.max_relative_error || report.worst_parameter.empty()) {
        if (rel >= report.max_relative_error) {
          report.max_relative_error = rel;
          report.worst_parameter = name + "[" + std::to_string(i) + "]";
        }
      }
    }
  }
  return report;
}

}  // namespace cmkt
