#include "autodiff/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "common/error.hpp"

namespace nlimb::ad {
namespace {

double evaluate(const ScalarFn& f, const ParamSet& params) {
  Tape tape(false);
  BoundParams bound = tape.bind(params);
  Var out = f(tape, bound);
  return out.item();
}

}  // namespace

GradCheckResult finite_diff_check(const ScalarFn& f, const ParamSet& params, double h) {
  if (!(h > 0.0 && h <= 1e-2)) throw InvalidArgument("finite_diff_check: step must lie in (0, 1e-2]");

  const double first = evaluate(f, params);
  const double second = evaluate(f, params);
  if (first != second) {
    throw InvalidArgument("finite_diff_check: function is not deterministic (two evaluations differ)");
  }

  Tape tape(true);
  BoundParams bound = tape.bind(params);
  Var loss = f(tape, bound);
  const ParamSet analytic = grad(loss, bound);

  GradCheckResult result;
  ParamSet probe = params;
  for (std::size_t p = 0; p < probe.size(); ++p) {
    Tensor& t = probe.at(p);
    const Tensor& g = analytic.at(p);
    for (std::size_t i = 0; i < t.size(); ++i) {
      const double orig = t[i];
      t[i] = orig + h;
      const double up = evaluate(f, probe);
      t[i] = orig - h;
      const double down = evaluate(f, probe);
      t[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      const double err = std::abs(g[i] - numeric) / std::max(1.0, std::abs(g[i]));
      ++result.coordinates;
      if (err > result.max_rel_error || result.worst_param.empty()) {
        result.max_rel_error = err;
        result.worst_param = probe.name(p);
        result.worst_index = i;
      }
    }
  }
  return result;
}

}  // namespace nlimb::ad
