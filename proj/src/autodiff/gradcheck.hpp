#pragma once

#include <functional>
#include <string>

#include "autodiff/tape.hpp"

namespace nlimb::ad {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst_param;
  std::size_t worst_index = 0;
  std::size_t coordinates = 0;
};

// Builds a scalar from parameters bound on the given tape.
using ScalarFn = std::function<Var(Tape&, const BoundParams&)>;

// Compares reverse-mode gradients against central differences,
// coordinate by coordinate: |analytic - numeric| / max(1, |analytic|).
// Rejects h outside (0, 1e-2] and functions that are not deterministic.
GradCheckResult finite_diff_check(const ScalarFn& f, const ParamSet& params, double h = 1e-5);

}  // namespace nlimb::ad
