#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mrw/tensor.hpp"

namespace mrw {

struct GradCheckResult {
  bool pass = true;
  double max_rel_err = 0.0;
  std::string worst;  // "param[i]: analytic=..., numeric=..." for the worst coordinate
};

// Compares reverse-mode gradients of a scalar-valued function against central
// finite differences. `f` must be a pure function of `params` (re-evaluated
// several times). Coordinates are probed exhaustively when a tensor has at
// most `exhaustive_limit` entries, otherwise a deterministic subset of
// `sample_count` coordinates is drawn with `seed`.
GradCheckResult finite_diff_check(const std::function<Tensor()>& f,
                                  const std::vector<Tensor>& params,
                                  double eps = 1e-5, double tol = 1e-4,
                                  int exhaustive_limit = 64, int sample_count = 24,
                                  uint64_t seed = 17);

}  // namespace mrw
