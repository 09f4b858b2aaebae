#pragma once

#include <cmath>
#include <vector>

#include "mrw/rng.hpp"
#include "mrw/tensor.hpp"

namespace mrw::testutil {

inline Tensor rand_tensor(Rng& rng, std::vector<int> shape, double lo = -1.0,
                          double hi = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

// Random values bounded away from zero, for ops with a kink at the origin.
inline Tensor rand_tensor_off_origin(Rng& rng, std::vector<int> shape,
                                     double margin = 1e-2) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) {
    const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
    t.data()[i] = sign * rng.uniform(margin, 1.0);
  }
  return t;
}

inline double max_abs_diff(const Tensor& a, const std::vector<double>& expect) {
  double m = 0.0;
  for (int64_t i = 0; i < a.numel(); ++i)
    m = std::max(m, std::fabs(a.data()[i] - expect[static_cast<size_t>(i)]));
  return m;
}

}  // namespace mrw::testutil
