#include "mrw/gradcheck.hpp"

#include <cmath>
#include <stdexcept>

#include "mrw/autograd.hpp"
#include "mrw/rng.hpp"

namespace mrw {

GradCheckResult finite_diff_check(const std::function<Tensor()>& f,
                                  const std::vector<Tensor>& params, double eps,
                                  double tol, int exhaustive_limit, int sample_count,
                                  uint64_t seed) {
  for (const auto& p : params)
    if (!p.defined() || !p.requires_grad())
      throw std::invalid_argument("finite_diff_check: params must require grad");

  // Analytic pass.
  {
    Tape tape;
    TapeScope scope(tape);
    for (Tensor p : params) p.zero_grad();
    Tensor loss = f();
    tape.backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(p.grad());

  GradCheckResult res;
  Rng rng(seed);
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor p = params[pi];
    const int64_t n = p.numel();
    std::vector<int64_t> coords;
    if (n <= exhaustive_limit) {
      coords.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) coords[static_cast<size_t>(i)] = i;
    } else {
      Rng sub = rng.fork(pi);
      for (int k = 0; k < sample_count; ++k)
        coords.push_back(sub.uniform_int(0, n - 1));
    }
    for (int64_t i : coords) {
      const double saved = p.data()[i];
      p.data()[i] = saved + eps;
      const double fp = f().value();
      p.data()[i] = saved - eps;
      const double fm = f().value();
      p.data()[i] = saved;
      const double numeric = (fp - fm) / (2.0 * eps);
      const double a = analytic[pi][static_cast<size_t>(i)];
      const double rel = std::fabs(a - numeric) / std::max(1.0, std::fabs(numeric));
      if (rel > res.max_rel_err) {
        res.max_rel_err = rel;
        res.worst = "param" + std::to_string(pi) + "[" + std::to_string(i) +
                    "]: analytic=" + std::to_string(a) +
                    " numeric=" + std::to_string(numeric);
      }
    }
  }
  res.pass = res.max_rel_err < tol;
  return res;
}

}  // namespace mrw
