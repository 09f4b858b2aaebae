#pragma once

#include <functional>
#include <string>
#include <vector>

#include "mrw/backbone.hpp"

namespace mrw {

struct SuiteResult {
  std::string name;
  bool pass = false;
  std::string detail;  // failure reason, or a short note such as the max error
};

// Seams for substituting intermediate results inside the self-check suites;
// tests use them to prove that a planted fault is caught.
struct VerifyHooks {
  std::function<Tensor(const Gate&, const Tensor&, const Tensor&, const Tensor&)>
      gate_alphas;
};

// Structural and law checks that run in seconds: geometry, shapes, softmax
// and attention normalization, metric cross-checks, schedule/loss anchors.
std::vector<SuiteResult> run_fast(const VerifyHooks& hooks = {});

// Fast suites plus finite-difference gradient audits of every block type.
std::vector<SuiteResult> run_full(const VerifyHooks& hooks = {});

bool all_passed(const std::vector<SuiteResult>& results);
std::string format_results(const std::vector<SuiteResult>& results);

}  // namespace mrw
