#pragma once

#include <string>
#include <vector>

namespace norm3d {

struct GradCheckResult {
  std::string suite;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

/// Central finite-difference verification of every analytic backward path:
/// the three normalization methods, each layer type, the combined loss, and
/// the whole desk-scale network under each method. Step 1e-5, double
/// precision throughout.
std::vector<GradCheckResult> run_gradcheck_suites();

}  // namespace norm3d
