#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

namespace davit {

struct GradientSuiteOptions {
  double tolerance = 1e-6;
  int64_t max_coordinates = 24;  // per checked tensor
  double step = 1e-3;
  uint64_t seed = 0;
  bool include_model = true;
};

struct GradientCaseResult {
  std::string op;
  std::string input;
  double max_relative_error = 0.0;
  int64_t coordinates = 0;
  bool passed = false;
};

/// Finite-difference checks of every differentiable op, DCSA, and a reduced
/// C=4, depths 1,1,1,1 model on a 32x32 input.
std::vector<GradientCaseResult> run_gradient_suite(const GradientSuiteOptions& options = {});

void write_gradient_suite(std::ostream& os, const std::vector<GradientCaseResult>& results);

}  // namespace davit
