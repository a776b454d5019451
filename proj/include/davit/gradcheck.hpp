#pragma once

#include <cstdint>
#include <functional>

#include "davit/tensor.hpp"

namespace davit {

struct GradCheckOptions {
  double step = 1e-3;
  // 2: central difference; 4: fourth-order five-point stencil.
  int order = 4;
  // 0 checks every coordinate; otherwise a seeded random sample of this size.
  int64_t max_coordinates = 0;
  uint64_t seed = 0;
  // Denominator floor for the relative error, so coordinates whose true
  // gradient is ~0 are judged on absolute error instead.
  double abs_floor = 1e-6;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  int64_t coordinates_checked = 0;
  int64_t worst_coordinate = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Compares backward() against finite differences of `f` at `x`.
///
/// `x` must be a leaf that requires grad; its gradient is reset before and
/// after the check. Relative error per coordinate is
/// |analytic - numeric| / max(|analytic|, |numeric|, abs_floor).
GradCheckResult finite_difference_check(const std::function<Tensor(const Tensor&)>& f, Tensor& x,
                                        const GradCheckOptions& options = {});

}  // namespace davit
