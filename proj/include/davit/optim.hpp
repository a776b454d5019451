#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "davit/tensor.hpp"

namespace davit {

struct AdamParams {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
  int64_t step = 0;
};

/// One bias-corrected Adam update over `params`, reading each parameter's
/// accumulated gradient. Parameters with no gradient buffer are skipped. The
/// state is lazily sized on the first call.
///
/// lr == 0 is accepted and leaves parameters untouched; lr < 0 throws.
void adam_step(std::span<Tensor> params, AdamState& state, const AdamParams& hp);

}  // namespace davit
