#include "davit/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace davit {

void adam_step(std::span<Tensor> params, AdamState& state, const AdamParams& hp) {
  if (!(hp.lr >= 0.0)) throw std::invalid_argument("adam learning rate must be >= 0");
  if (!(hp.beta1 >= 0.0 && hp.beta1 < 1.0) || !(hp.beta2 >= 0.0 && hp.beta2 < 1.0)) {
    throw std::invalid_argument("adam betas must lie in [0, 1)");
  }
  if (!(hp.eps > 0.0)) throw std::invalid_argument("adam eps must be > 0");
  if (state.first_moment.empty()) {
    for (const auto& p : params) {
      state.first_moment.emplace_back(static_cast<size_t>(p.numel()), 0.0);
      state.second_moment.emplace_back(static_cast<size_t>(p.numel()), 0.0);
    }
  }
  if (state.first_moment.size() != params.size()) {
    throw std::invalid_argument("adam state tracks " + std::to_string(state.first_moment.size()) +
                                " parameters, got " + std::to_string(params.size()));
  }
  for (size_t i = 0; i < params.size(); ++i) {
    if (state.first_moment[i].size() != static_cast<size_t>(params[i].numel())) {
      throw ShapeError("adam state for parameter " + std::to_string(i) + " does not match its shape");
    }
  }
  ++state.step;
  const double bc1 = 1.0 - std::pow(hp.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(hp.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& p = params[i];
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto d = p.mutable_data();
    auto& m = state.first_moment[i];
    auto& v = state.second_moment[i];
    for (size_t j = 0; j < d.size(); ++j) {
      m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * g[j];
      v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * g[j] * g[j];
      if (hp.lr == 0.0) continue;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      d[j] -= hp.lr * mhat / (std::sqrt(vhat) + hp.eps);
    }
  }
}

}  // namespace davit
