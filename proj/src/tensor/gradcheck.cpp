#include "davit/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

#include "davit/rng.hpp"

namespace davit {

GradCheckResult finite_difference_check(const std::function<Tensor(const Tensor&)>& f, Tensor& x,
                                        const GradCheckOptions& options) {
  if (!(options.step > 0.0)) throw std::invalid_argument("finite-difference step must be > 0");
  if (options.order != 2 && options.order != 4) throw std::invalid_argument("finite-difference order must be 2 or 4");
  if (!x.is_leaf() || !x.requires_grad()) {
    throw std::invalid_argument("finite_difference_check needs a leaf tensor with requires_grad");
  }
  x.zero_grad();
  Tensor y = f(x);
  y.backward();
  std::vector<double> analytic = x.has_grad() ? std::vector<double>(x.grad().begin(), x.grad().end())
                                              : std::vector<double>(static_cast<size_t>(x.numel()), 0.0);
  x.zero_grad();

  std::vector<int64_t> coords(static_cast<size_t>(x.numel()));
  std::iota(coords.begin(), coords.end(), 0);
  if (options.max_coordinates > 0 && options.max_coordinates < x.numel()) {
    Rng rng(options.seed);
    rng.shuffle(coords);
    coords.resize(static_cast<size_t>(options.max_coordinates));
    std::sort(coords.begin(), coords.end());
  }

  GradCheckResult result;
  NoGradGuard no_grad;
  auto data = x.mutable_data();
  for (int64_t c : coords) {
    const auto i = static_cast<size_t>(c);
    const double orig = data[i];
    const double h = options.step;
    auto eval = [&](double offset) {
      data[i] = orig + offset;
      return f(x).item();
    };
    double numeric;
    if (options.order == 2) {
      numeric = (eval(h) - eval(-h)) / (2.0 * h);
    } else {
      numeric = (8.0 * (eval(h) - eval(-h)) - (eval(2 * h) - eval(-2 * h))) / (12.0 * h);
    }
    data[i] = orig;
    const double abs_err = std::abs(analytic[i] - numeric);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), options.abs_floor});
    const double rel = abs_err / denom;
    result.max_absolute_error = std::max(result.max_absolute_error, abs_err);
    if (rel > result.max_relative_error || result.worst_coordinate < 0) {
      result.max_relative_error = std::max(result.max_relative_error, rel);
      result.worst_coordinate = c;
      result.worst_analytic = analytic[i];
      result.worst_numeric = numeric;
    }
    ++result.coordinates_checked;
  }
  return result;
}

}  // namespace davit
