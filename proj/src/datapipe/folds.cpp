#include <numeric>

#include "davit/datapipe.hpp"
#include "davit/rng.hpp"

namespace davit {

FoldPlan five_fold_split(size_t n, uint64_t seed) {
  if (n < 5) throw std::invalid_argument("five_fold_split needs at least 5 samples, got " + std::to_string(n));
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  Rng rng(seed);
  rng.shuffle(order);
  FoldPlan plan;
  for (size_t i = 0; i < n; ++i) plan.folds[i % 5].push_back(order[i]);
  return plan;
}

std::vector<size_t> FoldPlan::train_indices(int fold) const {
  std::vector<size_t> out;
  for (int f = 0; f < 5; ++f) {
    if (f == fold) continue;
    const auto& v = folds.at(static_cast<size_t>(f));
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

}  // namespace davit
