#include <cmath>

#include "davit/datapipe.hpp"
#include "davit/rng.hpp"

namespace davit {

namespace {

constexpr int64_t kCell = 16;

struct ClassLook {
  std::array<double, 3> base;
  double stripe_amplitude;
  double stripe_period;  // pixels
  double noise;
};

// Micrograph-like intensities; each class gets its own hue, texture and grain.
constexpr std::array<ClassLook, kNumClasses> kLooks{{
    {{0.55, 0.55, 0.60}, 0.03, 16.0, 0.02},
    {{0.90, 0.86, 0.78}, 0.06, 5.0, 0.04},
    {{0.22, 0.18, 0.14}, 0.02, 9.0, 0.02},
    {{0.35, 0.55, 0.35}, 0.08, 3.0, 0.03},
    {{0.12, 0.14, 0.38}, 0.04, 7.0, 0.02},
}};

}  // namespace

std::vector<SampleRecord> synth_generate(size_t n, uint64_t seed, int64_t size) {
  if (n < 1) throw std::invalid_argument("synth_generate needs n >= 1");
  if (size < kCell || size % kCell != 0) {
    throw std::invalid_argument("synthetic image size must be a positive multiple of 16, got " + std::to_string(size));
  }
  const int64_t cells = size / kCell;
  std::vector<SampleRecord> out;
  out.reserve(n);
  for (size_t i = 0; i < n; ++i) {
    Rng rng = Rng::derive(seed, i);
    const int regions = 5 + static_cast<int>(rng.below(4));
    const auto first_class = static_cast<int>(rng.below(kNumClasses));
    std::vector<std::array<double, 2>> centers(static_cast<size_t>(regions));
    for (auto& c : centers) c = {rng.uniform(0, static_cast<double>(cells)), rng.uniform(0, static_cast<double>(cells))};

    SampleRecord rec;
    rec.id = "synth_" + std::to_string(seed) + "_" + std::to_string(i);
    rec.source = {SampleSource::Kind::Synthetic, "", seed};
    rec.image = Image(size, size);
    rec.mask = Mask(size, size);
    for (int64_t gy = 0; gy < cells; ++gy)
      for (int64_t gx = 0; gx < cells; ++gx) {
        const double cy = static_cast<double>(gy) + 0.5, cx = static_cast<double>(gx) + 0.5;
        int best = 0;
        double best_d = 1e300;
        for (int r = 0; r < regions; ++r) {
          const double dy = cy - centers[static_cast<size_t>(r)][0], dx = cx - centers[static_cast<size_t>(r)][1];
          const double d = dy * dy + dx * dx;
          if (d < best_d) best_d = d, best = r;
        }
        const auto label = static_cast<uint8_t>((first_class + best) % kNumClasses);
        for (int64_t y = gy * kCell; y < (gy + 1) * kCell; ++y)
          for (int64_t x = gx * kCell; x < (gx + 1) * kCell; ++x) rec.mask.at(y, x) = label;
      }
    const double phase = rng.uniform(0, 2 * M_PI);
    for (int64_t y = 0; y < size; ++y)
      for (int64_t x = 0; x < size; ++x) {
        const auto& look = kLooks[rec.mask.at(y, x)];
        const double stripe =
            look.stripe_amplitude * std::sin(2 * M_PI * static_cast<double>(x + y) / look.stripe_period + phase);
        const double grain = look.noise * rng.normal();
        for (int c = 0; c < 3; ++c) {
          rec.image.at(y, x, c) = std::clamp(look.base[static_cast<size_t>(c)] + stripe + grain, 0.0, 1.0);
        }
      }
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace davit
