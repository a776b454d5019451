#include <algorithm>
#include <cmath>

#include "davit/datapipe.hpp"
#include "davit/rng.hpp"

namespace davit {

namespace {

void check_range(const Range& r, const char* name) {
  if (!(r.lo <= r.hi) || !(r.lo > 0.0)) {
    throw std::invalid_argument(std::string("augment ") + name + " range must satisfy 0 < lo <= hi");
  }
}

// Both buffers are square side x side after the crop step.
struct Planes {
  int64_t side;
  std::vector<double> image;  // side*side*3
  std::vector<uint8_t> mask;  // side*side
};

Planes resample(const Planes& in, int64_t out_side) {
  Planes out{out_side, std::vector<double>(static_cast<size_t>(out_side * out_side * 3)),
             std::vector<uint8_t>(static_cast<size_t>(out_side * out_side))};
  const int64_t n = in.side;
  const double ratio = static_cast<double>(n) / static_cast<double>(out_side);
  std::vector<int64_t> lo(static_cast<size_t>(out_side)), hi(lo.size()), nearest(lo.size());
  std::vector<double> frac(lo.size());
  for (int64_t i = 0; i < out_side; ++i) {
    const double src = std::clamp((static_cast<double>(i) + 0.5) * ratio - 0.5, 0.0, static_cast<double>(n - 1));
    const auto k = static_cast<size_t>(i);
    lo[k] = static_cast<int64_t>(std::floor(src));
    hi[k] = std::min(lo[k] + 1, n - 1);
    frac[k] = src - static_cast<double>(lo[k]);
    nearest[k] = std::min(n - 1, static_cast<int64_t>(std::floor((static_cast<double>(i) + 0.5) * ratio)));
  }
  for (int64_t y = 0; y < out_side; ++y) {
    const auto ky = static_cast<size_t>(y);
    for (int64_t x = 0; x < out_side; ++x) {
      const auto kx = static_cast<size_t>(x);
      const double wy = frac[ky], wx = frac[kx];
      for (int c = 0; c < 3; ++c) {
        auto px = [&](int64_t yy, int64_t xx) { return in.image[static_cast<size_t>((yy * n + xx) * 3 + c)]; };
        const double top = (1 - wx) * px(lo[ky], lo[kx]) + wx * px(lo[ky], hi[kx]);
        const double bottom = (1 - wx) * px(hi[ky], lo[kx]) + wx * px(hi[ky], hi[kx]);
        out.image[static_cast<size_t>((y * out_side + x) * 3 + c)] = (1 - wy) * top + wy * bottom;
      }
      out.mask[static_cast<size_t>(y * out_side + x)] = in.mask[static_cast<size_t>(nearest[ky] * n + nearest[kx])];
    }
  }
  return out;
}

// Mirror-pads (smaller) or center-crops (larger) to `side`.
Planes fit(const Planes& in, int64_t side) {
  Planes out{side, std::vector<double>(static_cast<size_t>(side * side * 3)),
             std::vector<uint8_t>(static_cast<size_t>(side * side))};
  const int64_t shift = (in.side - side) / 2;  // negative when padding
  for (int64_t y = 0; y < side; ++y) {
    const int64_t sy = mirror_index(y + shift, in.side);
    for (int64_t x = 0; x < side; ++x) {
      const int64_t sx = mirror_index(x + shift, in.side);
      for (int c = 0; c < 3; ++c) {
        out.image[static_cast<size_t>((y * side + x) * 3 + c)] = in.image[static_cast<size_t>((sy * in.side + sx) * 3 + c)];
      }
      out.mask[static_cast<size_t>(y * side + x)] = in.mask[static_cast<size_t>(sy * in.side + sx)];
    }
  }
  return out;
}

}  // namespace

int64_t mirror_index(int64_t i, int64_t n) {
  if (n <= 1) return 0;
  const int64_t period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

void AugmentConfig::validate() const {
  if (crop <= 0) throw std::invalid_argument("augment crop must be > 0");
  check_range(contrast, "contrast");
  check_range(brightness, "brightness");
  check_range(scale, "scale");
  if (expansion < 1) throw std::invalid_argument("augment expansion must be >= 1");
}

AugmentConfig AugmentConfig::identity(int64_t crop) {
  AugmentConfig c;
  c.crop = crop;
  c.contrast = c.brightness = c.scale = {1.0, 1.0};
  c.horizontal_flip = c.vertical_flip = false;
  c.expansion = 1;
  return c;
}

SampleRecord augment(const SampleRecord& rec, uint64_t seed, const AugmentConfig& cfg) {
  cfg.validate();
  const int64_t H = rec.image.height, W = rec.image.width;
  if (H < 1 || W < 1) throw std::invalid_argument("augment needs a non-empty image");
  if (rec.mask.height != H || rec.mask.width != W) throw std::invalid_argument("augment: image and mask sizes differ");
  Rng rng(seed);
  const int64_t crop = cfg.crop;

  // Step 1: crop from the (virtually) mirror-padded source.
  const int64_t ph = std::max(H, crop), pw = std::max(W, crop);
  const int64_t before_y = (ph - H) / 2, before_x = (pw - W) / 2;
  const auto y0 = static_cast<int64_t>(rng.below(static_cast<uint64_t>(ph - crop + 1)));
  const auto x0 = static_cast<int64_t>(rng.below(static_cast<uint64_t>(pw - crop + 1)));

  // Step 2 draws.
  const double contrast = rng.uniform(cfg.contrast.lo, cfg.contrast.hi);
  const double brightness = rng.uniform(cfg.brightness.lo, cfg.brightness.hi);
  const bool hflip = rng.coin() && cfg.horizontal_flip;
  const bool vflip = rng.coin() && cfg.vertical_flip;
  // Step 3 draw.
  const double factor = rng.uniform(cfg.scale.lo, cfg.scale.hi);

  Planes p{crop, std::vector<double>(static_cast<size_t>(crop * crop * 3)),
           std::vector<uint8_t>(static_cast<size_t>(crop * crop))};
  double mean = 0.0;
  for (int64_t y = 0; y < crop; ++y) {
    const int64_t sy = mirror_index(y0 + (vflip ? crop - 1 - y : y) - before_y, H);
    for (int64_t x = 0; x < crop; ++x) {
      const int64_t sx = mirror_index(x0 + (hflip ? crop - 1 - x : x) - before_x, W);
      for (int c = 0; c < 3; ++c) {
        const double v = rec.image.at(sy, sx, c);
        p.image[static_cast<size_t>((y * crop + x) * 3 + c)] = v;
        mean += v;
      }
      p.mask[static_cast<size_t>(y * crop + x)] = rec.mask.at(sy, sx);
    }
  }
  mean /= static_cast<double>(crop * crop * 3);
  const double offset = (brightness - 1.0) * mean;
  for (auto& v : p.image) v = std::clamp(contrast * v + offset, 0.0, 1.0);

  const int64_t scaled = std::max<int64_t>(1, std::llround(static_cast<double>(crop) * factor));
  if (scaled != crop) p = fit(resample(p, scaled), crop);

  SampleRecord out;
  out.id = rec.id;
  out.source = rec.source;
  out.verdict_history = rec.verdict_history;
  out.image = Image(crop, crop);
  out.image.pixels = std::move(p.image);
  out.mask = Mask(crop, crop);
  out.mask.labels = std::move(p.mask);
  return out;
}

}  // namespace davit
