#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "davit/tensor.hpp"

namespace davit {

struct Padding {
  enum class Kind { Same, Explicit };
  Kind kind = Kind::Same;
  int amount = 0;

  static Padding same() { return {Kind::Same, 0}; }
  static Padding explicit_pad(int amount) { return {Kind::Explicit, amount}; }
};

/// Convolution geometry. `dilation` is the tap spacing; "same" padding pads
/// symmetrically and puts any odd leftover pixel on the bottom/right.
struct ConvSpec {
  int kernel_h = 1;
  int kernel_w = 1;
  int stride = 1;
  int dilation = 1;
  int groups = 1;
  Padding padding = Padding::same();

  void validate() const;
  int64_t output_extent(int64_t input, int kernel) const;
  // Leading (top/left) pad for an axis.
  int64_t pad_before(int64_t input, int kernel) const;
};

/// Per-pixel class labels, shape [n, h, w].
struct IndexMap {
  int64_t n = 0;
  int64_t h = 0;
  int64_t w = 0;
  std::vector<int32_t> values;

  IndexMap() = default;
  IndexMap(int64_t n_, int64_t h_, int64_t w_, int32_t fill = 0)
      : n(n_), h(h_), w(w_), values(static_cast<size_t>(n_ * h_ * w_), fill) {}
  int32_t& at(int64_t b, int64_t y, int64_t x) { return values[static_cast<size_t>((b * h + y) * w + x)]; }
  int32_t at(int64_t b, int64_t y, int64_t x) const {
    return values[static_cast<size_t>((b * h + y) * w + x)];
  }
};

// Thread-local multiply-add counter for conv2d, used to cross-check the
// analytic FLOP model. Counts 2 * taps per output element.
struct ConvFlopCounter {
  static void reset();
  static int64_t value();
  static void set_enabled(bool enabled);
};

namespace ops {

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, const ConvSpec& spec);
inline Tensor conv2d(const Tensor& x, const Tensor& w, const ConvSpec& spec) {
  return conv2d(x, w, nullptr, spec);
}

// Broadcasting elementwise ops. Shapes are right-aligned; axes of extent 1
// stretch.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, double b);
Tensor scale(const Tensor& a, double factor);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

/// Normalizes each (n, y, x) position over the channel axis of an NCHW
/// tensor, then applies per-channel gamma/beta.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);

Tensor gelu(const Tensor& x);

/// Bilinear upsampling by an integer factor, half-pixel (align_corners=false)
/// sampling with edge clamping.
Tensor bilinear_upsample(const Tensor& x, int factor);

/// Mean negative log-softmax over non-ignored pixels. Returns 0 (with zero
/// gradient) when every pixel is ignored.
Tensor softmax_cross_entropy(const Tensor& logits, const IndexMap& targets, int ignore_index = 255);

// 2-D helpers for the softmax attention baseline.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor softmax_rows(const Tensor& a);

/// Per-pixel argmax over the channel axis; ties go to the lowest index.
IndexMap argmax_channels(const Tensor& logits);

}  // namespace ops
}  // namespace davit
