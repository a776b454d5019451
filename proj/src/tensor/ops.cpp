#include "davit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace davit {

namespace {

thread_local int64_t g_conv_flops = 0;
thread_local bool g_conv_flops_enabled = false;

int64_t floor_div(int64_t a, int64_t b) {
  int64_t q = a / b;
  if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
  return q;
}

int64_t ceil_div(int64_t a, int64_t b) { return -floor_div(-a, b); }

void require_rank(const Tensor& t, int rank, const char* what) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(what) + " must have rank " + std::to_string(rank) + ", got " +
                     shape_str(t.shape()));
  }
}

// Accumulate only into inputs that take part in differentiation.
inline std::vector<double>* grad_target(const std::shared_ptr<detail::TensorImpl>& impl) {
  return impl->requires_grad ? &impl->grad_buffer() : nullptr;
}

}  // namespace

void ConvFlopCounter::reset() { g_conv_flops = 0; }
int64_t ConvFlopCounter::value() { return g_conv_flops; }
void ConvFlopCounter::set_enabled(bool enabled) { g_conv_flops_enabled = enabled; }

void ConvSpec::validate() const {
  if (kernel_h < 1 || kernel_w < 1) throw ShapeError("conv kernel extents must be >= 1");
  if (stride < 1) throw ShapeError("conv stride must be >= 1");
  if (dilation < 1) throw ShapeError("conv dilation must be >= 1");
  if (groups < 1) throw ShapeError("conv groups must be >= 1");
  if (padding.kind == Padding::Kind::Explicit && padding.amount < 0) {
    throw ShapeError("conv padding must be >= 0");
  }
}

int64_t ConvSpec::output_extent(int64_t input, int kernel) const {
  const int64_t effective = static_cast<int64_t>(kernel - 1) * dilation + 1;
  if (padding.kind == Padding::Kind::Same) return ceil_div(input, stride);
  const int64_t padded = input + 2 * static_cast<int64_t>(padding.amount);
  if (padded < effective) return 0;
  return (padded - effective) / stride + 1;
}

int64_t ConvSpec::pad_before(int64_t input, int kernel) const {
  if (padding.kind == Padding::Kind::Explicit) return padding.amount;
  const int64_t effective = static_cast<int64_t>(kernel - 1) * dilation + 1;
  const int64_t out = ceil_div(input, stride);
  const int64_t total = std::max<int64_t>(0, (out - 1) * stride + effective - input);
  return total / 2;
}

namespace ops {

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor* bias, const ConvSpec& spec) {
  spec.validate();
  require_rank(x, 4, "conv2d input");
  require_rank(w, 4, "conv2d weight");
  const int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Cout = w.dim(0);
  const int64_t G = spec.groups;
  if (w.dim(2) != spec.kernel_h || w.dim(3) != spec.kernel_w) {
    throw ShapeError("conv2d weight axes 2/3 " + shape_str(w.shape()) + " do not match kernel " +
                     std::to_string(spec.kernel_h) + "x" + std::to_string(spec.kernel_w));
  }
  if (Cin % G != 0) {
    throw ShapeError("conv2d input axis 1 (channels=" + std::to_string(Cin) +
                     ") is not divisible by groups=" + std::to_string(G));
  }
  if (Cout % G != 0) {
    throw ShapeError("conv2d weight axis 0 (out channels=" + std::to_string(Cout) +
                     ") is not divisible by groups=" + std::to_string(G));
  }
  const int64_t cin_g = Cin / G, cout_g = Cout / G;
  if (w.dim(1) != cin_g) {
    throw ShapeError("conv2d weight axis 1 is " + std::to_string(w.dim(1)) + ", expected Cin/groups=" +
                     std::to_string(cin_g));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != Cout)) {
    throw ShapeError("conv2d bias axis 0 must equal out channels " + std::to_string(Cout) + ", got " +
                     shape_str(bias->shape()));
  }
  const int kh = spec.kernel_h, kw = spec.kernel_w;
  const int64_t s = spec.stride, r = spec.dilation;
  const int64_t OH = spec.output_extent(H, kh), OW = spec.output_extent(W, kw);
  if (OH < 1 || OW < 1) {
    throw ShapeError("conv2d input axes 2/3 " + shape_str(x.shape()) + " are smaller than the dilated kernel");
  }
  const int64_t pt = spec.pad_before(H, kh), pl = spec.pad_before(W, kw);

  // Valid output column range for a tap column kj.
  std::vector<int64_t> ox_lo(static_cast<size_t>(kw)), ox_hi(static_cast<size_t>(kw));
  for (int kj = 0; kj < kw; ++kj) {
    const int64_t off = kj * r - pl;
    ox_lo[static_cast<size_t>(kj)] = std::max<int64_t>(0, ceil_div(-off, s));
    ox_hi[static_cast<size_t>(kj)] = std::min<int64_t>(OW - 1, floor_div(W - 1 - off, s));
  }

  const auto xd = x.data();
  const auto wd = w.data();
  std::vector<double> out(static_cast<size_t>(N * Cout * OH * OW), 0.0);
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t co = 0; co < Cout; ++co) {
      const int64_t g = co / cout_g;
      double* oplane = out.data() + (n * Cout + co) * OH * OW;
      if (bias) std::fill(oplane, oplane + OH * OW, bias->data()[static_cast<size_t>(co)]);
      for (int64_t cil = 0; cil < cin_g; ++cil) {
        const double* iplane = xd.data() + (n * Cin + g * cin_g + cil) * H * W;
        const double* wk = wd.data() + (co * cin_g + cil) * kh * kw;
        for (int ki = 0; ki < kh; ++ki) {
          for (int kj = 0; kj < kw; ++kj) {
            const double wv = wk[ki * kw + kj];
            const int64_t lo = ox_lo[static_cast<size_t>(kj)], hi = ox_hi[static_cast<size_t>(kj)];
            if (lo > hi) continue;
            const int64_t coff = kj * r - pl;
            for (int64_t oy = 0; oy < OH; ++oy) {
              const int64_t iy = oy * s - pt + ki * r;
              if (iy < 0 || iy >= H) continue;
              const double* irow = iplane + iy * W + coff;
              double* orow = oplane + oy * OW;
              for (int64_t ox = lo; ox <= hi; ++ox) orow[ox] += wv * irow[ox * s];
            }
          }
        }
      }
    }
  }
  if (g_conv_flops_enabled) g_conv_flops += 2 * kh * kw * cin_g * Cout * OH * OW * N;

  auto xi = x.impl_ptr();
  auto wi = w.impl_ptr();
  std::shared_ptr<detail::TensorImpl> bi = bias ? bias->impl_ptr() : nullptr;
  auto backward = [=](std::span<const double> gout) {
    std::vector<double>* gx = grad_target(xi);
    std::vector<double>* gw = grad_target(wi);
    std::vector<double>* gb = bi ? grad_target(bi) : nullptr;
    const double* xdat = xi->data.data();
    const double* wdat = wi->data.data();
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t co = 0; co < Cout; ++co) {
        const int64_t g = co / cout_g;
        const double* gplane = gout.data() + (n * Cout + co) * OH * OW;
        if (gb) {
          double acc = 0.0;
          for (int64_t i = 0; i < OH * OW; ++i) acc += gplane[i];
          (*gb)[static_cast<size_t>(co)] += acc;
        }
        if (!gx && !gw) continue;
        for (int64_t cil = 0; cil < cin_g; ++cil) {
          const int64_t in_off = (n * Cin + g * cin_g + cil) * H * W;
          const double* iplane = xdat + in_off;
          double* gxplane = gx ? gx->data() + in_off : nullptr;
          const int64_t w_off = (co * cin_g + cil) * kh * kw;
          for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
              const double wv = wdat[w_off + ki * kw + kj];
              const int64_t lo = ox_lo[static_cast<size_t>(kj)], hi = ox_hi[static_cast<size_t>(kj)];
              if (lo > hi) continue;
              const int64_t coff = kj * r - pl;
              double wacc = 0.0;
              for (int64_t oy = 0; oy < OH; ++oy) {
                const int64_t iy = oy * s - pt + ki * r;
                if (iy < 0 || iy >= H) continue;
                const double* grow = gplane + oy * OW;
                const int64_t row = iy * W + coff;
                if (gxplane) {
                  double* gxrow = gxplane + row;
                  for (int64_t ox = lo; ox <= hi; ++ox) gxrow[ox * s] += wv * grow[ox];
                }
                if (gw) {
                  const double* irow = iplane + row;
                  for (int64_t ox = lo; ox <= hi; ++ox) wacc += grow[ox] * irow[ox * s];
                }
              }
              if (gw) (*gw)[static_cast<size_t>(w_off + ki * kw + kj)] += wacc;
            }
          }
        }
      }
    }
  };
  if (bias) return Tensor::make_result({N, Cout, OH, OW}, std::move(out), {&x, &w, bias}, backward, "conv2d");
  return Tensor::make_result({N, Cout, OH, OW}, std::move(out), {&x, &w}, backward, "conv2d");
}

namespace {

// Maps every output element to its source offsets in a and b.
struct BroadcastPlan {
  Shape out;
  std::vector<int64_t> a_index;
  std::vector<int64_t> b_index;
  bool trivial = false;  // identical shapes
};

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
  BroadcastPlan plan;
  if (a == b) {
    plan.out = a;
    plan.trivial = true;
    return plan;
  }
  const size_t rank = std::max(a.size(), b.size());
  Shape ap(rank, 1), bp(rank, 1);
  std::copy(a.begin(), a.end(), ap.begin() + static_cast<std::ptrdiff_t>(rank - a.size()));
  std::copy(b.begin(), b.end(), bp.begin() + static_cast<std::ptrdiff_t>(rank - b.size()));
  plan.out.resize(rank);
  for (size_t i = 0; i < rank; ++i) {
    if (ap[i] != bp[i] && ap[i] != 1 && bp[i] != 1) {
      throw ShapeError("shapes " + shape_str(a) + " and " + shape_str(b) + " are not broadcastable (axis " +
                       std::to_string(i) + ")");
    }
    plan.out[i] = std::max(ap[i], bp[i]);
  }
  std::vector<int64_t> as(rank, 0), bs(rank, 0);
  int64_t sa = 1, sb = 1;
  for (size_t i = rank; i-- > 0;) {
    as[i] = ap[i] == 1 ? 0 : sa;
    bs[i] = bp[i] == 1 ? 0 : sb;
    sa *= ap[i];
    sb *= bp[i];
  }
  const int64_t total = shape_numel(plan.out);
  plan.a_index.resize(static_cast<size_t>(total));
  plan.b_index.resize(static_cast<size_t>(total));
  std::vector<int64_t> idx(rank, 0);
  int64_t ai = 0, bi = 0;
  for (int64_t flat = 0; flat < total; ++flat) {
    plan.a_index[static_cast<size_t>(flat)] = ai;
    plan.b_index[static_cast<size_t>(flat)] = bi;
    for (size_t d = rank; d-- > 0;) {
      ++idx[d];
      ai += as[d];
      bi += bs[d];
      if (idx[d] < plan.out[d]) break;
      ai -= as[d] * idx[d];
      bi -= bs[d] * idx[d];
      idx[d] = 0;
    }
  }
  return plan;
}

enum class BinOp { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* name) {
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(a.shape(), b.shape()));
  const auto ad = a.data();
  const auto bd = b.data();
  const size_t total = static_cast<size_t>(shape_numel(plan->out));
  std::vector<double> out(total);
  for (size_t i = 0; i < total; ++i) {
    const double av = ad[plan->trivial ? i : static_cast<size_t>(plan->a_index[i])];
    const double bv = bd[plan->trivial ? i : static_cast<size_t>(plan->b_index[i])];
    switch (op) {
      case BinOp::Add: out[i] = av + bv; break;
      case BinOp::Sub: out[i] = av - bv; break;
      case BinOp::Mul: out[i] = av * bv; break;
    }
  }
  auto ai = a.impl_ptr();
  auto bi = b.impl_ptr();
  return Tensor::make_result(
      plan->out, std::move(out), {&a, &b},
      [ai, bi, plan, op](std::span<const double> g) {
        std::vector<double>* ga = grad_target(ai);
        std::vector<double>* gb = grad_target(bi);
        for (size_t i = 0; i < g.size(); ++i) {
          const size_t ia = plan->trivial ? i : static_cast<size_t>(plan->a_index[i]);
          const size_t ib = plan->trivial ? i : static_cast<size_t>(plan->b_index[i]);
          switch (op) {
            case BinOp::Add:
              if (ga) (*ga)[ia] += g[i];
              if (gb) (*gb)[ib] += g[i];
              break;
            case BinOp::Sub:
              if (ga) (*ga)[ia] += g[i];
              if (gb) (*gb)[ib] -= g[i];
              break;
            case BinOp::Mul:
              if (ga) (*ga)[ia] += g[i] * bi->data[ib];
              if (gb) (*gb)[ib] += g[i] * ai->data[ia];
              break;
          }
        }
      },
      name);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::Mul, "mul"); }

Tensor add(const Tensor& a, double b) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v += b;
  auto ai = a.impl_ptr();
  return Tensor::make_result(
      a.shape(), std::move(out), {&a},
      [ai](std::span<const double> g) {
        auto& ga = ai->grad_buffer();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      },
      "add_scalar");
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  auto ai = a.impl_ptr();
  return Tensor::make_result(
      a.shape(), std::move(out), {&a},
      [ai, factor](std::span<const double> g) {
        auto& ga = ai->grad_buffer();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
      },
      "scale");
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  auto xi = x.impl_ptr();
  return Tensor::make_result(
      {1}, {acc}, {&x},
      [xi](std::span<const double> g) {
        auto& gx = xi->grad_buffer();
        for (auto& v : gx) v += g[0];
      },
      "sum");
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("layer_norm eps must be > 0");
  if (x.rank() < 2) throw ShapeError("layer_norm input needs a channel axis, got " + shape_str(x.shape()));
  const int64_t N = x.dim(0), C = x.dim(1);
  const int64_t P = x.numel() / (N * C);
  if (gamma.shape() != Shape{C} || beta.shape() != Shape{C}) {
    throw ShapeError("layer_norm gamma/beta must have shape [" + std::to_string(C) + "]");
  }
  const auto xd = x.data();
  const auto gd = gamma.data();
  const auto bd = beta.data();
  auto xhat = std::make_shared<std::vector<double>>(xd.size());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(N * P));
  std::vector<double> out(xd.size());
  std::vector<double> mu(static_cast<size_t>(P)), var(static_cast<size_t>(P));
  for (int64_t n = 0; n < N; ++n) {
    const double* xn = xd.data() + n * C * P;
    std::fill(mu.begin(), mu.end(), 0.0);
    std::fill(var.begin(), var.end(), 0.0);
    for (int64_t c = 0; c < C; ++c)
      for (int64_t p = 0; p < P; ++p) mu[static_cast<size_t>(p)] += xn[c * P + p];
    for (auto& m : mu) m /= static_cast<double>(C);
    for (int64_t c = 0; c < C; ++c)
      for (int64_t p = 0; p < P; ++p) {
        const double d = xn[c * P + p] - mu[static_cast<size_t>(p)];
        var[static_cast<size_t>(p)] += d * d;
      }
    for (int64_t p = 0; p < P; ++p) {
      (*inv_std)[static_cast<size_t>(n * P + p)] = 1.0 / std::sqrt(var[static_cast<size_t>(p)] / C + eps);
    }
    for (int64_t c = 0; c < C; ++c) {
      for (int64_t p = 0; p < P; ++p) {
        const size_t i = static_cast<size_t>((n * C + c) * P + p);
        const double h = (xd[i] - mu[static_cast<size_t>(p)]) * (*inv_std)[static_cast<size_t>(n * P + p)];
        (*xhat)[i] = h;
        out[i] = gd[static_cast<size_t>(c)] * h + bd[static_cast<size_t>(c)];
      }
    }
  }
  auto xi = x.impl_ptr(), gi = gamma.impl_ptr(), bi = beta.impl_ptr();
  return Tensor::make_result(
      x.shape(), std::move(out), {&x, &gamma, &beta},
      [=](std::span<const double> g) {
        std::vector<double>* gx = grad_target(xi);
        std::vector<double>* gg = grad_target(gi);
        std::vector<double>* gbt = grad_target(bi);
        const double* gam = gi->data.data();
        std::vector<double> m1(static_cast<size_t>(P)), m2(static_cast<size_t>(P));
        for (int64_t n = 0; n < N; ++n) {
          std::fill(m1.begin(), m1.end(), 0.0);
          std::fill(m2.begin(), m2.end(), 0.0);
          for (int64_t c = 0; c < C; ++c) {
            for (int64_t p = 0; p < P; ++p) {
              const size_t i = static_cast<size_t>((n * C + c) * P + p);
              const double dh = g[i] * gam[c];
              m1[static_cast<size_t>(p)] += dh;
              m2[static_cast<size_t>(p)] += dh * (*xhat)[i];
              if (gg) (*gg)[static_cast<size_t>(c)] += g[i] * (*xhat)[i];
              if (gbt) (*gbt)[static_cast<size_t>(c)] += g[i];
            }
          }
          if (!gx) continue;
          for (int64_t c = 0; c < C; ++c) {
            for (int64_t p = 0; p < P; ++p) {
              const size_t i = static_cast<size_t>((n * C + c) * P + p);
              const double dh = g[i] * gam[c];
              const double is = (*inv_std)[static_cast<size_t>(n * P + p)];
              (*gx)[i] += is * (dh - m1[static_cast<size_t>(p)] / C -
                                (*xhat)[i] * m2[static_cast<size_t>(p)] / C);
            }
          }
        }
      },
      "layer_norm");
}

Tensor gelu(const Tensor& x) {
  const auto xd = x.data();
  std::vector<double> out(xd.size());
  for (size_t i = 0; i < xd.size(); ++i) out[i] = 0.5 * xd[i] * (1.0 + std::erf(xd[i] * M_SQRT1_2));
  auto xi = x.impl_ptr();
  return Tensor::make_result(
      x.shape(), std::move(out), {&x},
      [xi](std::span<const double> g) {
        auto& gx = xi->grad_buffer();
        const double inv_sqrt_2pi = 0.5 * M_2_SQRTPI * M_SQRT1_2;
        for (size_t i = 0; i < g.size(); ++i) {
          const double v = xi->data[i];
          const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
          const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
          gx[i] += g[i] * (cdf + v * pdf);
        }
      },
      "gelu");
}

namespace {
struct Tap {
  int64_t i0, i1;
  double frac;
};

std::vector<Tap> half_pixel_taps(int64_t in, int64_t out) {
  std::vector<Tap> taps(static_cast<size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    int64_t i0 = static_cast<int64_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int64_t i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<size_t>(o)] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}
}  // namespace

Tensor bilinear_upsample(const Tensor& x, int factor) {
  if (factor < 1) throw std::invalid_argument("bilinear_upsample factor must be >= 1");
  require_rank(x, 4, "bilinear_upsample input");
  if (factor == 1) return scale(x, 1.0);
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t OH = H * factor, OW = W * factor;
  auto ty = std::make_shared<std::vector<Tap>>(half_pixel_taps(H, OH));
  auto tx = std::make_shared<std::vector<Tap>>(half_pixel_taps(W, OW));
  const auto xd = x.data();
  std::vector<double> out(static_cast<size_t>(N * C * OH * OW));
  for (int64_t p = 0; p < N * C; ++p) {
    const double* ip = xd.data() + p * H * W;
    double* op = out.data() + p * OH * OW;
    for (int64_t oy = 0; oy < OH; ++oy) {
      const Tap& a = (*ty)[static_cast<size_t>(oy)];
      const double* r0 = ip + a.i0 * W;
      const double* r1 = ip + a.i1 * W;
      for (int64_t ox = 0; ox < OW; ++ox) {
        const Tap& b = (*tx)[static_cast<size_t>(ox)];
        const double top = r0[b.i0] + b.frac * (r0[b.i1] - r0[b.i0]);
        const double bot = r1[b.i0] + b.frac * (r1[b.i1] - r1[b.i0]);
        op[oy * OW + ox] = top + a.frac * (bot - top);
      }
    }
  }
  auto xi = x.impl_ptr();
  return Tensor::make_result(
      {N, C, OH, OW}, std::move(out), {&x},
      [=](std::span<const double> g) {
        auto& gx = xi->grad_buffer();
        for (int64_t p = 0; p < N * C; ++p) {
          double* gp = gx.data() + p * H * W;
          const double* go = g.data() + p * OH * OW;
          for (int64_t oy = 0; oy < OH; ++oy) {
            const Tap& a = (*ty)[static_cast<size_t>(oy)];
            for (int64_t ox = 0; ox < OW; ++ox) {
              const Tap& b = (*tx)[static_cast<size_t>(ox)];
              const double v = go[oy * OW + ox];
              const double top = v * (1.0 - a.frac), bot = v * a.frac;
              gp[a.i0 * W + b.i0] += top * (1.0 - b.frac);
              gp[a.i0 * W + b.i1] += top * b.frac;
              gp[a.i1 * W + b.i0] += bot * (1.0 - b.frac);
              gp[a.i1 * W + b.i1] += bot * b.frac;
            }
          }
        }
      },
      "bilinear_upsample");
}

Tensor softmax_cross_entropy(const Tensor& logits, const IndexMap& targets, int ignore_index) {
  require_rank(logits, 4, "softmax_cross_entropy logits");
  const int64_t N = logits.dim(0), K = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  if (targets.n != N || targets.h != H || targets.w != W) {
    throw ShapeError("targets shape [" + std::to_string(targets.n) + ", " + std::to_string(targets.h) + ", " +
                     std::to_string(targets.w) + "] does not match logits " + shape_str(logits.shape()));
  }
  const int64_t P = H * W;
  const auto ld = logits.data();
  auto probs = std::make_shared<std::vector<double>>(ld.size(), 0.0);
  double total = 0.0;
  int64_t count = 0;
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t p = 0; p < P; ++p) {
      const int32_t t = targets.values[static_cast<size_t>(n * P + p)];
      if (t == ignore_index) continue;
      if (t < 0 || t >= K) {
        throw std::out_of_range("target class " + std::to_string(t) + " outside [0, " + std::to_string(K) + ")");
      }
      const double* z = ld.data() + n * K * P + p;
      double zmax = -std::numeric_limits<double>::infinity();
      for (int64_t k = 0; k < K; ++k) zmax = std::max(zmax, z[k * P]);
      double se = 0.0;
      for (int64_t k = 0; k < K; ++k) se += std::exp(z[k * P] - zmax);
      const double lse = zmax + std::log(se);
      total += lse - z[t * P];
      for (int64_t k = 0; k < K; ++k) {
        (*probs)[static_cast<size_t>(n * K * P + k * P + p)] = std::exp(z[k * P] - lse);
      }
      ++count;
    }
  }
  const double loss = count > 0 ? total / static_cast<double>(count) : 0.0;
  auto li = logits.impl_ptr();
  auto tgt = std::make_shared<IndexMap>(targets);
  return Tensor::make_result(
      {1}, {loss}, {&logits},
      [=](std::span<const double> g) {
        auto& gl = li->grad_buffer();
        if (count == 0) return;
        const double s = g[0] / static_cast<double>(count);
        for (int64_t n = 0; n < N; ++n) {
          for (int64_t p = 0; p < P; ++p) {
            const int32_t t = tgt->values[static_cast<size_t>(n * P + p)];
            if (t == ignore_index) continue;
            for (int64_t k = 0; k < K; ++k) {
              const size_t i = static_cast<size_t>(n * K * P + k * P + p);
              gl[i] += s * ((*probs)[i] - (k == t ? 1.0 : 0.0));
            }
          }
        }
      },
      "softmax_cross_entropy");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul lhs");
  require_rank(b, 2, "matmul rhs");
  const int64_t M = a.dim(0), Kd = a.dim(1), Nc = b.dim(1);
  if (b.dim(0) != Kd) {
    throw ShapeError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const auto ad = a.data(), bd = b.data();
  std::vector<double> out(static_cast<size_t>(M * Nc), 0.0);
  for (int64_t i = 0; i < M; ++i)
    for (int64_t k = 0; k < Kd; ++k) {
      const double av = ad[static_cast<size_t>(i * Kd + k)];
      for (int64_t j = 0; j < Nc; ++j) out[static_cast<size_t>(i * Nc + j)] += av * bd[static_cast<size_t>(k * Nc + j)];
    }
  auto ai = a.impl_ptr(), bi = b.impl_ptr();
  return Tensor::make_result(
      {M, Nc}, std::move(out), {&a, &b},
      [=](std::span<const double> g) {
        std::vector<double>* ga = grad_target(ai);
        std::vector<double>* gb = grad_target(bi);
        for (int64_t i = 0; i < M; ++i)
          for (int64_t k = 0; k < Kd; ++k)
            for (int64_t j = 0; j < Nc; ++j) {
              const double gv = g[static_cast<size_t>(i * Nc + j)];
              if (ga) (*ga)[static_cast<size_t>(i * Kd + k)] += gv * bi->data[static_cast<size_t>(k * Nc + j)];
              if (gb) (*gb)[static_cast<size_t>(k * Nc + j)] += gv * ai->data[static_cast<size_t>(i * Kd + k)];
            }
      },
      "matmul");
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose input");
  const int64_t R = a.dim(0), C = a.dim(1);
  const auto ad = a.data();
  std::vector<double> out(ad.size());
  for (int64_t i = 0; i < R; ++i)
    for (int64_t j = 0; j < C; ++j) out[static_cast<size_t>(j * R + i)] = ad[static_cast<size_t>(i * C + j)];
  auto ai = a.impl_ptr();
  return Tensor::make_result(
      {C, R}, std::move(out), {&a},
      [=](std::span<const double> g) {
        auto& ga = ai->grad_buffer();
        for (int64_t i = 0; i < R; ++i)
          for (int64_t j = 0; j < C; ++j) ga[static_cast<size_t>(i * C + j)] += g[static_cast<size_t>(j * R + i)];
      },
      "transpose");
}

Tensor softmax_rows(const Tensor& a) {
  if (a.rank() < 1) throw ShapeError("softmax_rows needs rank >= 1");
  const int64_t C = a.dim(-1);
  const int64_t R = a.numel() / C;
  const auto ad = a.data();
  auto out = std::make_shared<std::vector<double>>(ad.size());
  for (int64_t r = 0; r < R; ++r) {
    const double* z = ad.data() + r * C;
    double* y = out->data() + r * C;
    const double zmax = *std::max_element(z, z + C);
    double s = 0.0;
    for (int64_t c = 0; c < C; ++c) s += (y[c] = std::exp(z[c] - zmax));
    for (int64_t c = 0; c < C; ++c) y[c] /= s;
  }
  auto ai = a.impl_ptr();
  std::vector<double> copy = *out;
  return Tensor::make_result(
      a.shape(), std::move(copy), {&a},
      [=](std::span<const double> g) {
        auto& ga = ai->grad_buffer();
        for (int64_t r = 0; r < R; ++r) {
          const double* y = out->data() + r * C;
          const double* gr = g.data() + r * C;
          double dot = 0.0;
          for (int64_t c = 0; c < C; ++c) dot += gr[c] * y[c];
          for (int64_t c = 0; c < C; ++c) ga[static_cast<size_t>(r * C + c)] += y[c] * (gr[c] - dot);
        }
      },
      "softmax_rows");
}

IndexMap argmax_channels(const Tensor& logits) {
  require_rank(logits, 4, "argmax_channels input");
  const int64_t N = logits.dim(0), K = logits.dim(1), H = logits.dim(2), W = logits.dim(3);
  const int64_t P = H * W;
  IndexMap out(N, H, W);
  const auto ld = logits.data();
  for (int64_t n = 0; n < N; ++n) {
    for (int64_t p = 0; p < P; ++p) {
      const double* z = ld.data() + n * K * P + p;
      int32_t best = 0;
      for (int64_t k = 1; k < K; ++k) {
        if (z[k * P] > z[best * P]) best = static_cast<int32_t>(k);
      }
      out.values[static_cast<size_t>(n * P + p)] = best;
    }
  }
  return out;
}

}  // namespace ops
}  // namespace davit
