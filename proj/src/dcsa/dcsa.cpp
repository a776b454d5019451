#include "davit/dcsa.hpp"

#include <cmath>
#include <iomanip>
#include <numeric>
#include <stdexcept>

#include "davit/ops.hpp"

namespace davit::dcsa {

namespace {

ConvSpec depthwise_spec(int kernel, int dilation, int64_t channels) {
  ConvSpec s;
  s.kernel_h = s.kernel_w = kernel;
  s.dilation = dilation;
  s.groups = static_cast<int>(channels);
  return s;
}

ConvSpec pointwise_spec() {
  ConvSpec s;
  s.kernel_h = s.kernel_w = 1;
  return s;
}

Tensor filled(Shape shape, Rng* rng, double std) {
  Tensor t = Tensor::zeros(std::move(shape), true);
  if (rng) {
    for (auto& v : t.mutable_data()) v = rng->truncated_normal(std);
  }
  return t;
}

Weights make(const Config& cfg, Rng* rng, double std) {
  cfg.validate();
  const int64_t C = cfg.channels;
  Weights w;
  w.config = cfg;
  w.local = filled({C, 1, cfg.local_kernel, cfg.local_kernel}, rng, std);
  for (const auto& b : cfg.branches) w.branches.push_back(filled({C, 1, b.kernel, b.kernel}, rng, std));
  w.mixer = filled({C, C, 1, 1}, rng, std);
  if (cfg.bias) {
    w.local_bias = Tensor::zeros({C}, true);
    for (size_t i = 0; i < cfg.branches.size(); ++i) w.branch_biases.push_back(Tensor::zeros({C}, true));
    w.mixer_bias = Tensor::zeros({C}, true);
  }
  return w;
}

const Tensor* opt(const Tensor& t) { return t.defined() ? &t : nullptr; }

}  // namespace

void Config::validate() const {
  if (channels < 1) throw std::invalid_argument("dcsa channels must be >= 1");
  if (local_kernel < 1 || local_kernel % 2 == 0) throw std::invalid_argument("dcsa local kernel must be odd and >= 1");
  if (branches.empty()) throw std::invalid_argument("dcsa needs at least one branch");
  for (const auto& b : branches) {
    if (b.kernel < 1 || b.kernel % 2 == 0) throw std::invalid_argument("dcsa branch kernels must be odd and >= 1");
    if (b.dilation < 1) throw std::invalid_argument("dcsa branch dilation must be >= 1");
  }
  if (equivalent_kernel < 1) throw std::invalid_argument("dcsa equivalent kernel must be >= 1");
}

Weights Weights::zeros(const Config& cfg) { return make(cfg, nullptr, 0.0); }

Weights Weights::random(const Config& cfg, Rng& rng, double std) { return make(cfg, &rng, std); }

Weights Weights::passthrough(const Config& cfg) {
  Weights w = zeros(cfg);
  const int64_t C = cfg.channels;
  const int k = cfg.local_kernel;
  auto local = w.local.mutable_data();
  for (int64_t c = 0; c < C; ++c) local[static_cast<size_t>(c * k * k + (k / 2) * k + k / 2)] = 1.0;
  auto mixer = w.mixer.mutable_data();
  for (int64_t c = 0; c < C; ++c) mixer[static_cast<size_t>(c * C + c)] = 1.0;
  return w;
}

Weights Weights::unit_attention(const Config& cfg) {
  Config with_bias = cfg;
  with_bias.bias = true;
  Weights w = zeros(with_bias);
  for (auto& v : w.mixer_bias.mutable_data()) v = 1.0;
  return w;
}

std::vector<Tensor> Weights::parameters() const {
  std::vector<Tensor> out{local};
  out.insert(out.end(), branches.begin(), branches.end());
  out.push_back(mixer);
  if (local_bias.defined()) out.push_back(local_bias);
  out.insert(out.end(), branch_biases.begin(), branch_biases.end());
  if (mixer_bias.defined()) out.push_back(mixer_bias);
  return out;
}

int64_t Weights::parameter_count() const {
  int64_t n = 0;
  for (const auto& t : parameters()) n += t.numel();
  return n;
}

void Weights::validate() const {
  config.validate();
  const int64_t C = config.channels;
  const int k = config.local_kernel;
  if (local.shape() != Shape{C, 1, k, k}) throw ShapeError("dcsa local filter has shape " + shape_str(local.shape()));
  if (branches.size() != config.branches.size()) throw ShapeError("dcsa branch count does not match config");
  for (size_t i = 0; i < branches.size(); ++i) {
    const int s = config.branches[i].kernel;
    if (branches[i].shape() != Shape{C, 1, s, s}) {
      throw ShapeError("dcsa branch " + std::to_string(i) + " has shape " + shape_str(branches[i].shape()));
    }
  }
  if (mixer.shape() != Shape{C, C, 1, 1}) throw ShapeError("dcsa mixer has shape " + shape_str(mixer.shape()));
}

int equivalent_kernel_size(int kernel, int dilation) {
  if (kernel < 1 || dilation < 1) throw std::invalid_argument("kernel and dilation must be >= 1");
  return kernel + (kernel - 1) * (dilation - 1);
}

double param_reduction_rho(std::span<const int> branch_kernels, int h0, int w0, int64_t channels) {
  if (branch_kernels.empty()) throw std::invalid_argument("param_reduction_rho needs at least one kernel");
  if (h0 < 1 || w0 < 1 || channels < 1) throw std::invalid_argument("param_reduction_rho needs positive sizes");
  int64_t numerator = 0;
  for (int k : branch_kernels) {
    if (k < 1) throw std::invalid_argument("kernel sizes must be positive");
    numerator += static_cast<int64_t>(k) * k * channels;
  }
  int64_t denominator = static_cast<int64_t>(h0) * w0 * channels;
  const int64_t g = std::gcd(numerator, denominator);
  numerator /= g;
  denominator /= g;
  return 1.0 - static_cast<double>(numerator) / static_cast<double>(denominator);
}

Tensor attention_map(const Tensor& x, const Weights& w) {
  w.validate();
  if (x.rank() != 4) throw ShapeError("dcsa input must be NCHW, got " + shape_str(x.shape()));
  const int64_t C = w.config.channels;
  if (x.dim(1) != C) {
    throw ShapeError("dcsa input axis 1 has " + std::to_string(x.dim(1)) + " channels, weights expect " +
                     std::to_string(C));
  }
  Tensor u = ops::conv2d(x, w.local, opt(w.local_bias), depthwise_spec(w.config.local_kernel, 1, C));
  Tensor acc = u;
  for (size_t i = 0; i < w.branches.size(); ++i) {
    const auto& b = w.config.branches[i];
    const Tensor* bias = w.branch_biases.empty() ? nullptr : &w.branch_biases[i];
    acc = ops::add(acc, ops::conv2d(u, w.branches[i], bias, depthwise_spec(b.kernel, b.dilation, C)));
  }
  return ops::conv2d(acc, w.mixer, opt(w.mixer_bias), pointwise_spec());
}

Tensor apply(const Tensor& x, const Weights& w) { return ops::mul(attention_map(x, w), x); }

Tensor softmax_attention_reference(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) throw ShapeError("Q, K, V must be [L, d]");
  if (q.dim(1) != k.dim(1)) {
    throw ShapeError("Q axis 1 (" + std::to_string(q.dim(1)) + ") must match K axis 1 (" +
                     std::to_string(k.dim(1)) + ")");
  }
  if (k.dim(0) != v.dim(0)) throw ShapeError("K and V must have the same number of rows");
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
  Tensor scores = ops::scale(ops::matmul(q, ops::transpose(k)), scale);
  return ops::matmul(ops::softmax_rows(scores), v);
}

Extent impulse_receptive_field(const Weights& w) {
  const Config& cfg = w.config;
  cfg.validate();
  // The canvas is large enough for any arrangement of the filters, so the
  // probe never touches the border.
  int64_t reach = cfg.local_kernel / 2;
  for (const auto& b : cfg.branches) reach += static_cast<int64_t>(b.kernel / 2) * b.dilation;
  const int64_t side = 4 * reach + 3;
  Weights ones = Weights::zeros({cfg.channels, cfg.local_kernel, cfg.branches, cfg.equivalent_kernel, false});
  for (Tensor t : ones.parameters()) {
    for (auto& v : t.mutable_data()) v = 1.0;
  }
  Tensor impulse = Tensor::zeros({1, cfg.channels, side, side});
  impulse.mutable_data()[static_cast<size_t>((side / 2) * side + side / 2)] = 1.0;
  NoGradGuard no_grad;
  Tensor att = attention_map(impulse, ones);
  int64_t y0 = side, y1 = -1, x0 = side, x1 = -1;
  const auto d = att.data();
  for (int64_t c = 0; c < cfg.channels; ++c)
    for (int64_t y = 0; y < side; ++y)
      for (int64_t x = 0; x < side; ++x) {
        if (d[static_cast<size_t>((c * side + y) * side + x)] != 0.0) {
          y0 = std::min(y0, y);
          y1 = std::max(y1, y);
          x0 = std::min(x0, x);
          x1 = std::max(x1, x);
        }
      }
  if (y1 < 0) return {0, 0};
  return {y1 - y0 + 1, x1 - x0 + 1};
}

DecompositionReport decomposition_report(const Config& cfg) {
  cfg.validate();
  DecompositionReport r;
  r.channels = cfg.channels;
  r.configured_kernel = cfg.equivalent_kernel;
  const int64_t C = cfg.channels;
  r.rows.push_back({"local", cfg.local_kernel, 1, cfg.local_kernel,
                    static_cast<int64_t>(cfg.local_kernel) * cfg.local_kernel * C});
  static const char* kNames[] = {"SI-Conv", "MD-Conv", "LD-Conv"};
  std::vector<int> kernels;
  for (size_t i = 0; i < cfg.branches.size(); ++i) {
    const auto& b = cfg.branches[i];
    std::string name = cfg.branches.size() == 3 ? kNames[i] : "branch" + std::to_string(i);
    r.rows.push_back({name, b.kernel, b.dilation, equivalent_kernel_size(b.kernel, b.dilation),
                      static_cast<int64_t>(b.kernel) * b.kernel * C});
    kernels.push_back(b.kernel);
  }
  r.rows.push_back({"mixer-1x1", 1, 1, 1, C * C});
  r.rho_configured = param_reduction_rho(kernels, cfg.equivalent_kernel, cfg.equivalent_kernel, C);
  r.rho_21 = param_reduction_rho(kernels, 21, 21, C);
  int64_t extent = cfg.local_kernel - 1;
  int64_t widest = 0;
  for (const auto& b : cfg.branches) widest = std::max<int64_t>(widest, static_cast<int64_t>(b.kernel - 1) * b.dilation);
  r.receptive_field = extent + widest + 1;
  return r;
}

void write_report_text(std::ostream& os, const DecompositionReport& r) {
  os << "DCSA decomposition (C=" << r.channels << ")\n";
  os << std::left << std::setw(11) << "conv" << std::right << std::setw(7) << "kernel" << std::setw(5) << "r"
     << std::setw(5) << "K'" << std::setw(12) << "params" << '\n';
  for (const auto& row : r.rows) {
    os << std::left << std::setw(11) << row.name << std::right << std::setw(7) << row.kernel << std::setw(5)
       << row.dilation << std::setw(5) << row.equivalent << std::setw(12) << row.params << '\n';
  }
  os << std::fixed << std::setprecision(6);
  os << "rho (H0=W0=" << r.configured_kernel << ") = " << r.rho_configured << '\n';
  os << "rho (H0=W0=21) = " << r.rho_21 << "  (the published 81.18% corresponds to a 21x21 reference kernel)\n";
  os << "parallel-branch receptive field = " << r.receptive_field << "x" << r.receptive_field << '\n';
  os.unsetf(std::ios::floatfield);
}

void write_report_csv(std::ostream& os, const DecompositionReport& r) {
  os << "conv,kernel,r,equivalent_kernel,params,rho\n";
  os << std::setprecision(9);
  for (const auto& row : r.rows) {
    os << row.name << ',' << row.kernel << ',' << row.dilation << ',' << row.equivalent << ',' << row.params << ",\n";
  }
  os << "total(H0=" << r.configured_kernel << "),,,,," << r.rho_configured << '\n';
  os << "total(H0=21),,,,," << r.rho_21 << '\n';
}

}  // namespace davit::dcsa
