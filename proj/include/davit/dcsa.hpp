#pragma once

#include <cstdint>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "davit/rng.hpp"
#include "davit/tensor.hpp"

namespace davit::dcsa {

struct Branch {
  int kernel = 3;
  int dilation = 1;

  bool operator==(const Branch&) const = default;
};

/// Kernel-decomposition plan for dilated convolutional attention.
///
/// The attention map is
///   u   = depthwise_local(x)
///   Att = pointwise_mixer(u + sum_b depthwise_dilated_b(u))
/// with every branch reading `u` in parallel, and the output is Att * x.
struct Config {
  int64_t channels = 1;
  int local_kernel = 5;
  std::vector<Branch> branches{{3, 1}, {5, 2}, {7, 3}};
  // Side of the monolithic kernel the decomposition is compared against
  // when computing the parameter reduction rate.
  int equivalent_kernel = 19;
  bool bias = false;

  void validate() const;
  bool operator==(const Config&) const = default;
};

/// Learned filters. Bias tensors are undefined unless `Config::bias`.
struct Weights {
  Config config;
  Tensor local;                  // [C, 1, k, k]
  std::vector<Tensor> branches;  // [C, 1, s, s] each
  Tensor mixer;                  // [C, C, 1, 1]
  Tensor local_bias;
  std::vector<Tensor> branch_biases;
  Tensor mixer_bias;

  static Weights zeros(const Config& cfg);
  static Weights random(const Config& cfg, Rng& rng, double std = 0.02);
  // Local filter is a centre tap, branches are zero and the mixer is the
  // identity, so the attention map reproduces its input.
  static Weights passthrough(const Config& cfg);
  // All filters zero and mixer bias 1 (bias is forced on): Att == 1.
  static Weights unit_attention(const Config& cfg);

  std::vector<Tensor> parameters() const;
  int64_t parameter_count() const;
  void validate() const;
};

/// K + (K - 1)(r - 1).
int equivalent_kernel_size(int kernel, int dilation);

/// 1 - (sum_m K_m^2 C) / (H0 W0 C), with C cancelled exactly.
double param_reduction_rho(std::span<const int> branch_kernels, int h0, int w0, int64_t channels = 1);

Tensor attention_map(const Tensor& x, const Weights& w);
Tensor apply(const Tensor& x, const Weights& w);

/// softmax(Q K^T / sqrt(d_k)) V for [L, d] inputs. Baseline only.
Tensor softmax_attention_reference(const Tensor& q, const Tensor& k, const Tensor& v);

struct Extent {
  int64_t height = 0;
  int64_t width = 0;
};

/// Bounding box of the nonzero response of `attention_map` to a centred
/// impulse, using all-ones filters shaped like `w`.
Extent impulse_receptive_field(const Weights& w);

struct DecompositionRow {
  std::string name;
  int kernel;
  int dilation;
  int equivalent;
  int64_t params;
};

struct DecompositionReport {
  std::vector<DecompositionRow> rows;
  int64_t channels;
  int configured_kernel;
  double rho_configured;
  double rho_21;
  int64_t receptive_field;
};

DecompositionReport decomposition_report(const Config& cfg);
void write_report_text(std::ostream& os, const DecompositionReport& report);
void write_report_csv(std::ostream& os, const DecompositionReport& report);

}  // namespace davit::dcsa
