#include "davit/gradient_suite.hpp"

#include <cmath>
#include <functional>
#include <iomanip>
#include <ostream>

#include "davit/dcsa.hpp"
#include "davit/gradcheck.hpp"
#include "davit/model.hpp"
#include "davit/ops.hpp"
#include "davit/rng.hpp"

namespace davit {

namespace {

using Forward = std::function<Tensor()>;

class Suite {
 public:
  explicit Suite(const GradientSuiteOptions& o) : opt_(o), rng_(o.seed) {}

  Tensor random(Shape shape, double lo = -1.0, double hi = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape), true);
    for (auto& v : t.mutable_data()) v = rng_.uniform(lo, hi);
    return t;
  }

  // Checks d/d(input) of sum(f() * R) for a fixed random R, or of f() itself
  // when it is already scalar.
  void check(const std::string& op, const Forward& f, std::vector<std::pair<std::string, Tensor>> inputs) {
    Tensor probe;
    {
      NoGradGuard g;
      probe = f();
    }
    Tensor weights;
    if (probe.numel() != 1) {
      weights = random(probe.shape());
      weights.set_requires_grad(false);
    }
    auto loss = [&](const Tensor&) { return weights.defined() ? ops::sum(ops::mul(f(), weights)) : f(); };
    for (auto& [name, t] : inputs) {
      GradCheckOptions go;
      go.max_coordinates = opt_.max_coordinates;
      go.step = opt_.step;
      go.seed = opt_.seed + results_.size();
      auto r = finite_difference_check(loss, t, go);
      results_.push_back({op, name, r.max_relative_error, r.coordinates_checked, r.max_relative_error < opt_.tolerance});
    }
  }

  std::vector<GradientCaseResult> take() { return std::move(results_); }

 private:
  GradientSuiteOptions opt_;
  Rng rng_;
  std::vector<GradientCaseResult> results_;
};

void conv_cases(Suite& s) {
  struct Case {
    const char* label;
    int k, r, stride, groups, cin, cout;
    bool bias;
    Padding pad;
  };
  const Case cases[] = {
      {"conv2d k3", 3, 1, 1, 1, 2, 3, false, Padding::same()},
      {"conv2d k3 r2 groups2 bias", 3, 2, 1, 2, 4, 2, true, Padding::same()},
      {"conv2d k5 r3 stride2 bias", 5, 3, 2, 1, 2, 2, true, Padding::same()},
      {"conv2d k2 explicit pad", 2, 1, 1, 1, 2, 2, true, Padding::explicit_pad(1)},
      {"conv2d k7 stride4", 7, 1, 4, 1, 3, 2, true, Padding::same()},
      {"conv2d depthwise k7 r3", 7, 3, 1, 3, 3, 3, false, Padding::same()},
  };
  for (const auto& c : cases) {
    ConvSpec spec;
    spec.kernel_h = spec.kernel_w = c.k;
    spec.dilation = c.r;
    spec.stride = c.stride;
    spec.groups = c.groups;
    spec.padding = c.pad;
    Tensor x = s.random({2, c.cin, 9, 8});
    Tensor w = s.random({c.cout, c.cin / c.groups, c.k, c.k});
    Tensor b = s.random({c.cout});
    std::vector<std::pair<std::string, Tensor>> in{{"x", x}, {"weight", w}};
    if (c.bias) in.emplace_back("bias", b);
    s.check(c.label, [=] { return ops::conv2d(x, w, c.bias ? &b : nullptr, spec); }, in);
  }
}

void elementwise_cases(Suite& s) {
  Tensor a = s.random({2, 3, 4, 5}), b = s.random({3, 1, 1});
  s.check("add broadcast", [=] { return ops::add(a, b); }, {{"a", a}, {"b", b}});
  Tensor c = s.random({2, 3}), d = s.random({3});
  s.check("sub broadcast", [=] { return ops::sub(c, d); }, {{"a", c}, {"b", d}});
  Tensor e = s.random({2, 1, 4}), f = s.random({3, 1});
  s.check("mul broadcast", [=] { return ops::mul(e, f); }, {{"a", e}, {"b", f}});
  Tensor g = s.random({3, 4});
  s.check("add scalar", [=] { return ops::add(g, 0.7); }, {{"x", g}});
  s.check("scale", [=] { return ops::scale(g, -1.3); }, {{"x", g}});
  s.check("sum", [=] { return ops::sum(ops::mul(g, g)); }, {{"x", g}});
  s.check("mean", [=] { return ops::mean(ops::mul(g, g)); }, {{"x", g}});
}

void layer_cases(Suite& s) {
  Tensor x = s.random({2, 5, 3, 4}), gamma = s.random({5}, 0.5, 1.5), beta = s.random({5});
  s.check("layer_norm", [=] { return ops::layer_norm(x, gamma, beta); }, {{"x", x}, {"gamma", gamma}, {"beta", beta}});
  Tensor y = s.random({2, 3, 4, 4}, -3.0, 3.0);
  s.check("gelu", [=] { return ops::gelu(y); }, {{"x", y}});
  Tensor u = s.random({1, 2, 3, 5});
  s.check("bilinear_upsample x2", [=] { return ops::bilinear_upsample(u, 2); }, {{"x", u}});
  s.check("bilinear_upsample x8", [=] { return ops::bilinear_upsample(u, 8); }, {{"x", u}});

  Tensor logits = s.random({2, 5, 4, 3}, -2.0, 2.0);
  IndexMap targets(2, 4, 3);
  for (size_t i = 0; i < targets.values.size(); ++i) targets.values[i] = i % 7 == 3 ? 255 : static_cast<int32_t>(i % 5);
  s.check("softmax_cross_entropy", [=] { return ops::softmax_cross_entropy(logits, targets); }, {{"logits", logits}});

  Tensor m1 = s.random({3, 4}), m2 = s.random({4, 2});
  s.check("matmul", [=] { return ops::matmul(m1, m2); }, {{"a", m1}, {"b", m2}});
  s.check("transpose", [=] { return ops::transpose(m1); }, {{"x", m1}});
  s.check("softmax_rows", [=] { return ops::softmax_rows(m1); }, {{"x", m1}});
}

void dcsa_cases(Suite& s, uint64_t seed) {
  dcsa::Config cfg;
  cfg.channels = 3;
  cfg.bias = true;
  Rng rng(seed + 101);
  auto w = dcsa::Weights::random(cfg, rng, 0.3);
  for (Tensor b : {w.local_bias, w.mixer_bias})
    for (auto& v : b.mutable_data()) v = rng.uniform(-0.5, 0.5);
  Tensor x = s.random({1, 3, 9, 9});
  std::vector<std::pair<std::string, Tensor>> in{{"x", x}, {"local", w.local}, {"mixer", w.mixer},
                                                 {"mixer_bias", w.mixer_bias}};
  for (size_t i = 0; i < w.branches.size(); ++i) in.emplace_back("branch" + std::to_string(i), w.branches[i]);
  s.check("dcsa apply", [=] { return dcsa::apply(x, w); }, in);

  Tensor q = s.random({4, 3}), k = s.random({5, 3}), v = s.random({5, 2});
  s.check("softmax attention", [=] { return dcsa::softmax_attention_reference(q, k, v); }, {{"q", q}, {"k", k}, {"v", v}});
}

void model_case(Suite& s, uint64_t seed) {
  ModelConfig cfg;
  cfg.name = "gradcheck";
  cfg.base_channels = 4;
  cfg.depths = {1, 1, 1, 1};
  Model m = build_model(cfg, seed + 7);
  Rng rng(seed + 8);
  // Unit-scale activations keep finite-difference roundoff well below the
  // gradients being checked.
  for (auto p : m.named_parameters()) {
    const bool is_bias = p.name.size() >= 5 && p.name.compare(p.name.size() - 5, 5, ".bias") == 0;
    if (is_bias) {
      for (auto& v : p.value.mutable_data()) v = rng.uniform(-0.1, 0.1);
    } else if (p.value.rank() == 4) {
      const double std = 1.0 / std::sqrt(static_cast<double>(p.value.numel() / p.value.dim(0)));
      for (auto& v : p.value.mutable_data()) v = rng.normal() * std;
    }
  }
  Tensor x = s.random({1, 3, 32, 32});
  std::vector<std::pair<std::string, Tensor>> in{{"x", x}};
  for (const char* name : {"stage1.down.weight", "stage1.block0.norm1.weight", "stage2.block0.attn.local.weight",
                           "stage3.block0.attn.mixer.bias", "stage2.block0.attn.branch1.weight",
                           "stage4.block0.mlp.fc1.weight", "head.proj3.weight", "head.classifier.bias"}) {
    in.emplace_back(name, m.param(name));
  }
  s.check("model forward", [m, x] { return forward(m, x); }, in);
}

}  // namespace

std::vector<GradientCaseResult> run_gradient_suite(const GradientSuiteOptions& options) {
  Suite s(options);
  conv_cases(s);
  elementwise_cases(s);
  layer_cases(s);
  dcsa_cases(s, options.seed);
  if (options.include_model) model_case(s, options.seed);
  return s.take();
}

void write_gradient_suite(std::ostream& os, const std::vector<GradientCaseResult>& results) {
  const auto flags = os.flags();
  for (const auto& r : results) {
    os << (r.passed ? "ok    " : "FAIL  ") << std::left << std::setw(28) << r.op << std::setw(36) << r.input
       << std::right << std::scientific << std::setprecision(2) << r.max_relative_error << "  (" << r.coordinates
       << " coords)\n";
  }
  os.flags(flags);
}

}  // namespace davit
