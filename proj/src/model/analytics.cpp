#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "davit/model.hpp"

namespace davit {

namespace {

// Per-element costs for the non-convolution ops.
constexpr int64_t kAddCost = 1;
constexpr int64_t kMulCost = 1;
constexpr int64_t kNormCost = 8;       // mean, variance, normalize, affine
constexpr int64_t kGeluCost = 8;
constexpr int64_t kUpsampleCost = 7;   // 4 multiplies + 3 adds per output

int64_t conv_flops(int64_t k, int64_t cin_per_group, int64_t cout, int64_t oh, int64_t ow) {
  return 2 * k * k * cin_per_group * cout * oh * ow;
}

int64_t ceil_div(int64_t a, int64_t b) { return (a + b - 1) / b; }

class Tally {
 public:
  void add(const std::string& component, int64_t flops, bool is_conv = false) {
    if (!totals_.count(component)) order_.push_back(component);
    totals_[component] += flops;
    if (is_conv) conv_ += flops;
  }

  FlopReport finish() const {
    FlopReport r;
    for (const auto& c : order_) {
      r.by_component.push_back({c, totals_.at(c)});
      r.total += totals_.at(c);
    }
    r.conv = conv_;
    return r;
  }

 private:
  std::vector<std::string> order_;
  std::map<std::string, int64_t> totals_;
  int64_t conv_ = 0;
};

std::string millions(int64_t n) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3) << static_cast<double>(n) / 1e6 << "M";
  return os.str();
}

}  // namespace

int64_t count_params(const Model& m) {
  int64_t n = 0;
  for (const auto& p : m.named_parameters()) n += p.value.numel();
  return n;
}

ParamReport param_report(const ModelConfig& cfg) {
  ParamReport r;
  std::map<std::string, int64_t> totals;
  std::vector<std::string> order;
  for (const auto& spec : parameter_layout(cfg)) {
    const int64_t n = shape_numel(spec.shape);
    if (!totals.count(spec.component)) order.push_back(spec.component);
    totals[spec.component] += n;
    r.total += n;
    if (spec.name.rfind("stage", 0) == 0) r.by_stage[static_cast<size_t>(spec.name[5] - '1')] += n;
    else r.head += n;
  }
  for (const auto& c : order) r.by_component.push_back({c, totals[c]});
  return r;
}

int64_t count_params(const ModelConfig& cfg) { return param_report(cfg).total; }

void write_param_report(std::ostream& os, const ModelConfig& cfg, const ParamReport& r) {
  os << "model " << cfg.name << ": C=" << cfg.base_channels << " depths=" << cfg.depths[0] << ',' << cfg.depths[1]
     << ',' << cfg.depths[2] << ',' << cfg.depths[3] << " mlp_ratio=" << cfg.mlp_ratio
     << " classes=" << cfg.num_classes << '\n';
  os << "  parameters: " << r.total << " (" << millions(r.total) << ")\n";
  os << "  by component:\n";
  for (const auto& row : r.by_component) {
    os << "    " << std::left << std::setw(12) << row.component << std::right << std::setw(12) << row.count << "  "
       << std::fixed << std::setprecision(1) << 100.0 * static_cast<double>(row.count) / static_cast<double>(r.total)
       << "%\n";
  }
  os << "  by stage:\n";
  for (int s = 0; s < kNumStages; ++s) {
    os << "    stage" << s + 1 << " (" << cfg.stage_channels(s) << " ch, " << cfg.depths[static_cast<size_t>(s)]
       << " blocks)" << std::setw(12) << r.by_stage[static_cast<size_t>(s)] << '\n';
  }
  os << "    head" << std::setw(12) << r.head << '\n';
  os.unsetf(std::ios::floatfield);
}

FlopReport flop_report(const ModelConfig& cfg, int64_t h, int64_t w) {
  cfg.validate();
  if (h < 1 || w < 1) throw std::invalid_argument("flop_report needs a positive input size");
  Tally t;
  int64_t cin = 3;
  int64_t oh = h, ow = w;
  std::array<std::pair<int64_t, int64_t>, kNumStages> sizes{};
  for (int s = 0; s < kNumStages; ++s) {
    const int64_t C = cfg.stage_channels(s);
    const int stride = s == 0 ? 4 : 2;
    const int64_t k = s == 0 ? 7 : 3;
    oh = ceil_div(oh, stride);
    ow = ceil_div(ow, stride);
    sizes[static_cast<size_t>(s)] = {oh, ow};
    const int64_t hw = oh * ow;
    t.add(s == 0 ? "stem" : "downsample", conv_flops(k, cin, C, oh, ow), true);
    t.add("norm", kNormCost * C * hw);
    const dcsa::Config dc = cfg.stage_dcsa(s);
    const int64_t hidden = cfg.mlp_hidden(C);
    for (int b = 0; b < cfg.depths[static_cast<size_t>(s)]; ++b) {
      t.add("norm", 2 * kNormCost * C * hw);
      t.add("dcsa", conv_flops(dc.local_kernel, 1, C, oh, ow), true);
      for (const auto& br : dc.branches) t.add("dcsa", conv_flops(br.kernel, 1, C, oh, ow), true);
      t.add("dcsa", kAddCost * static_cast<int64_t>(dc.branches.size()) * C * hw);
      t.add("dcsa", conv_flops(1, C, C, oh, ow), true);
      t.add("dcsa", kMulCost * C * hw);
      t.add("mlp", conv_flops(1, C, hidden, oh, ow), true);
      t.add("mlp", kGeluCost * hidden * hw);
      t.add("mlp", conv_flops(1, hidden, C, oh, ow), true);
      t.add("residual", 2 * kAddCost * C * hw);
    }
    cin = C;
  }
  const int64_t D = cfg.head_width();
  const auto [h8, w8] = sizes[1];
  const int64_t hw8 = h8 * w8;
  for (int s = 1; s < kNumStages; ++s) {
    const auto [sh, sw] = sizes[static_cast<size_t>(s)];
    t.add("head", conv_flops(1, cfg.stage_channels(s), D, sh, sw), true);
    if (s > 1) t.add("head", kUpsampleCost * D * hw8);
  }
  t.add("head", 2 * kAddCost * D * hw8);
  t.add("head", conv_flops(1, D, D, h8, w8), true);
  t.add("head", (kNormCost + kGeluCost) * D * hw8);
  t.add("head", conv_flops(1, D, cfg.num_classes, h8, w8), true);
  t.add("head", kUpsampleCost * cfg.num_classes * (8 * h8) * (8 * w8));
  return t.finish();
}

int64_t count_flops(const ModelConfig& cfg, int64_t h, int64_t w) { return flop_report(cfg, h, w).total; }

int64_t count_flops(const Model& m, int64_t h, int64_t w) { return count_flops(m.config(), h, w); }

std::string flop_methodology() {
  std::ostringstream os;
  os << "convolution: 2 * kh * kw * (Cin/groups) * Cout * H' * W' (one multiply and one add per tap, "
        "padding taps included, bias adds excluded)\n"
     << "elementwise add / multiply: " << kAddCost << " per element\n"
     << "layer norm: " << kNormCost << " per element\n"
     << "gelu: " << kGeluCost << " per element\n"
     << "bilinear upsample: " << kUpsampleCost << " per output element\n"
     << "batch size 1, forward pass only\n";
  return os.str();
}

void write_flop_report(std::ostream& os, const ModelConfig& cfg, int64_t h, int64_t w, const FlopReport& r) {
  os << "model " << cfg.name << " at " << h << "x" << w << ": " << std::fixed << std::setprecision(3)
     << static_cast<double>(r.total) / 1e9 << " GFLOPs (" << r.total << ")\n";
  os << "  convolutions: " << static_cast<double>(r.conv) / 1e9 << " GFLOPs ("
     << static_cast<double>(r.conv) / 2e9 << " G multiply-adds)\n";
  for (const auto& row : r.by_component) {
    os << "    " << std::left << std::setw(12) << row.component << std::right << std::setw(16) << row.flops << '\n';
  }
  os.unsetf(std::ios::floatfield);
  os << "methodology:\n" << flop_methodology();
}

}  // namespace davit
