#include "davit/model.hpp"

#include "davit/ops.hpp"
#include "davit/rng.hpp"

namespace davit {

namespace {

constexpr double kInitStd = 0.02;

ConvSpec conv_spec(int k, int stride) {
  ConvSpec s;
  s.kernel_h = s.kernel_w = k;
  s.stride = stride;
  return s;
}

Tensor conv(const Model& m, const std::string& name, const Tensor& x, int stride = 1) {
  const Tensor& w = m.param(name + ".weight");
  const Tensor& b = m.param(name + ".bias");
  return ops::conv2d(x, w, &b, conv_spec(static_cast<int>(w.dim(2)), stride));
}

Tensor norm(const Model& m, const std::string& name, const Tensor& x) {
  return ops::layer_norm(x, m.param(name + ".weight"), m.param(name + ".bias"));
}

}  // namespace

Model::Model(ModelConfig cfg, std::vector<NamedParameter> params) : config_(std::move(cfg)), params_(std::move(params)) {
  for (size_t i = 0; i < params_.size(); ++i) {
    if (!index_.emplace(params_[i].name, i).second) {
      throw std::invalid_argument("duplicate parameter name " + params_[i].name);
    }
  }
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.value);
  return out;
}

const Tensor& Model::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("model has no parameter " + name);
  return params_[it->second].value;
}

Model Model::clone() const {
  std::vector<NamedParameter> copy;
  copy.reserve(params_.size());
  for (const auto& p : params_) {
    Tensor t = p.value.clone();
    t.set_requires_grad(true);
    copy.push_back({p.name, t});
  }
  return Model(config_, std::move(copy));
}

void Model::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

Model build_model(const ModelConfig& cfg, uint64_t seed) {
  Rng rng(seed);
  std::vector<NamedParameter> params;
  for (const auto& spec : parameter_layout(cfg)) {
    Tensor t = Tensor::zeros(spec.shape, true);
    auto d = t.mutable_data();
    switch (spec.kind) {
      case ParamKind::Filter:
        for (auto& v : d) v = rng.truncated_normal(kInitStd);
        break;
      case ParamKind::NormScale:
        for (auto& v : d) v = 1.0;
        break;
      case ParamKind::Bias:
      case ParamKind::NormShift:
        break;
    }
    params.push_back({spec.name, t});
  }
  return Model(cfg, std::move(params));
}

dcsa::Weights block_dcsa_weights(const Model& m, int stage, int block) {
  const std::string p = "stage" + std::to_string(stage + 1) + ".block" + std::to_string(block) + ".attn.";
  dcsa::Weights w;
  w.config = m.config().stage_dcsa(stage);
  w.local = m.param(p + "local.weight");
  w.local_bias = m.param(p + "local.bias");
  for (size_t i = 0; i < w.config.branches.size(); ++i) {
    w.branches.push_back(m.param(p + "branch" + std::to_string(i) + ".weight"));
    w.branch_biases.push_back(m.param(p + "branch" + std::to_string(i) + ".bias"));
  }
  w.mixer = m.param(p + "mixer.weight");
  w.mixer_bias = m.param(p + "mixer.bias");
  return w;
}

Tensor dcsa_block(const Model& m, int stage, int block, const Tensor& x) {
  const std::string prefix = "stage" + std::to_string(stage + 1) + ".block" + std::to_string(block);
  Tensor h = ops::add(x, dcsa::apply(norm(m, prefix + ".norm1", x), block_dcsa_weights(m, stage, block)));
  Tensor y = conv(m, prefix + ".mlp.fc2", ops::gelu(conv(m, prefix + ".mlp.fc1", norm(m, prefix + ".norm2", h))));
  return ops::add(h, y);
}

FeaturePyramid encode_stages(const Model& m, const Tensor& x) {
  const auto& cfg = m.config();
  if (x.rank() != 4 || x.dim(1) != 3) throw ShapeError("model input must be [N, 3, H, W], got " + shape_str(x.shape()));
  if (x.dim(2) % 32 != 0 || x.dim(3) % 32 != 0) {
    throw ShapeError("input height and width must be multiples of 32, got " + std::to_string(x.dim(2)) + "x" +
                     std::to_string(x.dim(3)));
  }
  FeaturePyramid out;
  Tensor h = x;
  for (int s = 0; s < kNumStages; ++s) {
    const std::string sp = "stage" + std::to_string(s + 1);
    h = norm(m, sp + ".down_norm", conv(m, sp + ".down", h, s == 0 ? 4 : 2));
    for (int b = 0; b < cfg.depths[static_cast<size_t>(s)]; ++b) {
      h = dcsa_block(m, s, b, h);
    }
    out[static_cast<size_t>(s)] = h;
  }
  return out;
}

Tensor decode_head(const Model& m, const FeaturePyramid& f) {
  const auto& cfg = m.config();
  for (int s = 0; s < kNumStages; ++s) {
    const Tensor& t = f[static_cast<size_t>(s)];
    if (!t.defined() || t.rank() != 4 || t.dim(1) != cfg.stage_channels(s)) {
      throw ShapeError("feature " + std::to_string(s + 1) + " must have " + std::to_string(cfg.stage_channels(s)) +
                       " channels");
    }
    if (s > 0) {
      const Tensor& p = f[static_cast<size_t>(s - 1)];
      if (t.dim(0) != p.dim(0) || p.dim(2) != 2 * t.dim(2) || p.dim(3) != 2 * t.dim(3)) {
        throw ShapeError("feature pyramid levels " + std::to_string(s) + " and " + std::to_string(s + 1) +
                         " are not a 2x cascade: " + shape_str(p.shape()) + " vs " + shape_str(t.shape()));
      }
    }
  }
  Tensor acc = conv(m, "head.proj2", f[1]);
  acc = ops::add(acc, ops::bilinear_upsample(conv(m, "head.proj3", f[2]), 2));
  acc = ops::add(acc, ops::bilinear_upsample(conv(m, "head.proj4", f[3]), 4));
  Tensor fused = ops::gelu(norm(m, "head.fuse_norm", conv(m, "head.fuse", acc)));
  return ops::bilinear_upsample(conv(m, "head.classifier", fused), 8);
}

Tensor forward(const Model& m, const Tensor& x) { return decode_head(m, encode_stages(m, x)); }

}  // namespace davit
