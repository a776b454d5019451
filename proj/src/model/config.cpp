#include <cmath>
#include <sstream>

#include "davit/model.hpp"

namespace davit {

namespace {

std::string stage_prefix(int s) { return "stage" + std::to_string(s + 1); }

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string item;
  std::istringstream is(s);
  while (std::getline(is, item, sep)) out.push_back(trim(item));
  return out;
}

void add_conv(std::vector<ParamSpec>& out, const std::string& name, Shape w, const std::string& component) {
  const int64_t cout = w[0];
  out.push_back({name + ".weight", std::move(w), ParamKind::Filter, component});
  out.push_back({name + ".bias", {cout}, ParamKind::Bias, component});
}

void add_norm(std::vector<ParamSpec>& out, const std::string& name, int64_t channels) {
  out.push_back({name + ".weight", {channels}, ParamKind::NormScale, "norm"});
  out.push_back({name + ".bias", {channels}, ParamKind::NormShift, "norm"});
}

}  // namespace

ModelConfig ModelConfig::tiny() {
  ModelConfig c;
  c.name = "tiny";
  c.base_channels = 32;
  c.depths = {3, 3, 5, 2};
  return c;
}

ModelConfig ModelConfig::small() {
  ModelConfig c;
  c.name = "small";
  c.base_channels = 64;
  c.depths = {2, 2, 4, 2};
  return c;
}

ModelConfig ModelConfig::base() {
  ModelConfig c;
  c.name = "base";
  c.base_channels = 64;
  c.depths = {3, 3, 12, 3};
  return c;
}

ModelConfig ModelConfig::preset(const std::string& name) {
  if (name == "tiny") return tiny();
  if (name == "small") return small();
  if (name == "base") return base();
  throw ModelConfigError("unknown model scale '" + name + "' (expected tiny, small or base)");
}

void ModelConfig::validate() const {
  if (base_channels < 1) throw ModelConfigError("base_channels must be >= 1");
  for (int d : depths) {
    if (d < 0) throw ModelConfigError("stage depths must be >= 0");
  }
  if (num_classes < 1) throw ModelConfigError("num_classes must be >= 1");
  if (!(mlp_ratio > 0.0) || !std::isfinite(mlp_ratio)) throw ModelConfigError("mlp_ratio must be positive");
  if (input_height < 1 || input_width < 1) throw ModelConfigError("input size must be positive");
  try {
    stage_dcsa(0).validate();
  } catch (const std::invalid_argument& e) {
    throw ModelConfigError(e.what());
  }
}

int64_t ModelConfig::stage_channels(int stage) const { return base_channels << stage; }

int64_t ModelConfig::head_width() const { return 2 * base_channels; }

int64_t ModelConfig::mlp_hidden(int64_t channels) const {
  return std::max<int64_t>(1, std::llround(static_cast<double>(channels) * mlp_ratio));
}

dcsa::Config ModelConfig::stage_dcsa(int stage) const {
  dcsa::Config c = dcsa;
  c.channels = stage_channels(stage);
  c.bias = true;
  return c;
}

std::string ModelConfig::canonical_text() const {
  std::ostringstream os;
  os.precision(17);
  os << "name=" << name << '\n';
  os << "base_channels=" << base_channels << '\n';
  os << "depths=" << depths[0] << ',' << depths[1] << ',' << depths[2] << ',' << depths[3] << '\n';
  os << "num_classes=" << num_classes << '\n';
  os << "mlp_ratio=" << mlp_ratio << '\n';
  os << "dcsa.local_kernel=" << dcsa.local_kernel << '\n';
  os << "dcsa.branches=";
  for (size_t i = 0; i < dcsa.branches.size(); ++i) {
    if (i) os << ',';
    os << dcsa.branches[i].kernel << ':' << dcsa.branches[i].dilation;
  }
  os << '\n';
  os << "dcsa.equivalent_kernel=" << dcsa.equivalent_kernel << '\n';
  os << "input=" << input_height << 'x' << input_width << '\n';
  return os.str();
}

ModelConfig ModelConfig::parse_canonical(const std::string& text) {
  ModelConfig c;
  std::istringstream is(text);
  std::string line;
  try {
    while (std::getline(is, line)) {
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw ModelConfigError("config line without '=': " + line);
      const std::string key = line.substr(0, eq);
      const std::string value = line.substr(eq + 1);
      if (key == "name") {
        c.name = value;
      } else if (key == "base_channels") {
        c.base_channels = std::stoll(value);
      } else if (key == "depths") {
        auto parts = split(value, ',');
        if (parts.size() != kNumStages) throw ModelConfigError("depths needs 4 entries");
        for (int i = 0; i < kNumStages; ++i) c.depths[static_cast<size_t>(i)] = std::stoi(parts[static_cast<size_t>(i)]);
      } else if (key == "num_classes") {
        c.num_classes = std::stoi(value);
      } else if (key == "mlp_ratio") {
        c.mlp_ratio = std::stod(value);
      } else if (key == "dcsa.local_kernel") {
        c.dcsa.local_kernel = std::stoi(value);
      } else if (key == "dcsa.branches") {
        c.dcsa.branches.clear();
        for (const auto& item : split(value, ',')) {
          const auto colon = item.find(':');
          if (colon == std::string::npos) throw ModelConfigError("branch must be kernel:dilation, got " + item);
          c.dcsa.branches.push_back({std::stoi(item.substr(0, colon)), std::stoi(item.substr(colon + 1))});
        }
      } else if (key == "dcsa.equivalent_kernel") {
        c.dcsa.equivalent_kernel = std::stoi(value);
      } else if (key == "input") {
        const auto x = value.find('x');
        if (x == std::string::npos) throw ModelConfigError("input must be HxW");
        c.input_height = std::stoll(value.substr(0, x));
        c.input_width = std::stoll(value.substr(x + 1));
      } else {
        throw ModelConfigError("unknown config key '" + key + "'");
      }
    }
  } catch (const std::logic_error& e) {
    if (dynamic_cast<const ModelConfigError*>(&e)) throw;
    throw ModelConfigError("malformed config value in line: " + line);
  }
  c.validate();
  return c;
}

bool ModelConfig::same_architecture(const ModelConfig& o) const {
  return base_channels == o.base_channels && depths == o.depths && num_classes == o.num_classes &&
         mlp_ratio == o.mlp_ratio && dcsa.local_kernel == o.dcsa.local_kernel && dcsa.branches == o.dcsa.branches;
}

std::vector<ParamSpec> parameter_layout(const ModelConfig& cfg) {
  cfg.validate();
  std::vector<ParamSpec> out;
  int64_t prev = 3;
  for (int s = 0; s < kNumStages; ++s) {
    const std::string sp = stage_prefix(s);
    const int64_t C = cfg.stage_channels(s);
    if (s == 0) add_conv(out, sp + ".down", {C, prev, 7, 7}, "stem");
    else add_conv(out, sp + ".down", {C, prev, 3, 3}, "downsample");
    add_norm(out, sp + ".down_norm", C);
    const dcsa::Config dc = cfg.stage_dcsa(s);
    const int64_t hidden = cfg.mlp_hidden(C);
    for (int b = 0; b < cfg.depths[static_cast<size_t>(s)]; ++b) {
      const std::string bp = sp + ".block" + std::to_string(b);
      add_norm(out, bp + ".norm1", C);
      add_conv(out, bp + ".attn.local", {C, 1, dc.local_kernel, dc.local_kernel}, "dcsa");
      for (size_t i = 0; i < dc.branches.size(); ++i) {
        const int k = dc.branches[i].kernel;
        add_conv(out, bp + ".attn.branch" + std::to_string(i), {C, 1, k, k}, "dcsa");
      }
      add_conv(out, bp + ".attn.mixer", {C, C, 1, 1}, "dcsa");
      add_norm(out, bp + ".norm2", C);
      add_conv(out, bp + ".mlp.fc1", {hidden, C, 1, 1}, "mlp");
      add_conv(out, bp + ".mlp.fc2", {C, hidden, 1, 1}, "mlp");
    }
    prev = C;
  }
  const int64_t D = cfg.head_width();
  for (int s = 1; s < kNumStages; ++s) {
    add_conv(out, "head.proj" + std::to_string(s + 1), {D, cfg.stage_channels(s), 1, 1}, "head");
  }
  add_conv(out, "head.fuse", {D, D, 1, 1}, "head");
  out.push_back({"head.fuse_norm.weight", {D}, ParamKind::NormScale, "head"});
  out.push_back({"head.fuse_norm.bias", {D}, ParamKind::NormShift, "head"});
  add_conv(out, "head.classifier", {cfg.num_classes, D, 1, 1}, "head");
  return out;
}

}  // namespace davit
