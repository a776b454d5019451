#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "davit/dcsa.hpp"
#include "davit/tensor.hpp"

namespace davit {

inline constexpr int kNumStages = 4;

struct ModelConfig {
  std::string name = "custom";
  int64_t base_channels = 32;
  std::array<int, kNumStages> depths{3, 3, 5, 2};
  int num_classes = 5;
  double mlp_ratio = 8.0;
  // `channels` is ignored; each stage uses its own width.
  dcsa::Config dcsa;
  int64_t input_height = 512;
  int64_t input_width = 512;

  static ModelConfig tiny();
  static ModelConfig small();
  static ModelConfig base();
  // "tiny", "small" or "base"; throws std::invalid_argument otherwise.
  static ModelConfig preset(const std::string& name);

  void validate() const;
  int64_t stage_channels(int stage) const;  // C, 2C, 4C, 8C
  int64_t head_width() const;               // 2C
  int64_t mlp_hidden(int64_t channels) const;
  dcsa::Config stage_dcsa(int stage) const;

  // Deterministic `key=value` lines, used inside checkpoints.
  std::string canonical_text() const;
  static ModelConfig parse_canonical(const std::string& text);
  // Equality of everything that determines parameter shapes.
  bool same_architecture(const ModelConfig& other) const;
};

class ModelConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class ParamKind { Filter, Bias, NormScale, NormShift };

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamKind kind;
  std::string component;  // stem, downsample, norm, dcsa, mlp, head
};

/// Names and shapes of every learnable tensor, in storage order.
std::vector<ParamSpec> parameter_layout(const ModelConfig& cfg);

struct NamedParameter {
  std::string name;
  Tensor value;
};

/// DA-VIT segmentation network. Parameters are held by name in layout
/// order; the forward pass looks them up by name.
class Model {
 public:
  Model() = default;
  Model(ModelConfig cfg, std::vector<NamedParameter> params);

  const ModelConfig& config() const { return config_; }
  const std::vector<NamedParameter>& named_parameters() const { return params_; }
  std::vector<Tensor> parameters() const;
  const Tensor& param(const std::string& name) const;
  bool has_param(const std::string& name) const { return index_.count(name) != 0; }

  Model clone() const;
  void zero_grad();

 private:
  ModelConfig config_;
  std::vector<NamedParameter> params_;
  std::unordered_map<std::string, size_t> index_;
};

Model build_model(const ModelConfig& cfg, uint64_t seed);

using FeaturePyramid = std::array<Tensor, kNumStages>;

FeaturePyramid encode_stages(const Model& m, const Tensor& x);
Tensor decode_head(const Model& m, const FeaturePyramid& features);
Tensor forward(const Model& m, const Tensor& x);

// Building blocks, exposed for tests.
Tensor dcsa_block(const Model& m, int stage, int block, const Tensor& x);
dcsa::Weights block_dcsa_weights(const Model& m, int stage, int block);

struct ParamBreakdownRow {
  std::string component;
  int64_t count;
};

struct ParamReport {
  int64_t total = 0;
  std::vector<ParamBreakdownRow> by_component;
  std::array<int64_t, kNumStages> by_stage{};
  int64_t head = 0;
};

int64_t count_params(const Model& m);
int64_t count_params(const ModelConfig& cfg);
ParamReport param_report(const ModelConfig& cfg);
void write_param_report(std::ostream& os, const ModelConfig& cfg, const ParamReport& report);

struct FlopRow {
  std::string component;
  int64_t flops;
};

struct FlopReport {
  int64_t total = 0;
  int64_t conv = 0;
  std::vector<FlopRow> by_component;
};

/// Analytic forward-pass FLOPs for one image of size h x w. Convolutions
/// count 2 per multiply-add; see `flop_methodology()` for the other ops.
FlopReport flop_report(const ModelConfig& cfg, int64_t h, int64_t w);
int64_t count_flops(const ModelConfig& cfg, int64_t h, int64_t w);
int64_t count_flops(const Model& m, int64_t h, int64_t w);
std::string flop_methodology();
void write_flop_report(std::ostream& os, const ModelConfig& cfg, int64_t h, int64_t w, const FlopReport& report);

// Checkpoints.
class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { Io, BadMagic, Truncated, DigestMismatch, VersionMismatch, ConfigMismatch, Malformed };
  CheckpointError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

inline constexpr uint32_t kCheckpointVersion = 1;

std::vector<uint8_t> serialize_checkpoint(const Model& m);
Model deserialize_checkpoint(const std::vector<uint8_t>& bytes, const ModelConfig* expected = nullptr);
void save_checkpoint(const Model& m, const std::filesystem::path& path);
Model load_checkpoint(const std::filesystem::path& path, const ModelConfig* expected = nullptr);

/// Hex SHA-256 of the serialized checkpoint.
std::string model_digest(const Model& m);

}  // namespace davit
