#pragma once

#include <atomic>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "davit/datapipe.hpp"
#include "davit/model.hpp"
#include "davit/ops.hpp"

namespace davit {

// ---- Metrics ---------------------------------------------------------------

/// counts(i, j) = pixels of true class i predicted as class j.
struct ConfusionMatrix {
  int classes = 0;
  std::vector<int64_t> counts;

  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int k) : classes(k), counts(static_cast<size_t>(k * k), 0) {}
  int64_t& at(int i, int j) { return counts[static_cast<size_t>(i * classes + j)]; }
  int64_t at(int i, int j) const { return counts[static_cast<size_t>(i * classes + j)]; }
  int64_t total() const;
  void merge(const ConfusionMatrix& other);
  // Each non-empty row divided by its sum; empty rows stay zero.
  std::vector<double> row_normalized() const;
};

ConfusionMatrix confusion_matrix(const IndexMap& pred, const IndexMap& gt, int classes, int ignore_index = kIgnoreLabel);
void accumulate_confusion(ConfusionMatrix& cm, const IndexMap& pred, const IndexMap& gt, int ignore_index = kIgnoreLabel);

class EmptyConfusionError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

double pixel_accuracy(const ConfusionMatrix& cm);

enum class IouMode {
  ExcludeEmpty,  // classes absent from prediction and ground truth are skipped (default)
  Strict,        // always divide by the class count; absent classes count as 0
};

struct IouResult {
  double miou = 0.0;
  // Empty-union classes hold std::nullopt.
  std::vector<std::optional<double>> per_class;
};

IouResult mean_iou(const ConfusionMatrix& cm, IouMode mode = IouMode::ExcludeEmpty);

struct Metrics {
  ConfusionMatrix confusion;
  double pa = 0.0;
  double miou = 0.0;
  std::vector<std::optional<double>> per_class_iou;

  static Metrics from_confusion(const ConfusionMatrix& cm, IouMode mode = IouMode::ExcludeEmpty);
};

// ---- Training --------------------------------------------------------------

struct TrainConfig {
  int epochs = 300;
  int batch_size = 8;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  uint64_t seed = 0;
  // Evaluate on the held-out set every N epochs (0: never).
  int eval_interval = 0;
  // Stop after this many optimizer steps (0: no cap).
  int64_t max_iterations = 0;
  // Disabled means samples are used as stored.
  std::optional<AugmentConfig> augment;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;
  int64_t iterations = 0;  // cumulative
  double loss = 0.0;       // mean over the epoch's batches
  double pa = 0.0;         // from the epoch's forward passes
  double miou = 0.0;
  double seconds = 0.0;
  std::optional<double> eval_pa;
  std::optional<double> eval_miou;
};

struct RunHistory {
  std::vector<EpochRecord> epochs;
};

struct TrainHooks {
  std::function<void(int64_t iteration, double loss)> on_iteration;
  std::function<void(const EpochRecord&)> on_epoch;
  // Polled between iterations.
  const std::atomic<bool>* cancel = nullptr;
  // Used when eval_interval > 0.
  const std::vector<SampleRecord>* eval_data = nullptr;
};

struct TrainResult {
  Model model;
  RunHistory history;
  bool cancelled = false;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Trains a copy of `init`; `init` itself is not modified.
TrainResult train(const Model& init, const std::vector<SampleRecord>& data, const TrainConfig& cfg,
                  const TrainHooks& hooks = {});

// Optimizer steps a run over `samples` sources will take.
int64_t planned_iterations(size_t samples, const TrainConfig& cfg);

IndexMap predict(const Model& m, const Image& image);
Metrics evaluate(const Model& m, const std::vector<SampleRecord>& data, IouMode mode = IouMode::ExcludeEmpty);

struct CrossValidationResult {
  FoldPlan plan;
  std::vector<Metrics> folds;
  double mean_pa = 0.0;
  double mean_miou = 0.0;
};

class FoldError : public std::runtime_error {
 public:
  FoldError(int fold, const std::string& what) : std::runtime_error(what), fold_(fold) {}
  int fold() const { return fold_; }

 private:
  int fold_;
};

CrossValidationResult cross_validate(const std::vector<SampleRecord>& data, const ModelConfig& model_cfg,
                                     const TrainConfig& train_cfg, uint64_t split_seed,
                                     const std::function<void(int fold, const EpochRecord&)>& on_epoch = {});

// ---- Reporting -------------------------------------------------------------

std::string epoch_json(const EpochRecord& rec);
std::string metrics_json(const Metrics& m);
void write_history_jsonl(std::ostream& os, const RunHistory& history);
void write_confusion_table(std::ostream& os, const ConfusionMatrix& cm);

}  // namespace davit
