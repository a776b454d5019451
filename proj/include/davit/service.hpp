#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "davit/datapipe.hpp"
#include "davit/model.hpp"
#include "davit/trainer.hpp"

namespace davit::loop {

enum class PredictionStatus { PendingReview, Qualified, Unqualified, Enrolled };

std::string to_string(PredictionStatus s);
// Throws ServiceError(BadRequest) for unknown names.
PredictionStatus parse_status(const std::string& s);

struct PredictionRecord {
  std::string id;
  std::string terminal_id;
  std::string model_digest;
  PredictionStatus status = PredictionStatus::PendingReview;
  int64_t height = 0;
  int64_t width = 0;
  int64_t created_ms = 0;
  int64_t updated_ms = 0;
  std::string reviewer;
  std::string sample_id;  // set once enrolled
};

enum class Decision { Qualified, Unqualified };

struct Verdict {
  std::string prediction_id;
  Decision decision = Decision::Qualified;
  std::optional<Mask> corrected_mask;
  std::string reviewer;
};

enum class TrainingPhase { Idle, Training, Completed, Failed };

std::string to_string(TrainingPhase p);

struct TrainingStatus {
  TrainingPhase phase = TrainingPhase::Idle;
  double progress = 0.0;  // in [0, 1], non-decreasing within a run
  int64_t iteration = 0;
  int64_t total_iterations = 0;
  int epoch = 0;
  double last_loss = 0.0;
  int64_t dataset_version = 0;  // pinned at start
  int64_t samples = 0;
  std::string digest;  // completed runs only
  std::string error;   // failed runs only
};

struct DatasetStats {
  int64_t version = 0;
  int64_t size = 0;       // enrolled samples
  int64_t base_size = 0;  // samples loaded from the base directory
};

struct DeploymentState {
  std::string backbone_digest;
  TrainingStatus training;
  DatasetStats dataset;
};

struct ModelInfo {
  std::string digest;
  ModelConfig config;
  int64_t params = 0;
  int64_t flops = 0;
};

class ServiceError : public std::runtime_error {
 public:
  enum class Kind { BadRequest, NotFound, Conflict };
  ServiceError(Kind kind, std::string code, const std::string& what)
      : std::runtime_error(what), kind_(kind), code_(std::move(code)) {}
  Kind kind() const { return kind_; }
  const std::string& code() const { return code_; }

 private:
  Kind kind_;
  std::string code_;
};

struct ServiceOptions {
  std::filesystem::path root;
  // Used to build the seed backbone on first start; later starts read the
  // persisted configuration.
  ModelConfig model = ModelConfig::tiny();
  uint64_t seed = 0;
  // Optional `images/` + `masks/` directory added in front of enrolled samples.
  std::filesystem::path base_data;
};

struct ParallelTrainRequest {
  TrainConfig train;
  bool cold_start = false;        // fresh initialization instead of backbone weights
  bool new_samples_only = false;  // skip the base dataset
};

struct InferenceResult {
  Mask mask;
  std::string digest;
};

/// Serving process state: a backbone answering requests, a record log, the
/// enrolled dataset, and at most one parallel training run.
class LoopService {
 public:
  explicit LoopService(ServiceOptions options);
  ~LoopService();
  LoopService(const LoopService&) = delete;
  LoopService& operator=(const LoopService&) = delete;

  // Inputs whose sides are not multiples of 32 are mirror-padded for the
  // forward pass; the mask is cropped back to the input size.
  InferenceResult infer(const Image& image) const;
  PredictionRecord ingest_image(const std::string& terminal_id, const Image& image);
  PredictionRecord submit_verdict(const Verdict& v);

  PredictionRecord prediction(const std::string& id) const;
  std::vector<PredictionRecord> predictions(std::optional<PredictionStatus> status = {}) const;
  Image prediction_image(const std::string& id) const;
  Mask prediction_mask(const std::string& id) const;

  void start_parallel_training(const ParallelTrainRequest& request);
  TrainingStatus training_status() const;
  // Blocks until the current run (if any) finishes.
  void wait_for_training();
  DeploymentState swap_weights();

  DeploymentState state() const;
  DatasetStats dataset_stats() const;
  ModelInfo model_info() const;
  std::vector<SampleRecord> dataset_snapshot() const;

  const std::filesystem::path& root() const { return options_.root; }

 private:
  struct Deployed {
    Model model;
    std::string digest;
  };

  void replay();
  void append_event(const std::string& line);
  void run_training(std::vector<SampleRecord> data, ParallelTrainRequest request, Model init, int64_t version);
  std::shared_ptr<const Deployed> backbone() const;
  std::filesystem::path checkpoint_path(const std::string& digest) const;
  std::shared_ptr<const Deployed> load_deployed(const std::string& digest) const;

  ServiceOptions options_;
  std::vector<SampleRecord> base_;

  mutable std::mutex deploy_mu_;
  std::shared_ptr<const Deployed> backbone_;

  mutable std::mutex state_mu_;
  std::map<std::string, PredictionRecord> records_;
  std::vector<SampleRecord> enrolled_;
  int64_t dataset_version_ = 0;
  int64_t next_prediction_ = 1;
  std::mutex log_mu_;
  int log_fd_ = -1;

  mutable std::mutex train_mu_;
  std::condition_variable train_cv_;
  TrainingStatus training_;
  std::shared_ptr<const Deployed> completed_;
  std::atomic<bool> cancel_{false};
  std::thread worker_;
};

/// Mirror-pads the bottom and right edges up to a multiple of `multiple`.
Image pad_to_multiple(const Image& image, int64_t multiple);

}  // namespace davit::loop
