#include "davit/service.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "json.hpp"

namespace davit::loop {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int64_t kSizeMultiple = 32;
constexpr int64_t kMaxSide = 4096;

int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

std::string numbered(char prefix, int64_t n) {
  std::ostringstream os;
  os << prefix;
  os.width(6);
  os.fill('0');
  os << n;
  return os.str();
}

Mask pad_mask(const Mask& mask, int64_t h, int64_t w) {
  Mask out(h, w, kIgnoreLabel);
  for (int64_t y = 0; y < mask.height; ++y)
    for (int64_t x = 0; x < mask.width; ++x) out.at(y, x) = mask.at(y, x);
  return out;
}

SampleRecord padded_sample(const SampleRecord& rec) {
  SampleRecord out = rec;
  out.image = pad_to_multiple(rec.image, kSizeMultiple);
  out.mask = pad_mask(rec.mask, out.image.height, out.image.width);
  return out;
}

ServiceError bad_request(const std::string& code, const std::string& what) {
  return ServiceError(ServiceError::Kind::BadRequest, code, what);
}

ServiceError conflict(const std::string& code, const std::string& what) {
  return ServiceError(ServiceError::Kind::Conflict, code, what);
}

}  // namespace

std::string to_string(PredictionStatus s) {
  switch (s) {
    case PredictionStatus::PendingReview: return "pending_review";
    case PredictionStatus::Qualified: return "qualified";
    case PredictionStatus::Unqualified: return "unqualified";
    case PredictionStatus::Enrolled: return "enrolled";
  }
  return "unknown";
}

PredictionStatus parse_status(const std::string& s) {
  for (auto st : {PredictionStatus::PendingReview, PredictionStatus::Qualified, PredictionStatus::Unqualified,
                  PredictionStatus::Enrolled}) {
    if (to_string(st) == s) return st;
  }
  throw bad_request("bad_status", "unknown prediction status '" + s + "'");
}

std::string to_string(TrainingPhase p) {
  switch (p) {
    case TrainingPhase::Idle: return "idle";
    case TrainingPhase::Training: return "training";
    case TrainingPhase::Completed: return "completed";
    case TrainingPhase::Failed: return "failed";
  }
  return "unknown";
}

Image pad_to_multiple(const Image& image, int64_t multiple) {
  const int64_t h = (image.height + multiple - 1) / multiple * multiple;
  const int64_t w = (image.width + multiple - 1) / multiple * multiple;
  if (h == image.height && w == image.width) return image;
  Image out(h, w);
  for (int64_t y = 0; y < h; ++y) {
    const int64_t sy = mirror_index(y, image.height);
    for (int64_t x = 0; x < w; ++x) {
      const int64_t sx = mirror_index(x, image.width);
      for (int c = 0; c < 3; ++c) out.at(y, x, c) = image.at(sy, sx, c);
    }
  }
  return out;
}

LoopService::LoopService(ServiceOptions options) : options_(std::move(options)) {
  if (options_.root.empty()) throw std::invalid_argument("service root directory is required");
  for (const char* sub : {"checkpoints", "predictions", "dataset/images", "dataset/masks"}) {
    fs::create_directories(options_.root / sub);
  }
  if (!options_.base_data.empty()) {
    LoadResult loaded = load_dataset(options_.base_data);
    if (!loaded.errors.empty()) {
      throw std::runtime_error("base dataset " + options_.base_data.string() + ": " + loaded.errors[0].file + ": " +
                               loaded.errors[0].message);
    }
    base_ = std::move(loaded.records);
  }
  replay();
  const fs::path log_path = options_.root / "events.log";
  log_fd_ = ::open(log_path.c_str(), O_WRONLY | O_APPEND | O_CREAT, 0644);
  if (log_fd_ < 0) throw std::runtime_error("cannot open " + log_path.string() + ": " + std::strerror(errno));
  if (!backbone_) {
    options_.model.validate();
    Model seed = build_model(options_.model, options_.seed);
    const std::string digest = model_digest(seed);
    save_checkpoint(seed, checkpoint_path(digest));
    append_event(json{{"event", "init"}, {"digest", digest}, {"config", options_.model.canonical_text()},
                      {"seed", options_.seed}, {"t", now_ms()}}
                     .dump());
    backbone_ = std::make_shared<const Deployed>(Deployed{std::move(seed), digest});
  }
}

LoopService::~LoopService() {
  cancel_ = true;
  if (worker_.joinable()) worker_.join();
  if (log_fd_ >= 0) ::close(log_fd_);
}

fs::path LoopService::checkpoint_path(const std::string& digest) const {
  return options_.root / "checkpoints" / (digest + ".ckpt");
}

std::shared_ptr<const LoopService::Deployed> LoopService::load_deployed(const std::string& digest) const {
  Model m = load_checkpoint(checkpoint_path(digest));
  if (model_digest(m) != digest) throw std::runtime_error("checkpoint " + digest + " does not match its name");
  return std::make_shared<const Deployed>(Deployed{std::move(m), digest});
}

void LoopService::replay() {
  const fs::path path = options_.root / "events.log";
  if (!fs::exists(path)) return;
  std::string text;
  {
    std::ifstream in(path, std::ios::binary);
    text.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  // A line without its newline was cut off mid-write; drop it.
  const size_t complete = text.rfind('\n') == std::string::npos ? 0 : text.rfind('\n') + 1;
  if (complete != text.size()) {
    fs::resize_file(path, complete);
    text.resize(complete);
  }

  std::string backbone_digest, completed_digest;
  int64_t completed_version = 0;
  std::istringstream lines(text);
  std::string line;
  int64_t lineno = 0;
  while (std::getline(lines, line)) {
    ++lineno;
    if (line.empty()) continue;
    json e;
    try {
      e = json::parse(line);
    } catch (const json::exception& ex) {
      throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
    const std::string kind = e.at("event");
    if (kind == "init") {
      options_.model = ModelConfig::parse_canonical(e.at("config"));
      backbone_digest = e.at("digest");
    } else if (kind == "prediction") {
      PredictionRecord r;
      r.id = e.at("id");
      r.terminal_id = e.at("terminal");
      r.model_digest = e.at("digest");
      r.height = e.at("height");
      r.width = e.at("width");
      r.created_ms = r.updated_ms = e.at("t");
      next_prediction_ = std::max<int64_t>(next_prediction_, std::stoll(r.id.substr(1)) + 1);
      records_[r.id] = r;
    } else if (kind == "verdict") {
      PredictionRecord& r = records_.at(e.at("id"));
      r.updated_ms = e.at("t");
      r.reviewer = e.value("reviewer", "");
      if (e.at("decision") == "qualified") {
        r.status = PredictionStatus::Qualified;
      } else {
        r.status = PredictionStatus::Enrolled;
        r.sample_id = e.at("sample");
        SampleRecord s;
        s.id = r.sample_id;
        const fs::path dir = options_.root / "dataset";
        s.image = image_from_png(read_png(dir / "images" / (s.id + ".png")));
        s.mask = mask_from_png(read_png(dir / "masks" / (s.id + ".png")));
        s.source = {SampleSource::Kind::Terminal, r.terminal_id, 0};
        enrolled_.push_back(std::move(s));
        dataset_version_ = e.at("version");
      }
    } else if (kind == "trained") {
      completed_digest = e.at("digest");
      completed_version = e.at("version");
    } else if (kind == "swap") {
      backbone_digest = e.at("digest");
      completed_digest.clear();
    }
  }
  if (backbone_digest.empty()) return;
  backbone_ = load_deployed(backbone_digest);
  if (!completed_digest.empty()) {
    completed_ = load_deployed(completed_digest);
    training_.phase = TrainingPhase::Completed;
    training_.progress = 1.0;
    training_.digest = completed_digest;
    training_.dataset_version = completed_version;
  }
}

void LoopService::append_event(const std::string& line) {
  std::lock_guard<std::mutex> lock(log_mu_);
  const std::string data = line + "\n";
  size_t written = 0;
  while (written < data.size()) {
    const ssize_t n = ::write(log_fd_, data.data() + written, data.size() - written);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw std::runtime_error(std::string("event log write failed: ") + std::strerror(errno));
    }
    written += static_cast<size_t>(n);
  }
  if (::fsync(log_fd_) != 0) throw std::runtime_error(std::string("event log fsync failed: ") + std::strerror(errno));
}

std::shared_ptr<const LoopService::Deployed> LoopService::backbone() const {
  std::lock_guard<std::mutex> lock(deploy_mu_);
  return backbone_;
}

InferenceResult LoopService::infer(const Image& image) const {
  if (image.height < 1 || image.width < 1 ||
      image.pixels.size() != static_cast<size_t>(image.height * image.width * 3)) {
    throw bad_request("bad_image", "image has no pixels or inconsistent dimensions");
  }
  if (image.height > kMaxSide || image.width > kMaxSide) {
    throw bad_request("image_too_large", "image sides must be at most " + std::to_string(kMaxSide));
  }
  auto deployed = backbone();
  const IndexMap pred = predict(deployed->model, pad_to_multiple(image, kSizeMultiple));
  InferenceResult out{Mask(image.height, image.width), deployed->digest};
  for (int64_t y = 0; y < image.height; ++y)
    for (int64_t x = 0; x < image.width; ++x)
      out.mask.at(y, x) = static_cast<uint8_t>(pred.values[static_cast<size_t>(y * pred.w + x)]);
  return out;
}

PredictionRecord LoopService::ingest_image(const std::string& terminal_id, const Image& image) {
  if (terminal_id.empty()) throw bad_request("bad_terminal", "terminal id is empty");
  InferenceResult res = infer(image);
  PredictionRecord r;
  {
    std::lock_guard<std::mutex> lock(state_mu_);
    r.id = numbered('p', next_prediction_++);
  }
  r.terminal_id = terminal_id;
  r.model_digest = res.digest;
  r.height = image.height;
  r.width = image.width;
  r.created_ms = r.updated_ms = now_ms();
  const fs::path dir = options_.root / "predictions";
  write_png(dir / (r.id + ".image.png"), image_to_png(image));
  write_png(dir / (r.id + ".mask.png"), mask_to_png(res.mask));
  std::lock_guard<std::mutex> lock(state_mu_);
  append_event(json{{"event", "prediction"}, {"id", r.id}, {"terminal", terminal_id}, {"digest", r.model_digest},
                    {"height", r.height}, {"width", r.width}, {"t", r.created_ms}}
                   .dump());
  records_[r.id] = r;
  return r;
}

PredictionRecord LoopService::submit_verdict(const Verdict& v) {
  std::lock_guard<std::mutex> lock(state_mu_);
  auto it = records_.find(v.prediction_id);
  if (it == records_.end()) {
    throw ServiceError(ServiceError::Kind::NotFound, "not_found", "no prediction " + v.prediction_id);
  }
  PredictionRecord& r = it->second;
  if (r.status != PredictionStatus::PendingReview) {
    throw conflict("already_reviewed", "prediction " + r.id + " is already " + to_string(r.status));
  }
  const int64_t t = now_ms();
  json e{{"event", "verdict"}, {"id", r.id}, {"reviewer", v.reviewer}, {"t", t}};
  if (v.decision == Decision::Qualified) {
    e["decision"] = "qualified";
    append_event(e.dump());
    r.status = PredictionStatus::Qualified;
  } else {
    if (!v.corrected_mask) throw bad_request("mask_required", "unqualified verdicts need a corrected mask");
    const Mask& mask = *v.corrected_mask;
    if (mask.height != r.height || mask.width != r.width) {
      throw bad_request("mask_shape", "corrected mask is " + std::to_string(mask.height) + "x" +
                                          std::to_string(mask.width) + ", prediction is " + std::to_string(r.height) +
                                          "x" + std::to_string(r.width));
    }
    SampleRecord s;
    s.id = numbered('s', static_cast<int64_t>(enrolled_.size()) + 1);
    s.image = image_from_png(read_png(options_.root / "predictions" / (r.id + ".image.png")));
    s.mask = mask;
    s.source = {SampleSource::Kind::Terminal, r.terminal_id, 0};
    try {
      s.validate();
    } catch (const std::invalid_argument& ex) {
      throw bad_request("bad_mask", ex.what());
    }
    save_sample(options_.root / "dataset", s);
    e["decision"] = "unqualified";
    e["sample"] = s.id;
    e["version"] = dataset_version_ + 1;
    append_event(e.dump());
    ++dataset_version_;
    r.status = PredictionStatus::Enrolled;
    r.sample_id = s.id;
    enrolled_.push_back(std::move(s));
  }
  r.updated_ms = t;
  r.reviewer = v.reviewer;
  return r;
}

PredictionRecord LoopService::prediction(const std::string& id) const {
  std::lock_guard<std::mutex> lock(state_mu_);
  auto it = records_.find(id);
  if (it == records_.end()) throw ServiceError(ServiceError::Kind::NotFound, "not_found", "no prediction " + id);
  return it->second;
}

std::vector<PredictionRecord> LoopService::predictions(std::optional<PredictionStatus> status) const {
  std::lock_guard<std::mutex> lock(state_mu_);
  std::vector<PredictionRecord> out;
  for (const auto& [id, r] : records_)
    if (!status || r.status == *status) out.push_back(r);
  return out;
}

Image LoopService::prediction_image(const std::string& id) const {
  prediction(id);
  return image_from_png(read_png(options_.root / "predictions" / (id + ".image.png")));
}

Mask LoopService::prediction_mask(const std::string& id) const {
  prediction(id);
  return mask_from_png(read_png(options_.root / "predictions" / (id + ".mask.png")));
}

std::vector<SampleRecord> LoopService::dataset_snapshot() const {
  std::lock_guard<std::mutex> lock(state_mu_);
  std::vector<SampleRecord> out = base_;
  out.insert(out.end(), enrolled_.begin(), enrolled_.end());
  return out;
}

void LoopService::start_parallel_training(const ParallelTrainRequest& request) {
  try {
    request.train.validate();
  } catch (const std::invalid_argument& e) {
    throw bad_request("bad_config", e.what());
  }
  if (request.train.augment && request.train.augment->crop % kSizeMultiple != 0) {
    throw bad_request("bad_config", "augmentation crop must be a multiple of 32");
  }
  std::lock_guard<std::mutex> lock(train_mu_);
  if (training_.phase == TrainingPhase::Training) throw conflict("already_running", "parallel training is running");
  std::vector<SampleRecord> data;
  int64_t version = 0;
  {
    std::lock_guard<std::mutex> state_lock(state_mu_);
    if (!request.new_samples_only) data = base_;
    data.insert(data.end(), enrolled_.begin(), enrolled_.end());
    version = dataset_version_;
  }
  if (data.empty()) throw conflict("empty_dataset", "the training dataset is empty");
  for (auto& s : data) s = padded_sample(s);
  Model init = request.cold_start ? build_model(options_.model, request.train.seed) : backbone()->model.clone();

  if (worker_.joinable()) worker_.join();
  cancel_ = false;
  completed_.reset();
  training_ = TrainingStatus{};
  training_.phase = TrainingPhase::Training;
  training_.dataset_version = version;
  training_.samples = static_cast<int64_t>(data.size());
  training_.total_iterations = planned_iterations(data.size(), request.train);
  worker_ = std::thread(&LoopService::run_training, this, std::move(data), request, std::move(init), version);
}

void LoopService::run_training(std::vector<SampleRecord> data, ParallelTrainRequest request, Model init,
                               int64_t version) {
  TrainHooks hooks;
  hooks.cancel = &cancel_;
  hooks.on_iteration = [this](int64_t it, double loss) {
    std::lock_guard<std::mutex> lock(train_mu_);
    training_.iteration = it;
    training_.last_loss = loss;
    if (training_.total_iterations > 0) {
      training_.progress = std::min(1.0, static_cast<double>(it) / static_cast<double>(training_.total_iterations));
    }
  };
  hooks.on_epoch = [this](const EpochRecord& rec) {
    std::lock_guard<std::mutex> lock(train_mu_);
    training_.epoch = rec.epoch;
  };
  try {
    TrainResult result = train(init, data, request.train, hooks);
    if (result.cancelled) {
      std::lock_guard<std::mutex> lock(train_mu_);
      training_.phase = TrainingPhase::Idle;
      train_cv_.notify_all();
      return;
    }
    const std::string digest = model_digest(result.model);
    save_checkpoint(result.model, checkpoint_path(digest));
    append_event(json{{"event", "trained"}, {"digest", digest}, {"version", version}, {"t", now_ms()}}.dump());
    auto done = std::make_shared<const Deployed>(Deployed{std::move(result.model), digest});
    std::lock_guard<std::mutex> lock(train_mu_);
    completed_ = std::move(done);
    training_.phase = TrainingPhase::Completed;
    training_.progress = 1.0;
    training_.digest = digest;
  } catch (const std::exception& e) {
    std::lock_guard<std::mutex> lock(train_mu_);
    training_.phase = TrainingPhase::Failed;
    training_.error = e.what();
  }
  train_cv_.notify_all();
}

TrainingStatus LoopService::training_status() const {
  std::lock_guard<std::mutex> lock(train_mu_);
  return training_;
}

void LoopService::wait_for_training() {
  std::unique_lock<std::mutex> lock(train_mu_);
  train_cv_.wait(lock, [this] { return training_.phase != TrainingPhase::Training; });
}

DeploymentState LoopService::swap_weights() {
  {
    std::lock_guard<std::mutex> lock(train_mu_);
    if (training_.phase != TrainingPhase::Completed || !completed_) {
      throw conflict("not_completed", "no completed parallel model to swap in (status " +
                                          to_string(training_.phase) + ")");
    }
    std::lock_guard<std::mutex> deploy_lock(deploy_mu_);
    append_event(json{{"event", "swap"}, {"digest", completed_->digest}, {"t", now_ms()}}.dump());
    backbone_ = std::move(completed_);
    training_ = TrainingStatus{};
  }
  return state();
}

DatasetStats LoopService::dataset_stats() const {
  std::lock_guard<std::mutex> lock(state_mu_);
  return {dataset_version_, static_cast<int64_t>(enrolled_.size()), static_cast<int64_t>(base_.size())};
}

DeploymentState LoopService::state() const {
  DeploymentState s;
  s.backbone_digest = backbone()->digest;
  s.training = training_status();
  s.dataset = dataset_stats();
  return s;
}

ModelInfo LoopService::model_info() const {
  auto deployed = backbone();
  const ModelConfig& cfg = deployed->model.config();
  return {deployed->digest, cfg, count_params(deployed->model), count_flops(cfg, cfg.input_height, cfg.input_width)};
}

}  // namespace davit::loop
