#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "davit/service.hpp"
#include "json.hpp"

namespace davit::loop {

// JSON views shared by the server and its clients.
nlohmann::json config_json(const ModelConfig& cfg);
nlohmann::json record_json(const PredictionRecord& r);
nlohmann::json status_json(const TrainingStatus& s);
nlohmann::json stats_json(const DatasetStats& s);
nlohmann::json state_json(const DeploymentState& s);
nlohmann::json info_json(const ModelInfo& info);
// Unknown keys are rejected.
ParallelTrainRequest parse_train_request(const nlohmann::json& body);

std::string encode_image_b64(const Image& image);
Image decode_image_b64(const std::string& b64);
// Palette RGB, ready to overlay.
std::string encode_mask_b64(const Mask& mask);
// Accepts palette RGB or gray index PNGs.
Mask decode_mask_b64(const std::string& b64);

struct HttpOptions {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  std::filesystem::path static_dir;  // optional review-ui assets served at /
  int threads = 8;
};

/// JSON API over a LoopService:
///   POST /v1/terminals/{id}/images        {image}
///   GET  /v1/predictions[?status=&offset=&limit=&data=0]
///   GET  /v1/predictions/{id}
///   POST /v1/predictions/{id}/verdict     {decision, corrected_mask?, reviewer?}
///   POST /v1/parallel/train               {epochs, batch_size, lr, ...}
///   GET  /v1/parallel/status
///   POST /v1/weights/swap
///   GET  /v1/model/info
///   GET  /v1/dataset/stats
///   GET  /v1/palette
class HttpServer {
 public:
  HttpServer(LoopService& service, HttpOptions options);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  // Binds the socket and returns the port; call before `run` or `start`.
  int bind();
  void run();    // blocks until stop()
  void start();  // runs on a background thread
  void stop();
  int port() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

struct ApiResponse {
  int status = 0;  // 0 when the connection failed
  nlohmann::json body;
  std::string error;
  bool ok() const { return status >= 200 && status < 300; }
};

class ApiClient {
 public:
  ApiClient(std::string host, int port, std::chrono::seconds timeout = std::chrono::seconds(600));
  ~ApiClient();
  ApiClient(ApiClient&&) noexcept;

  ApiResponse get(const std::string& path);
  ApiResponse post(const std::string& path, const nlohmann::json& body = nlohmann::json::object());

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

struct SimulationOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path images;  // directory of PNG files, sent in name order
  int terminals = 1;             // round-robin terminal ids term-1 ... term-N
  int concurrency = 1;
  int repeat = 1;
};

struct SimulationReport {
  int64_t sent = 0;
  int64_t succeeded = 0;
  std::vector<std::string> prediction_ids;  // in send order
  std::vector<double> latencies_ms;
  std::set<std::string> digests;
  std::vector<std::string> errors;
};

/// Replays a directory of images against POST /v1/terminals/{id}/images.
SimulationReport simulate_terminals(const SimulationOptions& options);

}  // namespace davit::loop
