#include "davit/http_api.hpp"

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <thread>

#include "davit/hash.hpp"
#include "httplib.h"

namespace davit::loop {

using nlohmann::json;

namespace {

int http_status(ServiceError::Kind k) {
  switch (k) {
    case ServiceError::Kind::BadRequest: return 400;
    case ServiceError::Kind::NotFound: return 404;
    case ServiceError::Kind::Conflict: return 409;
  }
  return 500;
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
  send_json(res, status, json{{"error", code}, {"message", message}});
}

json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return json::object();
  json body;
  try {
    body = json::parse(req.body);
  } catch (const json::exception& e) {
    throw ServiceError(ServiceError::Kind::BadRequest, "bad_json", e.what());
  }
  if (!body.is_object()) throw ServiceError(ServiceError::Kind::BadRequest, "bad_json", "body must be a JSON object");
  return body;
}

template <typename T>
T field(const json& body, const char* key, T fallback) {
  if (!body.contains(key) || body[key].is_null()) return fallback;
  try {
    return body[key].get<T>();
  } catch (const json::exception&) {
    throw ServiceError(ServiceError::Kind::BadRequest, "bad_field", std::string("field '") + key + "' has the wrong type");
  }
}

void reject_unknown(const json& body, std::initializer_list<const char*> allowed) {
  for (const auto& [key, value] : body.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ServiceError(ServiceError::Kind::BadRequest, "unknown_field", "unknown field '" + key + "'");
    }
  }
}

Range range_field(const json& body, const char* key, Range fallback) {
  if (!body.contains(key)) return fallback;
  const auto v = field<std::vector<double>>(body, key, {});
  if (v.size() != 2) {
    throw ServiceError(ServiceError::Kind::BadRequest, "bad_field", std::string("field '") + key + "' must be [lo, hi]");
  }
  return {v[0], v[1]};
}

std::vector<uint8_t> decode_b64(const std::string& b64) {
  try {
    return base64_decode(b64);
  } catch (const std::invalid_argument& e) {
    throw ServiceError(ServiceError::Kind::BadRequest, "bad_base64", e.what());
  }
}

template <typename Fn>
httplib::Server::Handler guarded(Fn fn) {
  return [fn](const httplib::Request& req, httplib::Response& res) {
    try {
      fn(req, res);
    } catch (const ServiceError& e) {
      send_error(res, http_status(e.kind()), e.code(), e.what());
    } catch (const PngError& e) {
      send_error(res, 400, "bad_image", e.what());
    } catch (const std::exception& e) {
      send_error(res, 500, "internal", e.what());
    }
  };
}

}  // namespace

json config_json(const ModelConfig& cfg) {
  json branches = json::array();
  for (const auto& b : cfg.dcsa.branches) branches.push_back({{"kernel", b.kernel}, {"dilation", b.dilation}});
  return {{"name", cfg.name},
          {"base_channels", cfg.base_channels},
          {"depths", cfg.depths},
          {"num_classes", cfg.num_classes},
          {"mlp_ratio", cfg.mlp_ratio},
          {"dcsa", {{"local_kernel", cfg.dcsa.local_kernel}, {"branches", branches},
                    {"equivalent_kernel", cfg.dcsa.equivalent_kernel}}},
          {"input", {cfg.input_height, cfg.input_width}}};
}

json record_json(const PredictionRecord& r) {
  json j{{"id", r.id},
         {"terminal_id", r.terminal_id},
         {"status", to_string(r.status)},
         {"model_digest", r.model_digest},
         {"height", r.height},
         {"width", r.width},
         {"created_ms", r.created_ms},
         {"updated_ms", r.updated_ms}};
  if (!r.reviewer.empty()) j["reviewer"] = r.reviewer;
  if (!r.sample_id.empty()) j["sample_id"] = r.sample_id;
  return j;
}

json status_json(const TrainingStatus& s) {
  json j{{"state", to_string(s.phase)},
         {"progress", s.progress},
         {"iteration", s.iteration},
         {"total_iterations", s.total_iterations},
         {"epoch", s.epoch},
         {"loss", s.last_loss},
         {"dataset_version", s.dataset_version},
         {"samples", s.samples},
         {"swap_eligible", s.phase == TrainingPhase::Completed}};
  if (!s.digest.empty()) j["digest"] = s.digest;
  if (!s.error.empty()) j["error"] = s.error;
  return j;
}

json stats_json(const DatasetStats& s) { return {{"version", s.version}, {"size", s.size}, {"base_size", s.base_size}}; }

json state_json(const DeploymentState& s) {
  return {{"backbone_digest", s.backbone_digest}, {"training", status_json(s.training)}, {"dataset", stats_json(s.dataset)}};
}

json info_json(const ModelInfo& info) {
  return {{"digest", info.digest},
          {"config", config_json(info.config)},
          {"params", info.params},
          {"flops", info.flops},
          {"flops_input", {info.config.input_height, info.config.input_width}}};
}

ParallelTrainRequest parse_train_request(const json& body) {
  reject_unknown(body, {"epochs", "batch_size", "lr", "beta1", "beta2", "eps", "seed", "max_iterations", "cold_start",
                        "new_samples_only", "augment"});
  ParallelTrainRequest r;
  TrainConfig& t = r.train;
  t.epochs = field(body, "epochs", t.epochs);
  t.batch_size = field(body, "batch_size", t.batch_size);
  t.lr = field(body, "lr", t.lr);
  t.beta1 = field(body, "beta1", t.beta1);
  t.beta2 = field(body, "beta2", t.beta2);
  t.eps = field(body, "eps", t.eps);
  t.seed = field<uint64_t>(body, "seed", t.seed);
  t.max_iterations = field<int64_t>(body, "max_iterations", t.max_iterations);
  r.cold_start = field(body, "cold_start", false);
  r.new_samples_only = field(body, "new_samples_only", false);
  if (body.contains("augment") && !body["augment"].is_null()) {
    const json& a = body["augment"];
    if (!a.is_object()) throw ServiceError(ServiceError::Kind::BadRequest, "bad_field", "augment must be an object");
    reject_unknown(a, {"crop", "contrast", "brightness", "scale", "horizontal_flip", "vertical_flip", "expansion"});
    AugmentConfig c;
    c.crop = field<int64_t>(a, "crop", c.crop);
    c.contrast = range_field(a, "contrast", c.contrast);
    c.brightness = range_field(a, "brightness", c.brightness);
    c.scale = range_field(a, "scale", c.scale);
    c.horizontal_flip = field(a, "horizontal_flip", c.horizontal_flip);
    c.vertical_flip = field(a, "vertical_flip", c.vertical_flip);
    c.expansion = field(a, "expansion", c.expansion);
    t.augment = c;
  }
  return r;
}

std::string encode_image_b64(const Image& image) {
  const auto png = encode_png(image_to_png(image));
  return base64_encode(png);
}

Image decode_image_b64(const std::string& b64) {
  const auto bytes = decode_b64(b64);
  return image_from_png(decode_png(bytes));
}

std::string encode_mask_b64(const Mask& mask) {
  const auto png = encode_png(encode_palette(mask));
  return base64_encode(png);
}

Mask decode_mask_b64(const std::string& b64) {
  const auto bytes = decode_b64(b64);
  try {
    return mask_from_png(decode_png(bytes));
  } catch (const std::invalid_argument& e) {
    throw ServiceError(ServiceError::Kind::BadRequest, "bad_mask", e.what());
  }
}

// ---- Server ----------------------------------------------------------------

struct HttpServer::Impl {
  LoopService& service;
  HttpOptions options;
  httplib::Server server;
  std::thread thread;
  int port = -1;

  Impl(LoopService& s, HttpOptions o) : service(s), options(std::move(o)) {}

  json prediction_payload(const PredictionRecord& r, bool data) const {
    json j = record_json(r);
    if (data) {
      j["image"] = encode_image_b64(service.prediction_image(r.id));
      j["mask"] = encode_mask_b64(service.prediction_mask(r.id));
    }
    return j;
  }

  void routes() {
    const int threads = std::max(1, options.threads);
    server.new_task_queue = [threads] { return new httplib::ThreadPool(static_cast<size_t>(threads)); };
    if (!options.static_dir.empty()) server.set_mount_point("/", options.static_dir.string());

    server.Post(R"(/v1/terminals/([^/]+)/images)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const json body = parse_body(req);
      reject_unknown(body, {"image"});
      if (!body.contains("image") || !body["image"].is_string()) {
        throw ServiceError(ServiceError::Kind::BadRequest, "image_required", "body needs a base64 PNG 'image'");
      }
      const auto r = service.ingest_image(req.matches[1], decode_image_b64(body["image"]));
      json out = record_json(r);
      out["prediction_id"] = r.id;
      send_json(res, 201, out);
    }));

    server.Get("/v1/predictions", guarded([this](const httplib::Request& req, httplib::Response& res) {
      std::optional<PredictionStatus> status;
      if (req.has_param("status")) status = parse_status(req.get_param_value("status"));
      const bool data = !req.has_param("data") || req.get_param_value("data") != "0";
      int64_t offset = 0, limit = -1;
      try {
        if (req.has_param("offset")) offset = std::stoll(req.get_param_value("offset"));
        if (req.has_param("limit")) limit = std::stoll(req.get_param_value("limit"));
      } catch (const std::exception&) {
        throw ServiceError(ServiceError::Kind::BadRequest, "bad_query", "offset and limit must be integers");
      }
      if (offset < 0) throw ServiceError(ServiceError::Kind::BadRequest, "bad_query", "offset must be >= 0");
      const auto all = service.predictions(status);
      json items = json::array();
      for (int64_t i = offset; i < static_cast<int64_t>(all.size()) && (limit < 0 || i < offset + limit); ++i) {
        items.push_back(prediction_payload(all[static_cast<size_t>(i)], data));
      }
      send_json(res, 200, json{{"total", all.size()}, {"offset", offset}, {"predictions", items}});
    }));

    server.Get(R"(/v1/predictions/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
      send_json(res, 200, prediction_payload(service.prediction(req.matches[1]), true));
    }));

    server.Post(R"(/v1/predictions/([^/]+)/verdict)",
                guarded([this](const httplib::Request& req, httplib::Response& res) {
                  const json body = parse_body(req);
                  reject_unknown(body, {"decision", "corrected_mask", "reviewer"});
                  Verdict v;
                  v.prediction_id = req.matches[1];
                  const std::string decision = field<std::string>(body, "decision", "");
                  if (decision == "qualified") v.decision = Decision::Qualified;
                  else if (decision == "unqualified") v.decision = Decision::Unqualified;
                  else {
                    throw ServiceError(ServiceError::Kind::BadRequest, "bad_decision",
                                       "decision must be 'qualified' or 'unqualified'");
                  }
                  if (body.contains("corrected_mask") && !body["corrected_mask"].is_null()) {
                    v.corrected_mask = decode_mask_b64(field<std::string>(body, "corrected_mask", ""));
                  }
                  v.reviewer = field<std::string>(body, "reviewer", "");
                  send_json(res, 200, record_json(service.submit_verdict(v)));
                }));

    server.Post("/v1/parallel/train", guarded([this](const httplib::Request& req, httplib::Response& res) {
      service.start_parallel_training(parse_train_request(parse_body(req)));
      send_json(res, 202, json{{"status", "accepted"}, {"training", status_json(service.training_status())}});
    }));

    server.Get("/v1/parallel/status", guarded([this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, status_json(service.training_status()));
    }));

    server.Post("/v1/weights/swap", guarded([this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, state_json(service.swap_weights()));
    }));

    server.Get("/v1/model/info", guarded([this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, info_json(service.model_info()));
    }));

    server.Get("/v1/dataset/stats", guarded([this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, stats_json(service.dataset_stats()));
    }));

    server.Get("/v1/palette", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(palette_json(), "application/json");
    });

    server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (res.body.empty()) send_error(res, res.status, "http_" + std::to_string(res.status), "request failed");
    });
  }
};

HttpServer::HttpServer(LoopService& service, HttpOptions options)
    : impl_(std::make_unique<Impl>(service, std::move(options))) {
  impl_->routes();
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind() {
  auto& s = impl_->server;
  if (impl_->options.port == 0) {
    impl_->port = s.bind_to_any_port(impl_->options.host);
  } else if (s.bind_to_port(impl_->options.host, impl_->options.port)) {
    impl_->port = impl_->options.port;
  }
  if (impl_->port < 0) {
    throw std::runtime_error("cannot bind " + impl_->options.host + ":" + std::to_string(impl_->options.port));
  }
  return impl_->port;
}

void HttpServer::run() {
  if (impl_->port < 0) bind();
  impl_->server.listen_after_bind();
}

void HttpServer::start() {
  if (impl_->port < 0) bind();
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
}

void HttpServer::stop() {
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

int HttpServer::port() const { return impl_->port; }

// ---- Client ----------------------------------------------------------------

struct ApiClient::Impl {
  httplib::Client client;
  Impl(const std::string& host, int port) : client(host, port) {}
};

ApiClient::ApiClient(std::string host, int port, std::chrono::seconds timeout)
    : impl_(std::make_unique<Impl>(host, port)) {
  impl_->client.set_read_timeout(timeout);
  impl_->client.set_write_timeout(timeout);
  impl_->client.set_connection_timeout(std::chrono::seconds(10));
}

ApiClient::~ApiClient() = default;
ApiClient::ApiClient(ApiClient&&) noexcept = default;

namespace {

ApiResponse to_response(const httplib::Result& r) {
  ApiResponse out;
  if (!r) {
    out.error = httplib::to_string(r.error());
    return out;
  }
  out.status = r->status;
  if (!r->body.empty()) {
    try {
      out.body = json::parse(r->body);
    } catch (const json::exception&) {
      out.body = r->body;
    }
  }
  return out;
}

}  // namespace

ApiResponse ApiClient::get(const std::string& path) { return to_response(impl_->client.Get(path)); }

ApiResponse ApiClient::post(const std::string& path, const json& body) {
  return to_response(impl_->client.Post(path, body.dump(), "application/json"));
}

// ---- Terminal simulator ----------------------------------------------------

SimulationReport simulate_terminals(const SimulationOptions& options) {
  if (options.terminals < 1 || options.concurrency < 1 || options.repeat < 1) {
    throw std::invalid_argument("terminals, concurrency and repeat must be >= 1");
  }
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(options.images)) {
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::invalid_argument("no PNG images in " + options.images.string());

  std::vector<std::string> payloads;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    payloads.push_back(json{{"image", base64_encode(bytes)}}.dump());
  }

  const size_t total = payloads.size() * static_cast<size_t>(options.repeat);
  SimulationReport report;
  report.sent = static_cast<int64_t>(total);
  report.prediction_ids.assign(total, "");
  report.latencies_ms.assign(total, 0.0);
  std::atomic<size_t> next{0};
  std::mutex mu;
  auto worker = [&] {
    httplib::Client client(options.host, options.port);
    client.set_read_timeout(std::chrono::seconds(600));
    for (size_t i = next++; i < total; i = next++) {
      const std::string terminal = "term-" + std::to_string(i % static_cast<size_t>(options.terminals) + 1);
      const auto t0 = std::chrono::steady_clock::now();
      auto r = client.Post("/v1/terminals/" + terminal + "/images", payloads[i % payloads.size()], "application/json");
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      std::lock_guard<std::mutex> lock(mu);
      report.latencies_ms[i] = ms;
      if (r && r->status == 201) {
        const json body = json::parse(r->body);
        report.prediction_ids[i] = body.at("prediction_id");
        report.digests.insert(body.at("model_digest").get<std::string>());
        ++report.succeeded;
      } else {
        report.errors.push_back(files[i % files.size()].filename().string() + ": " +
                                (r ? std::to_string(r->status) + " " + r->body : httplib::to_string(r.error())));
      }
    }
  };
  std::vector<std::thread> threads;
  for (int t = 0; t < options.concurrency; ++t) threads.emplace_back(worker);
  for (auto& t : threads) t.join();
  return report;
}

}  // namespace davit::loop
