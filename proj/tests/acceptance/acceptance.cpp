// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fail.
// Usage: davit_acceptance [--only <name>] [--list]

#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fcntl.h>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "davit/dcsa.hpp"
#include "davit/gradient_suite.hpp"
#include "davit/http_api.hpp"
#include "davit/rng.hpp"
#include "davit/service.hpp"
#include "davit/trainer.hpp"
#include "oracles.hpp"

extern char** environ;

using namespace davit;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
  bool pass = false;
  std::string summary;
  std::vector<std::string> details;
};

struct Criterion {
  std::string name;
  double limit_seconds;
  std::function<Outcome()> run;
};

std::string fmt(double v, int precision = 6) {
  std::ostringstream os;
  os << std::setprecision(precision) << v;
  return os.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  for (std::string line; std::getline(is, line);) out.push_back(line);
  return out;
}

fs::path scratch(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("davit_accept_" + std::to_string(::getpid()) + "_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

ModelConfig loop_model() {
  ModelConfig c;
  c.name = "loop";
  c.base_channels = 8;
  c.depths = {1, 1, 1, 1};
  c.input_height = c.input_width = 64;
  return c;
}

// ---- Analytic criteria -----------------------------------------------------

Outcome rho_arithmetic() {
  const std::vector<int> k{3, 5, 7};
  const double r19 = dcsa::param_reduction_rho(k, 19, 19);
  const double r21 = dcsa::param_reduction_rho(k, 21, 21);
  std::ostringstream report;
  dcsa::write_report_text(report, dcsa::decomposition_report(dcsa::Config{}));
  const bool noted = report.str().find("81.18%") != std::string::npos;
  Outcome o;
  o.pass = std::abs(r19 - 0.770083) <= 1e-6 && std::abs(r21 - 0.811791) <= 1e-6 && noted;
  o.summary = "rho(19)=" + fmt(r19) + " rho(21)=" + fmt(r21) + (noted ? ", report notes 81.18%" : ", note missing");
  return o;
}

Outcome equivalent_kernel() {
  const int k = dcsa::equivalent_kernel_size(7, 3);
  return {k == 19, "K'(7,3)=" + std::to_string(k), {}};
}

Outcome dilated_conv_oracle() {
  double worst = 0.0;
  int cases = 0;
  uint64_t seed = 1000;
  for (int k : {3, 5, 7}) {
    for (int r : {1, 2, 3}) {
      for (int trial = 0; trial < 20; ++trial) {
        Rng shape_rng(seed);
        const int64_t n = 1 + static_cast<int64_t>(shape_rng.below(2));
        const int64_t cin = 1 + static_cast<int64_t>(shape_rng.below(3));
        const int64_t cout = 1 + static_cast<int64_t>(shape_rng.below(3));
        const int64_t h = 6 + static_cast<int64_t>(shape_rng.below(10));
        const int64_t w = 6 + static_cast<int64_t>(shape_rng.below(10));
        const bool depthwise = trial % 4 == 3;
        const int64_t groups = depthwise ? cin : 1;
        Tensor x = testing::random_tensor({n, cin, h, w}, seed + 1);
        Tensor wt = testing::random_tensor({depthwise ? cin : cout, depthwise ? 1 : cin, k, k}, seed + 2);
        seed += 3;
        ConvSpec spec;
        spec.kernel_h = spec.kernel_w = k;
        spec.dilation = r;
        spec.groups = static_cast<int>(groups);
        const Tensor y = ops::conv2d(x, wt, spec);
        const auto ref = testing::dilated_conv_oracle(x, wt, groups, r);
        worst = std::max(worst, testing::max_abs_diff(y.data(), ref));
        ++cases;
      }
    }
  }
  return {worst <= 1e-12 && cases == 180, std::to_string(cases) + " cases, max |diff| " + fmt(worst, 3), {}};
}

Outcome gradient_suite() {
  GradientSuiteOptions opts;
  opts.max_coordinates = 64;
  const auto results = run_gradient_suite(opts);
  double worst = 0.0;
  std::string worst_case;
  bool ok = true, has_model = false;
  for (const auto& r : results) {
    ok = ok && r.passed;
    has_model = has_model || r.op.find("model") != std::string::npos;
    if (r.max_relative_error >= worst) {
      worst = r.max_relative_error;
      worst_case = r.op + " / " + r.input;
    }
  }
  Outcome o;
  o.pass = ok && has_model && worst < 1e-6;
  o.summary = std::to_string(results.size()) + " checks incl. reduced model, max rel err " + fmt(worst, 3) + " (" +
              worst_case + ")";
  return o;
}

Outcome attention_identity() {
  dcsa::Config cfg;
  cfg.channels = 6;
  const auto w = dcsa::Weights::unit_attention(cfg);
  const Tensor x = testing::random_tensor({2, 6, 17, 13}, 77);
  const Tensor att = dcsa::attention_map(x, w);
  const Tensor out = dcsa::apply(x, w);
  double att_err = 0.0;
  for (double v : att.data()) att_err = std::max(att_err, std::abs(v - 1.0));
  const double out_err = testing::max_abs_diff(out.data(), x.data());
  return {att_err <= 1e-12 && out_err <= 1e-12, "max |Att-1| " + fmt(att_err, 3) + ", max |Out-In| " + fmt(out_err, 3),
          {}};
}

Outcome receptive_field() {
  dcsa::Config cfg;
  const auto e = dcsa::impulse_receptive_field(dcsa::Weights::zeros(cfg));
  return {e.height == 23 && e.width == 23, "impulse extent " + std::to_string(e.height) + "x" + std::to_string(e.width),
          {}};
}

Outcome param_counts() {
  struct Row {
    ModelConfig cfg;
    double target;
  };
  const std::vector<Row> rows{{ModelConfig::tiny(), 4.95e6}, {ModelConfig::small(), 14.74e6}, {ModelConfig::base(), 27.57e6}};
  Outcome o;
  o.pass = true;
  std::vector<int64_t> counts;
  std::ostringstream summary;
  for (const auto& r : rows) {
    const int64_t n = count_params(r.cfg);
    counts.push_back(n);
    const double dev = static_cast<double>(n) / r.target - 1.0;
    o.pass = o.pass && std::abs(dev) <= 0.20;
    summary << r.cfg.name << " " << fmt(static_cast<double>(n) / 1e6, 4) << "M (" << (dev >= 0 ? "+" : "")
            << fmt(100 * dev, 3) << "% vs " << fmt(r.target / 1e6, 4) << "M)  ";
    std::ostringstream rep;
    write_param_report(rep, r.cfg, param_report(r.cfg));
    for (auto& l : lines_of(rep.str())) o.details.push_back(l);
  }
  o.pass = o.pass && counts[0] < counts[1] && counts[1] < counts[2];
  o.summary = summary.str() + (counts[0] < counts[1] && counts[1] < counts[2] ? "ordered" : "NOT ordered");
  o.details.push_back("deviation sources: stem, norm placement, MLP ratio and decode-head width are not fixed by the");
  o.details.push_back("reference figures; with MLP ratio 8 all three scales land within 10%");
  return o;
}

Outcome flop_analytics() {
  const ModelConfig cfg = ModelConfig::tiny();
  const FlopReport r = flop_report(cfg, 512, 512);
  const double g = static_cast<double>(r.total) / 1e9;
  const double ratio = g / 8.99;
  Outcome o;
  o.pass = ratio >= 0.5 && ratio <= 2.0;
  o.summary = "tiny@512x512 " + fmt(g, 4) + " GFLOPs vs 8.99 (" + fmt(ratio, 4) + "x); convs " +
              fmt(static_cast<double>(r.conv) / 2e9, 4) + " G multiply-adds";
  for (auto& l : lines_of(flop_methodology())) o.details.push_back("methodology: " + l);
  return o;
}

Outcome metric_oracle() {
  IndexMap pred(1, 2, 2), gt(1, 2, 2);
  pred.values = {0, 1, 1, 1};
  gt.values = {0, 0, 1, 1};
  const auto ex = Metrics::from_confusion(confusion_matrix(pred, gt, 2));
  bool ok = ex.pa == 0.75 && std::abs(ex.miou - 7.0 / 12.0) < 1e-15;

  Rng rng(2024);
  int exact = 0;
  for (int trial = 0; trial < 100; ++trial) {
    IndexMap p(1, 64, 64), g(1, 64, 64);
    for (auto& v : p.values) v = static_cast<int32_t>(rng.below(kNumClasses));
    for (auto& v : g.values) v = rng.below(20) == 0 ? kIgnoreLabel : static_cast<int32_t>(rng.below(kNumClasses));
    if (trial % 7 == 0) {  // leave a class absent from both maps
      for (auto& v : p.values)
        if (v == 4) v = 0;
      for (auto& v : g.values)
        if (v == 4) v = 1;
    }
    const auto m = Metrics::from_confusion(confusion_matrix(p, g, kNumClasses));
    int64_t correct = 0, counted = 0;
    double iou_sum = 0.0;
    int present = 0;
    for (int c = 0; c < kNumClasses; ++c) {
      int64_t inter = 0, uni = 0;
      for (size_t i = 0; i < g.values.size(); ++i) {
        if (g.values[i] == kIgnoreLabel) continue;
        inter += p.values[i] == c && g.values[i] == c;
        uni += p.values[i] == c || g.values[i] == c;
      }
      if (uni > 0) {
        iou_sum += static_cast<double>(inter) / static_cast<double>(uni);
        ++present;
      }
    }
    for (size_t i = 0; i < g.values.size(); ++i) {
      if (g.values[i] == kIgnoreLabel) continue;
      ++counted;
      correct += p.values[i] == g.values[i];
    }
    exact += m.pa == static_cast<double>(correct) / static_cast<double>(counted) && m.miou == iou_sum / present;
  }
  ok = ok && exact == 100;
  return {ok, "2x2 example PA " + fmt(ex.pa) + " mIoU " + fmt(ex.miou, 10) + "; " + std::to_string(exact) +
                  "/100 random pairs exact",
          {}};
}

Outcome overfit_sanity() {
  const auto data = synth_generate(8, 100, 64);
  TrainConfig tc;
  tc.epochs = 200;
  tc.batch_size = 8;
  tc.lr = 3e-3;
  tc.seed = 0;
  const auto res = train(build_model(loop_model(), 10), data, tc);
  const int64_t iters = res.history.epochs.back().iterations;
  const double pa = evaluate(res.model, data).pa;
  Outcome o;
  o.pass = pa >= 0.99 && iters <= 200;
  o.summary = "8 synthetic 64x64 samples, C=8 depths 1,1,1,1: training PA " + fmt(pa, 5) + " after " +
              std::to_string(iters) + " iterations (last-epoch loss " + fmt(res.history.epochs.back().loss, 4) + ")";
  return o;
}

Outcome five_fold() {
  bool ok = true;
  std::ostringstream s;
  for (size_t n : {5u, 10u, 79u, 100u}) {
    const auto plan = five_fold_split(n, 7);
    std::vector<int> seen(n, 0);
    std::vector<size_t> sizes;
    for (const auto& f : plan.folds) {
      sizes.push_back(f.size());
      for (size_t i : f) {
        if (i >= n) ok = false;
        else ++seen[i];
      }
    }
    for (int c : seen) ok = ok && c == 1;
    const auto [lo, hi] = std::minmax_element(sizes.begin(), sizes.end());
    ok = ok && *hi - *lo <= 1;
    for (int f = 0; f < 5; ++f) {
      std::set<size_t> test(plan.folds[static_cast<size_t>(f)].begin(), plan.folds[static_cast<size_t>(f)].end());
      const auto train_idx = plan.train_indices(f);
      ok = ok && train_idx.size() + test.size() == n;
      for (size_t i : train_idx) ok = ok && !test.count(i);
    }
    if (n == 79) {
      std::vector<size_t> sorted = sizes;
      std::sort(sorted.rbegin(), sorted.rend());
      ok = ok && sorted == std::vector<size_t>{16, 16, 16, 16, 15};
    }
    s << "n=" << n << ":";
    for (size_t z : sizes) s << ' ' << z;
    s << "  ";
  }
  return {ok, s.str() + "disjoint, complete, balanced", {}};
}

Outcome augmentation() {
  // Coordinate-encoded source: channel 0 = y, channel 1 = x, mask = hash(y, x).
  const int64_t h = 80, w = 72;
  SampleRecord rec;
  rec.id = "coords";
  rec.image = Image(h, w);
  rec.mask = Mask(h, w);
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x) {
      rec.image.at(y, x, 0) = static_cast<double>(y) / static_cast<double>(h - 1);
      rec.image.at(y, x, 1) = static_cast<double>(x) / static_cast<double>(w - 1);
      rec.mask.at(y, x) = static_cast<uint8_t>((y * w + x) % 251);
    }
  AugmentConfig geo;
  geo.crop = 64;
  geo.contrast = geo.brightness = {1.0, 1.0};
  AugmentConfig full;
  full.crop = 64;

  int64_t mismatches = 0, checked = 0;
  bool sizes_ok = true, deterministic = true;
  for (uint64_t seed = 0; seed < 1000; ++seed) {
    const auto a = augment(rec, seed, full);
    const auto b = augment(rec, seed, full);
    deterministic = deterministic && a.image.pixels == b.image.pixels && a.mask.labels == b.mask.labels;
    sizes_ok = sizes_ok && a.image.height == 64 && a.image.width == 64 && a.mask.height == 64 && a.mask.width == 64;

    const auto g = augment(rec, seed, geo);
    sizes_ok = sizes_ok && g.image.height == 64 && g.mask.width == 64;
    for (int64_t y = 0; y < 64; ++y)
      for (int64_t x = 0; x < 64; ++x) {
        const double sy = g.image.at(y, x, 0) * static_cast<double>(h - 1);
        const double sx = g.image.at(y, x, 1) * static_cast<double>(w - 1);
        bool match = false;
        for (auto cy = static_cast<int64_t>(std::floor(sy - 1e-9)); cy <= static_cast<int64_t>(std::ceil(sy + 1e-9)); ++cy)
          for (auto cx = static_cast<int64_t>(std::floor(sx - 1e-9)); cx <= static_cast<int64_t>(std::ceil(sx + 1e-9));
               ++cx)
            match = match || (cy >= 0 && cx >= 0 && cy < h && cx < w && g.mask.at(y, x) == (cy * w + cx) % 251);
        mismatches += !match;
        ++checked;
      }
  }
  return {deterministic && sizes_ok && mismatches == 0,
          "1000 seeds: deterministic=" + std::string(deterministic ? "yes" : "no") +
              ", always 64x64=" + (sizes_ok ? "yes" : "no") + ", lockstep " + std::to_string(checked - mismatches) +
              "/" + std::to_string(checked) + " pixels",
          {}};
}

// ---- Loop service criteria -------------------------------------------------

class ServerProcess {
 public:
  ServerProcess(fs::path root, fs::path log) : root_(std::move(root)), log_(std::move(log)) {}
  ~ServerProcess() { stop(SIGKILL); }

  int start() {
    const fs::path port_file = root_.string() + ".port";
    fs::remove(port_file);
    std::vector<std::string> args{DAVIT_CLI_PATH, "serve",    "--channels", "8",       "--depths",
                                  "1,1,1,1",      "--height", "64",         "--width", "64",
                                  "--root",       root_,      "--port",     "0",       "--port-file",
                                  port_file,      "--threads", "16",        "--seed",  "5"};
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    argv.push_back(nullptr);
    posix_spawn_file_actions_t actions;
    posix_spawn_file_actions_init(&actions);
    posix_spawn_file_actions_addopen(&actions, 1, log_.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
    posix_spawn_file_actions_adddup2(&actions, 1, 2);
    const int rc = posix_spawn(&pid_, argv[0], &actions, nullptr, argv.data(), environ);
    posix_spawn_file_actions_destroy(&actions);
    if (rc != 0) throw std::runtime_error(std::string("cannot spawn server: ") + std::strerror(rc));
    for (int i = 0; i < 600; ++i) {
      std::ifstream in(port_file);
      int port = 0;
      if (in >> port && port > 0) return port;
      int status = 0;
      if (waitpid(pid_, &status, WNOHANG) == pid_) {
        pid_ = -1;
        throw std::runtime_error("server exited during startup; see " + log_.string());
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    throw std::runtime_error("server did not report a port");
  }

  int stop(int sig) {
    if (pid_ <= 0) return -1;
    ::kill(pid_, sig);
    int status = 0;
    waitpid(pid_, &status, 0);
    pid_ = -1;
    return status;
  }

 private:
  fs::path root_, log_;
  pid_t pid_ = -1;
};

struct IngestStats {
  int64_t ok = 0;
  int64_t failed = 0;
  double total_ms = 0.0;
};

json must(const loop::ApiResponse& r, const std::string& what) {
  if (!r.ok()) throw std::runtime_error(what + " failed: " + std::to_string(r.status) + " " + r.body.dump() + r.error);
  return r.body;
}

Outcome closed_loop() {
  Outcome o;
  const fs::path work = scratch("loop");
  const fs::path images = work / "terminal_images";
  fs::create_directories(images);
  const auto samples = synth_generate(20, 31, 64);
  std::vector<std::string> payloads;
  for (size_t i = 0; i < samples.size(); ++i) {
    std::ostringstream name;
    name << "frame" << std::setw(2) << std::setfill('0') << i << ".png";
    write_png(images / name.str(), image_to_png(samples[i].image));
    payloads.push_back(loop::encode_image_b64(samples[i].image));
  }

  ServerProcess server(work / "root", work / "server.log");
  int port = server.start();
  loop::ApiClient api("127.0.0.1", port);
  const std::string seed_digest = must(api.get("/v1/model/info"), "model info")["digest"];

  // 1. Terminals stream 20 images.
  loop::SimulationOptions so;
  so.port = port;
  so.images = images;
  so.terminals = 4;
  so.concurrency = 2;
  const auto sim = loop::simulate_terminals(so);
  bool ok = sim.succeeded == 20 && sim.digests == std::set<std::string>{seed_digest};
  o.details.push_back("terminal simulator: " + std::to_string(sim.succeeded) + "/20 accepted");
  const json pending = must(api.get("/v1/predictions?status=pending_review&data=0"), "list");
  ok = ok && pending["total"] == 20;

  // 2. Five unqualified verdicts with corrected masks, three qualified.
  for (int i = 0; i < 8; ++i) {
    json body{{"reviewer", "acceptance"}};
    if (i < 5) {
      body["decision"] = "unqualified";
      body["corrected_mask"] = loop::encode_mask_b64(samples[static_cast<size_t>(i)].mask);
    } else {
      body["decision"] = "qualified";
    }
    must(api.post("/v1/predictions/" + sim.prediction_ids[static_cast<size_t>(i)] + "/verdict", body), "verdict");
  }
  const json stats = must(api.get("/v1/dataset/stats"), "stats");
  ok = ok && stats["size"] == 5 && stats["version"] == 5;
  o.details.push_back("verdicts: 5 unqualified + 3 qualified -> dataset size " + stats["size"].dump());

  // 3. Baseline latency, then parallel training with a concurrent ingest stream.
  IngestStats baseline;
  for (int i = 0; i < 10; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto r = api.post("/v1/terminals/base/images", {{"image", payloads[static_cast<size_t>(i)]}});
    baseline.total_ms += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    (r.status == 201 ? baseline.ok : baseline.failed)++;
  }
  json train_req{{"epochs", 8}, {"batch_size", 2}, {"lr", 3e-3}, {"seed", 1}, {"augment", {{"crop", 64}, {"expansion", 4}}}};
  must(api.post("/v1/parallel/train", train_req), "start training");
  ok = ok && api.post("/v1/parallel/train", train_req).status == 409;

  std::atomic<bool> stop_stream{false};
  std::atomic<bool> training_seen{false};
  IngestStats during;
  std::mutex mu;
  std::thread stream([&] {
    loop::ApiClient c("127.0.0.1", port);
    for (size_t i = 0; !stop_stream; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      const auto r = c.post("/v1/terminals/stream/images", {{"image", payloads[i % payloads.size()]}});
      const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
      std::lock_guard<std::mutex> lock(mu);
      if (training_seen) {
        (r.status == 201 ? during.ok : during.failed)++;
        during.total_ms += ms;
      }
    }
  });
  double last_progress = 0.0;
  bool monotone = true;
  json status;
  for (;;) {
    status = must(api.get("/v1/parallel/status"), "status");
    if (status["state"] == "training") training_seen = true;
    const double p = status["progress"];
    monotone = monotone && p >= last_progress;
    last_progress = p;
    if (status["state"] != "training") break;
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  }
  stop_stream = true;
  stream.join();
  const std::string new_digest = status.value("digest", "");
  ok = ok && status["state"] == "completed" && monotone && !new_digest.empty() &&
       fs::exists(work / "root" / "checkpoints" / (new_digest + ".ckpt"));
  ok = ok && during.ok > 0 && during.failed == 0 && baseline.failed == 0;
  const double base_ms = baseline.total_ms / std::max<int64_t>(1, baseline.ok);
  const double during_ms = during.total_ms / std::max<int64_t>(1, during.ok + during.failed);
  o.details.push_back("parallel training: " + status["total_iterations"].dump() + " iterations, state " +
                      status["state"].get<std::string>() + ", progress monotone=" + (monotone ? "yes" : "no"));
  o.details.push_back("ingest during training: " + std::to_string(during.ok) + " ok / " +
                      std::to_string(during.failed) + " failed; mean latency " + fmt(during_ms, 4) + " ms vs " +
                      fmt(base_ms, 4) + " ms idle (x" + fmt(during_ms / base_ms, 3) + ")");

  // 4. Swap under 100 racing inference requests.
  std::atomic<int> next{0}, done{0};
  std::atomic<bool> swapped{false};
  std::vector<std::string> digests(100);
  std::vector<int> codes(100, 0);
  std::vector<bool> after_swap(100, false);
  std::vector<std::thread> racers;
  for (int t = 0; t < 8; ++t) {
    racers.emplace_back([&] {
      loop::ApiClient c("127.0.0.1", port);
      for (int i = next++; i < 100; i = next++) {
        const bool post_swap = swapped;
        const auto r = c.post("/v1/terminals/race/images", {{"image", payloads[static_cast<size_t>(i) % payloads.size()]}});
        codes[static_cast<size_t>(i)] = r.status;
        if (r.ok()) digests[static_cast<size_t>(i)] = r.body.value("model_digest", "");
        after_swap[static_cast<size_t>(i)] = post_swap;
        ++done;
      }
    });
  }
  while (done < 30) std::this_thread::sleep_for(std::chrono::milliseconds(1));
  const json swap = must(api.post("/v1/weights/swap"), "swap");
  swapped = true;
  for (auto& t : racers) t.join();
  int old_count = 0, new_count = 0, bad = 0, stale_after = 0;
  for (size_t i = 0; i < 100; ++i) {
    if (codes[i] != 201) ++bad;
    else if (digests[i] == seed_digest) old_count++;
    else if (digests[i] == new_digest) new_count++;
    else ++bad;
    if (after_swap[i] && digests[i] != new_digest) ++stale_after;
  }
  ok = ok && bad == 0 && stale_after == 0 && swap["backbone_digest"] == new_digest;
  ok = ok && must(api.get("/v1/model/info"), "info")["digest"] == new_digest;
  ok = ok && api.post("/v1/weights/swap").status == 409;
  o.details.push_back("swap race: " + std::to_string(old_count) + " old + " + std::to_string(new_count) +
                      " new digests, " + std::to_string(bad) + " failed/foreign, " + std::to_string(stale_after) +
                      " stale after swap");

  // 5. Abrupt termination and restart.
  const json before_info = must(api.get("/v1/model/info"), "info");
  const json before_stats = must(api.get("/v1/dataset/stats"), "stats");
  const json before_list = must(api.get("/v1/predictions?data=0"), "list");
  server.stop(SIGKILL);
  port = server.start();
  loop::ApiClient again("127.0.0.1", port);
  const json after_info = must(again.get("/v1/model/info"), "info");
  const json after_stats = must(again.get("/v1/dataset/stats"), "stats");
  const json after_list = must(again.get("/v1/predictions?data=0"), "list");
  const bool restart_ok = after_info["digest"] == before_info["digest"] && after_stats == before_stats &&
                          after_list["total"] == before_list["total"];
  ok = ok && restart_ok;
  o.details.push_back("after SIGKILL + restart: digest " + std::string(after_info["digest"] == new_digest ? "kept" : "LOST") +
                      ", dataset " + after_stats.dump() + ", " + after_list["total"].dump() + " records");
  server.stop(SIGTERM);
  fs::remove_all(work);

  o.pass = ok;
  o.summary = "20 streamed, 5 enrolled, training completed with " + std::to_string(during.ok) +
              " concurrent ingests at 100% success, atomic swap, durable restart";
  if (!ok) o.summary = "see details";
  return o;
}

Outcome dataset_growth() {
  const fs::path work = scratch("growth");
  loop::ServiceOptions opts;
  opts.root = work;
  opts.model = loop_model();
  const auto samples = synth_generate(12, 41, 64);
  bool ok = true;
  int enrolled = 0;
  {
    loop::LoopService svc(opts);
    loop::HttpOptions ho;
    ho.port = 0;
    loop::HttpServer server(svc, ho);
    server.start();
    loop::ApiClient api("127.0.0.1", server.port());
    ok = ok && must(api.get("/v1/dataset/stats"), "stats")["size"] == 0;
    for (size_t i = 0; i < samples.size(); ++i) {
      const json up = must(api.post("/v1/terminals/t/images", {{"image", loop::encode_image_b64(samples[i].image)}}),
                           "ingest");
      const bool enroll = i % 3 != 1;
      json body{{"decision", enroll ? "unqualified" : "qualified"}};
      if (enroll) body["corrected_mask"] = loop::encode_mask_b64(samples[i].mask);
      must(api.post("/v1/predictions/" + up["prediction_id"].get<std::string>() + "/verdict", body), "verdict");
      enrolled += enroll;
      // A repeated verdict must not count twice.
      ok = ok && api.post("/v1/predictions/" + up["prediction_id"].get<std::string>() + "/verdict", body).status == 409;
      ok = ok && must(api.get("/v1/dataset/stats"), "stats")["size"] == enrolled;
    }
    server.stop();
  }
  loop::LoopService reopened(opts);
  ok = ok && reopened.dataset_stats().size == enrolled;
  fs::remove_all(work);
  return {ok, "size tracked the enrolled count after each of 12 verdicts (k=" + std::to_string(enrolled) +
                  "), unchanged by repeats and restart",
          {}};
}

}  // namespace

int main(int argc, char** argv) {
  std::string only;
  bool list = false;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) only = argv[++i];
    else if (a == "--list") list = true;
    else {
      std::cerr << "usage: " << argv[0] << " [--only <name>] [--list]\n";
      return 2;
    }
  }
  const std::vector<Criterion> criteria{
      {"rho-arithmetic", 1, rho_arithmetic},
      {"equivalent-kernel", 1, equivalent_kernel},
      {"dilated-conv-oracle", 60, dilated_conv_oracle},
      {"gradient-suite", 300, gradient_suite},
      {"attention-identity", 1, attention_identity},
      {"receptive-field", 1, receptive_field},
      {"param-counts", 10, param_counts},
      {"flop-analytics", 10, flop_analytics},
      {"metric-oracle", 10, metric_oracle},
      {"overfit-sanity", 600, overfit_sanity},
      {"five-fold", 1, five_fold},
      {"augmentation", 60, augmentation},
      {"closed-loop", 600, closed_loop},
      {"dataset-growth", 60, dataset_growth},
  };
  int failed = 0, ran = 0;
  for (const auto& c : criteria) {
    if (list) {
      std::cout << c.name << '\n';
      continue;
    }
    if (!only.empty() && c.name != only) continue;
    ++ran;
    Outcome o;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.summary = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs <= c.limit_seconds;
    const bool pass = o.pass && in_time;
    failed += !pass;
    std::cout << (pass ? "PASS " : "FAIL ") << std::left << std::setw(20) << c.name << std::right << ' ' << o.summary
              << " [" << std::fixed << std::setprecision(2) << secs << "s, limit " << std::setprecision(0)
              << c.limit_seconds << "s" << (in_time ? "" : ", TOO SLOW") << "]\n";
    std::cout.unsetf(std::ios::floatfield);
    for (const auto& d : o.details) std::cout << "       " << d << '\n';
    std::cout << std::flush;
  }
  if (list) return 0;
  if (ran == 0) {
    std::cerr << "no criterion named " << only << '\n';
    return 2;
  }
  std::cout << (ran - failed) << "/" << ran << " criteria passed\n";
  return failed == 0 ? 0 : 1;
}
