#include "commands.hpp"

#include <signal.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <sstream>
#include <thread>

#include "davit/gradient_suite.hpp"
#include "davit/http_api.hpp"
#include "davit/service.hpp"
#include "json.hpp"

namespace davit::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Reference {
  const char* scale;
  double params_m;
};
constexpr Reference kParamReference[] = {{"tiny", 4.95}, {"small", 14.74}, {"base", 27.57}};
constexpr double kTinyGflopsReference = 8.99;

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  return out;
}

int equivalent_extent(const std::vector<dcsa::Branch>& branches) {
  int k = 0;
  for (const auto& b : branches) k = std::max(k, dcsa::equivalent_kernel_size(b.kernel, b.dilation));
  return k;
}

std::string branches_text(const std::vector<dcsa::Branch>& branches) {
  std::string s;
  for (const auto& b : branches) s += (s.empty() ? "" : ",") + std::to_string(b.kernel) + ":" + std::to_string(b.dilation);
  return s;
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

fs::path variant_dir(const fs::path& out, const std::vector<Variant>& variants, const Variant& v) {
  return variants.size() > 1 ? out / v.label : out;
}

bool is_unmodified_preset(const ModelFlags& f) {
  return f.channels == 0 && f.depths.empty() && f.mlp_ratio == 0.0 && f.kernels.empty() && f.dilations.empty();
}

void print_epoch(const std::string& prefix, const EpochRecord& r, int epochs) {
  std::printf("%sepoch %d/%d  iter %lld  loss %.5f  pa %.4f  miou %.4f  (%.2fs)\n", prefix.c_str(), r.epoch, epochs,
              static_cast<long long>(r.iterations), r.loss, r.pa, r.miou, r.seconds);
  std::fflush(stdout);
}

}  // namespace

std::vector<dcsa::Branch> parse_branches(const std::string& text) {
  std::vector<dcsa::Branch> out;
  for (const auto& item : split(text, ',')) {
    const auto parts = split(item, ':');
    try {
      if (parts.size() == 1) out.push_back({std::stoi(parts[0]), 1});
      else if (parts.size() == 2) out.push_back({std::stoi(parts[0]), std::stoi(parts[1])});
      else throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw UsageError("bad kernel spec '" + item + "' (expected kernel[:dilation])");
    }
  }
  if (out.empty()) throw UsageError("empty kernel list");
  return out;
}

std::vector<Variant> model_variants(const ModelFlags& f) {
  ModelConfig base;
  try {
    base = ModelConfig::preset(f.scale);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  if (f.channels != 0) base.base_channels = f.channels;
  if (!f.depths.empty()) {
    if (f.depths.size() != 4) throw UsageError("--depths takes four comma-separated stage depths");
    std::copy(f.depths.begin(), f.depths.end(), base.depths.begin());
  }
  if (f.mlp_ratio != 0.0) base.mlp_ratio = f.mlp_ratio;
  base.input_height = f.height;
  base.input_width = f.width;
  if (!f.kernels.empty() && !f.dilations.empty()) throw UsageError("--kernels and --dilation-rates are exclusive");

  std::vector<Variant> out;
  auto add = [&](std::string label, const std::vector<dcsa::Branch>& branches) {
    ModelConfig c = base;
    c.dcsa.branches = branches;
    c.dcsa.equivalent_kernel = equivalent_extent(branches);
    out.push_back({std::move(label), c});
  };
  if (!f.kernels.empty()) {
    for (const auto& spec : split(f.kernels, ';')) {
      const auto branches = parse_branches(spec);
      std::string label = "K" + std::to_string(equivalent_extent(branches)) + "_";
      for (const auto& b : branches) label += std::to_string(b.kernel) + "x" + std::to_string(b.dilation) + "_";
      label.pop_back();
      add(label, branches);
    }
  } else if (!f.dilations.empty()) {
    // Rate r dilates the medium branch by r and the long branch by r + 1;
    // r = 0 leaves every branch undilated.
    for (int r : f.dilations) {
      if (r < 0) throw UsageError("dilation rates must be >= 0");
      const int md = std::max(r, 1), ld = r == 0 ? 1 : r + 1;
      add("r" + std::to_string(r), {{3, 1}, {5, md}, {7, ld}});
    }
  } else {
    out.push_back({f.scale, base});
  }
  for (auto& v : out) {
    v.config.name = v.label == f.scale ? f.scale : f.scale + "-" + v.label;
    try {
      v.config.validate();
    } catch (const std::invalid_argument& e) {
      throw UsageError(e.what());
    }
  }
  return out;
}

std::vector<SampleRecord> load_samples(const DataFlags& f) {
  if (f.data.empty() == (f.synth == 0)) throw UsageError("give exactly one of --data <dir> or --synth <count>");
  if (f.synth > 0) return synth_generate(static_cast<size_t>(f.synth), f.synth_seed, f.synth_size);
  LoadResult r = load_dataset(f.data);
  for (const auto& e : r.errors) std::cerr << "warning: " << e.file << ": " << e.message << '\n';
  if (r.records.empty()) throw std::runtime_error("no usable samples in " + f.data.string());
  return std::move(r.records);
}

TrainConfig train_config(const TrainFlags& f) {
  TrainConfig c;
  c.epochs = f.epochs;
  c.batch_size = f.batch;
  c.lr = f.lr;
  c.seed = f.seed;
  c.max_iterations = f.max_iterations;
  if (f.augment) {
    AugmentConfig a;
    a.crop = f.crop;
    a.expansion = f.expansion;
    c.augment = a;
  }
  try {
    c.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return c;
}

int run_train(const ModelFlags& m, const DataFlags& d, const TrainFlags& t, const fs::path& out) {
  const auto variants = model_variants(m);
  const TrainConfig tc = train_config(t);
  const auto data = load_samples(d);
  std::printf("training on %zu samples\n", data.size());
  for (const auto& v : variants) {
    if (variants.size() > 1) std::printf("== %s (%s)\n", v.label.c_str(), branches_text(v.config.dcsa.branches).c_str());
    TrainHooks hooks;
    hooks.on_epoch = [&](const EpochRecord& r) { print_epoch("", r, tc.epochs); };
    const TrainResult res = train(build_model(v.config, t.seed), data, tc, hooks);
    const Metrics final_metrics = evaluate(res.model, data);
    std::printf("final train-set pa %.4f  miou %.4f  digest %s\n", final_metrics.pa, final_metrics.miou,
                model_digest(res.model).c_str());
    if (!out.empty()) {
      const fs::path dir = variant_dir(out, variants, v);
      fs::create_directories(dir);
      save_checkpoint(res.model, dir / "model.ckpt");
      std::ofstream hist(dir / "history.jsonl");
      write_history_jsonl(hist, res.history);
      write_file(dir / "metrics.json", metrics_json(final_metrics) + "\n");
      write_file(dir / "model.txt", v.config.canonical_text());
    }
  }
  return 0;
}

int run_eval(const fs::path& checkpoint, const DataFlags& d, bool strict, const fs::path& out) {
  const Model model = load_checkpoint(checkpoint);
  const auto data = load_samples(d);
  const Metrics metrics = evaluate(model, data, strict ? IouMode::Strict : IouMode::ExcludeEmpty);
  std::printf("samples %zu  pa %.4f  miou %.4f (%s)\n", data.size(), metrics.pa, metrics.miou,
              strict ? "all classes" : "classes present");
  write_confusion_table(std::cout, metrics.confusion);
  if (!out.empty()) write_file(out / "metrics.json", metrics_json(metrics) + "\n");
  return 0;
}

int run_crossval(const ModelFlags& m, const DataFlags& d, const TrainFlags& t, uint64_t split_seed,
                 const fs::path& out) {
  const auto variants = model_variants(m);
  const TrainConfig tc = train_config(t);
  const auto data = load_samples(d);
  json summary = json::array();
  for (const auto& v : variants) {
    std::printf("== %s: five-fold cross-validation on %zu samples\n", v.label.c_str(), data.size());
    auto res = cross_validate(data, v.config, tc, split_seed, [&](int fold, const EpochRecord& r) {
      print_epoch("fold " + std::to_string(fold) + " ", r, tc.epochs);
    });
    json folds = json::array();
    for (size_t f = 0; f < res.folds.size(); ++f) {
      std::printf("fold %zu: test %zu samples  pa %.4f  miou %.4f\n", f, res.plan.folds[f].size(), res.folds[f].pa,
                  res.folds[f].miou);
      folds.push_back(json::parse(metrics_json(res.folds[f])));
    }
    std::printf("mean pa %.4f  mean miou %.4f\n", res.mean_pa, res.mean_miou);
    json row{{"variant", v.label},
             {"branches", branches_text(v.config.dcsa.branches)},
             {"mean_pa", res.mean_pa},
             {"mean_miou", res.mean_miou}};
    summary.push_back(row);
    if (!out.empty()) {
      row["folds"] = folds;
      row["plan"] = res.plan.folds;
      write_file(variant_dir(out, variants, v) / "crossval.json", row.dump(2) + "\n");
    }
  }
  if (!out.empty() && variants.size() > 1) write_file(out / "sweep.json", summary.dump(2) + "\n");
  return 0;
}

int run_analyze(const ModelFlags& m, const fs::path& out) {
  const auto variants = model_variants(m);
  std::ostringstream csv;
  csv << "variant,branches,equivalent_kernel,receptive_field,rho,params,gflops\n";
  for (const auto& v : variants) {
    const ModelConfig& cfg = v.config;
    dcsa::Config dc = cfg.stage_dcsa(0);
    const auto report = dcsa::decomposition_report(dc);
    const ParamReport params = param_report(cfg);
    const FlopReport flops = flop_report(cfg, cfg.input_height, cfg.input_width);
    std::cout << "== " << cfg.name << "\n";
    dcsa::write_report_text(std::cout, report);
    std::cout << '\n';
    write_param_report(std::cout, cfg, params);
    if (is_unmodified_preset(m)) {
      for (const auto& ref : kParamReference) {
        if (m.scale == ref.scale) {
          const double got = static_cast<double>(params.total) / 1e6;
          std::cout << std::fixed << std::setprecision(3) << "  reference: " << ref.params_m << "M, measured " << got
                    << "M (" << std::showpos << std::setprecision(1) << 100.0 * (got / ref.params_m - 1.0)
                    << std::noshowpos << "%)\n";
          std::cout.unsetf(std::ios::floatfield);
        }
      }
    }
    std::cout << '\n';
    write_flop_report(std::cout, cfg, cfg.input_height, cfg.input_width, flops);
    if (is_unmodified_preset(m) && m.scale == "tiny" && cfg.input_height == 512 && cfg.input_width == 512) {
      const double g = static_cast<double>(flops.total) / 1e9;
      std::cout << std::fixed << std::setprecision(3) << "  reference: " << kTinyGflopsReference << " GFLOPs, measured "
                << g << " (" << g / kTinyGflopsReference << "x)\n";
      std::cout.unsetf(std::ios::floatfield);
    }
    std::cout << '\n';
    std::vector<int> kernels;
    for (const auto& b : dc.branches) kernels.push_back(b.kernel);
    const int k = dc.equivalent_kernel;
    csv << v.label << ",\"" << branches_text(dc.branches) << "\"," << k << ',' << report.receptive_field << ','
        << std::setprecision(6) << std::fixed << dcsa::param_reduction_rho(kernels, k, k) << ',' << params.total
        << ',' << std::setprecision(4) << static_cast<double>(flops.total) / 1e9 << '\n';
    csv.unsetf(std::ios::floatfield);
    if (!out.empty()) {
      const fs::path dir = variant_dir(out, variants, v);
      fs::create_directories(dir);
      std::ofstream dcsv(dir / "dcsa.csv");
      dcsa::write_report_csv(dcsv, report);
    }
  }
  if (variants.size() > 1) std::cout << "sweep summary\n" << csv.str();
  if (!out.empty()) write_file(out / "summary.csv", csv.str());
  return 0;
}

int run_flops(const ModelFlags& m, bool as_json) {
  for (const auto& v : model_variants(m)) {
    const auto& cfg = v.config;
    const FlopReport r = flop_report(cfg, cfg.input_height, cfg.input_width);
    if (!as_json) {
      write_flop_report(std::cout, cfg, cfg.input_height, cfg.input_width, r);
      continue;
    }
    json by = json::object();
    for (const auto& row : r.by_component) by[row.component] = row.flops;
    std::cout << json{{"model", cfg.name},
                      {"input", {cfg.input_height, cfg.input_width}},
                      {"flops", r.total},
                      {"conv_flops", r.conv},
                      {"by_component", by},
                      {"methodology", flop_methodology()}}
                     .dump()
              << '\n';
  }
  return 0;
}

int run_synth(const DataFlags& d, const fs::path& out) {
  if (d.synth < 1) throw UsageError("--synth <count> must be >= 1");
  if (out.empty()) throw UsageError("--out <dir> is required");
  const auto samples = synth_generate(static_cast<size_t>(d.synth), d.synth_seed, d.synth_size);
  for (const auto& s : samples) save_sample(out, s);
  write_palette_json(out / "palette.json");
  std::printf("wrote %zu samples of %lldx%lld to %s\n", samples.size(), static_cast<long long>(d.synth_size),
              static_cast<long long>(d.synth_size), out.string().c_str());
  return 0;
}

int run_serve(const ModelFlags& m, const ServeFlags& s) {
  const auto variants = model_variants(m);
  if (variants.size() != 1) throw UsageError("serve takes a single model configuration");

  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  loop::ServiceOptions opts;
  opts.root = s.root;
  opts.model = variants[0].config;
  opts.seed = s.seed;
  opts.base_data = s.base_data;
  loop::LoopService service(opts);
  loop::HttpOptions ho;
  ho.host = s.host;
  ho.port = s.port;
  ho.static_dir = s.ui;
  ho.threads = s.threads;
  loop::HttpServer server(service, ho);
  const int port = server.bind();
  if (!s.port_file.empty()) {
    const fs::path tmp = s.port_file.string() + ".tmp";
    write_file(tmp, std::to_string(port) + "\n");
    fs::rename(tmp, s.port_file);
  }
  const auto st = service.state();
  std::printf("serving on http://%s:%d  root %s  backbone %s  dataset size %lld\n", s.host.c_str(), port,
              s.root.string().c_str(), st.backbone_digest.c_str(), static_cast<long long>(st.dataset.size));
  std::fflush(stdout);

  std::atomic<bool> stopping{false};
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&signals, &sig);
    stopping = true;
    server.stop();
  });
  server.run();
  if (!stopping) kill(getpid(), SIGTERM);
  waiter.join();
  std::printf("stopped\n");
  return 0;
}

int run_simulate(const SimulateFlags& s) {
  loop::SimulationOptions o;
  o.host = s.host;
  o.port = s.port;
  o.images = s.images;
  o.terminals = s.terminals;
  o.concurrency = s.concurrency;
  o.repeat = s.repeat;
  if (o.images.empty()) throw UsageError("--images <dir> is required");
  const auto rep = loop::simulate_terminals(o);
  std::vector<double> lat = rep.latencies_ms;
  std::sort(lat.begin(), lat.end());
  const double mean = lat.empty() ? 0.0 : std::accumulate(lat.begin(), lat.end(), 0.0) / static_cast<double>(lat.size());
  json out{{"sent", rep.sent},
           {"succeeded", rep.succeeded},
           {"failed", rep.sent - rep.succeeded},
           {"digests", rep.digests},
           {"latency_ms", {{"mean", mean}, {"p50", lat.empty() ? 0.0 : lat[lat.size() / 2]},
                           {"max", lat.empty() ? 0.0 : lat.back()}}},
           {"prediction_ids", rep.prediction_ids},
           {"errors", rep.errors}};
  std::cout << out.dump(2) << '\n';
  return rep.succeeded == rep.sent ? 0 : 1;
}

int run_gradcheck(double tolerance, int64_t coordinates, uint64_t seed, bool include_model) {
  GradientSuiteOptions o;
  o.tolerance = tolerance;
  o.max_coordinates = coordinates;
  o.seed = seed;
  o.include_model = include_model;
  const auto results = run_gradient_suite(o);
  write_gradient_suite(std::cout, results);
  double worst = 0.0;
  bool ok = true;
  for (const auto& r : results) {
    worst = std::max(worst, r.max_relative_error);
    ok = ok && r.passed;
  }
  std::printf("max relative error %.3e over %zu checks (tolerance %.1e): %s\n", worst, results.size(), tolerance,
              ok ? "PASS" : "FAIL");
  return ok ? 0 : 1;
}

}  // namespace davit::cli
