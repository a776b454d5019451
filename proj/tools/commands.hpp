#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "davit/dcsa.hpp"
#include "davit/model.hpp"
#include "davit/trainer.hpp"

namespace davit::cli {

// Bad flag values found after parsing; reported with exit code 2.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ModelFlags {
  std::string scale = "tiny";
  int64_t channels = 0;  // 0 keeps the preset
  std::vector<int> depths;
  std::string kernels;         // "3:1,5:2,7:3", sweeps separated by ';'
  std::vector<int> dilations;  // one variant per rate
  int64_t height = 512;
  int64_t width = 512;
  double mlp_ratio = 0.0;  // 0 keeps the preset
};

struct DataFlags {
  std::filesystem::path data;
  int64_t synth = 0;
  int64_t synth_size = 64;
  uint64_t synth_seed = 1;
};

struct TrainFlags {
  int epochs = 10;
  int batch = 8;
  double lr = 1e-3;
  uint64_t seed = 0;
  int64_t max_iterations = 0;
  bool augment = false;
  int64_t crop = 512;
  int expansion = 100;
};

struct Variant {
  std::string label;
  ModelConfig config;
};

std::vector<dcsa::Branch> parse_branches(const std::string& text);
std::vector<Variant> model_variants(const ModelFlags& flags);
std::vector<SampleRecord> load_samples(const DataFlags& flags);
TrainConfig train_config(const TrainFlags& flags);

int run_train(const ModelFlags& m, const DataFlags& d, const TrainFlags& t, const std::filesystem::path& out);
int run_eval(const std::filesystem::path& checkpoint, const DataFlags& d, bool strict, const std::filesystem::path& out);
int run_crossval(const ModelFlags& m, const DataFlags& d, const TrainFlags& t, uint64_t split_seed,
                 const std::filesystem::path& out);
int run_analyze(const ModelFlags& m, const std::filesystem::path& out);
int run_flops(const ModelFlags& m, bool json);
int run_synth(const DataFlags& d, const std::filesystem::path& out);

struct ServeFlags {
  std::filesystem::path root = "davit-loop";
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path port_file;
  std::filesystem::path base_data;
  std::filesystem::path ui;
  uint64_t seed = 0;
  int threads = 8;
};
int run_serve(const ModelFlags& m, const ServeFlags& s);

struct SimulateFlags {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path images;
  int terminals = 1;
  int concurrency = 1;
  int repeat = 1;
};
int run_simulate(const SimulateFlags& s);

int run_gradcheck(double tolerance, int64_t coordinates, uint64_t seed, bool include_model);

}  // namespace davit::cli
