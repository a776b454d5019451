#include <iostream>

#include "CLI11.hpp"
#include "commands.hpp"

using namespace davit::cli;

namespace {

void add_model_flags(CLI::App* cmd, ModelFlags& m) {
  cmd->add_option("--scale", m.scale, "Model preset")->check(CLI::IsMember({"tiny", "small", "base"}));
  cmd->add_option("--channels", m.channels, "Base channel count C (overrides the preset)")->check(CLI::PositiveNumber);
  cmd->add_option("--depths", m.depths, "Blocks per stage, e.g. 1,1,1,1")->delimiter(',')->expected(4);
  cmd->add_option("--mlp-ratio", m.mlp_ratio, "MLP hidden width ratio (overrides the preset)");
  cmd->add_option("--kernels", m.kernels,
                  "DCSA branches as kernel:dilation lists; ';' separates sweep variants, e.g. 3:1,5:2,7:3;5:1,7:2,9:3");
  cmd->add_option("--dilation-rates", m.dilations, "Sweep of rates r: branches 3:1, 5:r, 7:r+1 (r=0: no dilation)")
      ->delimiter(',');
  cmd->add_option("--height", m.height, "Input height for analytics and model info")->check(CLI::PositiveNumber);
  cmd->add_option("--width", m.width, "Input width for analytics and model info")->check(CLI::PositiveNumber);
}

void add_data_flags(CLI::App* cmd, DataFlags& d) {
  cmd->add_option("--data", d.data, "Dataset directory with images/ and masks/")->check(CLI::ExistingDirectory);
  cmd->add_option("--synth", d.synth, "Use this many synthetic samples instead of --data")->check(CLI::NonNegativeNumber);
  cmd->add_option("--synth-size", d.synth_size, "Synthetic image side (multiple of 32)")->check(CLI::PositiveNumber);
  cmd->add_option("--synth-seed", d.synth_seed, "Synthetic data seed");
}

void add_train_flags(CLI::App* cmd, TrainFlags& t) {
  cmd->add_option("--epochs", t.epochs, "Training epochs");
  cmd->add_option("--batch", t.batch, "Batch size");
  cmd->add_option("--lr", t.lr, "Adam learning rate (constant)");
  cmd->add_option("--seed", t.seed, "Initialization and shuffling seed");
  cmd->add_option("--max-iterations", t.max_iterations, "Stop after this many optimizer steps (0: no cap)");
  cmd->add_flag("--augment", t.augment, "Enable crop/photometric/flip/scale augmentation");
  cmd->add_option("--crop", t.crop, "Augmentation crop size");
  cmd->add_option("--expansion", t.expansion, "Augmented crops per source image per epoch");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DA-VIT coal maceral segmentation: training, analysis and the review loop service", "davit"};
  app.set_config("--config", "", "INI or TOML file with option defaults (flags take precedence)");
  app.require_subcommand(0, 1);
  app.option_defaults()->always_capture_default();

  ModelFlags model;
  DataFlags data;
  TrainFlags training;
  std::filesystem::path out;

  auto* train = app.add_subcommand("train", "Train a model and write checkpoint, history and metrics");
  add_model_flags(train, model);
  add_data_flags(train, data);
  add_train_flags(train, training);
  train->add_option("--out", out, "Output directory");

  std::filesystem::path checkpoint;
  bool strict = false;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file")->required()->check(CLI::ExistingFile);
  add_data_flags(eval, data);
  eval->add_flag("--strict-miou", strict, "Average IoU over all classes, including absent ones");
  eval->add_option("--out", out, "Output directory for metrics.json");

  uint64_t split_seed = 0;
  auto* crossval = app.add_subcommand("crossval", "Five-fold cross-validation");
  add_model_flags(crossval, model);
  add_data_flags(crossval, data);
  add_train_flags(crossval, training);
  crossval->add_option("--split-seed", split_seed, "Fold assignment seed");
  crossval->add_option("--out", out, "Output directory");

  auto* analyze = app.add_subcommand("analyze", "DCSA decomposition, parameter and FLOP reports");
  add_model_flags(analyze, model);
  analyze->add_option("--out", out, "Directory for CSV reports");

  bool as_json = false;
  auto* flops = app.add_subcommand("flops", "Analytic forward FLOPs");
  add_model_flags(flops, model);
  flops->add_flag("--json", as_json, "Print JSON instead of a table");

  auto* synth = app.add_subcommand("synth", "Write a synthetic dataset");
  add_data_flags(synth, data);
  synth->add_option("--out", out, "Output directory")->required();

  ServeFlags serve_flags;
  auto* serve = app.add_subcommand("serve", "Run the loop service HTTP API");
  add_model_flags(serve, model);
  serve->add_option("--root", serve_flags.root, "State directory (log, checkpoints, dataset)");
  serve->add_option("--host", serve_flags.host, "Listen address");
  serve->add_option("--port", serve_flags.port, "Listen port (0 picks a free one)")->check(CLI::Range(0, 65535));
  serve->add_option("--port-file", serve_flags.port_file, "Write the bound port here once listening");
  serve->add_option("--base-data", serve_flags.base_data, "Dataset trained on alongside enrolled samples")
      ->check(CLI::ExistingDirectory);
  serve->add_option("--ui", serve_flags.ui, "Static review UI directory served at /")->check(CLI::ExistingDirectory);
  serve->add_option("--seed", serve_flags.seed, "Seed for the initial backbone weights");
  serve->add_option("--threads", serve_flags.threads, "HTTP worker threads")->check(CLI::PositiveNumber);

  SimulateFlags sim;
  auto* simulate = app.add_subcommand("simulate-terminals", "Replay a directory of images against the service");
  simulate->add_option("--host", sim.host, "Service address");
  simulate->add_option("--port", sim.port, "Service port")->required();
  simulate->add_option("--images", sim.images, "Directory of PNG images")->required()->check(CLI::ExistingDirectory);
  simulate->add_option("--terminals", sim.terminals, "Number of simulated terminals")->check(CLI::PositiveNumber);
  simulate->add_option("--concurrency", sim.concurrency, "Parallel uploads")->check(CLI::PositiveNumber);
  simulate->add_option("--repeat", sim.repeat, "Passes over the directory")->check(CLI::PositiveNumber);

  double tolerance = 1e-6;
  int64_t coordinates = 24;
  uint64_t gc_seed = 0;
  bool no_model = false;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  gradcheck->add_option("--tolerance", tolerance, "Maximum relative error");
  gradcheck->add_option("--coordinates", coordinates, "Coordinates sampled per checked tensor")
      ->check(CLI::PositiveNumber);
  gradcheck->add_option("--seed", gc_seed, "Sampling seed");
  gradcheck->add_flag("--no-model", no_model, "Skip the reduced-model check");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return e.get_exit_code() == 0 ? app.exit(e) : (app.exit(e), 2);
  }
  if (app.get_subcommands().empty()) {
    std::cerr << app.help();
    return 2;
  }
  CLI::App* chosen = app.get_subcommands().front();
  std::cerr << "# resolved configuration\n[" << chosen->get_name() << "]\n"
            << chosen->config_to_str(true, false) << std::flush;

  try {
    if (train->parsed()) return run_train(model, data, training, out);
    if (eval->parsed()) return run_eval(checkpoint, data, strict, out);
    if (crossval->parsed()) return run_crossval(model, data, training, split_seed, out);
    if (analyze->parsed()) return run_analyze(model, out);
    if (flops->parsed()) return run_flops(model, as_json);
    if (synth->parsed()) return run_synth(data, out);
    if (serve->parsed()) return run_serve(model, serve_flags);
    if (simulate->parsed()) return run_simulate(sim);
    if (gradcheck->parsed()) return run_gradcheck(tolerance, coordinates, gc_seed, !no_model);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
