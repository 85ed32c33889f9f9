#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <iostream>

#include "commands.hpp"
#include "run_config.hpp"

int main(int argc, char** argv) {
  using namespace osreg::cli;
  CLI::App app{"Orthogonal-sphere regularized Pi-model training and analysis"};
  app.require_subcommand(1);

  std::string config_path;
  Overrides ov;
  std::uint64_t seed = 0;
  std::string out_dir, predictions, preset;
  std::size_t threads = 1;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON run configuration");
    sub->add_option("--preset", preset, "base preset (desk-synth, desk-cifar4, paper-cifar10)");
    sub->add_option("--seed", seed, "run seed");
    sub->add_option("--out", out_dir, "output directory");
    sub->add_option("--threads", threads, "worker threads for evaluation and analysis")->check(CLI::PositiveNumber);
  };
  auto* train = app.add_subcommand("train", "train a model and write the log and checkpoint");
  auto* analyze = app.add_subcommand("analyze", "channel correlation and calibration of a checkpoint");
  auto* prune = app.add_subcommand("prune", "magnitude pruning sweep of a checkpoint");
  auto* gradcam = app.add_subcommand("gradcam", "Grad-CAM heatmap and overlay for one test image");
  for (auto* s : {train, analyze, prune, gradcam}) add_common(s);
  analyze->add_option("--predictions", predictions, "CSV of class probabilities and labels");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  auto* sub = app.get_subcommands().front();
  if (sub->count("--seed")) ov.seed = seed;
  if (sub->count("--out")) ov.out_dir = out_dir;
  if (sub->count("--threads")) ov.threads = threads;
  if (sub->count("--preset")) ov.preset = preset;
  if (sub == analyze && analyze->count("--predictions")) ov.predictions = predictions;

  RunConfig cfg;
  try {
    cfg = load_config(config_path, ov);
  } catch (const ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return kExitConfig;
  }
  return run_command(sub->get_name(), cfg);
}
