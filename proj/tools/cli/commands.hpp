#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "osreg/analysis.hpp"
#include "osreg/checkpoint.hpp"
#include "osreg/trainer.hpp"
#include "run_config.hpp"

namespace osreg::cli {

/// Seeds of the independent random streams of a run.
struct RunSeeds {
  std::uint64_t init;
  std::uint64_t train;
  std::uint64_t split;
  std::uint64_t halves;
};
RunSeeds run_seeds(std::uint64_t seed);

struct RawData {
  Dataset train;
  Dataset test;
};

/// Loads the configured source without normalization. A missing CIFAR
/// directory or record file is a ConfigError on data.cifar_dir.
RawData load_raw_data(const DataConfig& cfg);

struct TrainOutcome {
  std::vector<EpochRecord> log;
  Model<float> model;
  AdamState<float> adam;
  double test_accuracy = 0.0;
};

/// Train-set normalization, semi-supervised split, fresh or resumed model,
/// then every remaining epoch. After each epoch the log and the checkpoint
/// in out_dir are rewritten.
TrainOutcome run_train(const RunConfig& cfg);

struct AnalyzeOutcome {
  /// Empty when the calibration came from a predictions file.
  std::string correlation_csv;
  std::string calibration_csv;
  CalibrationReport calibration;
  CorrelationStats correlation;
  double accuracy = 0.0;
};

AnalyzeOutcome run_analyze(const RunConfig& cfg);

/// Reads rows "p_0,...,p_{K-1},label"; a first line starting with a letter
/// is taken as a header.
void read_predictions(const std::string& path, std::vector<double>& probs, std::vector<int>& labels,
                      std::size_t& classes);

struct PruneOutcome {
  std::vector<PruneRow> rows;
  std::string csv;
};

PruneOutcome run_prune(const RunConfig& cfg);

struct GradcamOutcome {
  Heatmap map;        // at layer resolution
  Heatmap upsampled;  // 32x32
  Pnm heatmap;
  Pnm overlay;
  int target = 0;
  std::size_t pruned = 0;
};

GradcamOutcome run_gradcam(const RunConfig& cfg);

/// Writes resolved_config.json and runs the command. Returns the process
/// exit code: 0 success, 2 configuration error, 3 runtime failure.
int run_command(const std::string& command, const RunConfig& cfg);

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitRuntime = 3;

}  // namespace osreg::cli
