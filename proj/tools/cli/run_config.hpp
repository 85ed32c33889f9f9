#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "osreg/analysis.hpp"
#include "osreg/data.hpp"
#include "osreg/network.hpp"
#include "osreg/trainer.hpp"

namespace osreg::cli {

/// Bad configuration: unknown key, wrong type, invalid value or missing
/// input. `key` is the dotted path of the offending entry.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what)
      : std::runtime_error(key.empty() ? what : key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

struct DataConfig {
  /// "synth" or "cifar10". Synthetic images are quantized to 8 bits like
  /// CIFAR records.
  std::string source = "synth";
  std::string cifar_dir;
  int classes = 4;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 100;
  /// Labeled training samples L; 0 means all.
  std::size_t labeled = 0;
  /// Synthetic data depends on this seed only, so runs with different
  /// `seed` values share one dataset.
  std::uint64_t synth_seed = 1234;
  SynthOptions synth;
};

struct AnalysisConfig {
  /// Empty means the model's last convolution.
  std::string layer;
  std::size_t correlation_images = 1000;
  std::size_t correlation_bins = 20;
  CorrelationMode correlation_mode = CorrelationMode::PerImage;
  std::size_t calibration_bins = 15;
  std::vector<double> prune_rates{0, 22, 38, 53, 61, 69, 77};
  /// Empty means <out_dir>/model.ckpt.
  std::string checkpoint;
  /// Optional CSV of probabilities (K columns, then the label) for analyze.
  std::string predictions;
  std::size_t gradcam_image = 0;
  /// -1 means the predicted class.
  int gradcam_class = -1;
  double gradcam_prune_rate = 0.0;
};

struct RunConfig {
  std::string preset;
  std::uint64_t seed = 0;
  std::string out_dir;
  std::size_t threads = 1;
  /// Checkpoint to continue training from; empty for a fresh run.
  std::string resume;
  DataConfig data;
  ModelConfig model;
  TrainConfig train;
  AnalysisConfig analysis;
  /// Fully resolved configuration as pretty JSON with sorted keys.
  std::string resolved_json;

  std::string analysis_layer() const;
  std::string checkpoint_path() const;
};

std::vector<std::string> preset_names();

/// Command-line overrides applied last.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out_dir;
  std::optional<std::size_t> threads;
  std::optional<std::string> predictions;
  std::optional<std::string> preset;
};

inline constexpr const char* kEnvPrefix = "OSREG_";

/// Layering: preset defaults, then the JSON text (its "preset" key picks the
/// base), then environment overrides OSREG_<SECTION>__<KEY>=<value> (value
/// parsed as JSON when possible, else taken as a string), then `overrides`.
/// Throws ConfigError.
RunConfig resolve_config(const std::string& json_text, const std::map<std::string, std::string>& env,
                         const Overrides& overrides = {});

/// Reads `path` (empty for none) and the process environment.
RunConfig load_config(const std::string& path, const Overrides& overrides = {});

/// OSREG_* entries of the process environment.
std::map<std::string, std::string> osreg_environment();

}  // namespace osreg::cli
