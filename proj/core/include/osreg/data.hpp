#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "osreg/rng.hpp"

namespace osreg {

inline constexpr std::size_t kImageChannels = 3;
inline constexpr std::size_t kImageSide = 32;
inline constexpr std::size_t kImagePixels = kImageSide * kImageSide;
inline constexpr std::size_t kImageSize = kImageChannels * kImagePixels;
inline constexpr std::size_t kCifarRecordBytes = 1 + kImageSize;

/// Images are channel-major 3x32x32 blocks stored back to back.
struct Dataset {
  std::vector<float> images;
  std::vector<int> labels;
  int classes = 10;
  bool normalized = false;

  std::size_t size() const noexcept { return labels.size(); }
  bool empty() const noexcept { return labels.empty(); }
  std::span<const float> image(std::size_t i) const {
    return {images.data() + i * kImageSize, kImageSize};
  }
  std::span<float> image(std::size_t i) { return {images.data() + i * kImageSize, kImageSize}; }

  /// Throws std::invalid_argument when a label or pixel breaks the invariants.
  void validate() const;
};

/// Decodes CIFAR-10 binary records: one label byte, then 1024 R, 1024 G and
/// 1024 B bytes, each plane row-major. Pixels are scaled by 1/255.
Dataset read_cifar10_bin(const std::filesystem::path& path);
Dataset decode_cifar10(std::span<const std::uint8_t> bytes, const std::string& source = "<memory>");
std::vector<std::uint8_t> encode_cifar10(const Dataset& data);
void write_cifar10_bin(const std::filesystem::path& path, const Dataset& data);

/// Reads and concatenates several record files.
Dataset read_cifar10_files(const std::vector<std::filesystem::path>& paths);

Dataset subset(const Dataset& data, std::span<const std::size_t> indices);
/// First `per_class` samples of each class in [0, classes), in file order,
/// with labels kept.
Dataset take_classes(const Dataset& data, int classes, std::size_t per_class);
Dataset concat(const Dataset& a, const Dataset& b);

struct SynthOptions {
  double amplitude = 0.3;
  double noise_std = 0.1;
  int jitter_px = 2;
  /// Weight of a pattern shared by all classes, in [0,1). Higher is harder.
  double shared_weight = 0.0;
  /// Per-sample contrast is drawn from [1-contrast_spread, 1+contrast_spread].
  double contrast_spread = 0.2;
  /// Number of random bright/dark blobs pasted per image as clutter.
  int distractors = 0;
};

/// Class-patterned 32x32 images. Class c owns a smooth template built from
/// random gratings and Gaussian blobs; each sample is the template under a
/// random shift and contrast, plus Gaussian noise, clipped to [0,1]. Sample
/// i has label i % classes. With default options the classes are separable
/// by a nearest-centroid probe on raw pixels.
Dataset synth_dataset(int classes, std::size_t per_class, std::uint64_t seed,
                      const SynthOptions& options = {});

struct SemiSplit {
  std::vector<std::size_t> labeled;
  std::vector<std::size_t> unlabeled;
  std::uint64_t seed = 0;
};

/// Class-balanced labeled subset of size L (per-class counts differ by at
/// most one; leftover units go to the lowest class indices).
SemiSplit split_semi(const Dataset& data, std::size_t labeled_count, std::uint64_t seed);

struct PerturbConfig {
  int translate_max_px = 2;
  bool flip_horizontal = true;
  double input_noise_std = 0.15;
  double dropout_rate = 0.5;

  void validate() const;
  static PerturbConfig none() { return {0, false, 0.0, 0.0}; }
};

/// Shifts content by (dx, dy) pixels (positive dx moves right), zero fill.
std::vector<float> translate_image(std::span<const float> image, int dx, int dy);
std::vector<float> flip_image(std::span<const float> image);

/// Random translation in [-t,t]^2, horizontal flip with probability 1/2 when
/// enabled, then additive Gaussian noise. Draws nothing when disabled.
std::vector<float> augment(std::span<const float> image, const PerturbConfig& cfg, Rng& rng);

struct NormStats {
  std::array<double, kImageChannels> mean{0.0, 0.0, 0.0};
  std::array<double, kImageChannels> stddev{1.0, 1.0, 1.0};
};

/// Per-channel mean and population standard deviation. A standard deviation
/// below 1e-6 is clamped to 1e-6 with a warning.
NormStats compute_norm_stats(const Dataset& data);
Dataset apply_normalization(const Dataset& data, const NormStats& stats);
std::pair<Dataset, NormStats> normalize(const Dataset& data);

}  // namespace osreg
