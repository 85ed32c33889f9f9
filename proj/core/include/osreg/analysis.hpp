#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "osreg/data.hpp"
#include "osreg/network.hpp"
#include "osreg/tensor.hpp"

namespace osreg {

// ---- feature maps -------------------------------------------------------

/// Eval-mode post-activation maps of `layer` for the first `limit` images
/// (all when 0), as [N,m,h,w].
template <typename T>
Tensor<double> collect_feature_maps(Model<T>& model, const Dataset& data, const std::string& layer,
                                    std::size_t limit = 0, std::size_t threads = 1, std::size_t chunk = 100);

// ---- channel correlation ------------------------------------------------

enum class CorrelationMode {
  /// One m x m matrix per image over its h*w positions.
  PerImage,
  /// One m x m matrix over all positions of all images.
  Pooled,
};

struct CorrelationStats {
  std::string layer;
  std::vector<double> edges;           // bins + 1 equal-width edges over [-1, 1]
  std::vector<std::size_t> counts;     // half-open bins, the last one closed
  double mean_abs = 0.0;               // mean |r| over all off-diagonal pairs
  std::size_t pairs = 0;               // matrices * m(m-1)/2
  std::size_t zero_variance = 0;       // pairs involving a constant channel (r := 0)
};

/// Pearson r for every unordered channel pair of [N,m,h,w] maps.
CorrelationStats channel_correlation(const Tensor<double>& maps, const std::string& layer, std::size_t bins = 20,
                                     CorrelationMode mode = CorrelationMode::PerImage);

/// r of two equally long vectors; 0 when either is constant.
double pearson(std::span<const double> a, std::span<const double> b);

// ---- calibration --------------------------------------------------------

struct CalibrationBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  double acc = 0.0;
  double conf = 0.0;
};

struct CalibrationReport {
  std::vector<CalibrationBin> bins;
  double ece = 0.0;
  double oe = 0.0;
  double bs = 0.0;
  std::size_t n = 0;
};

/// Confidence is the largest class probability and the prediction its
/// (lowest) argmax. Bins split [0,1] into equal half-open intervals
/// [b/M, (b+1)/M), the last one closed.
///   ECE = sum_b |B_b|/N |acc_b - conf_b|
///   OE  = sum_b |B_b|/N conf_b max(conf_b - acc_b, 0)
///   BS  = 1/N sum_i sum_k (p_ik - [y_i = k])^2
/// Rows must sum to 1 within 1e-6.
CalibrationReport calibration(std::span<const double> probs, std::size_t classes, std::span<const int> labels,
                              std::size_t bins = 15);

// ---- pruning ------------------------------------------------------------

struct PruneRanking {
  std::string layer;
  /// |mean over images of the spatial mean of channel c|.
  std::vector<double> magnitude;
  /// Channels by ascending magnitude; ties keep the lower index first.
  std::vector<std::size_t> order;
};

struct PruneMask {
  std::string layer;
  std::vector<std::uint8_t> keep;
  std::size_t n = 0;

  double rate_pct() const { return static_cast<double>(n) * 100.0 / static_cast<double>(keep.size()); }
};

/// floor(rate_pct * m / 100), guarded against representation error so that
/// prune_count(mask.rate_pct(), m) == mask.n.
std::size_t prune_count(double rate_pct, std::size_t m);

/// Ranks the post-activation channels of `layer` on `validation`, with the
/// model's current masks in effect.
template <typename T>
PruneRanking prune_rank(Model<T>& model, const Dataset& validation, const std::string& layer,
                        std::size_t threads = 1);

/// Zeroes the n lowest-ranked channels for all later forwards. Requires n < m.
template <typename T>
PruneMask apply_prune(Model<T>& model, const PruneRanking& ranking, std::size_t n);

struct PruneRow {
  double rate_pct = 0.0;
  std::size_t n = 0;
  double accuracy = 0.0;
};

/// Ranks on data[validation] (unmasked layer), then for each rate masks the
/// lowest channels and measures accuracy on data[test]. The layer's mask is
/// cleared afterwards. Overlapping index sets are rejected.
template <typename T>
std::vector<PruneRow> prune_sweep(Model<T>& model, const Dataset& data, std::span<const std::size_t> validation,
                                  std::span<const std::size_t> test, const std::string& layer,
                                  std::span<const double> rates_pct, std::size_t threads = 1);

/// Seeded split of 0..n-1 into two halves (the first gets floor(n/2)).
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> halve(std::size_t n, std::uint64_t seed);

// ---- Grad-CAM -----------------------------------------------------------

struct Heatmap {
  std::size_t h = 0;
  std::size_t w = 0;
  std::vector<double> values;  // row-major, in [0,1]
  std::string layer;
  int target = 0;
};

/// weights_c = spatial mean of d(logit_target)/dA_c, map = max(sum_c
/// weights_c A_c, 0) divided by its maximum (an all-zero map stays zero).
/// A is the eval-mode post-activation (post-mask) map of `layer`.
template <typename T>
Heatmap grad_cam(Model<T>& model, std::span<const float> image, int target, const std::string& layer);

/// Bilinear resize with half-pixel centres, edges clamped.
Heatmap upsample_bilinear(const Heatmap& map, std::size_t h, std::size_t w);

// ---- images -------------------------------------------------------------

struct Pnm {
  char kind = '5';  // '5' gray, '6' RGB
  std::size_t width = 0;
  std::size_t height = 0;
  unsigned maxval = 255;
  std::vector<std::uint8_t> pixels;
};

std::vector<std::uint8_t> encode_pnm(const Pnm& img);
/// Parses binary P5/P6 with maxval <= 255; rejects short pixel data.
Pnm decode_pnm(std::span<const std::uint8_t> bytes);
void write_pnm(const std::filesystem::path& path, const Pnm& img);
Pnm read_pnm(const std::filesystem::path& path);

/// Gray image of the heatmap, round(255 v).
Pnm heatmap_image(const Heatmap& map);
/// 0.5 image + 0.5 colour-mapped heat. `image` is a raw (unnormalized)
/// 3x32x32 image in [0,1]; `map` must be 32x32.
Pnm overlay_image(std::span<const float> image, const Heatmap& map);

// ---- CSV ----------------------------------------------------------------

inline constexpr const char* kCorrelationHeader = "bin_lo,bin_hi,count";
inline constexpr const char* kCalibrationHeader = "bin,lo,hi,count,acc,conf";
inline constexpr const char* kPruneHeader = "rate_pct,n,accuracy";

std::string correlation_csv(const CorrelationStats& s);
/// Bin rows, then "scalars,ece=..,oe=..,bs=..,n=..".
std::string calibration_csv(const CalibrationReport& r);
std::string prune_csv(std::span<const PruneRow> rows);

}  // namespace osreg
