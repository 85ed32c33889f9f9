#include "osreg/data.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numbers>
#include <stdexcept>

namespace osreg {

void Dataset::validate() const {
  if (classes < 2) throw std::invalid_argument("dataset: need at least 2 classes");
  if (images.size() != labels.size() * kImageSize)
    throw std::invalid_argument("dataset: image buffer does not match label count");
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] < 0 || labels[i] >= classes)
      throw std::invalid_argument("dataset: label " + std::to_string(labels[i]) + " at sample " +
                                  std::to_string(i) + " outside [0," + std::to_string(classes) + ")");
  for (float v : images) {
    if (!std::isfinite(v)) throw std::invalid_argument("dataset: non-finite pixel");
    if (!normalized && (v < 0.0f || v > 1.0f))
      throw std::invalid_argument("dataset: pixel outside [0,1] before normalization");
  }
}

Dataset decode_cifar10(std::span<const std::uint8_t> bytes, const std::string& source) {
  if (bytes.size() % kCifarRecordBytes != 0) {
    const auto whole = bytes.size() / kCifarRecordBytes;
    throw std::runtime_error(source + ": truncated record at byte offset " +
                             std::to_string(whole * kCifarRecordBytes) + " (length " +
                             std::to_string(bytes.size()) + " is not a multiple of 3073)");
  }
  Dataset d;
  d.classes = 10;
  const std::size_t count = bytes.size() / kCifarRecordBytes;
  d.labels.resize(count);
  d.images.resize(count * kImageSize);
  for (std::size_t r = 0; r < count; ++r) {
    const auto* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] > 9)
      throw std::runtime_error(source + ": label byte " + std::to_string(rec[0]) +
                               " > 9 at byte offset " + std::to_string(r * kCifarRecordBytes));
    d.labels[r] = rec[0];
    float* img = d.images.data() + r * kImageSize;
    for (std::size_t i = 0; i < kImageSize; ++i) img[i] = static_cast<float>(rec[1 + i]) / 255.0f;
  }
  return d;
}

Dataset read_cifar10_bin(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_cifar10(bytes, path.string());
}

Dataset read_cifar10_files(const std::vector<std::filesystem::path>& paths) {
  Dataset out;
  for (const auto& p : paths) out = out.empty() ? read_cifar10_bin(p) : concat(out, read_cifar10_bin(p));
  return out;
}

std::vector<std::uint8_t> encode_cifar10(const Dataset& data) {
  if (data.normalized) throw std::invalid_argument("encode_cifar10: dataset is normalized");
  if (data.classes > 10) throw std::invalid_argument("encode_cifar10: more than 10 classes");
  std::vector<std::uint8_t> bytes(data.size() * kCifarRecordBytes);
  for (std::size_t r = 0; r < data.size(); ++r) {
    auto* rec = bytes.data() + r * kCifarRecordBytes;
    rec[0] = static_cast<std::uint8_t>(data.labels[r]);
    auto img = data.image(r);
    for (std::size_t i = 0; i < kImageSize; ++i) {
      const float v = std::clamp(img[i], 0.0f, 1.0f);
      rec[1 + i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  }
  return bytes;
}

void write_cifar10_bin(const std::filesystem::path& path, const Dataset& data) {
  const auto bytes = encode_cifar10(data);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Dataset subset(const Dataset& data, std::span<const std::size_t> indices) {
  Dataset out;
  out.classes = data.classes;
  out.normalized = data.normalized;
  out.labels.reserve(indices.size());
  out.images.reserve(indices.size() * kImageSize);
  for (auto i : indices) {
    if (i >= data.size()) throw std::out_of_range("subset: index " + std::to_string(i));
    out.labels.push_back(data.labels[i]);
    auto img = data.image(i);
    out.images.insert(out.images.end(), img.begin(), img.end());
  }
  return out;
}

Dataset take_classes(const Dataset& data, int classes, std::size_t per_class) {
  std::vector<std::size_t> taken(static_cast<std::size_t>(classes), 0);
  std::vector<std::size_t> idx;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const int c = data.labels[i];
    if (c < classes && taken[c] < per_class) {
      ++taken[c];
      idx.push_back(i);
    }
  }
  for (int c = 0; c < classes; ++c)
    if (taken[c] < per_class)
      throw std::invalid_argument("take_classes: class " + std::to_string(c) + " has only " +
                                  std::to_string(taken[c]) + " samples");
  auto out = subset(data, idx);
  out.classes = classes;
  return out;
}

Dataset concat(const Dataset& a, const Dataset& b) {
  if (a.normalized != b.normalized) throw std::invalid_argument("concat: normalization differs");
  Dataset out = a;
  out.classes = std::max(a.classes, b.classes);
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  out.images.insert(out.images.end(), b.images.begin(), b.images.end());
  return out;
}

namespace {

// Smooth 3x32x32 pattern: two oriented colour gratings and two Gaussian blobs.
std::vector<float> make_template(Rng& rng) {
  std::vector<float> t(kImageSize, 0.0f);
  const double side = static_cast<double>(kImageSide);
  for (int g = 0; g < 2; ++g) {
    const double theta = rng.uniform(0.0, std::numbers::pi);
    const double freq = rng.uniform(1.0, 3.0) * 2.0 * std::numbers::pi / side;
    const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
    std::array<double, 3> colour{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    for (std::size_t c = 0; c < kImageChannels; ++c)
      for (std::size_t y = 0; y < kImageSide; ++y)
        for (std::size_t x = 0; x < kImageSide; ++x) {
          const double u = std::cos(theta) * x + std::sin(theta) * y;
          t[(c * kImageSide + y) * kImageSide + x] +=
              static_cast<float>(0.5 * colour[c] * std::sin(freq * u + phase));
        }
  }
  for (int b = 0; b < 2; ++b) {
    const double cx = rng.uniform(6, side - 6), cy = rng.uniform(6, side - 6);
    const double r = rng.uniform(3, 7);
    std::array<double, 3> colour{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    for (std::size_t c = 0; c < kImageChannels; ++c)
      for (std::size_t y = 0; y < kImageSide; ++y)
        for (std::size_t x = 0; x < kImageSide; ++x) {
          const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
          t[(c * kImageSide + y) * kImageSide + x] +=
              static_cast<float>(colour[c] * std::exp(-d2 / (2 * r * r)));
        }
  }
  float peak = 0.0f;
  for (float v : t) peak = std::max(peak, std::abs(v));
  if (peak > 0.0f)
    for (auto& v : t) v /= peak;
  return t;
}

}  // namespace

Dataset synth_dataset(int classes, std::size_t per_class, std::uint64_t seed, const SynthOptions& options) {
  if (classes < 2) throw std::invalid_argument("synth_dataset: classes must be >= 2");
  if (options.shared_weight < 0.0 || options.shared_weight >= 1.0)
    throw std::invalid_argument("synth_dataset: shared_weight must be in [0,1)");
  Rng trng(derive_seed(seed, {0x7e3b1a7eULL}));
  const auto shared = make_template(trng);
  std::vector<std::vector<float>> templates;
  for (int c = 0; c < classes; ++c) {
    auto t = make_template(trng);
    for (std::size_t i = 0; i < kImageSize; ++i)
      t[i] = static_cast<float>((1.0 - options.shared_weight) * t[i] + options.shared_weight * shared[i]);
    templates.push_back(std::move(t));
  }

  Dataset d;
  d.classes = classes;
  const std::size_t count = per_class * static_cast<std::size_t>(classes);
  d.labels.resize(count);
  d.images.resize(count * kImageSize);
  Rng rng(derive_seed(seed, {0x5a3b1e5ULL}));
  for (std::size_t i = 0; i < count; ++i) {
    const int c = static_cast<int>(i % static_cast<std::size_t>(classes));
    d.labels[i] = c;
    const int dx = static_cast<int>(rng.integer(-options.jitter_px, options.jitter_px));
    const int dy = static_cast<int>(rng.integer(-options.jitter_px, options.jitter_px));
    const double contrast = rng.uniform(1.0 - options.contrast_spread, 1.0 + options.contrast_spread);
    auto shifted = translate_image(templates[c], dx, dy);
    for (int k = 0; k < options.distractors; ++k) {
      const double cx = rng.uniform(0, kImageSide), cy = rng.uniform(0, kImageSide);
      const double r = rng.uniform(2, 5);
      const double sign = rng.bernoulli(0.5) ? 1.0 : -1.0;
      for (std::size_t ch = 0; ch < kImageChannels; ++ch)
        for (std::size_t y = 0; y < kImageSide; ++y)
          for (std::size_t x = 0; x < kImageSide; ++x) {
            const double d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
            shifted[(ch * kImageSide + y) * kImageSide + x] +=
                static_cast<float>(sign * 0.8 * std::exp(-d2 / (2 * r * r)));
          }
    }
    float* img = d.images.data() + i * kImageSize;
    for (std::size_t p = 0; p < kImageSize; ++p) {
      const double v = 0.5 + options.amplitude * contrast * shifted[p] + options.noise_std * rng.normal();
      img[p] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  }
  return d;
}

SemiSplit split_semi(const Dataset& data, std::size_t labeled_count, std::uint64_t seed) {
  const std::size_t n = data.size();
  if (labeled_count > n)
    throw std::invalid_argument("split_semi: L=" + std::to_string(labeled_count) + " exceeds N=" +
                                std::to_string(n));
  const auto k = static_cast<std::size_t>(data.classes);
  std::vector<std::vector<std::size_t>> by_class(k);
  for (std::size_t i = 0; i < n; ++i) by_class[static_cast<std::size_t>(data.labels[i])].push_back(i);

  Rng rng(derive_seed(seed, {0x5e1175ULL}));
  SemiSplit split;
  split.seed = seed;
  std::vector<char> chosen(n, 0);
  for (std::size_t c = 0; c < k; ++c) {
    const std::size_t quota = labeled_count / k + (c < labeled_count % k ? 1 : 0);
    auto& members = by_class[c];
    if (quota > members.size())
      throw std::invalid_argument("split_semi: class " + std::to_string(c) + " has " +
                                  std::to_string(members.size()) + " samples, needs " +
                                  std::to_string(quota) + " for a balanced split");
    const auto perm = rng.permutation(members.size());
    for (std::size_t j = 0; j < quota; ++j) chosen[members[perm[j]]] = 1;
  }
  for (std::size_t i = 0; i < n; ++i) (chosen[i] ? split.labeled : split.unlabeled).push_back(i);
  return split;
}

void PerturbConfig::validate() const {
  if (translate_max_px < 0) throw std::invalid_argument("perturb: translate_max_px must be >= 0");
  if (input_noise_std < 0.0) throw std::invalid_argument("perturb: input_noise_std must be >= 0");
  if (dropout_rate < 0.0 || dropout_rate >= 1.0)
    throw std::invalid_argument("perturb: dropout_rate must be in [0,1)");
}

std::vector<float> translate_image(std::span<const float> image, int dx, int dy) {
  std::vector<float> out(kImageSize, 0.0f);
  const int side = static_cast<int>(kImageSide);
  for (std::size_t c = 0; c < kImageChannels; ++c)
    for (int y = 0; y < side; ++y) {
      const int sy = y - dy;
      if (sy < 0 || sy >= side) continue;
      for (int x = 0; x < side; ++x) {
        const int sx = x - dx;
        if (sx < 0 || sx >= side) continue;
        out[(c * kImageSide + y) * kImageSide + x] = image[(c * kImageSide + sy) * kImageSide + sx];
      }
    }
  return out;
}

std::vector<float> flip_image(std::span<const float> image) {
  std::vector<float> out(kImageSize);
  for (std::size_t c = 0; c < kImageChannels; ++c)
    for (std::size_t y = 0; y < kImageSide; ++y)
      for (std::size_t x = 0; x < kImageSide; ++x)
        out[(c * kImageSide + y) * kImageSide + x] =
            image[(c * kImageSide + y) * kImageSide + (kImageSide - 1 - x)];
  return out;
}

std::vector<float> augment(std::span<const float> image, const PerturbConfig& cfg, Rng& rng) {
  std::vector<float> out(image.begin(), image.end());
  if (cfg.translate_max_px > 0) {
    const int dx = static_cast<int>(rng.integer(-cfg.translate_max_px, cfg.translate_max_px));
    const int dy = static_cast<int>(rng.integer(-cfg.translate_max_px, cfg.translate_max_px));
    if (dx != 0 || dy != 0) out = translate_image(out, dx, dy);
  }
  if (cfg.flip_horizontal && rng.bernoulli(0.5)) out = flip_image(out);
  if (cfg.input_noise_std > 0.0)
    for (auto& v : out) v += static_cast<float>(cfg.input_noise_std * rng.normal());
  return out;
}

NormStats compute_norm_stats(const Dataset& data) {
  if (data.empty()) throw std::invalid_argument("normalize: empty dataset");
  NormStats s;
  const double count = static_cast<double>(data.size() * kImagePixels);
  for (std::size_t c = 0; c < kImageChannels; ++c) {
    double acc = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const float* plane = data.images.data() + i * kImageSize + c * kImagePixels;
      for (std::size_t p = 0; p < kImagePixels; ++p) acc += plane[p];
    }
    const double m = acc / count;
    double var = 0.0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      const float* plane = data.images.data() + i * kImageSize + c * kImagePixels;
      for (std::size_t p = 0; p < kImagePixels; ++p) var += (plane[p] - m) * (plane[p] - m);
    }
    double sd = std::sqrt(var / count);
    if (sd < 1e-6) {
      spdlog::warn("normalize: channel {} has zero variance; std clamped to 1e-6", c);
      sd = 1e-6;
    }
    s.mean[c] = m;
    s.stddev[c] = sd;
  }
  return s;
}

Dataset apply_normalization(const Dataset& data, const NormStats& stats) {
  if (data.normalized) throw std::invalid_argument("normalize: dataset already normalized");
  Dataset out = data;
  for (std::size_t i = 0; i < out.size(); ++i)
    for (std::size_t c = 0; c < kImageChannels; ++c) {
      float* plane = out.images.data() + i * kImageSize + c * kImagePixels;
      for (std::size_t p = 0; p < kImagePixels; ++p)
        plane[p] = static_cast<float>((plane[p] - stats.mean[c]) / stats.stddev[c]);
    }
  out.normalized = true;
  return out;
}

std::pair<Dataset, NormStats> normalize(const Dataset& data) {
  auto stats = compute_norm_stats(data);
  return {apply_normalization(data, stats), stats};
}

}  // namespace osreg
