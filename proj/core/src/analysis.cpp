#include "osreg/analysis.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <thread>
#include <tuple>

#include "osreg/losses.hpp"
#include "osreg/trainer.hpp"

namespace osreg {
namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

void require_conv_layer(const ModelConfig& cfg, const std::string& layer) {
  const auto names = cfg.conv_names();
  require(std::find(names.begin(), names.end(), layer) != names.end(),
          "layer '" + layer + "' is not a convolution of this model");
}

template <typename F>
void parallel_chunks(std::size_t chunks, std::size_t threads, F&& run) {
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(chunks, 1));
  if (workers == 1) {
    for (std::size_t c = 0; c < chunks; ++c) run(c);
    return;
  }
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      for (std::size_t c = w; c < chunks; c += workers) run(c);
    });
}

}  // namespace

template <typename T>
Tensor<double> collect_feature_maps(Model<T>& model, const Dataset& data, const std::string& layer,
                                    std::size_t limit, std::size_t threads, std::size_t chunk) {
  require_conv_layer(model.config(), layer);
  require(!data.empty(), "collect_feature_maps: empty dataset");
  const std::size_t n = limit == 0 ? data.size() : std::min(limit, data.size());
  if (chunk == 0) chunk = 100;
  const std::size_t chunks = (n + chunk - 1) / chunk;

  // Probe one image for the map geometry.
  Shape map_shape;
  {
    Graph<T> g;
    const std::size_t first = 0;
    auto out = forward(model, g, make_batch<T>(data, std::span(&first, 1)), ForwardOptions{});
    map_shape = out.feature_maps.at(layer).shape();
  }
  const std::size_t per = map_shape[1] * map_shape[2] * map_shape[3];
  Tensor<double> maps(Shape{n, map_shape[1], map_shape[2], map_shape[3]});
  parallel_chunks(chunks, threads, [&](std::size_t c) {
    const std::size_t lo = c * chunk, hi = std::min(n, lo + chunk);
    std::vector<std::size_t> idx(hi - lo);
    std::iota(idx.begin(), idx.end(), lo);
    Graph<T> g;
    auto out = forward(model, g, make_batch<T>(data, idx), ForwardOptions{});
    const auto& v = out.feature_maps.at(layer).value();
    std::copy(v.values().begin(), v.values().end(), maps.data() + lo * per);
  });
  return maps;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size() && !a.empty(), "pearson: vectors must be equally long and non-empty");
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa <= 0 || sbb <= 0) return 0.0;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

CorrelationStats channel_correlation(const Tensor<double>& maps, const std::string& layer, std::size_t bins,
                                     CorrelationMode mode) {
  require(maps.rank() == 4, "channel_correlation: maps must be [N,m,h,w], got " + shape_str(maps.shape()));
  require(bins >= 1, "channel_correlation: need at least one bin");
  const std::size_t n = maps.dim(0), m = maps.dim(1), p = maps.dim(2) * maps.dim(3);
  require(p >= 2, "channel_correlation: need h*w >= 2");

  CorrelationStats s;
  s.layer = layer;
  s.counts.assign(bins, 0);
  for (std::size_t b = 0; b <= bins; ++b) s.edges.push_back(-1.0 + 2.0 * static_cast<double>(b) / static_cast<double>(bins));

  // Channel vectors of one matrix: rows of an m x len buffer.
  std::vector<double> buf;
  double abs_sum = 0.0;
  auto accumulate = [&](std::size_t len) {
    std::vector<double> mean(m, 0.0), norm(m, 0.0);
    for (std::size_t c = 0; c < m; ++c) {
      const double* v = buf.data() + c * len;
      double mu = 0;
      for (std::size_t i = 0; i < len; ++i) mu += v[i];
      mean[c] = mu / static_cast<double>(len);
    }
    for (std::size_t c = 0; c < m; ++c) {
      double* v = buf.data() + c * len;
      double ss = 0;
      for (std::size_t i = 0; i < len; ++i) {
        v[i] -= mean[c];
        ss += v[i] * v[i];
      }
      norm[c] = std::sqrt(ss);
    }
    for (std::size_t a = 0; a < m; ++a)
      for (std::size_t b = a + 1; b < m; ++b) {
        double r = 0.0;
        if (norm[a] > 0 && norm[b] > 0) {
          const double* va = buf.data() + a * len;
          const double* vb = buf.data() + b * len;
          double dot = 0;
          for (std::size_t i = 0; i < len; ++i) dot += va[i] * vb[i];
          r = std::clamp(dot / (norm[a] * norm[b]), -1.0, 1.0);
        } else {
          ++s.zero_variance;
        }
        auto bin = static_cast<std::size_t>(std::floor((r + 1.0) / 2.0 * static_cast<double>(bins)));
        bin = std::min(bin, bins - 1);
        while (bin > 0 && r < s.edges[bin]) --bin;
        while (bin + 1 < bins && r >= s.edges[bin + 1]) ++bin;
        ++s.counts[bin];
        abs_sum += std::abs(r);
        ++s.pairs;
      }
  };

  if (mode == CorrelationMode::PerImage) {
    buf.resize(m * p);
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(maps.data() + i * m * p, m * p, buf.data());
      accumulate(p);
    }
  } else {
    buf.resize(m * n * p);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < m; ++c)
        std::copy_n(maps.data() + (i * m + c) * p, p, buf.data() + c * n * p + i * p);
    accumulate(n * p);
  }
  s.mean_abs = s.pairs ? abs_sum / static_cast<double>(s.pairs) : 0.0;
  if (s.zero_variance > 0)
    spdlog::warn("channel_correlation({}): {} pairs involve a constant channel; r set to 0", layer, s.zero_variance);
  return s;
}

CalibrationReport calibration(std::span<const double> probs, std::size_t classes, std::span<const int> labels,
                              std::size_t bins) {
  require(bins >= 1, "calibration: need at least one bin");
  require(classes >= 1 && probs.size() == labels.size() * classes,
          "calibration: probability matrix does not match " + std::to_string(labels.size()) + " labels");
  const std::size_t n = labels.size();
  CalibrationReport r;
  r.n = n;
  r.bins.resize(bins);
  std::vector<double> edges(bins + 1);
  for (std::size_t b = 0; b <= bins; ++b) edges[b] = static_cast<double>(b) / static_cast<double>(bins);
  for (std::size_t b = 0; b < bins; ++b) {
    r.bins[b].lo = edges[b];
    r.bins[b].hi = edges[b + 1];
  }
  std::vector<double> correct(bins, 0.0), conf_sum(bins, 0.0);
  double bs = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = probs.subspan(i * classes, classes);
    const int y = labels[i];
    require(y >= 0 && static_cast<std::size_t>(y) < classes,
            "calibration: label " + std::to_string(y) + " out of range at row " + std::to_string(i));
    double total = 0.0;
    for (double v : row) {
      require(std::isfinite(v) && v >= 0.0, "calibration: invalid probability at row " + std::to_string(i));
      total += v;
    }
    require(std::abs(total - 1.0) <= 1e-6, "calibration: row " + std::to_string(i) + " sums to " + std::to_string(total));
    const auto pred = argmax_row(row);
    const double conf = row[pred];
    auto b = static_cast<std::size_t>(std::floor(conf * static_cast<double>(bins)));
    b = std::min(b, bins - 1);
    while (b > 0 && conf < edges[b]) --b;
    while (b + 1 < bins && conf >= edges[b + 1]) ++b;
    r.bins[b].count += 1;
    correct[b] += static_cast<std::size_t>(y) == pred ? 1.0 : 0.0;
    conf_sum[b] += conf;
    for (std::size_t k = 0; k < classes; ++k) {
      const double d = row[k] - (static_cast<std::size_t>(y) == k ? 1.0 : 0.0);
      bs += d * d;
    }
  }
  for (std::size_t b = 0; b < bins; ++b) {
    auto& bin = r.bins[b];
    if (bin.count == 0) continue;
    const double cnt = static_cast<double>(bin.count);
    bin.acc = correct[b] / cnt;
    bin.conf = conf_sum[b] / cnt;
    const double w = cnt / static_cast<double>(n);
    r.ece += w * std::abs(bin.acc - bin.conf);
    r.oe += w * bin.conf * std::max(bin.conf - bin.acc, 0.0);
  }
  r.bs = n ? bs / static_cast<double>(n) : 0.0;
  return r;
}

std::size_t prune_count(double rate_pct, std::size_t m) {
  require(rate_pct >= 0.0 && rate_pct < 100.0, "prune rate must be in [0, 100), got " + fmt::format("{}", rate_pct));
  return static_cast<std::size_t>(std::floor(rate_pct * static_cast<double>(m) / 100.0 + 1e-9));
}

template <typename T>
PruneRanking prune_rank(Model<T>& model, const Dataset& validation, const std::string& layer, std::size_t threads) {
  const auto maps = collect_feature_maps(model, validation, layer, 0, threads);
  const std::size_t n = maps.dim(0), m = maps.dim(1), p = maps.dim(2) * maps.dim(3);
  PruneRanking r;
  r.layer = layer;
  r.magnitude.assign(m, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < m; ++c) {
      const double* v = maps.data() + (i * m + c) * p;
      double s = 0;
      for (std::size_t k = 0; k < p; ++k) s += v[k];
      r.magnitude[c] += s / static_cast<double>(p);
    }
  for (auto& v : r.magnitude) v = std::abs(v / static_cast<double>(n));
  r.order.resize(m);
  std::iota(r.order.begin(), r.order.end(), 0);
  std::stable_sort(r.order.begin(), r.order.end(),
                   [&](std::size_t a, std::size_t b) { return r.magnitude[a] < r.magnitude[b]; });
  return r;
}

template <typename T>
PruneMask apply_prune(Model<T>& model, const PruneRanking& ranking, std::size_t n) {
  const std::size_t m = ranking.order.size();
  require(m == model.config().channels_of(ranking.layer), "apply_prune: ranking does not match layer width");
  require(n < m, "apply_prune: n=" + std::to_string(n) + " must be below the channel count " + std::to_string(m));
  PruneMask mask{ranking.layer, std::vector<std::uint8_t>(m, 1), n};
  for (std::size_t i = 0; i < n; ++i) mask.keep[ranking.order[i]] = 0;
  model.set_channel_mask(ranking.layer, mask.keep);
  return mask;
}

template <typename T>
std::vector<PruneRow> prune_sweep(Model<T>& model, const Dataset& data, std::span<const std::size_t> validation,
                                  std::span<const std::size_t> test, const std::string& layer,
                                  std::span<const double> rates_pct, std::size_t threads) {
  require_conv_layer(model.config(), layer);
  require(!validation.empty() && !test.empty(), "prune_sweep: validation and test halves must be non-empty");
  std::vector<std::uint8_t> seen(data.size(), 0);
  for (auto i : validation) {
    require(i < data.size(), "prune_sweep: validation index out of range");
    seen[i] = 1;
  }
  for (auto i : test) {
    require(i < data.size(), "prune_sweep: test index out of range");
    require(!seen[i], "prune_sweep: validation and test halves overlap at index " + std::to_string(i));
  }
  const auto m = model.config().channels_of(layer);
  for (double r : rates_pct) prune_count(r, m);

  const auto val = subset(data, validation);
  const auto tst = subset(data, test);
  const auto previous = model.channel_mask(layer) ? std::optional(*model.channel_mask(layer)) : std::nullopt;
  model.set_channel_mask(layer, std::vector<std::uint8_t>(m, 1));
  const auto ranking = prune_rank(model, val, layer, threads);
  std::vector<PruneRow> rows;
  for (double r : rates_pct) {
    const auto n = prune_count(r, m);
    apply_prune(model, ranking, n);
    rows.push_back({r, n, evaluate(model, tst, threads).accuracy});
  }
  if (previous) model.set_channel_mask(layer, *previous);
  else model.set_channel_mask(layer, std::vector<std::uint8_t>(m, 1));
  return rows;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> halve(std::size_t n, std::uint64_t seed) {
  Rng rng(derive_seed(seed, {0x4a1fULL}));
  auto perm = rng.permutation(n);
  std::vector<std::size_t> a(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(n / 2));
  std::vector<std::size_t> b(perm.begin() + static_cast<std::ptrdiff_t>(n / 2), perm.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  return {std::move(a), std::move(b)};
}

template <typename T>
Heatmap grad_cam(Model<T>& model, std::span<const float> image, int target, const std::string& layer) {
  require_conv_layer(model.config(), layer);
  require(target >= 0 && target < model.config().classes,
          "grad_cam: class " + std::to_string(target) + " outside [0," + std::to_string(model.config().classes) + ")");
  require(image.size() == kImageSize, "grad_cam: image must hold 3x32x32 values");
  Tensor<T> batch(Shape{1, kImageChannels, kImageSide, kImageSide});
  std::copy(image.begin(), image.end(), batch.data());

  Graph<T> g;
  ForwardOptions opts;
  opts.params_require_grad = true;
  auto out = forward(model, g, batch, opts);
  auto score = sum(pick_column(out.logits, static_cast<std::size_t>(target)));
  g.backward(score);

  const auto a = out.feature_maps.at(layer);
  const auto& av = a.value();
  const std::size_t m = av.dim(1), h = av.dim(2), w = av.dim(3), p = h * w;
  const auto& da = a.grad();
  Heatmap map{h, w, std::vector<double>(p, 0.0), layer, target};
  for (std::size_t c = 0; c < m; ++c) {
    double weight = 0;
    if (!da.empty())
      for (std::size_t k = 0; k < p; ++k) weight += da[c * p + k];
    weight /= static_cast<double>(p);
    if (weight == 0.0) continue;
    for (std::size_t k = 0; k < p; ++k) map.values[k] += weight * av[c * p + k];
  }
  double peak = 0.0;
  for (auto& v : map.values) {
    v = std::max(v, 0.0);
    peak = std::max(peak, v);
  }
  if (peak > 0)
    for (auto& v : map.values) v /= peak;
  return map;
}

Heatmap upsample_bilinear(const Heatmap& map, std::size_t h, std::size_t w) {
  require(map.h > 0 && map.w > 0 && h > 0 && w > 0, "upsample_bilinear: empty geometry");
  Heatmap out{h, w, std::vector<double>(h * w), map.layer, map.target};
  auto coord = [](std::size_t dst, std::size_t out_n, std::size_t in_n) {
    const double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(in_n) / static_cast<double>(out_n) - 0.5;
    const double c = std::clamp(s, 0.0, static_cast<double>(in_n - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(c));
    const auto i1 = std::min(i0 + 1, in_n - 1);
    return std::tuple{i0, i1, c - static_cast<double>(i0)};
  };
  for (std::size_t y = 0; y < h; ++y) {
    const auto [y0, y1, fy] = coord(y, h, map.h);
    for (std::size_t x = 0; x < w; ++x) {
      const auto [x0, x1, fx] = coord(x, w, map.w);
      const double top = map.values[y0 * map.w + x0] * (1 - fx) + map.values[y0 * map.w + x1] * fx;
      const double bot = map.values[y1 * map.w + x0] * (1 - fx) + map.values[y1 * map.w + x1] * fx;
      out.values[y * w + x] = top * (1 - fy) + bot * fy;
    }
  }
  return out;
}

std::vector<std::uint8_t> encode_pnm(const Pnm& img) {
  require(img.kind == '5' || img.kind == '6', "encode_pnm: kind must be '5' or '6'");
  require(img.maxval >= 1 && img.maxval <= 255, "encode_pnm: maxval must be in [1,255]");
  const std::size_t ch = img.kind == '6' ? 3 : 1;
  require(img.pixels.size() == img.width * img.height * ch, "encode_pnm: pixel count does not match dimensions");
  const auto header = fmt::format("P{}\n{} {}\n{}\n", img.kind, img.width, img.height, img.maxval);
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.insert(out.end(), img.pixels.begin(), img.pixels.end());
  return out;
}

Pnm decode_pnm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto fail = [&](const std::string& what) {
    throw std::runtime_error("pnm: " + what + " at byte " + std::to_string(pos));
  };
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&] {
    skip_space();
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) fail("expected a number");
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > 1u << 24) fail("number too large");
      ++pos;
    }
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || (bytes[1] != '5' && bytes[1] != '6')) fail("not a binary P5/P6 file");
  Pnm img;
  img.kind = static_cast<char>(bytes[1]);
  pos = 2;
  img.width = number();
  img.height = number();
  const auto maxval = number();
  if (img.width == 0 || img.height == 0) fail("zero dimension");
  if (maxval == 0 || maxval > 255) fail("maxval must be in [1,255]");
  img.maxval = static_cast<unsigned>(maxval);
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) fail("missing separator after header");
  ++pos;
  const std::size_t need = img.width * img.height * (img.kind == '6' ? 3 : 1);
  if (bytes.size() - pos < need) fail("pixel data truncated (" + std::to_string(bytes.size() - pos) + " of " + std::to_string(need) + " bytes)");
  img.pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                    bytes.begin() + static_cast<std::ptrdiff_t>(pos + need));
  return img;
}

void write_pnm(const std::filesystem::path& path, const Pnm& img) {
  const auto bytes = encode_pnm(img);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

Pnm read_pnm(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_pnm(bytes);
}

namespace {

std::uint8_t to_byte(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

}  // namespace

Pnm heatmap_image(const Heatmap& map) {
  Pnm img{'5', map.w, map.h, 255, {}};
  img.pixels.reserve(map.values.size());
  for (double v : map.values) img.pixels.push_back(to_byte(v));
  return img;
}

Pnm overlay_image(std::span<const float> image, const Heatmap& map) {
  require(image.size() == kImageSize, "overlay_image: image must hold 3x32x32 values");
  require(map.h == kImageSide && map.w == kImageSide, "overlay_image: heatmap must be 32x32");
  Pnm img{'6', kImageSide, kImageSide, 255, {}};
  img.pixels.reserve(kImageSize);
  for (std::size_t k = 0; k < kImagePixels; ++k) {
    const double v = map.values[k];
    // Jet-like colour ramp.
    const double heat[3] = {std::clamp(1.5 - std::abs(4 * v - 3), 0.0, 1.0),
                            std::clamp(1.5 - std::abs(4 * v - 2), 0.0, 1.0),
                            std::clamp(1.5 - std::abs(4 * v - 1), 0.0, 1.0)};
    for (std::size_t c = 0; c < 3; ++c) img.pixels.push_back(to_byte(0.5 * image[c * kImagePixels + k] + 0.5 * heat[c]));
  }
  return img;
}

std::string correlation_csv(const CorrelationStats& s) {
  std::string out = std::string(kCorrelationHeader) + "\n";
  for (std::size_t b = 0; b < s.counts.size(); ++b)
    out += fmt::format("{},{},{}\n", s.edges[b], s.edges[b + 1], s.counts[b]);
  return out;
}

std::string calibration_csv(const CalibrationReport& r) {
  std::string out = std::string(kCalibrationHeader) + "\n";
  for (std::size_t b = 0; b < r.bins.size(); ++b) {
    const auto& bin = r.bins[b];
    out += fmt::format("{},{},{},{},{},{}\n", b, bin.lo, bin.hi, bin.count, bin.acc, bin.conf);
  }
  out += fmt::format("scalars,ece={},oe={},bs={},n={}\n", r.ece, r.oe, r.bs, r.n);
  return out;
}

std::string prune_csv(std::span<const PruneRow> rows) {
  std::string out = std::string(kPruneHeader) + "\n";
  for (const auto& r : rows) out += fmt::format("{},{},{}\n", r.rate_pct, r.n, r.accuracy);
  return out;
}

#define OSREG_INSTANTIATE_ANALYSIS(T)                                                                           \
  template Tensor<double> collect_feature_maps<T>(Model<T>&, const Dataset&, const std::string&, std::size_t,  \
                                                  std::size_t, std::size_t);                                   \
  template PruneRanking prune_rank<T>(Model<T>&, const Dataset&, const std::string&, std::size_t);              \
  template PruneMask apply_prune<T>(Model<T>&, const PruneRanking&, std::size_t);                               \
  template std::vector<PruneRow> prune_sweep<T>(Model<T>&, const Dataset&, std::span<const std::size_t>,        \
                                                std::span<const std::size_t>, const std::string&,               \
                                                std::span<const double>, std::size_t);                          \
  template Heatmap grad_cam<T>(Model<T>&, std::span<const float>, int, const std::string&);

OSREG_INSTANTIATE_ANALYSIS(float)
OSREG_INSTANTIATE_ANALYSIS(double)

}  // namespace osreg
