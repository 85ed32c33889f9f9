#include "commands.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <cctype>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

namespace osreg::cli {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << text;
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw ConfigError("out_dir", "cannot create '" + dir + "': " + ec.message());
}

Dataset quantize(const Dataset& d) {
  auto q = decode_cifar10(encode_cifar10(d), "synthetic");
  q.classes = d.classes;
  return q;
}

Checkpoint<float> load_for_analysis(const RunConfig& cfg) {
  const auto path = cfg.checkpoint_path();
  if (!fs::exists(path)) throw ConfigError("analysis.checkpoint", "'" + path + "' does not exist");
  auto ckpt = load_checkpoint<float>(path);
  if (ckpt.model.config().classes != cfg.data.classes)
    throw ConfigError("data.classes", fmt::format("checkpoint predicts {} classes, data has {}",
                                                  ckpt.model.config().classes, cfg.data.classes));
  const auto names = ckpt.model.config().conv_names();
  const auto layer = cfg.analysis.layer.empty() ? names.back() : cfg.analysis.layer;
  if (std::find(names.begin(), names.end(), layer) == names.end())
    throw ConfigError("analysis.layer", "'" + layer + "' is not a convolution of the checkpointed model");
  return ckpt;
}

std::string layer_of(const RunConfig& cfg, const Model<float>& model) {
  return cfg.analysis.layer.empty() ? model.config().conv_names().back() : cfg.analysis.layer;
}

}  // namespace

RunSeeds run_seeds(std::uint64_t seed) {
  return {derive_seed(seed, {1}), derive_seed(seed, {2}), derive_seed(seed, {3}), derive_seed(seed, {4})};
}

RawData load_raw_data(const DataConfig& cfg) {
  if (cfg.source == "synth") {
    // One draw so both splits share the class templates.
    const auto all = quantize(synth_dataset(cfg.classes, cfg.train_per_class + cfg.test_per_class,
                                            derive_seed(cfg.synth_seed, {1}), cfg.synth));
    const auto n_train = cfg.train_per_class * static_cast<std::size_t>(cfg.classes);
    std::vector<std::size_t> head(n_train), tail(all.size() - n_train);
    std::iota(head.begin(), head.end(), std::size_t{0});
    std::iota(tail.begin(), tail.end(), n_train);
    return {subset(all, head), subset(all, tail)};
  }
  const fs::path dir = cfg.cifar_dir;
  if (cfg.cifar_dir.empty() || !fs::is_directory(dir))
    throw ConfigError("data.cifar_dir", "'" + cfg.cifar_dir + "' is not a directory");
  std::vector<fs::path> train_files;
  for (int i = 1; i <= 5; ++i) train_files.push_back(dir / fmt::format("data_batch_{}.bin", i));
  const fs::path test_file = dir / "test_batch.bin";
  for (const auto& f : train_files)
    if (!fs::exists(f)) throw ConfigError("data.cifar_dir", "missing " + f.string());
  if (!fs::exists(test_file)) throw ConfigError("data.cifar_dir", "missing " + test_file.string());
  RawData raw{read_cifar10_files(train_files), read_cifar10_bin(test_file)};
  raw.train = take_classes(raw.train, cfg.classes, cfg.train_per_class);
  raw.test = take_classes(raw.test, cfg.classes, cfg.test_per_class);
  return raw;
}

TrainOutcome run_train(const RunConfig& cfg) {
  ensure_dir(cfg.out_dir);
  const auto seeds = run_seeds(cfg.seed);
  auto raw = load_raw_data(cfg.data);
  auto [train, stats] = normalize(raw.train);
  const auto test = apply_normalization(raw.test, stats);
  const auto labeled = cfg.data.labeled == 0 ? train.size() : cfg.data.labeled;
  const auto split = split_semi(train, labeled, seeds.split);

  TrainConfig tc = cfg.train;
  tc.seed = seeds.train;
  int start = 0;
  TrainOutcome out{{}, Model<float>(cfg.model, seeds.init), {}, 0.0};
  out.model.norm_stats = stats;
  out.adam = AdamState<float>::zeros_like(out.model.params());
  if (!cfg.resume.empty()) {
    if (!fs::exists(cfg.resume)) throw ConfigError("resume", "'" + cfg.resume + "' does not exist");
    auto ckpt = load_checkpoint<float>(cfg.resume);
    if (!(ckpt.model.config() == cfg.model)) throw ConfigError("resume", "checkpoint model differs from the config");
    out.model = std::move(ckpt.model);
    out.adam = std::move(ckpt.adam);
    start = static_cast<int>(ckpt.epoch);
    if (start >= tc.epochs) throw ConfigError("resume", fmt::format("checkpoint already at epoch {}", start));
  }

  const fs::path dir = cfg.out_dir;
  for (int e = start; e < tc.epochs; ++e) {
    out.log.push_back(train_epoch(out.model, train, split, tc, e, out.adam, &test, {}, cfg.threads));
    const auto& r = out.log.back();
    spdlog::info("epoch {}/{} ce={:.4f} cons={:.4f} aux={:.4f} os={:.4f} w={:.3f} lr={:.3f} acc={:.4f}", e + 1,
                 tc.epochs, r.ce, r.consistency, r.aux, r.os, r.w_t, r.lr_factor, r.eval_acc);
    if (r.skipped_steps) spdlog::warn("epoch {}: {} steps skipped on non-finite gradients", e, r.skipped_steps);
    write_train_log(dir / "train_log.csv", out.log);
    save_checkpoint(dir / "model.ckpt", out.model, out.adam, static_cast<std::uint32_t>(e + 1));
  }
  out.test_accuracy = out.log.empty() ? evaluate(out.model, test, cfg.threads).accuracy : out.log.back().eval_acc;
  return out;
}

void read_predictions(const std::string& path, std::vector<double>& probs, std::vector<int>& labels,
                      std::size_t& classes) {
  std::ifstream f(path);
  if (!f) throw ConfigError("analysis.predictions", "cannot read '" + path + "'");
  probs.clear();
  labels.clear();
  classes = 0;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    if (lineno == 1 && std::isalpha(static_cast<unsigned char>(line[0]))) continue;
    std::vector<double> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        cells.push_back(std::stod(cell, &used));
      } catch (const std::exception&) {
        throw ConfigError("analysis.predictions", fmt::format("line {}: '{}' is not a number", lineno, cell));
      }
    }
    if (cells.size() < 3) throw ConfigError("analysis.predictions", fmt::format("line {}: need K>=2 probabilities and a label", lineno));
    const auto k = cells.size() - 1;
    if (classes == 0) classes = k;
    if (k != classes) throw ConfigError("analysis.predictions", fmt::format("line {}: {} columns, expected {}", lineno, cells.size(), classes + 1));
    probs.insert(probs.end(), cells.begin(), cells.end() - 1);
    labels.push_back(static_cast<int>(cells.back()));
  }
  if (labels.empty()) throw ConfigError("analysis.predictions", "no rows");
}

AnalyzeOutcome run_analyze(const RunConfig& cfg) {
  AnalyzeOutcome out;
  const auto& a = cfg.analysis;
  if (!a.predictions.empty()) {
    std::vector<double> probs;
    std::vector<int> labels;
    std::size_t k = 0;
    read_predictions(a.predictions, probs, labels, k);
    try {
      out.calibration = calibration(probs, k, labels, a.calibration_bins);
    } catch (const std::invalid_argument& e) {
      throw ConfigError("analysis.predictions", e.what());
    }
    out.calibration_csv = calibration_csv(out.calibration);
    std::size_t correct = 0;
    for (std::size_t i = 0; i < labels.size(); ++i)
      correct += argmax_row(std::span<const double>(probs).subspan(i * k, k)) == static_cast<std::size_t>(labels[i]);
    out.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
    return out;
  }
  auto ckpt = load_for_analysis(cfg);
  auto& model = ckpt.model;
  const auto test = apply_normalization(load_raw_data(cfg.data).test, model.norm_stats);
  const auto eval = evaluate(model, test, cfg.threads);
  out.accuracy = eval.accuracy;
  out.calibration = calibration(eval.probs.values(), static_cast<std::size_t>(model.config().classes), test.labels,
                                a.calibration_bins);
  out.calibration_csv = calibration_csv(out.calibration);
  const auto layer = layer_of(cfg, model);
  const auto maps = collect_feature_maps(model, test, layer, a.correlation_images, cfg.threads);
  out.correlation = channel_correlation(maps, layer, a.correlation_bins, a.correlation_mode);
  out.correlation_csv = correlation_csv(out.correlation);
  return out;
}

PruneOutcome run_prune(const RunConfig& cfg) {
  auto ckpt = load_for_analysis(cfg);
  auto& model = ckpt.model;
  const auto test = apply_normalization(load_raw_data(cfg.data).test, model.norm_stats);
  if (test.size() < 2) throw ConfigError("data.test_per_class", "test set too small to halve");
  const auto [val, tst] = halve(test.size(), run_seeds(cfg.seed).halves);
  PruneOutcome out;
  out.rows = prune_sweep(model, test, val, tst, layer_of(cfg, model), cfg.analysis.prune_rates, cfg.threads);
  out.csv = prune_csv(out.rows);
  return out;
}

GradcamOutcome run_gradcam(const RunConfig& cfg) {
  auto ckpt = load_for_analysis(cfg);
  auto& model = ckpt.model;
  const auto raw = load_raw_data(cfg.data).test;
  const auto test = apply_normalization(raw, model.norm_stats);
  const auto& a = cfg.analysis;
  if (a.gradcam_image >= test.size())
    throw ConfigError("analysis.gradcam_image", fmt::format("index {} outside the {} test images", a.gradcam_image, test.size()));
  const auto layer = layer_of(cfg, model);
  GradcamOutcome out;
  if (a.gradcam_prune_rate > 0) {
    const auto [val, tst] = halve(test.size(), run_seeds(cfg.seed).halves);
    const auto m = model.config().channels_of(layer);
    const auto ranking = prune_rank(model, subset(test, val), layer, cfg.threads);
    out.pruned = apply_prune(model, ranking, prune_count(a.gradcam_prune_rate, m)).n;
  }
  out.target = a.gradcam_class;
  if (out.target < 0) {
    const std::size_t idx = a.gradcam_image;
    Graph<float> g;
    auto fwd = forward(model, g, make_batch<float>(test, std::span(&idx, 1)), ForwardOptions{});
    out.target = static_cast<int>(argmax_row(fwd.logits.value().values()));
  }
  out.map = grad_cam(model, test.image(a.gradcam_image), out.target, layer);
  out.upsampled = upsample_bilinear(out.map, kImageSide, kImageSide);
  out.heatmap = heatmap_image(out.upsampled);
  out.overlay = overlay_image(raw.image(a.gradcam_image), out.upsampled);
  return out;
}

int run_command(const std::string& command, const RunConfig& cfg) {
  try {
    ensure_dir(cfg.out_dir);
    const fs::path dir = cfg.out_dir;
    write_text(dir / "resolved_config.json", cfg.resolved_json);
    if (command == "train") {
      const auto out = run_train(cfg);
      fmt::print("trained {} epochs; test accuracy {:.4f}; checkpoint {}\n", out.log.size(), out.test_accuracy,
                 (dir / "model.ckpt").string());
    } else if (command == "analyze") {
      const auto out = run_analyze(cfg);
      write_text(dir / "calibration.csv", out.calibration_csv);
      if (!out.correlation_csv.empty()) write_text(dir / "correlation.csv", out.correlation_csv);
      fmt::print("accuracy {:.4f}  ECE {:.6f}  OE {:.6f}  BS {:.6f}", out.accuracy, out.calibration.ece,
                 out.calibration.oe, out.calibration.bs);
      if (!out.correlation_csv.empty())
        fmt::print("  mean|r|({}) {:.6f} over {} pairs", out.correlation.layer, out.correlation.mean_abs,
                   out.correlation.pairs);
      fmt::print("\n");
    } else if (command == "prune") {
      const auto out = run_prune(cfg);
      write_text(dir / "prune.csv", out.csv);
      fmt::print("{}", out.csv);
    } else if (command == "gradcam") {
      const auto out = run_gradcam(cfg);
      write_pnm(dir / "gradcam.pgm", out.heatmap);
      write_pnm(dir / "overlay.ppm", out.overlay);
      fmt::print("class {} at {}{}; wrote gradcam.pgm and overlay.ppm\n", out.target, out.map.layer,
                 out.pruned ? fmt::format(" with {} channels pruned", out.pruned) : "");
    } else {
      throw ConfigError("command", "unknown command '" + command + "'");
    }
    return kExitOk;
  } catch (const ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return kExitConfig;
  } catch (const DivergenceError& e) {
    spdlog::error("diverged: {}", e.what());
    return kExitRuntime;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitRuntime;
  }
}

}  // namespace osreg::cli
