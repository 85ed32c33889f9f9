#include <sys/wait.h>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "commands.hpp"
#include "doctest.h"

using namespace osreg;
using namespace osreg::cli;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("osreg_cli_" + name);
  fs::remove_all(p);
  return p;
}

const char* kTiny = R"({
  "preset": "desk-synth",
  "seed": 5,
  "data": {"classes": 3, "train_per_class": 20, "test_per_class": 10, "labeled": 30},
  "train": {"epochs": 2, "batch_size": 10, "ramp_up_epochs": 1, "ramp_down_epochs": 1},
  "analysis": {"correlation_images": 12, "prune_rates": [0, 50], "gradcam_image": 4}
})";

RunConfig tiny(const fs::path& out) {
  Overrides ov;
  ov.out_dir = out.string();
  return resolve_config(kTiny, {}, ov);
}

int run_binary(const std::string& args) {
  const int status = std::system((std::string(OSREG_CLI_PATH) + " " + args + " >/dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

const std::vector<std::string> kOutputs{"resolved_config.json", "train_log.csv", "model.ckpt", "correlation.csv",
                                        "calibration.csv", "prune.csv", "gradcam.pgm", "overlay.ppm"};

void run_all(const RunConfig& cfg) {
  for (const char* c : {"train", "analyze", "prune", "gradcam"}) REQUIRE(run_command(c, cfg) == kExitOk);
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("reruns reproduce every output byte for byte") {
    const auto a = scratch("a"), b = scratch("b");
    run_all(tiny(a));
    run_all(tiny(b));
    for (const auto& f : kOutputs) {
      CAPTURE(f);
      REQUIRE(fs::exists(a / f));
      if (f == "resolved_config.json") continue;  // out_dir differs
      CHECK(slurp(a / f) == slurp(b / f));
    }
    const auto gray = read_pnm(a / "gradcam.pgm");
    const auto rgb = read_pnm(a / "overlay.ppm");
    CHECK(gray.kind == '5');
    CHECK(rgb.kind == '6');
    for (const auto* img : {&gray, &rgb}) {
      CHECK(img->width == 32);
      CHECK(img->height == 32);
      CHECK(img->pixels.size() == 32 * 32 * (img->kind == '6' ? 3u : 1u));
    }
    // Feeding the resolved file back reproduces the run.
    const auto c = scratch("c");
    auto replay = load_config((a / "resolved_config.json").string(), Overrides{std::nullopt, c.string()});
    CHECK(replay.train.epochs == 2);
    run_all(replay);
    for (const auto& f : kOutputs)
      if (f != "resolved_config.json") CHECK(slurp(a / f) == slurp(c / f));
    fs::remove_all(a);
    fs::remove_all(b);
    fs::remove_all(c);
  }

  TEST_CASE("commands are thin wrappers over the library") {
    const auto dir = scratch("wrap");
    const auto cfg = tiny(dir);
    run_all(cfg);

    const auto seeds = run_seeds(cfg.seed);
    const auto raw = load_raw_data(cfg.data);
    const auto [train, stats] = normalize(raw.train);
    const auto test = apply_normalization(raw.test, stats);
    Model<float> model(cfg.model, seeds.init);
    model.norm_stats = stats;
    auto adam = AdamState<float>::zeros_like(model.params());
    auto tc = cfg.train;
    tc.seed = seeds.train;
    const auto split = split_semi(train, cfg.data.labeled, seeds.split);
    std::vector<EpochRecord> log;
    for (int e = 0; e < tc.epochs; ++e) log.push_back(train_epoch(model, train, split, tc, e, adam, &test));
    const auto ckpt = encode_checkpoint(model, adam, static_cast<std::uint32_t>(tc.epochs));
    CHECK(slurp(dir / "model.ckpt") == std::string(ckpt.begin(), ckpt.end()));
    write_train_log(dir / "expected_log.csv", log);
    CHECK(slurp(dir / "train_log.csv") == slurp(dir / "expected_log.csv"));

    const auto eval = evaluate(model, test);
    const auto cal = calibration(eval.probs.values(), 3, test.labels, cfg.analysis.calibration_bins);
    CHECK(slurp(dir / "calibration.csv") == calibration_csv(cal));
    const auto maps = collect_feature_maps(model, test, "conv4", 12);
    CHECK(slurp(dir / "correlation.csv") == correlation_csv(channel_correlation(maps, "conv4", 20)));

    const auto [val, tst] = halve(test.size(), seeds.halves);
    const std::vector<double> rates{0, 50};
    CHECK(slurp(dir / "prune.csv") == prune_csv(prune_sweep(model, test, val, tst, "conv4", rates)));

    Graph<float> g;
    const std::size_t idx = 4;
    auto out = forward(model, g, make_batch<float>(test, std::span(&idx, 1)), ForwardOptions{});
    const auto target = static_cast<int>(argmax_row(out.logits.value().values()));
    const auto map = upsample_bilinear(grad_cam(model, test.image(4), target, "conv4"), 32, 32);
    const auto pgm = encode_pnm(heatmap_image(map));
    CHECK(slurp(dir / "gradcam.pgm") == std::string(pgm.begin(), pgm.end()));
    const auto ppm = encode_pnm(overlay_image(raw.test.image(4), map));
    CHECK(slurp(dir / "overlay.ppm") == std::string(ppm.begin(), ppm.end()));
    const auto img = read_pnm(dir / "gradcam.pgm");
    CHECK(img.width == 32);
    CHECK(img.height == 32);
    CHECK(read_pnm(dir / "overlay.ppm").kind == '6');
    fs::remove_all(dir);
  }

  TEST_CASE("resumed training continues the schedule") {
    const auto full = scratch("full"), part = scratch("part");
    auto cfg = tiny(full);
    cfg.train.epochs = 3;
    cfg.train.ramp_up_epochs = 2;
    const auto whole = run_train(cfg);

    auto first = tiny(part);
    first.train.epochs = 3;
    first.train.ramp_up_epochs = 2;
    // Stop after one epoch by training a one-epoch prefix, then resume.
    {
      auto head = first;
      head.train.epochs = 3;
      const auto seeds = run_seeds(head.seed);
      const auto raw = load_raw_data(head.data);
      const auto [train, stats] = normalize(raw.train);
      const auto test = apply_normalization(raw.test, stats);
      Model<float> model(head.model, seeds.init);
      model.norm_stats = stats;
      auto adam = AdamState<float>::zeros_like(model.params());
      auto tc = head.train;
      tc.seed = seeds.train;
      train_epoch(model, train, split_semi(train, head.data.labeled, seeds.split), tc, 0, adam, &test);
      fs::create_directories(part);
      save_checkpoint(part / "head.ckpt", model, adam, 1);
    }
    first.resume = (part / "head.ckpt").string();
    const auto resumed = run_train(first);
    REQUIRE(resumed.log.size() == 2);
    CHECK(resumed.log[0].epoch == 1);
    CHECK(resumed.log[0].w_t == ramp_up(1, 2));
    CHECK(resumed.log[1].w_t == 1.0);
    CHECK(slurp(full / "model.ckpt") == slurp(part / "model.ckpt"));
    CHECK(whole.log.back().eval_acc == resumed.log.back().eval_acc);

    auto mismatch = first;
    mismatch.model.leaky_alpha = 0.2;
    CHECK_THROWS_AS(run_train(mismatch), ConfigError);
    fs::remove_all(full);
    fs::remove_all(part);
  }

  TEST_CASE("analyze accepts a predictions file") {
    const auto dir = scratch("pred");
    fs::create_directories(dir);
    std::ofstream(dir / "pred.csv") << "p0,p1,label\n0.9,0.1,0\n0.9,0.1,1\n";
    Overrides ov;
    ov.out_dir = dir.string();
    ov.predictions = (dir / "pred.csv").string();
    const auto cfg = resolve_config("{}", {}, ov);
    const auto out = run_analyze(cfg);
    CHECK(out.calibration.ece == 0.4);
    CHECK(out.correlation_csv.empty());
    CHECK(run_command("analyze", cfg) == kExitOk);
    CHECK(fs::exists(dir / "calibration.csv"));
    CHECK_FALSE(fs::exists(dir / "correlation.csv"));

    std::ofstream(dir / "bad.csv") << "0.9,0.2,0\n";
    ov.predictions = (dir / "bad.csv").string();
    CHECK(run_command("analyze", resolve_config("{}", {}, ov)) == kExitConfig);
    fs::remove_all(dir);
  }

  TEST_CASE("gradcam with a heavy prune mask") {
    const auto dir = scratch("cam");
    auto cfg = tiny(dir);
    REQUIRE(run_command("train", cfg) == kExitOk);
    cfg.analysis.gradcam_prune_rate = 77;
    const auto out = run_gradcam(cfg);
    CHECK(out.pruned == 49);
    CHECK(out.heatmap.width == 32);
    for (auto v : out.upsampled.values) {
      REQUIRE(std::isfinite(v));
      REQUIRE(v >= 0.0);
      REQUIRE(v <= 1.0);
    }
    cfg.analysis.gradcam_image = 1000;
    CHECK(run_command("gradcam", cfg) == kExitConfig);
    fs::remove_all(dir);
  }

  TEST_CASE("exit codes of the binary") {
    const auto dir = scratch("exit");
    CHECK(run_binary("--help") == 0);
    CHECK(run_binary("") == kExitConfig);
    CHECK(run_binary("train --bogus") == kExitConfig);
    fs::create_directories(dir);
    std::ofstream(dir / "typo.json") << "{\"train\": {\"epocs\": 3}}";
    CHECK(run_binary("train --config " + (dir / "typo.json").string()) == kExitConfig);
    CHECK(run_binary("analyze --out " + (dir / "none").string()) == kExitConfig);
    CHECK(run_binary("train --preset desk-cifar4 --out " + (dir / "cifar").string()) == kExitConfig);
    fs::remove_all(dir);
  }

  TEST_CASE("desk-synth preset trains within five minutes") {
    const auto dir = scratch("synth");
    Overrides ov;
    ov.out_dir = dir.string();
    const auto cfg = resolve_config("{\"preset\": \"desk-synth\"}", {}, ov);
    const auto t0 = std::chrono::steady_clock::now();
    const auto out = run_train(cfg);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    MESSAGE("desk-synth: " << secs << " s, test accuracy " << out.test_accuracy);
    CHECK(secs < 300);
    CHECK(out.test_accuracy > 0.5);
    fs::remove_all(dir);
  }
}
