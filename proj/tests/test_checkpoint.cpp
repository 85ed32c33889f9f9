#include <filesystem>

#include "doctest.h"
#include "osreg/checkpoint.hpp"
#include "osreg/trainer.hpp"
#include "support.hpp"

using namespace osreg;
using osreg::test::tiny_config;

namespace {

struct Trained {
  Model<float> model;
  AdamState<float> adam;
};

Trained trained_model() {
  auto [train, stats] = normalize(synth_dataset(3, 4, 1));
  Model<float> model(tiny_config(3), 2);
  model.norm_stats = stats;
  auto adam = AdamState<float>::zeros_like(model.params());
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 6;
  cfg.loss.os_blocks = 4;
  cfg.loss.lambda2 = 0.1;
  cfg.seed = 3;
  const auto split = split_semi(train, 6, 4);
  for (int e = 0; e < 2; ++e) train_epoch(model, train, split, cfg, e, adam);
  return {std::move(model), std::move(adam)};
}

}  // namespace

TEST_SUITE("checkpoint") {
  TEST_CASE("save, load, save is byte-identical") {
    auto t = trained_model();
    const auto bytes = encode_checkpoint(t.model, t.adam, 2);
    const auto back = decode_checkpoint<float>(bytes);
    CHECK(back.epoch == 2);
    CHECK(back.adam.step == t.adam.step);
    CHECK(back.model.config() == t.model.config());
    CHECK(back.model.norm_stats.mean == t.model.norm_stats.mean);
    CHECK(back.model.bn_state("conv2").running_var == t.model.bn_state("conv2").running_var);
    CHECK(encode_checkpoint(back.model, back.adam, back.epoch) == bytes);

    const auto path = std::filesystem::temp_directory_path() / "osreg_test.ckpt";
    save_checkpoint(path, t.model, t.adam, 2);
    const auto loaded = load_checkpoint<float>(path);
    const auto path2 = std::filesystem::temp_directory_path() / "osreg_test2.ckpt";
    save_checkpoint(path2, loaded.model, loaded.adam, loaded.epoch);
    CHECK(std::filesystem::file_size(path) == std::filesystem::file_size(path2));
    CHECK(encode_checkpoint(loaded.model, loaded.adam, loaded.epoch) == bytes);
    std::filesystem::remove(path);
    std::filesystem::remove(path2);
  }

  TEST_CASE("loaded model predicts identically") {
    auto t = trained_model();
    const auto back = decode_checkpoint<float>(encode_checkpoint(t.model, t.adam, 2));
    auto copy = back.model;
    const auto data = apply_normalization(synth_dataset(3, 2, 5), t.model.norm_stats);
    CHECK(evaluate(copy, data).probs == evaluate(t.model, data).probs);
  }

  TEST_CASE("corruption is detected") {
    auto t = trained_model();
    const auto bytes = encode_checkpoint(t.model, t.adam, 2);
    for (std::size_t pos : {std::size_t{0}, std::size_t{9}, bytes.size() / 2, bytes.size() - 1}) {
      auto bad = bytes;
      bad[pos] ^= 0x10;
      CAPTURE(pos);
      CHECK_THROWS_AS(decode_checkpoint<float>(bad), std::runtime_error);
    }
    auto cut = bytes;
    cut.resize(bytes.size() - 20);
    CHECK_THROWS_AS(decode_checkpoint<float>(cut), std::runtime_error);
    auto extra = bytes;
    extra.push_back(0);
    CHECK_THROWS_AS(decode_checkpoint<float>(extra), std::runtime_error);
    CHECK_THROWS_AS(decode_checkpoint<double>(bytes), std::runtime_error);
    CHECK_THROWS(load_checkpoint<float>("/nonexistent/osreg.ckpt"));
  }

  TEST_CASE("FNV-1a reference values") {
    CHECK(fnv1a64({}) == 0xcbf29ce484222325ULL);
    const std::string a = "a";
    CHECK(fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(a.data()), a.size())) == 0xaf63dc4c8601ec8cULL);
  }
}
