#include "doctest.h"
#include "run_config.hpp"

using namespace osreg;
using namespace osreg::cli;

namespace {

std::string error_key(const std::string& json, const std::map<std::string, std::string>& env = {}) {
  try {
    resolve_config(json, env);
  } catch (const ConfigError& e) {
    return e.key();
  }
  return "<none>";
}

}  // namespace

TEST_SUITE("config") {
  TEST_CASE("presets resolve and validate") {
    for (const auto& name : preset_names()) {
      CAPTURE(name);
      const auto cfg = resolve_config("{\"preset\": \"" + name + "\"}", {});
      CHECK(cfg.preset == name);
      CHECK(cfg.out_dir == "runs/" + name);
      CHECK_NOTHROW(cfg.train.validate(cfg.model));
    }
    CHECK(resolve_config("", {}).preset == "desk-synth");
    CHECK(error_key("{\"preset\": \"nope\"}") == "preset");
  }

  TEST_CASE("published training recipe") {
    const auto cfg = resolve_config("{\"preset\": \"paper-cifar10\"}", {});
    CHECK(cfg.train.epochs == 300);
    CHECK(cfg.train.batch_size == 100);
    CHECK(cfg.train.base_learning_rate == 0.003);
    CHECK(cfg.train.adam.beta1 == 0.9);
    CHECK(cfg.train.adam.beta2 == 0.999);
    CHECK(cfg.train.ramp_up_epochs == 80);
    CHECK(cfg.train.ramp_down_epochs == 50);
    CHECK(cfg.train.loss.lambda == 1.0);
    CHECK(cfg.train.loss.lambda1 == 0.1);
    CHECK(cfg.train.loss.margin_angle == 0.5);
    CHECK(cfg.train.loss.lambda2 == 7e-5);
    CHECK(cfg.train.loss.sphere_radius == 3.0);
    CHECK(cfg.train.loss.os_blocks == 16);
    CHECK(cfg.model.leaky_alpha == 0.1);
    CHECK(cfg.model == ModelConfig::full(10));
    LossWeights sntg;
    CHECK(sntg.margin_euclid == 1.0);
    CHECK(LossWeights::default_lambda2(false) == 5e-4);
  }

  TEST_CASE("unknown keys are rejected with their path") {
    CHECK(error_key("{\"train\": {\"epocs\": 3}}") == "train.epocs");
    CHECK(error_key("{\"bogus\": 1}") == "bogus");
    CHECK(error_key("{\"data\": {\"synth\": {\"noize\": 1}}}") == "data.synth.noize");
    CHECK(error_key("{\"train\": {\"epochs\": \"ten\"}}") == "train.epochs");
    CHECK(error_key("{\"loss\": {\"aux\": \"xyz\"}}") == "loss.aux");
    CHECK(error_key("{\"train\": {\"epochs\": 0}}") == "train.epochs");
    CHECK(error_key("{not json") == "");
  }

  TEST_CASE("environment overrides sit between file and flags") {
    const std::string file = "{\"train\": {\"epochs\": 5}, \"seed\": 3}";
    CHECK(resolve_config(file, {}).train.epochs == 5);
    const std::map<std::string, std::string> env{{"OSREG_TRAIN__EPOCHS", "7"},
                                                 {"OSREG_LOSS__AUX", "sntg"},
                                                 {"OSREG_SEED", "11"}};
    auto cfg = resolve_config(file, env);
    CHECK(cfg.train.epochs == 7);
    CHECK(cfg.train.loss.aux == AuxKind::Sntg);
    CHECK(cfg.seed == 11);
    Overrides ov;
    ov.seed = 99;
    ov.out_dir = "elsewhere";
    cfg = resolve_config(file, env, ov);
    CHECK(cfg.seed == 99);
    CHECK(cfg.out_dir == "elsewhere");
    CHECK(error_key("{}", {{"OSREG_TRAIN__EPOCS", "7"}}) == "train.epocs");
    ov = {};
    ov.preset = "desk-cifar4";
    CHECK(resolve_config("{\"preset\": \"desk-synth\"}", {}, ov).preset == "desk-cifar4");
  }

  TEST_CASE("resolved JSON is a fixed point") {
    const auto cfg = resolve_config("{\"preset\": \"desk-cifar4\", \"seed\": 5, \"loss\": {\"lambda2\": 0}}", {});
    const auto again = resolve_config(cfg.resolved_json, {});
    CHECK(again.resolved_json == cfg.resolved_json);
    CHECK(again.train.loss.lambda2 == 0.0);
    CHECK(again.seed == 5);
  }

  TEST_CASE("analysis defaults") {
    const auto cfg = resolve_config("{}", {});
    CHECK(cfg.analysis.prune_rates == std::vector<double>{0, 22, 38, 53, 61, 69, 77});
    CHECK(cfg.analysis_layer() == "conv4");
    CHECK(cfg.checkpoint_path() == "runs/desk-synth/model.ckpt");
    CHECK(error_key("{\"analysis\": {\"layer\": \"conv12\"}}") == "analysis.layer");
    CHECK(error_key("{\"analysis\": {\"prune_rates\": [0, 100]}}") == "analysis.prune_rates");
  }
}
