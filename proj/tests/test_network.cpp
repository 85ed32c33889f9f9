#include <cmath>

#include "doctest.h"
#include "support.hpp"

using namespace osreg;
using osreg::test::tiny_config;

namespace {

Tensor<float> images(std::size_t n, std::uint64_t seed) {
  const auto d = synth_dataset(2, (n + 1) / 2, seed);
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  return make_batch<float>(d, idx);
}

}  // namespace

TEST_SUITE("network") {
  TEST_CASE("desk and full layouts") {
    const auto desk = ModelConfig::desk(4);
    CHECK_NOTHROW(desk.validate());
    CHECK(desk.conv_names() == std::vector<std::string>{"conv1", "conv2", "conv3", "conv4"});
    CHECK(desk.final_block_convs() == std::vector<std::string>{"conv3", "conv4"});
    CHECK(desk.channels_of("conv4") == 64);
    CHECK(desk.channels_of("gap") == 64);

    const auto full = ModelConfig::full(10);
    CHECK(full.conv_names().size() == 9);
    CHECK(full.latent_dim == 128);
    CHECK(full.channels_of("conv7") == 512);
    CHECK(full.channels_of("conv9") == 128);

    Model<float> m(desk, 1);
    Graph<float> g;
    auto out = forward(m, g, images(2, 2), ForwardOptions{});
    CHECK(out.feature_maps.at("conv4").shape() == Shape{2, 64, 6, 6});
    CHECK(out.taps.at("gap").shape() == Shape{2, 64});
    CHECK(out.taps.at("conv3").shape() == Shape{2, 64});
    CHECK(out.logits.shape() == Shape{2, 4});
  }

  TEST_CASE("full layout forward shape") {
    Model<float> m(ModelConfig::full(10), 3);
    Graph<float> g;
    auto out = forward(m, g, images(1, 4), ForwardOptions{});
    CHECK(out.feature_maps.at("conv9").shape() == Shape{1, 128, 6, 6});
    CHECK(out.taps.at("gap").shape() == Shape{1, 128});
  }

  TEST_CASE("config validation and JSON round trip") {
    auto c = ModelConfig::desk(4);
    CHECK(ModelConfig::from_json(c.to_json()) == c);
    auto bad = c;
    bad.latent_dim = 32;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = c;
    bad.tap_points = {"conv9"};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = c;
    bad.classes = 1;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    CHECK_THROWS(ModelConfig::from_json("{\"blocks\": 3}"));
  }

  TEST_CASE("He initialization scale") {
    Model<double> m(ModelConfig::desk(4), 5);
    const auto& w = m.param("conv4.weight");
    double ss = 0;
    for (auto v : w.values()) ss += v * v;
    const double fan_in = 64.0 * 3 * 3;
    CHECK(ss / static_cast<double>(w.size()) == doctest::Approx(2.0 / fan_in).epsilon(0.05));
    CHECK(m.param("conv1.bn.gamma").storage() == std::vector<double>(16, 1.0));
    CHECK(m.param("fc.bias").storage() == std::vector<double>(4, 0.0));
    Model<double> same(ModelConfig::desk(4), 5);
    CHECK(same.param("conv2.weight") == m.param("conv2.weight"));
    CHECK_THROWS(m.param("nope"));
  }

  TEST_CASE("conv taps are the spatial mean of the raw convolution") {
    Model<double> m(tiny_config(), 6);
    const auto d = synth_dataset(3, 1, 7);
    const std::vector<std::size_t> idx{0, 1, 2};
    const auto x = make_batch<double>(d, idx);
    Graph<double> g;
    auto out = forward(m, g, x, ForwardOptions{});
    // Recompute conv2 from the post-pool, post-activation conv1 map.
    auto a1 = max_pool2d(out.feature_maps.at("conv1"), 2, 2);
    auto raw = conv2d(a1, g.constant(m.param("conv2.weight")), 1, 0);
    const auto want = global_avg_pool(raw).value();
    const auto& got = out.taps.at("conv2").value();
    REQUIRE(got.shape() == want.shape());
    for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
    const auto gap = global_avg_pool(out.feature_maps.at("conv2")).value();
    CHECK(out.taps.at("gap").value() == gap);
  }

  TEST_CASE("student and teacher passes differ and stay finite") {
    Model<float> m(tiny_config(), 8);
    const auto x = images(4, 9);
    PerturbConfig p;
    Rng r1(10), r2(11);
    Graph<float> g1, g2;
    auto s = forward(m, g1, x, ForwardOptions{PassKind::Student, p, &r1, std::nullopt});
    auto t = forward(m, g2, x, ForwardOptions{PassKind::Teacher, p, &r2, false});
    CHECK(s.logits.value().all_finite());
    CHECK(t.logits.value().all_finite());
    CHECK(s.logits.value() != t.logits.value());
    CHECK(s.logits.requires_grad());
    CHECK_FALSE(t.logits.requires_grad());
    Rng r3(10);
    Graph<float> g3;
    auto again = forward(m, g3, x, ForwardOptions{PassKind::Student, p, &r3, std::nullopt});
    CHECK(again.logits.value() == s.logits.value());
  }

  TEST_CASE("only the student pass moves running statistics") {
    Model<float> m(tiny_config(), 12);
    const auto x = images(4, 13);
    const auto before = m.bn_state("conv1").running_mean;
    Rng rng(14);
    Graph<float> g;
    forward(m, g, x, ForwardOptions{PassKind::Teacher, PerturbConfig{}, &rng, false});
    CHECK(m.bn_state("conv1").running_mean == before);
    Graph<float> g2;
    forward(m, g2, x, ForwardOptions{});
    CHECK(m.bn_state("conv1").running_mean == before);
    Graph<float> g3;
    forward(m, g3, x, ForwardOptions{PassKind::Student, PerturbConfig{}, &rng, std::nullopt});
    CHECK(m.bn_state("conv1").running_mean != before);
  }

  TEST_CASE("forward option contracts") {
    Model<float> m(tiny_config(), 15);
    const auto x = images(2, 16);
    Graph<float> g;
    Rng rng(17);
    CHECK_THROWS_AS(forward(m, g, x, ForwardOptions{PassKind::Eval, PerturbConfig{}, &rng, std::nullopt}),
                    std::invalid_argument);
    CHECK_THROWS_AS(forward(m, g, x, ForwardOptions{PassKind::Student, PerturbConfig{}, nullptr, std::nullopt}),
                    std::invalid_argument);
    CHECK_THROWS_AS(forward(m, g, Tensor<float>({2, 1, 32, 32}), ForwardOptions{}), std::invalid_argument);
  }

  TEST_CASE("channel masks") {
    Model<float> m(tiny_config(), 18);
    const auto x = images(3, 19);
    Graph<float> g;
    const auto base = forward(m, g, x, ForwardOptions{}).logits.value();
    m.set_channel_mask("conv2", std::vector<std::uint8_t>(8, 1));
    Graph<float> g2;
    CHECK(forward(m, g2, x, ForwardOptions{}).logits.value() == base);

    std::vector<std::uint8_t> keep(8, 1);
    keep[2] = keep[5] = 0;
    m.set_channel_mask("conv2", keep);
    Graph<float> g3;
    auto out = forward(m, g3, x, ForwardOptions{});
    const auto& a = out.feature_maps.at("conv2").value();
    const std::size_t hw = a.dim(2) * a.dim(3);
    for (std::size_t n = 0; n < 3; ++n)
      for (std::size_t c : {2, 5})
        for (std::size_t p = 0; p < hw; ++p) CHECK(a[(n * 8 + c) * hw + p] == 0.0f);
    CHECK(out.logits.value() != base);

    CHECK_THROWS_AS(m.set_channel_mask("gap", keep), std::invalid_argument);
    CHECK_THROWS_AS(m.set_channel_mask("conv2", std::vector<std::uint8_t>(3, 1)), std::invalid_argument);
    m.clear_channel_masks();
    CHECK(m.channel_mask("conv2") == nullptr);
  }

  TEST_CASE("eval forward does not depend on batch composition") {
    Model<float> m(tiny_config(), 20);
    const auto d = synth_dataset(2, 3, 21);
    const std::vector<std::size_t> all{0, 1, 2, 3, 4, 5}, one{3};
    Graph<float> g;
    const auto big = forward(m, g, make_batch<float>(d, all), ForwardOptions{}).probs.value();
    const auto small = forward(m, g, make_batch<float>(d, one), ForwardOptions{}).probs.value();
    for (std::size_t k = 0; k < 3; ++k) CHECK(small[k] == doctest::Approx(big[3 * 3 + k]).epsilon(1e-5));
  }
}
