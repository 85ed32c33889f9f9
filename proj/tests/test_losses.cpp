#include <Eigen/Dense>
#include <cmath>
#include <numbers>

#include "doctest.h"
#include "osreg/losses.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace osreg;
using osreg::test::random_tensor;

namespace {

std::vector<double> rotate(const Eigen::MatrixXd& q, std::span<const double> v) {
  Eigen::VectorXd x = Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
  Eigen::VectorXd y = q * x;
  return {y.data(), y.data() + y.size()};
}

}  // namespace

TEST_SUITE("losses") {
  TEST_CASE("OS loss equals the double-sum oracle") {
    Rng rng(1);
    double worst = 0;
    for (int trial = 0; trial < 100; ++trial) {
      const auto d = static_cast<std::size_t>(rng.integer(1, 16));
      const auto k = static_cast<std::size_t>(rng.integer(1, 16));
      std::vector<double> z(d * k);
      for (auto& v : z) v = rng.normal();
      const double got = os_loss(partition_latent(z, k));
      const double want = oracle::os_double_sum(z, d, k);
      worst = std::max(worst, std::abs(got - want) / std::max(1.0, std::abs(want)));
    }
    CHECK(worst < 1e-9);
  }

  TEST_CASE("OS loss vanishes on orthonormal columns") {
    Rng rng(2);
    double worst = 0;
    for (int trial = 0; trial < 50; ++trial) {
      const auto k = static_cast<std::size_t>(rng.integer(1, 16));
      const auto d = k + static_cast<std::size_t>(rng.integer(0, 8));
      Eigen::MatrixXd a(d, k);
      for (Eigen::Index c = 0; c < a.cols(); ++c)
        for (Eigen::Index r = 0; r < a.rows(); ++r) a(r, c) = rng.normal();
      Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(a).householderQ() * Eigen::MatrixXd::Identity(d, k);
      std::vector<double> z(q.data(), q.data() + q.size());  // column-major: block j is column j
      worst = std::max(worst, os_loss(partition_latent(z, k)));
    }
    CHECK(worst < 1e-10);
    // Strictly positive off the orthonormal set.
    CHECK(os_loss(partition_latent(std::vector<double>{1, 0, 1, 0}, 2)) == 2.0);
  }

  TEST_CASE("partition_latent layout and contracts") {
    const auto b = partition_latent(std::vector<double>{1, 2, 3, 4, 5, 6}, 3);
    CHECK(b.d == 2);
    CHECK(b.k == 3);
    CHECK(b.at(1, 2) == 6);
    CHECK(b.column(1)[0] == 3);
    CHECK_THROWS_AS(partition_latent(std::vector<double>{1, 2, 3}, 2), std::invalid_argument);
    CHECK_THROWS_AS(partition_latent(std::vector<double>{1, 2}, 0), std::invalid_argument);
  }

  TEST_CASE("graph OS loss is the row mean of the scalar loss") {
    const auto z = random_tensor({5, 12}, 3);
    Graph<double> g;
    const double got = os_loss(g.constant(z), 4).value().item();
    double want = 0;
    for (std::size_t i = 0; i < 5; ++i) {
      std::vector<double> row(z.data() + i * 12, z.data() + (i + 1) * 12);
      want += oracle::os_double_sum(row, 3, 4) / 5;
    }
    CHECK(got == doctest::Approx(want).epsilon(1e-12));
  }

  TEST_CASE("sphere projection") {
    const auto p = sphere_project(std::vector<double>{3, 4}, 1.0);
    CHECK(p[0] == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(p[1] == doctest::Approx(0.8).epsilon(1e-15));
    CHECK_THROWS_AS(sphere_project(std::vector<double>{0, 0}, 1.0), std::invalid_argument);
    Rng rng(4);
    double worst = 0;
    for (int t = 0; t < 100; ++t) {
      std::vector<double> z(9), scaled(9);
      const double a = rng.uniform(0.01, 100);
      for (std::size_t i = 0; i < 9; ++i) scaled[i] = a * (z[i] = rng.normal());
      const auto x = sphere_project(z, 3.0), y = sphere_project(scaled, 3.0);
      for (std::size_t i = 0; i < 9; ++i) worst = std::max(worst, std::abs(x[i] - y[i]));
    }
    CHECK(worst < 1e-14);
    Graph<double> g;
    const auto rows = sphere_project(g.constant(random_tensor({4, 6}, 5)), 3.0).value();
    for (std::size_t i = 0; i < 4; ++i) {
      double n = 0;
      for (std::size_t j = 0; j < 6; ++j) n += rows[i * 6 + j] * rows[i * 6 + j];
      CHECK(std::sqrt(n) == doctest::Approx(3.0).epsilon(1e-14));
    }
  }

  TEST_CASE("SNTG pair values") {
    const std::vector<double> a{0, 0}, b{3, 4};
    CHECK(sntg_pair(a, b, 1, 1.0) == 25.0);
    CHECK(sntg_pair(a, b, 0, 1.0) == 0.0);
    CHECK(sntg_pair(a, b, 0, 7.0) == 4.0);
    Rng rng(6);
    for (int t = 0; t < 200; ++t) {
      std::vector<double> x(4), y(4);
      for (auto& v : x) v = rng.normal();
      for (auto& v : y) v = rng.normal();
      double dist = 0;
      for (std::size_t i = 0; i < 4; ++i) dist += (x[i] - y[i]) * (x[i] - y[i]);
      dist = std::sqrt(dist);
      const double m = rng.uniform(0, 3);
      if (dist >= m) REQUIRE(sntg_pair(x, y, 0, m) == 0.0);
    }
  }

  TEST_CASE("AMC pair values and rotation invariance") {
    const std::vector<double> e1{1, 0}, e2{0, 1};
    CHECK(amc_pair(e1, e2, 0, 0.5) == 0.0);
    CHECK(amc_pair(e1, e2, 1, 0.5) == doctest::Approx(std::numbers::pi * std::numbers::pi / 4).epsilon(1e-15));
    CHECK(amc_pair(e1, e1, 1, 0.5) == 0.0);
    CHECK(amc_pair(e1, e1, 0, 0.5) == doctest::Approx(0.25));
    CHECK_THROWS_AS(amc_pair(std::vector<double>{2, 0}, e2, 0, 0.5), std::invalid_argument);

    Rng rng(7);
    double worst = 0;
    for (int t = 0; t < 100; ++t) {
      const std::size_t m = 6;
      Eigen::MatrixXd a(m, m);
      for (Eigen::Index c = 0; c < a.cols(); ++c)
        for (Eigen::Index r = 0; r < a.rows(); ++r) a(r, c) = rng.normal();
      Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(a).householderQ();
      std::vector<double> x(m), y(m);
      for (auto& v : x) v = rng.normal();
      for (auto& v : y) v = rng.normal();
      x = sphere_project(x, 1.0);
      y = sphere_project(y, 1.0);
      const int s = static_cast<int>(rng.below(2));
      const double margin = rng.uniform(0, 3);
      worst = std::max(worst, std::abs(amc_pair(x, y, s, margin) - amc_pair(rotate(q, x), rotate(q, y), s, margin)));
    }
    CHECK(worst < 1e-6);
  }

  TEST_CASE("cross-entropy hand values") {
    Graph<double> g;
    const double e = std::exp(-1.0);
    auto p = g.constant(Tensor<double>({2, 2}, {e, 1 - e, 0.5, 0.5}));
    const std::vector<int> labels{0, 1};
    const std::vector<std::uint8_t> mask{1, 0};
    CHECK(cross_entropy_masked(p, labels, mask).value().item() == doctest::Approx(0.5).epsilon(1e-15));
    auto onehot = g.constant(Tensor<double>({2, 2}, {1, 0, 0, 1}));
    const std::vector<std::uint8_t> all{1, 1};
    CHECK(cross_entropy_masked(onehot, labels, all).value().item() == 0.0);
    LossDiagnostics diag;
    auto zero = g.constant(Tensor<double>({1, 2}, {0.0, 1.0}));
    const std::vector<int> l0{0};
    const std::vector<std::uint8_t> m1{1};
    CHECK(std::isfinite(cross_entropy_masked(zero, l0, m1, &diag).value().item()));
    CHECK(diag.clamped_probabilities == 1);
  }

  TEST_CASE("consistency hand values") {
    Graph<double> g;
    CHECK(consistency_loss(g.constant(Tensor<double>({1, 2}, {1, 0})), Tensor<double>({1, 2}, {0, 1}))
              .value()
              .item() == 2.0);
    CHECK(consistency_loss(g.constant(Tensor<double>({1, 2}, {0.5, 0.5})), Tensor<double>({1, 2}, {1, 0}))
              .value()
              .item() == 0.5);
  }

  TEST_CASE("similarity from teacher argmax with the tie rule") {
    const Tensor<double> teacher({3, 2}, {0.5, 0.5, 0.9, 0.1, 0.2, 0.8});
    const auto sim = build_similarity(teacher, {{0, 1}, {0, 2}});
    CHECK(sim.similar == std::vector<int>{1, 0});
    CHECK_THROWS_AS(build_similarity(teacher, {{0, 3}}), std::invalid_argument);
    Rng rng(8);
    auto pairs = make_pairs(9, rng);
    CHECK(pairs.size() == 4);
    std::vector<int> used(9, 0);
    for (auto [i, j] : pairs) ++used[i], ++used[j];
    CHECK(std::count(used.begin(), used.end(), 1) == 8);
    CHECK(std::count(used.begin(), used.end(), 0) == 1);
  }

  TEST_CASE("schedules") {
    CHECK(ramp_up(80, 80) == 1.0);
    CHECK(ramp_up(200, 80) == 1.0);
    CHECK(std::abs(ramp_up(0, 80) - std::exp(-5.0)) < 1e-12);
    CHECK(std::abs(ramp_up(40, 80) - std::exp(-1.25)) < 1e-12);
    CHECK(std::abs(ramp_down(300, 300, 50) - std::exp(-12.5)) < 1e-12);
    CHECK(ramp_down(250, 300, 50) == 1.0);
    CHECK(ramp_down(100, 300, 50) == 1.0);
    for (int t = 0; t < 80; ++t) CHECK(ramp_up(t, 80) < ramp_up(t + 1, 80));
    for (int t = 250; t < 300; ++t) CHECK(ramp_down(t, 300, 50) > ramp_down(t + 1, 300, 50));
    // Window longer than the run.
    CHECK(std::abs(ramp_down(0, 10, 50) - 1.0) < 1e-12);
    CHECK(std::abs(ramp_down(10, 10, 50) - std::exp(-12.5)) < 1e-12);
  }

  TEST_CASE("total loss recombines its terms") {
    // One labeled sample, hand-set tensors.
    Graph<double> g;
    const double e = std::exp(-1.0);
    auto student = g.constant(Tensor<double>({2, 2}, {e, 1 - e, 0.3, 0.7}));
    const Tensor<double> teacher({2, 2}, {1, 0, 0, 1});
    const std::vector<int> labels{0, 0};
    const std::vector<std::uint8_t> mask{1, 0};
    auto latent = g.constant(Tensor<double>({2, 4}, {1, 0, 0, 1, 1, 0, 1, 0}));
    PairSimilarity sim;
    sim.pairs = {{0, 1}};
    sim.similar = {1};
    LossWeights w;
    w.lambda = 2.0;
    w.lambda1 = 0.5;
    w.lambda2 = 0.25;
    w.aux = AuxKind::Sntg;
    w.margin_euclid = 1.0;
    w.os_blocks = 2;
    w.normalize_latent = false;
    LossInputs<double> in{student, &teacher, labels, mask, latent, &sim, {latent}};
    const double wt = 0.6;
    const auto tl = total_loss(in, w, wt);

    const double ce = 0.5;  // -(1/2) ln e^-1
    const double cons = ((e - 1) * (e - 1) + (1 - e) * (1 - e) + 0.3 * 0.3 + 0.3 * 0.3) / 2;
    const double aux = 0 + 1 + 0 + 1;  // ||(1,0,0,1)-(1,0,1,0)||^2
    const double os = (0.0 + 2.0) / 2;  // identity blocks, then two equal columns
    CHECK(tl.terms.ce == doctest::Approx(ce).epsilon(1e-12));
    CHECK(tl.terms.consistency == doctest::Approx(cons).epsilon(1e-12));
    CHECK(tl.terms.aux == doctest::Approx(aux).epsilon(1e-12));
    CHECK(tl.terms.os == doctest::Approx(os).epsilon(1e-12));
    const double want = ce + wt * (2.0 * cons + 0.5 * aux + 0.25 * os);
    CHECK(std::abs(tl.total.value().item() - want) < 1e-6);
    CHECK(std::abs(tl.terms.recombined(w) - tl.terms.total) < 1e-12);

    const auto early = total_loss(in, w, 0.0);
    CHECK(early.total.value().item() == doctest::Approx(ce).epsilon(1e-15));
    CHECK(std::abs(total_loss(in, w, std::exp(-5.0)).total.value().item() - ce) < 0.1);
  }

  TEST_CASE("loss weights validation") {
    LossWeights w;
    CHECK_NOTHROW(w.validate());
    w.lambda2 = -1;
    CHECK_THROWS_AS(w.validate(), std::invalid_argument);
    CHECK(LossWeights::default_lambda2(true) == 7e-5);
    CHECK(LossWeights::default_lambda2(false) == 5e-4);
    CHECK(parse_aux_kind("amc") == AuxKind::Amc);
    CHECK(std::string(aux_kind_name(AuxKind::Sntg)) == "sntg");
    CHECK_THROWS_AS(parse_aux_kind("bogus"), std::invalid_argument);
  }
}
