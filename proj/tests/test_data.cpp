#include <cmath>
#include <filesystem>
#include <numbers>
#include <numeric>

#include "doctest.h"
#include "support.hpp"

using namespace osreg;

namespace {

std::vector<std::uint8_t> random_records(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::uint8_t> bytes(n * kCifarRecordBytes);
  for (std::size_t r = 0; r < n; ++r) {
    bytes[r * kCifarRecordBytes] = static_cast<std::uint8_t>(rng.below(10));
    for (std::size_t i = 1; i < kCifarRecordBytes; ++i)
      bytes[r * kCifarRecordBytes + i] = static_cast<std::uint8_t>(rng.below(256));
  }
  return bytes;
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("CIFAR-10 record layout") {
    std::vector<std::uint8_t> rec(kCifarRecordBytes, 0);
    rec[0] = 7;
    rec[1 + 0 * 1024 + 0 * 32 + 1] = 255;  // R, row 0, column 1
    rec[1 + 2 * 1024 + 31 * 32 + 31] = 51;  // B, row 31, column 31
    const auto d = decode_cifar10(rec);
    REQUIRE(d.size() == 1);
    CHECK(d.labels[0] == 7);
    CHECK(d.images[1] == 1.0f);
    CHECK(d.images[2 * 1024 + 31 * 32 + 31] == doctest::Approx(0.2f));
    CHECK(d.images[1024 + 1] == 0.0f);
  }

  TEST_CASE("CIFAR-10 round trip is byte-identical") {
    const auto bytes = random_records(25, 1);
    CHECK(encode_cifar10(decode_cifar10(bytes)) == bytes);
    const auto path = std::filesystem::temp_directory_path() / "osreg_test_records.bin";
    write_cifar10_bin(path, decode_cifar10(bytes));
    const auto back = read_cifar10_bin(path);
    CHECK(encode_cifar10(back) == bytes);
    const auto twice = read_cifar10_files({path, path});
    CHECK(twice.size() == 50);
    std::filesystem::remove(path);
  }

  TEST_CASE("CIFAR-10 rejects malformed input") {
    auto bytes = random_records(2, 2);
    bytes.pop_back();
    CHECK_THROWS_AS(decode_cifar10(bytes), std::runtime_error);
    auto bad = random_records(1, 3);
    bad[0] = 10;
    CHECK_THROWS_AS(decode_cifar10(bad), std::runtime_error);
    CHECK_THROWS(read_cifar10_bin("/nonexistent/osreg/file.bin"));
  }

  TEST_CASE("take_classes keeps file order per class") {
    const auto d = decode_cifar10(random_records(400, 4));
    const auto t = take_classes(d, 3, 5);
    CHECK(t.size() == 15);
    CHECK(t.classes == 3);
    std::vector<std::size_t> seen(3, 0);
    for (auto l : t.labels) ++seen[static_cast<std::size_t>(l)];
    CHECK(seen == std::vector<std::size_t>{5, 5, 5});
    CHECK_THROWS_AS(take_classes(d, 3, 1000), std::invalid_argument);
  }

  TEST_CASE("synthetic data is deterministic, balanced and in range") {
    const auto a = synth_dataset(2, 100, 7), b = synth_dataset(2, 100, 7);
    CHECK(a.images == b.images);
    CHECK(a.labels == b.labels);
    CHECK(std::count(a.labels.begin(), a.labels.end(), 0) == 100);
    CHECK(std::count(a.labels.begin(), a.labels.end(), 1) == 100);
    for (auto v : a.images) {
      REQUIRE(std::isfinite(v));
      REQUIRE(v >= 0.0f);
      REQUIRE(v <= 1.0f);
    }
    CHECK(synth_dataset(2, 100, 8).images != a.images);
  }

  TEST_CASE("synthetic classes pass a nearest-centroid probe") {
    const int k = 4;
    const auto train = synth_dataset(k, 200, 9);
    // Same templates, fresh samples: draw a larger set and hold out its tail.
    const auto all = synth_dataset(k, 300, 9);
    std::vector<std::vector<double>> centroid(k, std::vector<double>(kImageSize, 0.0));
    for (std::size_t i = 0; i < train.size(); ++i) {
      const auto img = train.image(i);
      for (std::size_t p = 0; p < kImageSize; ++p) centroid[train.labels[i]][p] += img[p] / 200.0;
    }
    std::size_t correct = 0, total = 0;
    for (std::size_t i = train.size(); i < all.size(); ++i, ++total) {
      const auto img = all.image(i);
      int best = 0;
      double best_d = 1e300;
      for (int c = 0; c < k; ++c) {
        double d = 0;
        for (std::size_t p = 0; p < kImageSize; ++p) d += (img[p] - centroid[c][p]) * (img[p] - centroid[c][p]);
        if (d < best_d) best_d = d, best = c;
      }
      correct += best == all.labels[i];
    }
    CHECK(static_cast<double>(correct) / static_cast<double>(total) > 0.9);
  }

  TEST_CASE("semi-supervised split") {
    const auto d = synth_dataset(4, 50, 10);
    const auto s = split_semi(d, 42, 11);
    CHECK(s.labeled.size() == 42);
    CHECK(s.unlabeled.size() == 158);
    std::vector<int> seen(d.size(), 0);
    for (auto i : s.labeled) ++seen[i];
    for (auto i : s.unlabeled) ++seen[i];
    CHECK(std::all_of(seen.begin(), seen.end(), [](int v) { return v == 1; }));
    std::vector<std::size_t> per(4, 0);
    for (auto i : s.labeled) ++per[static_cast<std::size_t>(d.labels[i])];
    const auto [lo, hi] = std::minmax_element(per.begin(), per.end());
    CHECK(*hi - *lo <= 1);
    CHECK(split_semi(d, 42, 11).labeled == s.labeled);
    CHECK(split_semi(d, 0, 11).labeled.empty());
    CHECK(split_semi(d, 200, 11).unlabeled.empty());
    CHECK_THROWS_AS(split_semi(d, 201, 11), std::invalid_argument);
  }

  TEST_CASE("translate and flip") {
    std::vector<float> img(kImageSize, 0.0f);
    img[5 * 32 + 10] = 1.0f;
    const auto t = translate_image(img, 1, 0);
    CHECK(t[5 * 32 + 11] == 1.0f);
    CHECK(std::accumulate(t.begin(), t.end(), 0.0f) == 1.0f);
    const auto down = translate_image(img, 0, 2);
    CHECK(down[7 * 32 + 10] == 1.0f);
    const auto f = flip_image(img);
    CHECK(f[5 * 32 + 21] == 1.0f);
    CHECK(flip_image(f) == img);
    CHECK(translate_image(img, 40, 0) == std::vector<float>(kImageSize, 0.0f));
  }

  TEST_CASE("augment noise moment") {
    PerturbConfig cfg{0, false, 0.15, 0.0};
    Rng rng(12);
    double total = 0;
    std::size_t n = 0;
    std::vector<float> img(kImageSize, 0.5f);
    while (n < 100000) {
      const auto out = augment(img, cfg, rng);
      for (std::size_t p = 0; p < kImageSize; ++p) total += std::abs(out[p] - img[p]);
      n += kImageSize;
    }
    const double expect = 0.15 * std::sqrt(2.0 / std::numbers::pi);
    CHECK(std::abs(total / static_cast<double>(n) - expect) < 0.05 * expect);
    Rng quiet(13);
    CHECK(augment(img, PerturbConfig::none(), quiet) == img);
    CHECK(quiet.next() == Rng(13).next());
  }

  TEST_CASE("normalization statistics") {
    const auto d = synth_dataset(3, 40, 14);
    const auto [norm, stats] = normalize(d);
    CHECK(norm.normalized);
    for (std::size_t c = 0; c < kImageChannels; ++c) {
      double s = 0, ss = 0;
      const double n = static_cast<double>(norm.size() * kImagePixels);
      for (std::size_t i = 0; i < norm.size(); ++i)
        for (std::size_t p = 0; p < kImagePixels; ++p) {
          const double v = norm.image(i)[c * kImagePixels + p];
          s += v;
          ss += v * v;
        }
      CHECK(std::abs(s / n) < 1e-5);
      CHECK(std::sqrt(ss / n) == doctest::Approx(1.0).epsilon(1e-4));
      CHECK(stats.stddev[c] > 0.0);
    }
    const auto again = apply_normalization(d, stats);
    CHECK(again.images == norm.images);
  }

  TEST_CASE("rng streams") {
    Rng a(5), b(5);
    CHECK(a.next() == b.next());
    CHECK(derive_seed(1, {2, 3}) != derive_seed(1, {3, 2}));
    CHECK(derive_seed(1, {2}) == derive_seed(1, {2}));
    Rng r(6);
    auto perm = r.permutation(50);
    std::sort(perm.begin(), perm.end());
    for (std::size_t i = 0; i < 50; ++i) CHECK(perm[i] == i);
    for (int i = 0; i < 1000; ++i) {
      const auto v = r.integer(-3, 3);
      REQUIRE(v >= -3);
      REQUIRE(v <= 3);
      const auto u = r.uniform();
      REQUIRE(u >= 0.0);
      REQUIRE(u < 1.0);
    }
  }
}
