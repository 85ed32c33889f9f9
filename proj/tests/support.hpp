#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "osreg/data.hpp"
#include "osreg/graph.hpp"
#include "osreg/network.hpp"
#include "osreg/ops.hpp"
#include "osreg/rng.hpp"
#include "osreg/tensor.hpp"

namespace osreg::test {

inline Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor<double> t(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

/// Values bounded away from zero, for kinked primitives.
inline Tensor<double> away_from_zero(Shape shape, std::uint64_t seed, double gap = 0.05) {
  auto t = random_tensor(std::move(shape), seed);
  for (auto& v : t.values()) v = v < 0 ? v - gap : v + gap;
  return t;
}

/// Random linear functional of a node, so every output element matters.
inline Var<double> project(Var<double> v, std::uint64_t seed) {
  auto& g = v.graph();
  return sum(mul(v, g.constant(random_tensor(v.shape(), seed))));
}

/// Small fixture: 2 convolutions then global pooling, M=8, K=3.
inline ModelConfig tiny_config(int classes = 3) {
  ModelConfig c;
  c.blocks = {{{4, 3, 1}}, {{8, 3, 0}}};
  c.latent_dim = 8;
  c.classes = classes;
  c.tap_points = {"conv2", "gap"};
  return c;
}

}  // namespace osreg::test
