#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "osreg/network.hpp"
#include "osreg/tensor.hpp"

namespace osreg {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const;
};

/// First and second moments per parameter, in Model::params() order.
template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m;
  std::vector<Tensor<T>> v;
  std::uint64_t step = 0;

  static AdamState zeros_like(const std::vector<NamedTensor<T>>& params);
};

/// Bias-corrected Adam:
///   m <- b1 m + (1-b1) g,  v <- b2 v + (1-b2) g^2
///   theta <- theta - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
/// Returns false and touches nothing when any gradient entry is non-finite.
template <typename T>
bool adam_step(std::vector<NamedTensor<T>>& params, std::span<const Tensor<T>* const> grads,
               AdamState<T>& state, double lr, const AdamConfig& cfg);

}  // namespace osreg
