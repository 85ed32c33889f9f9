#include "osreg/optim.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace osreg {

void AdamConfig::validate() const {
  if (!(beta1 > 0 && beta1 < 1)) throw std::invalid_argument("adam: beta1 must be in (0,1)");
  if (!(beta2 > 0 && beta2 < 1)) throw std::invalid_argument("adam: beta2 must be in (0,1)");
  if (!(eps > 0)) throw std::invalid_argument("adam: eps must be > 0");
}

template <typename T>
AdamState<T> AdamState<T>::zeros_like(const std::vector<NamedTensor<T>>& params) {
  AdamState s;
  for (const auto& p : params) {
    s.m.emplace_back(p.value.shape(), T{0});
    s.v.emplace_back(p.value.shape(), T{0});
  }
  return s;
}

template <typename T>
bool adam_step(std::vector<NamedTensor<T>>& params, std::span<const Tensor<T>* const> grads,
               AdamState<T>& state, double lr, const AdamConfig& cfg) {
  if (grads.size() != params.size() || state.m.size() != params.size() || state.v.size() != params.size())
    throw std::invalid_argument("adam_step: parameter, gradient and moment counts differ");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!grads[i] || grads[i]->shape() != params[i].value.shape() ||
        state.m[i].shape() != params[i].value.shape() || state.v[i].shape() != params[i].value.shape())
      throw std::invalid_argument("adam_step: shape mismatch for '" + params[i].name + "'");
  }
  for (const auto* g : grads)
    if (!g->all_finite()) return false;

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].value.values();
    auto g = grads[i]->values();
    auto m = state.m[i].values();
    auto v = state.v[i].values();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gj = g[j];
      const double mj = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      const double vj = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      theta[j] = static_cast<T>(theta[j] - lr * (mj / c1) / (std::sqrt(vj / c2) + cfg.eps));
    }
  }
  return true;
}

template struct AdamState<float>;
template struct AdamState<double>;
template bool adam_step<float>(std::vector<NamedTensor<float>>&, std::span<const Tensor<float>* const>,
                               AdamState<float>&, double, const AdamConfig&);
template bool adam_step<double>(std::vector<NamedTensor<double>>&, std::span<const Tensor<double>* const>,
                                AdamState<double>&, double, const AdamConfig&);

}  // namespace osreg
