#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>

#include "osreg/graph.hpp"

namespace osreg {

/// Scalar function of one tensor, expressed as graph operations.
template <typename T>
using ScalarFn = std::function<Var<T>(Graph<T>&, Var<T>)>;

template <typename T>
struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  Tensor<T> analytic;
  Tensor<T> numeric;
};

/// Compares the reverse-mode gradient of f at x with central differences.
/// Error per element is |a-n| / max(|a|, |n|, 1e-8); the maximum is returned.
template <typename T>
GradCheckResult<T> grad_check_detailed(const ScalarFn<T>& f, const Tensor<T>& x, T eps) {
  if (!(eps > T{0})) throw std::invalid_argument("grad_check: eps must be > 0");
  GradCheckResult<T> r;
  {
    Graph<T> g;
    auto xv = g.leaf(x, true);
    auto y = f(g, xv);
    g.backward(y);
    r.analytic = xv.grad();
  }
  auto eval = [&](const Tensor<T>& at) {
    Graph<T> g;
    return f(g, g.constant(at)).value().item();
  };
  r.numeric = Tensor<T>(x.shape());
  Tensor<T> probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T orig = probe[i];
    probe[i] = orig + eps;
    const T up = eval(probe);
    probe[i] = orig - eps;
    const T down = eval(probe);
    probe[i] = orig;
    r.numeric[i] = (up - down) / (T{2} * eps);
    const double a = r.analytic[i], n = r.numeric[i];
    const double err = std::abs(a - n) / std::max({std::abs(a), std::abs(n), 1e-8});
    if (err > r.max_rel_error) {
      r.max_rel_error = err;
      r.worst_index = i;
    }
  }
  return r;
}

template <typename T>
double grad_check(const ScalarFn<T>& f, const Tensor<T>& x, T eps) {
  return grad_check_detailed(f, x, eps).max_rel_error;
}

}  // namespace osreg
