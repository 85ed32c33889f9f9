#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "osreg/graph.hpp"
#include "osreg/rng.hpp"
#include "osreg/tensor.hpp"

namespace osreg {

enum class Mode { Train, Eval };

/// Per-channel running statistics owned by the model.
template <typename T>
struct BatchNormState {
  Tensor<T> running_mean;
  Tensor<T> running_var;
  T momentum = T(0.9);

  explicit BatchNormState(std::size_t channels = 1)
      : running_mean(Shape{channels}, T{0}), running_var(Shape{channels}, T{1}) {}
};

/// input [N,C,H,W], kernel [M,C,f,f] -> [N,M,H',W'], zero padding, no bias.
template <typename T>
Var<T> conv2d(Var<T> input, Var<T> kernel, int stride, int pad);

/// Window maximum; the adjoint goes to the first maximal element in
/// row-major window order.
template <typename T>
Var<T> max_pool2d(Var<T> input, int window, int stride);

/// [N,M,h,w] -> [N,M], mean over the h*w positions.
template <typename T>
Var<T> global_avg_pool(Var<T> input);

/// [N,A] x [A,B] + [B] -> [N,B].
template <typename T>
Var<T> dense(Var<T> input, Var<T> weight, Var<T> bias);

/// x if x > 0 else alpha*x. Derivative at 0 is alpha.
template <typename T>
Var<T> leaky_relu(Var<T> input, T alpha);

/// Normalizes [N,C,...] per channel. Train mode uses biased batch statistics
/// and, when update_running is set, folds the unbiased batch variance and the
/// batch mean into `state` with its momentum. Eval mode uses `state`.
template <typename T>
Var<T> batch_norm(Var<T> input, Var<T> gamma, Var<T> beta, BatchNormState<T>& state, Mode mode,
                  T eps, bool update_running = true);

/// Inverted dropout. Eval mode, or rate 0, returns `input` itself.
template <typename T>
Var<T> dropout(Var<T> input, double rate, Rng& rng, Mode mode);

/// Row-wise softmax of [N,K] logits, max-subtracted.
template <typename T>
Var<T> softmax(Var<T> logits);

/// Multiplies channel c of [N,C,...] by mask[c].
template <typename T>
Var<T> channel_mask(Var<T> input, std::span<const T> mask);

template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, T factor);
template <typename T>
Var<T> sum(Var<T> a);
template <typename T>
Var<T> mean(Var<T> a);

/// Column `col` of a [N,K] matrix as a [N] vector.
template <typename T>
Var<T> pick_column(Var<T> matrix, std::size_t col);

/// Constant copy of the value: no adjoint flows back through it.
template <typename T>
Var<T> stop_gradient(Var<T> a) {
  return a.graph().constant(a.value());
}

}  // namespace osreg
