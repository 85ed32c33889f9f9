#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "osreg/data.hpp"
#include "osreg/graph.hpp"
#include "osreg/ops.hpp"
#include "osreg/rng.hpp"
#include "osreg/tensor.hpp"

namespace osreg {

struct ConvSpec {
  std::size_t out_channels = 0;
  int kernel = 3;
  int pad = 1;

  friend bool operator==(const ConvSpec&, const ConvSpec&) = default;
};

/// Backbone layout. Convolutions are numbered conv1, conv2, ... across all
/// blocks. Every block but the last ends in 2x2 max pooling and dropout; the
/// last block ends in global average pooling, whose output is the latent
/// vector of length M fed to the dense head.
///
/// Tap names:
///   "gap"     the pooled latent vector [N,M]
///   "convN"   the spatial mean of convN's raw output (before batch norm)
struct ModelConfig {
  std::vector<std::vector<ConvSpec>> blocks;
  std::size_t latent_dim = 0;
  int classes = 10;
  double leaky_alpha = 0.1;
  double bn_eps = 1e-5;
  std::vector<std::string> tap_points;

  std::vector<std::size_t> conv_block_widths() const;
  std::vector<std::string> conv_names() const;
  /// Names of the convolutions in the last block.
  std::vector<std::string> final_block_convs() const;
  std::size_t channels_of(const std::string& layer) const;
  void validate() const;

  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);

  /// Widths (16,32,64), M=64, final maps 6x6.
  static ModelConfig desk(int classes);
  /// Nine convolutions, 128/256/(512,256,128), final maps 6x6x128.
  static ModelConfig full(int classes);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> value;
};

template <typename T>
class Model {
 public:
  /// He fan-in normal initialization of convolution and dense weights; batch
  /// norm gamma 1, beta 0; dense bias 0.
  Model(ModelConfig config, std::uint64_t seed);

  const ModelConfig& config() const noexcept { return config_; }

  std::vector<NamedTensor<T>>& params() noexcept { return params_; }
  const std::vector<NamedTensor<T>>& params() const noexcept { return params_; }
  Tensor<T>& param(const std::string& name);
  const Tensor<T>& param(const std::string& name) const;
  std::size_t parameter_count() const;

  BatchNormState<T>& bn_state(const std::string& conv);
  const BatchNormState<T>& bn_state(const std::string& conv) const;
  /// Running statistics flattened as "<conv>.bn.running_mean"/"running_var".
  std::vector<NamedTensor<T>> buffers() const;
  void set_buffer(const std::string& name, const Tensor<T>& value);

  /// Zeroes the post-activation feature maps of `layer` where keep[c] == 0.
  void set_channel_mask(const std::string& layer, std::vector<std::uint8_t> keep);
  void clear_channel_masks() { masks_.clear(); }
  const std::vector<std::uint8_t>* channel_mask(const std::string& layer) const;

  NormStats norm_stats;

 private:
  ModelConfig config_;
  std::vector<NamedTensor<T>> params_;
  std::map<std::string, std::size_t> index_;
  std::map<std::string, BatchNormState<T>> bn_;
  std::map<std::string, std::vector<std::uint8_t>> masks_;
};

enum class PassKind { Student, Teacher, Eval };

struct ForwardOptions {
  PassKind kind = PassKind::Eval;
  /// Augmentation, noise and dropout for Student/Teacher passes. Must be
  /// empty for Eval.
  std::optional<PerturbConfig> perturb;
  Rng* rng = nullptr;
  /// Bind parameters as gradient-requiring leaves. Defaults to true for the
  /// student pass only.
  std::optional<bool> params_require_grad;
};

template <typename T>
struct ForwardOutput {
  Var<T> logits;
  Var<T> probs;
  std::map<std::string, Var<T>> taps;
  /// Post-activation (and post-mask) maps [N,m,h,w] of every convolution.
  std::map<std::string, Var<T>> feature_maps;
  /// Parameter leaves in the order of Model::params().
  std::vector<Var<T>> param_leaves;
  /// Set for teacher passes: probs is a fixed target.
  bool stop_gradient = false;
};

/// Stacks images of `data` at `indices` into an [N,3,32,32] batch.
template <typename T>
Tensor<T> make_batch(const Dataset& data, std::span<const std::size_t> indices);

/// Student and teacher passes augment each image and apply dropout with
/// independent draws from `rng`, and normalize with batch statistics. Only
/// the student pass folds batch statistics into the running averages. Eval
/// uses running statistics and no perturbation.
template <typename T>
ForwardOutput<T> forward(Model<T>& model, Graph<T>& graph, const Tensor<T>& batch, const ForwardOptions& opts);

extern template class Model<float>;
extern template class Model<double>;

}  // namespace osreg
