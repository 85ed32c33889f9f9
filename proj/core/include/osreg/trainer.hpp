#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "osreg/data.hpp"
#include "osreg/losses.hpp"
#include "osreg/network.hpp"
#include "osreg/optim.hpp"

namespace osreg {

struct TrainConfig {
  int epochs = 300;
  std::size_t batch_size = 100;
  /// Peak learning rate; the per-epoch rate is base * lr_factor(t).
  double base_learning_rate = 0.003;
  AdamConfig adam;
  int ramp_up_epochs = 80;
  int ramp_down_epochs = 50;
  LossWeights loss;
  PerturbConfig perturb;
  /// Taps fed to the OS term; empty means the model's tap points.
  std::vector<std::string> os_taps;
  /// Tap fed to SNTG/AMC.
  std::string aux_tap = "gap";
  std::uint64_t seed = 0;

  void validate(const ModelConfig& model) const;
  /// ramp_up(t) over ramp_up_epochs, 1 when ramp_up_epochs is 0.
  double weight_ramp(int epoch) const;
  /// weight_ramp(t) * ramp_down(t) over the last ramp_down_epochs.
  double lr_factor(int epoch) const;
};

/// Random stream roles. Each step draws from
/// Rng(derive_seed(seed, {epoch, step, role})); the epoch shuffle uses step 0
/// with role Shuffle.
enum class StreamRole : std::uint64_t { Shuffle = 1, Student = 2, Teacher = 3, Pairs = 4 };

std::uint64_t stream_seed(std::uint64_t seed, int epoch, std::size_t step, StreamRole role);

struct IndexBatch {
  std::vector<std::size_t> indices;
  std::vector<std::uint8_t> labeled_mask;
};

/// Flags members of split.labeled over 0..n-1.
std::vector<std::uint8_t> labeled_flags(const SemiSplit& split, std::size_t n);

/// batch_size distinct indices drawn uniformly from labeled and unlabeled
/// together, with the labeled mask.
IndexBatch compose_batch(const SemiSplit& split, std::size_t batch_size, Rng& rng);

/// One epoch's batches: a uniform shuffle of the training set cut into
/// floor(N / batch_size) batches; the remainder is left out.
std::vector<IndexBatch> epoch_batches(const SemiSplit& split, std::size_t batch_size, Rng& rng);

struct StepRecord {
  int epoch = 0;
  std::size_t step = 0;
  LossBreakdown terms;
  double lr = 0.0;
  bool skipped = false;
};

struct EpochRecord {
  int epoch = 0;
  double ce = 0.0;
  double consistency = 0.0;
  double aux = 0.0;
  double os = 0.0;
  double w_t = 0.0;
  double lr_factor = 0.0;
  double eval_acc = 0.0;
  std::size_t labeled = 0;
  std::size_t unlabeled = 0;
  std::size_t steps = 0;
  /// Steps whose gradient held a non-finite entry; no update was applied.
  std::size_t skipped_steps = 0;
  std::size_t clamped_probabilities = 0;
};

/// Thrown when the mini-batch objective is not finite.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(int epoch, std::size_t step, const std::string& what)
      : std::runtime_error(what), epoch_(epoch), step_(step) {}
  int epoch() const noexcept { return epoch_; }
  std::size_t step() const noexcept { return step_; }

 private:
  int epoch_;
  std::size_t step_;
};

using StepCallback = std::function<void(const StepRecord&)>;

struct EvalResult {
  double accuracy = 0.0;
  /// [N,K] class probabilities in dataset order.
  Tensor<double> probs;
  std::vector<int> predictions;
};

/// Eval-mode pass over `data` in chunks, spread over up to `threads` workers.
/// Ties in the argmax go to the lowest class index.
template <typename T>
EvalResult evaluate(Model<T>& model, const Dataset& data, std::size_t threads = 1, std::size_t chunk = 100);

/// Runs one epoch of mini-batch updates. Per batch: student pass, teacher
/// pass (only when consistency or an auxiliary term is active), similarity
/// pairs, total loss, backward and an Adam step at base * lr_factor(epoch).
/// The teacher pass uses the same parameters, batch statistics and
/// independent perturbation draws, and leaves running statistics alone.
/// `eval_data` (or the training set when null) gives eval_acc.
template <typename T>
EpochRecord train_epoch(Model<T>& model, const Dataset& train, const SemiSplit& split, const TrainConfig& cfg,
                        int epoch, AdamState<T>& adam, const Dataset* eval_data = nullptr,
                        const StepCallback& on_step = {}, std::size_t eval_threads = 1);

inline constexpr const char* kTrainLogHeader = "epoch,ce,consistency,aux,os,w_t,lr_factor,eval_acc";

std::string train_log_row(const EpochRecord& r);
void write_train_log(const std::filesystem::path& path, std::span<const EpochRecord> records);

}  // namespace osreg
