#include "osreg/trainer.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <thread>

namespace osreg {

void TrainConfig::validate(const ModelConfig& model) const {
  if (epochs < 1) throw std::invalid_argument("train: epochs must be >= 1");
  if (batch_size < 2) throw std::invalid_argument("train: batch_size must be >= 2");
  if (!(base_learning_rate > 0)) throw std::invalid_argument("train: base_learning_rate must be > 0");
  if (ramp_up_epochs < 0 || ramp_down_epochs < 0) throw std::invalid_argument("train: ramp lengths must be >= 0");
  adam.validate();
  loss.validate();
  perturb.validate();
  const auto& taps = os_taps.empty() ? model.tap_points : os_taps;
  for (const auto& t : taps) {
    model.channels_of(t);
    if (t != "gap" && std::find(model.tap_points.begin(), model.tap_points.end(), t) == model.tap_points.end())
      throw std::invalid_argument("train: OS tap '" + t + "' is not a model tap point");
    if (loss.lambda2 > 0 && model.channels_of(t) % loss.os_blocks != 0)
      throw std::invalid_argument("train: OS tap '" + t + "' width " + std::to_string(model.channels_of(t)) +
                                  " is not divisible by k=" + std::to_string(loss.os_blocks));
  }
  if (loss.lambda2 > 0 && taps.empty()) throw std::invalid_argument("train: OS weight set but no taps configured");
  if (aux_tap != "gap" &&
      std::find(model.tap_points.begin(), model.tap_points.end(), aux_tap) == model.tap_points.end())
    throw std::invalid_argument("train: aux tap '" + aux_tap + "' is not a model tap point");
}

double TrainConfig::weight_ramp(int epoch) const {
  return ramp_up_epochs == 0 ? 1.0 : ramp_up(epoch, ramp_up_epochs);
}

double TrainConfig::lr_factor(int epoch) const {
  const double down = ramp_down_epochs == 0 ? 1.0 : ramp_down(epoch, epochs, ramp_down_epochs);
  return weight_ramp(epoch) * down;
}

std::uint64_t stream_seed(std::uint64_t seed, int epoch, std::size_t step, StreamRole role) {
  return derive_seed(seed, {static_cast<std::uint64_t>(epoch), static_cast<std::uint64_t>(step),
                            static_cast<std::uint64_t>(role)});
}

std::vector<std::uint8_t> labeled_flags(const SemiSplit& split, std::size_t n) {
  std::vector<std::uint8_t> flags(n, 0);
  for (auto i : split.labeled) {
    if (i >= n) throw std::invalid_argument("split: labeled index out of range");
    flags[i] = 1;
  }
  return flags;
}

namespace {

std::size_t split_size(const SemiSplit& split) { return split.labeled.size() + split.unlabeled.size(); }

}  // namespace

IndexBatch compose_batch(const SemiSplit& split, std::size_t batch_size, Rng& rng) {
  const auto n = split_size(split);
  if (batch_size > n) throw std::invalid_argument("compose_batch: batch larger than the training set");
  const auto flags = labeled_flags(split, n);
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  IndexBatch b;
  for (std::size_t i = 0; i < batch_size; ++i) {
    const auto j = i + rng.below(n - i);
    std::swap(pool[i], pool[j]);
    b.indices.push_back(pool[i]);
    b.labeled_mask.push_back(flags[pool[i]]);
  }
  return b;
}

std::vector<IndexBatch> epoch_batches(const SemiSplit& split, std::size_t batch_size, Rng& rng) {
  const auto n = split_size(split);
  if (batch_size > n) throw std::invalid_argument("epoch_batches: batch larger than the training set");
  const auto flags = labeled_flags(split, n);
  const auto perm = rng.permutation(n);
  std::vector<IndexBatch> out(n / batch_size);
  for (std::size_t b = 0; b < out.size(); ++b)
    for (std::size_t i = 0; i < batch_size; ++i) {
      const auto idx = perm[b * batch_size + i];
      out[b].indices.push_back(idx);
      out[b].labeled_mask.push_back(flags[idx]);
    }
  return out;
}

template <typename T>
EvalResult evaluate(Model<T>& model, const Dataset& data, std::size_t threads, std::size_t chunk) {
  if (data.empty()) throw std::invalid_argument("evaluate: empty dataset");
  if (chunk == 0) chunk = 100;
  const auto n = data.size();
  const auto k = static_cast<std::size_t>(model.config().classes);
  EvalResult res;
  res.probs = Tensor<double>(Shape{n, k});
  res.predictions.assign(n, 0);
  const std::size_t chunks = (n + chunk - 1) / chunk;

  auto run = [&](std::size_t c) {
    const std::size_t lo = c * chunk, hi = std::min(n, lo + chunk);
    std::vector<std::size_t> idx(hi - lo);
    for (std::size_t i = lo; i < hi; ++i) idx[i - lo] = i;
    Graph<T> g;
    auto out = forward(model, g, make_batch<T>(data, idx), ForwardOptions{});
    const auto& p = out.probs.value();
    for (std::size_t i = lo; i < hi; ++i) {
      std::span<const T> row(p.data() + (i - lo) * k, k);
      for (std::size_t j = 0; j < k; ++j) res.probs[i * k + j] = row[j];
      res.predictions[i] = static_cast<int>(argmax_row(row));
    }
  };
  const std::size_t workers = std::clamp<std::size_t>(threads, 1, chunks);
  if (workers == 1) {
    for (std::size_t c = 0; c < chunks; ++c) run(c);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t c = w; c < chunks; c += workers) run(c);
      });
  }
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) correct += res.predictions[i] == data.labels[i];
  res.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  return res;
}

template <typename T>
EpochRecord train_epoch(Model<T>& model, const Dataset& train, const SemiSplit& split, const TrainConfig& cfg,
                        int epoch, AdamState<T>& adam, const Dataset* eval_data, const StepCallback& on_step,
                        std::size_t eval_threads) {
  cfg.validate(model.config());
  if (epoch < 0 || epoch >= cfg.epochs) throw std::invalid_argument("train_epoch: epoch out of range");
  if (split_size(split) != train.size()) throw std::invalid_argument("train_epoch: split does not cover the dataset");

  Rng shuffle(stream_seed(cfg.seed, epoch, 0, StreamRole::Shuffle));
  const auto batches = epoch_batches(split, cfg.batch_size, shuffle);

  EpochRecord rec;
  rec.epoch = epoch;
  rec.w_t = cfg.weight_ramp(epoch);
  rec.lr_factor = cfg.lr_factor(epoch);
  const double lr = cfg.base_learning_rate * rec.lr_factor;
  const auto& w = cfg.loss;
  const bool need_teacher = w.lambda > 0 || w.aux != AuxKind::None;
  const auto& os_taps = cfg.os_taps.empty() ? model.config().tap_points : cfg.os_taps;

  for (std::size_t s = 0; s < batches.size(); ++s) {
    const auto& b = batches[s];
    const auto batch = make_batch<T>(train, b.indices);
    std::vector<int> labels(b.indices.size());
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = train.labels[b.indices[i]];

    Graph<T> g;
    Rng srng(stream_seed(cfg.seed, epoch, s, StreamRole::Student));
    auto st = forward(model, g, batch, ForwardOptions{PassKind::Student, cfg.perturb, &srng, std::nullopt});

    Tensor<T> teacher_probs;
    if (need_teacher) {
      Graph<T> tg;
      Rng trng(stream_seed(cfg.seed, epoch, s, StreamRole::Teacher));
      auto te = forward(model, tg, batch, ForwardOptions{PassKind::Teacher, cfg.perturb, &trng, false});
      teacher_probs = te.probs.value();
    }

    LossInputs<T> in;
    in.student_probs = st.probs;
    in.teacher_probs = need_teacher ? &teacher_probs : nullptr;
    in.labels = labels;
    in.labeled_mask = b.labeled_mask;
    PairSimilarity sim;
    if (w.aux != AuxKind::None) {
      auto lat = st.taps.at(cfg.aux_tap);
      in.aux_latent = w.aux == AuxKind::Amc ? sphere_project(lat, T{1}) : lat;
      Rng prng(stream_seed(cfg.seed, epoch, s, StreamRole::Pairs));
      sim = build_similarity(teacher_probs, make_pairs(b.indices.size(), prng));
      in.similarity = &sim;
    }
    if (w.lambda2 > 0)
      for (const auto& t : os_taps) in.os_latents.push_back(st.taps.at(t));

    auto tl = total_loss(in, w, rec.w_t);
    if (!std::isfinite(tl.terms.total))
      throw DivergenceError(epoch, s,
                            fmt::format("non-finite loss at epoch {} batch {} (ce={} consistency={} aux={} os={})",
                                        epoch, s, tl.terms.ce, tl.terms.consistency, tl.terms.aux, tl.terms.os));
    g.backward(tl.total);
    std::vector<const Tensor<T>*> grads;
    for (const auto& leaf : st.param_leaves) grads.push_back(&leaf.grad());
    const bool applied = adam_step(model.params(), std::span<const Tensor<T>* const>(grads), adam, lr, cfg.adam);

    rec.ce += tl.terms.ce;
    rec.consistency += tl.terms.consistency;
    rec.aux += tl.terms.aux;
    rec.os += tl.terms.os;
    rec.clamped_probabilities += tl.terms.clamped_probabilities;
    rec.skipped_steps += applied ? 0 : 1;
    for (auto f : b.labeled_mask) (f ? rec.labeled : rec.unlabeled) += 1;
    if (on_step) on_step(StepRecord{epoch, s, tl.terms, lr, !applied});
  }
  rec.steps = batches.size();
  if (rec.steps > 0) {
    const double n = static_cast<double>(rec.steps);
    rec.ce /= n;
    rec.consistency /= n;
    rec.aux /= n;
    rec.os /= n;
  }
  rec.eval_acc = evaluate(model, eval_data ? *eval_data : train, eval_threads).accuracy;
  return rec;
}

std::string train_log_row(const EpochRecord& r) {
  return fmt::format("{},{},{},{},{},{},{},{}", r.epoch, r.ce, r.consistency, r.aux, r.os, r.w_t, r.lr_factor,
                     r.eval_acc);
}

void write_train_log(const std::filesystem::path& path, std::span<const EpochRecord> records) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << kTrainLogHeader << '\n';
  for (const auto& r : records) f << train_log_row(r) << '\n';
  if (!f) throw std::runtime_error("failed writing " + path.string());
}

template EvalResult evaluate<float>(Model<float>&, const Dataset&, std::size_t, std::size_t);
template EvalResult evaluate<double>(Model<double>&, const Dataset&, std::size_t, std::size_t);
template EpochRecord train_epoch<float>(Model<float>&, const Dataset&, const SemiSplit&, const TrainConfig&, int,
                                        AdamState<float>&, const Dataset*, const StepCallback&, std::size_t);
template EpochRecord train_epoch<double>(Model<double>&, const Dataset&, const SemiSplit&, const TrainConfig&, int,
                                         AdamState<double>&, const Dataset*, const StepCallback&, std::size_t);

}  // namespace osreg
