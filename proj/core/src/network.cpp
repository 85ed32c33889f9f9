#include "osreg/network.hpp"

#include <algorithm>
#include <cmath>
#include "json.hpp"
#include <set>
#include <stdexcept>

namespace osreg {

using nlohmann::json;

std::vector<std::size_t> ModelConfig::conv_block_widths() const {
  std::vector<std::size_t> w;
  for (const auto& b : blocks) w.push_back(b.empty() ? 0 : b.back().out_channels);
  return w;
}

std::vector<std::string> ModelConfig::conv_names() const {
  std::vector<std::string> names;
  for (const auto& b : blocks)
    for (std::size_t i = 0; i < b.size(); ++i) names.push_back("conv" + std::to_string(names.size() + 1));
  return names;
}

std::vector<std::string> ModelConfig::final_block_convs() const {
  const auto names = conv_names();
  if (blocks.empty()) return {};
  return {names.end() - static_cast<std::ptrdiff_t>(blocks.back().size()), names.end()};
}

std::size_t ModelConfig::channels_of(const std::string& layer) const {
  if (layer == "gap") return latent_dim;
  std::size_t idx = 0;
  for (const auto& b : blocks)
    for (const auto& c : b)
      if (layer == "conv" + std::to_string(++idx)) return c.out_channels;
  throw std::invalid_argument("unknown layer '" + layer + "'");
}

void ModelConfig::validate() const {
  if (blocks.empty()) throw std::invalid_argument("model: at least one block required");
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    if (blocks[b].empty()) throw std::invalid_argument("model: block " + std::to_string(b + 1) + " is empty");
    for (const auto& c : blocks[b])
      if (c.out_channels == 0 || c.kernel < 1 || c.pad < 0)
        throw std::invalid_argument("model: invalid convolution in block " + std::to_string(b + 1));
  }
  if (classes < 2) throw std::invalid_argument("model: classes must be >= 2");
  if (latent_dim != blocks.back().back().out_channels)
    throw std::invalid_argument("model: latent_dim " + std::to_string(latent_dim) +
                                " must equal the final block width " +
                                std::to_string(blocks.back().back().out_channels));
  if (leaky_alpha < 0 || leaky_alpha >= 1) throw std::invalid_argument("model: leaky_alpha must be in [0,1)");
  if (bn_eps < 0) throw std::invalid_argument("model: bn_eps must be >= 0");
  const auto names = conv_names();
  for (const auto& t : tap_points)
    if (t != "gap" && std::find(names.begin(), names.end(), t) == names.end())
      throw std::invalid_argument("model: tap point '" + t + "' names no layer");
}

std::string ModelConfig::to_json() const {
  json j;
  j["blocks"] = json::array();
  for (const auto& b : blocks) {
    json jb = json::array();
    for (const auto& c : b) jb.push_back({{"out", c.out_channels}, {"kernel", c.kernel}, {"pad", c.pad}});
    j["blocks"].push_back(jb);
  }
  j["latent_dim"] = latent_dim;
  j["classes"] = classes;
  j["leaky_alpha"] = leaky_alpha;
  j["bn_eps"] = bn_eps;
  j["taps"] = tap_points;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  const auto j = json::parse(text);
  ModelConfig c;
  for (const auto& jb : j.at("blocks")) {
    std::vector<ConvSpec> b;
    for (const auto& jc : jb)
      b.push_back({jc.at("out").get<std::size_t>(), jc.at("kernel").get<int>(), jc.at("pad").get<int>()});
    c.blocks.push_back(std::move(b));
  }
  c.latent_dim = j.at("latent_dim").get<std::size_t>();
  c.classes = j.at("classes").get<int>();
  c.leaky_alpha = j.at("leaky_alpha").get<double>();
  c.bn_eps = j.at("bn_eps").get<double>();
  c.tap_points = j.at("taps").get<std::vector<std::string>>();
  return c;
}

ModelConfig ModelConfig::desk(int classes) {
  ModelConfig c;
  c.blocks = {{{16, 3, 1}}, {{32, 3, 1}}, {{64, 3, 0}, {64, 1, 0}}};
  c.latent_dim = 64;
  c.classes = classes;
  c.tap_points = {"conv3", "conv4", "gap"};
  return c;
}

ModelConfig ModelConfig::full(int classes) {
  ModelConfig c;
  c.blocks = {{{128, 3, 1}, {128, 3, 1}, {128, 3, 1}},
              {{256, 3, 1}, {256, 3, 1}, {256, 3, 1}},
              {{512, 3, 0}, {256, 1, 0}, {128, 1, 0}}};
  c.latent_dim = 128;
  c.classes = classes;
  c.tap_points = {"conv7", "conv8", "conv9", "gap"};
  return c;
}

template <typename T>
Model<T>::Model(ModelConfig config, std::uint64_t seed) : config_(std::move(config)) {
  config_.validate();
  Rng rng(derive_seed(seed, {0x1417ULL}));
  auto add = [&](std::string name, Tensor<T> t) {
    index_[name] = params_.size();
    params_.push_back({std::move(name), std::move(t)});
  };
  auto he = [&](Shape shape, std::size_t fan_in) {
    Tensor<T> t(std::move(shape));
    const double sd = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.values()) v = static_cast<T>(sd * rng.normal());
    return t;
  };
  std::size_t in_ch = kImageChannels;
  const auto names = config_.conv_names();
  std::size_t idx = 0;
  for (const auto& block : config_.blocks)
    for (const auto& c : block) {
      const auto& name = names[idx++];
      const auto f = static_cast<std::size_t>(c.kernel);
      add(name + ".weight", he(Shape{c.out_channels, in_ch, f, f}, in_ch * f * f));
      add(name + ".bn.gamma", Tensor<T>(Shape{c.out_channels}, T{1}));
      add(name + ".bn.beta", Tensor<T>(Shape{c.out_channels}, T{0}));
      bn_.emplace(name, BatchNormState<T>(c.out_channels));
      in_ch = c.out_channels;
    }
  const auto k = static_cast<std::size_t>(config_.classes);
  add("fc.weight", he(Shape{config_.latent_dim, k}, config_.latent_dim));
  add("fc.bias", Tensor<T>(Shape{k}, T{0}));
}

template <typename T>
Tensor<T>& Model<T>::param(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("unknown parameter '" + name + "'");
  return params_[it->second].value;
}

template <typename T>
const Tensor<T>& Model<T>::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("unknown parameter '" + name + "'");
  return params_[it->second].value;
}

template <typename T>
std::size_t Model<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

template <typename T>
BatchNormState<T>& Model<T>::bn_state(const std::string& conv) {
  auto it = bn_.find(conv);
  if (it == bn_.end()) throw std::invalid_argument("no batch norm for '" + conv + "'");
  return it->second;
}

template <typename T>
const BatchNormState<T>& Model<T>::bn_state(const std::string& conv) const {
  auto it = bn_.find(conv);
  if (it == bn_.end()) throw std::invalid_argument("no batch norm for '" + conv + "'");
  return it->second;
}

template <typename T>
std::vector<NamedTensor<T>> Model<T>::buffers() const {
  std::vector<NamedTensor<T>> out;
  for (const auto& name : config_.conv_names()) {
    const auto& s = bn_.at(name);
    out.push_back({name + ".bn.running_mean", s.running_mean});
    out.push_back({name + ".bn.running_var", s.running_var});
  }
  return out;
}

template <typename T>
void Model<T>::set_buffer(const std::string& name, const Tensor<T>& value) {
  const auto dot = name.find(".bn.");
  if (dot == std::string::npos) throw std::invalid_argument("unknown buffer '" + name + "'");
  auto& s = bn_state(name.substr(0, dot));
  const auto field = name.substr(dot + 4);
  Tensor<T>* dst = field == "running_mean" ? &s.running_mean
                   : field == "running_var" ? &s.running_var
                                            : nullptr;
  if (!dst) throw std::invalid_argument("unknown buffer '" + name + "'");
  if (dst->shape() != value.shape()) throw std::invalid_argument("buffer '" + name + "' has wrong shape");
  *dst = value;
}

template <typename T>
void Model<T>::set_channel_mask(const std::string& layer, std::vector<std::uint8_t> keep) {
  const auto m = config_.channels_of(layer);
  if (layer == "gap") throw std::invalid_argument("channel masks apply to convolution layers");
  if (keep.size() != m)
    throw std::invalid_argument("mask for '" + layer + "' needs " + std::to_string(m) + " entries");
  masks_[layer] = std::move(keep);
}

template <typename T>
const std::vector<std::uint8_t>* Model<T>::channel_mask(const std::string& layer) const {
  auto it = masks_.find(layer);
  return it == masks_.end() ? nullptr : &it->second;
}

template <typename T>
Tensor<T> make_batch(const Dataset& data, std::span<const std::size_t> indices) {
  Tensor<T> batch(Shape{indices.size(), kImageChannels, kImageSide, kImageSide});
  for (std::size_t i = 0; i < indices.size(); ++i) {
    auto img = data.image(indices[i]);
    std::copy(img.begin(), img.end(), batch.data() + i * kImageSize);
  }
  return batch;
}

template <typename T>
ForwardOutput<T> forward(Model<T>& model, Graph<T>& graph, const Tensor<T>& batch, const ForwardOptions& opts) {
  const auto& cfg = model.config();
  const bool perturbed = opts.kind != PassKind::Eval;
  if (!perturbed && opts.perturb)
    throw std::invalid_argument("forward: eval mode does not accept perturbation");
  if (perturbed && !opts.rng) throw std::invalid_argument("forward: student/teacher passes need an Rng");
  if (batch.rank() != 4 || batch.dim(1) != kImageChannels)
    throw std::invalid_argument("forward: batch must be [N,3,H,W], got " + shape_str(batch.shape()));
  if (opts.perturb) opts.perturb->validate();
  const Mode mode = perturbed ? Mode::Train : Mode::Eval;
  const bool want_grad = opts.params_require_grad.value_or(opts.kind == PassKind::Student);
  const std::set<std::string> taps(cfg.tap_points.begin(), cfg.tap_points.end());

  ForwardOutput<T> out;
  out.stop_gradient = opts.kind == PassKind::Teacher;
  for (const auto& p : model.params()) out.param_leaves.push_back(graph.leaf(p.value, want_grad));
  auto leaf = [&](const std::string& name) {
    const auto& ps = model.params();
    for (std::size_t i = 0; i < ps.size(); ++i)
      if (ps[i].name == name) return out.param_leaves[i];
    throw std::invalid_argument("unknown parameter '" + name + "'");
  };

  Var<T> x;
  if (perturbed && opts.perturb) {
    Tensor<T> aug(batch.shape());
    const std::size_t per = batch.size() / batch.dim(0);
    std::vector<float> img(per);
    for (std::size_t i = 0; i < batch.dim(0); ++i) {
      std::copy(batch.data() + i * per, batch.data() + (i + 1) * per, img.begin());
      const auto a = augment(img, *opts.perturb, *opts.rng);
      std::copy(a.begin(), a.end(), aug.data() + i * per);
    }
    x = graph.constant(std::move(aug));
  } else {
    x = graph.constant(batch);
  }
  const double drop = perturbed && opts.perturb ? opts.perturb->dropout_rate : 0.0;

  const auto names = cfg.conv_names();
  std::size_t idx = 0;
  for (std::size_t b = 0; b < cfg.blocks.size(); ++b) {
    for (const auto& spec : cfg.blocks[b]) {
      const auto& name = names[idx++];
      auto y = conv2d(x, leaf(name + ".weight"), 1, spec.pad);
      if (taps.count(name)) out.taps[name] = global_avg_pool(y);
      y = batch_norm(y, leaf(name + ".bn.gamma"), leaf(name + ".bn.beta"), model.bn_state(name), mode,
                     static_cast<T>(cfg.bn_eps), opts.kind == PassKind::Student);
      y = leaky_relu(y, static_cast<T>(cfg.leaky_alpha));
      if (const auto* keep = model.channel_mask(name)) {
        std::vector<T> m(keep->begin(), keep->end());
        y = channel_mask(y, std::span<const T>(m));
      }
      out.feature_maps[name] = y;
      x = y;
    }
    if (b + 1 < cfg.blocks.size()) {
      x = max_pool2d(x, 2, 2);
      if (drop > 0.0) x = dropout(x, drop, *opts.rng, mode);
    }
  }
  auto gap = global_avg_pool(x);
  out.taps["gap"] = gap;
  out.logits = dense(gap, leaf("fc.weight"), leaf("fc.bias"));
  out.probs = softmax(out.logits);
  return out;
}

template class Model<float>;
template class Model<double>;
template Tensor<float> make_batch<float>(const Dataset&, std::span<const std::size_t>);
template Tensor<double> make_batch<double>(const Dataset&, std::span<const std::size_t>);
template ForwardOutput<float> forward(Model<float>&, Graph<float>&, const Tensor<float>&, const ForwardOptions&);
template ForwardOutput<double> forward(Model<double>&, Graph<double>&, const Tensor<double>&,
                                       const ForwardOptions&);

}  // namespace osreg
