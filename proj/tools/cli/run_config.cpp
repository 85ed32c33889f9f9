#include "run_config.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "json.hpp"

extern char** environ;

namespace osreg::cli {

using nlohmann::json;

namespace {

json synth_json(const SynthOptions& s) {
  return {{"amplitude", s.amplitude},         {"noise_std", s.noise_std},       {"jitter_px", s.jitter_px},
          {"shared_weight", s.shared_weight}, {"contrast_spread", s.contrast_spread}, {"distractors", s.distractors}};
}

json base_json() {
  const TrainConfig t;
  const LossWeights w;
  const PerturbConfig p;
  const DataConfig d;
  const AnalysisConfig a;
  return {
      {"preset", "desk-synth"},
      {"seed", 1},
      {"out_dir", ""},
      {"threads", 1},
      {"resume", ""},
      {"data",
       {{"source", d.source},
        {"cifar_dir", d.cifar_dir},
        {"classes", d.classes},
        {"train_per_class", d.train_per_class},
        {"test_per_class", d.test_per_class},
        {"labeled", d.labeled},
        {"synth_seed", d.synth_seed},
        {"synth", synth_json(d.synth)}}},
      {"model", {{"arch", "desk"}, {"taps", json::array()}, {"leaky_alpha", 0.1}, {"bn_eps", 1e-5}}},
      {"train",
       {{"epochs", t.epochs},
        {"batch_size", t.batch_size},
        {"learning_rate", t.base_learning_rate},
        {"beta1", t.adam.beta1},
        {"beta2", t.adam.beta2},
        {"adam_eps", t.adam.eps},
        {"ramp_up_epochs", t.ramp_up_epochs},
        {"ramp_down_epochs", t.ramp_down_epochs},
        {"os_taps", json::array()},
        {"aux_tap", t.aux_tap}}},
      {"loss",
       {{"lambda", w.lambda},
        {"lambda1", w.lambda1},
        {"lambda2", w.lambda2},
        {"aux", aux_kind_name(w.aux)},
        {"margin_euclid", w.margin_euclid},
        {"margin_angle", w.margin_angle},
        {"sphere_radius", w.sphere_radius},
        {"normalize_latent", w.normalize_latent},
        {"os_blocks", w.os_blocks}}},
      {"perturb",
       {{"translate_px", p.translate_max_px},
        {"flip", p.flip_horizontal},
        {"noise_std", p.input_noise_std},
        {"dropout", p.dropout_rate}}},
      {"analysis",
       {{"layer", a.layer},
        {"correlation_images", a.correlation_images},
        {"correlation_bins", a.correlation_bins},
        {"correlation_mode", "per-image"},
        {"calibration_bins", a.calibration_bins},
        {"prune_rates", a.prune_rates},
        {"checkpoint", a.checkpoint},
        {"predictions", a.predictions},
        {"gradcam_image", a.gradcam_image},
        {"gradcam_class", a.gradcam_class},
        {"gradcam_prune_rate", a.gradcam_prune_rate}}},
  };
}

json preset_json(const std::string& name) {
  json j = base_json();
  j["preset"] = name;
  if (name == "desk-synth") {
    j["data"].update({{"source", "synth"}, {"classes", 4}, {"train_per_class", 200}, {"test_per_class", 100},
                      {"labeled", 200}});
    j["train"].update({{"epochs", 10}, {"batch_size", 50}, {"ramp_up_epochs", 4}, {"ramp_down_epochs", 3}});
    j["loss"].update({{"lambda", 1.0}, {"aux", "amc"}, {"lambda1", 0.1}, {"lambda2", 0.01}});
  } else if (name == "desk-cifar4") {
    j["data"].update({{"source", "cifar10"}, {"cifar_dir", "data/cifar-10-batches-bin"}, {"classes", 4},
                      {"train_per_class", 1000}, {"test_per_class", 1000}, {"labeled", 0}});
    j["data"]["synth"].update({{"amplitude", 0.25}, {"noise_std", 0.25}, {"jitter_px", 4}, {"shared_weight", 0.6},
                               {"contrast_spread", 0.5}, {"distractors", 3}});
    j["train"].update({{"epochs", 30}, {"batch_size", 100}, {"ramp_up_epochs", 10}, {"ramp_down_epochs", 10}});
    j["loss"].update({{"lambda", 1.0}, {"aux", "none"}, {"lambda1", 0.0}, {"lambda2", 0.005},
                      {"normalize_latent", false}});
  } else if (name == "paper-cifar10") {
    j["data"].update({{"source", "cifar10"}, {"cifar_dir", "data/cifar-10-batches-bin"}, {"classes", 10},
                      {"train_per_class", 5000}, {"test_per_class", 1000}, {"labeled", 0}});
    j["model"]["arch"] = "full";
    j["train"].update({{"epochs", 300}, {"batch_size", 100}, {"ramp_up_epochs", 80}, {"ramp_down_epochs", 50}});
    j["loss"].update({{"lambda", 1.0}, {"aux", "amc"}, {"lambda1", 0.1}, {"lambda2", 7e-5}});
  } else {
    throw ConfigError("preset", "unknown preset '" + name + "'");
  }
  j["out_dir"] = "runs/" + name;
  return j;
}

// Rejects keys of `user` absent from `base`, recursing into objects.
void check_keys(const json& user, const json& base, const std::string& path) {
  if (!user.is_object()) return;
  if (!base.is_object()) throw ConfigError(path, "expected a value, not an object");
  for (const auto& [key, value] : user.items()) {
    const auto p = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) throw ConfigError(p, "unknown key");
    if (base.at(key).is_object()) {
      if (!value.is_object()) throw ConfigError(p, "expected an object");
      check_keys(value, base.at(key), p);
    }
  }
}

void merge(json& dst, const json& src) {
  for (const auto& [key, value] : src.items()) {
    if (value.is_object() && dst.contains(key) && dst[key].is_object()) merge(dst[key], value);
    else dst[key] = value;
  }
}

class Reader {
 public:
  explicit Reader(const json& root) : root_(root) {}

  const json& at(const std::string& path) const {
    const json* node = &root_;
    std::stringstream ss(path);
    std::string part;
    while (std::getline(ss, part, '.')) node = &node->at(part);
    return *node;
  }
  double real(const std::string& path) const {
    const auto& v = at(path);
    if (!v.is_number()) throw ConfigError(path, "expected a number");
    return v.get<double>();
  }
  std::int64_t integer(const std::string& path) const {
    const auto& v = at(path);
    if (!v.is_number_integer()) throw ConfigError(path, "expected an integer");
    return v.get<std::int64_t>();
  }
  std::size_t count(const std::string& path, std::size_t min = 0) const {
    const auto v = integer(path);
    if (v < static_cast<std::int64_t>(min)) throw ConfigError(path, "must be >= " + std::to_string(min));
    return static_cast<std::size_t>(v);
  }
  std::uint64_t u64(const std::string& path) const {
    const auto& v = at(path);
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0))
      throw ConfigError(path, "expected a non-negative integer");
    return v.get<std::uint64_t>();
  }
  bool boolean(const std::string& path) const {
    const auto& v = at(path);
    if (!v.is_boolean()) throw ConfigError(path, "expected true or false");
    return v.get<bool>();
  }
  std::string str(const std::string& path) const {
    const auto& v = at(path);
    if (!v.is_string()) throw ConfigError(path, "expected a string");
    return v.get<std::string>();
  }
  std::vector<std::string> strings(const std::string& path) const {
    const auto& v = at(path);
    if (!v.is_array()) throw ConfigError(path, "expected an array of strings");
    std::vector<std::string> out;
    for (const auto& e : v) {
      if (!e.is_string()) throw ConfigError(path, "expected an array of strings");
      out.push_back(e.get<std::string>());
    }
    return out;
  }
  std::vector<double> reals(const std::string& path) const {
    const auto& v = at(path);
    if (!v.is_array()) throw ConfigError(path, "expected an array of numbers");
    std::vector<double> out;
    for (const auto& e : v) {
      if (!e.is_number()) throw ConfigError(path, "expected an array of numbers");
      out.push_back(e.get<double>());
    }
    return out;
  }

 private:
  const json& root_;
};

template <typename F>
void checked(const std::string& key, F&& f) {
  try {
    f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(key, e.what());
  }
}

RunConfig typed(const json& j) {
  const Reader r(j);
  RunConfig c;
  c.preset = r.str("preset");
  c.seed = r.u64("seed");
  c.out_dir = r.str("out_dir");
  if (c.out_dir.empty()) throw ConfigError("out_dir", "must not be empty");
  c.threads = r.count("threads", 1);
  c.resume = r.str("resume");

  auto& d = c.data;
  d.source = r.str("data.source");
  if (d.source != "synth" && d.source != "cifar10") throw ConfigError("data.source", "must be synth or cifar10");
  d.cifar_dir = r.str("data.cifar_dir");
  d.classes = static_cast<int>(r.count("data.classes", 2));
  if (d.classes > 10) throw ConfigError("data.classes", "must be <= 10");
  d.train_per_class = r.count("data.train_per_class", 1);
  d.test_per_class = r.count("data.test_per_class", 1);
  d.labeled = r.count("data.labeled");
  if (d.labeled > d.train_per_class * static_cast<std::size_t>(d.classes))
    throw ConfigError("data.labeled", "exceeds the training set size");
  d.synth_seed = r.u64("data.synth_seed");
  d.synth.amplitude = r.real("data.synth.amplitude");
  d.synth.noise_std = r.real("data.synth.noise_std");
  d.synth.jitter_px = static_cast<int>(r.count("data.synth.jitter_px"));
  d.synth.shared_weight = r.real("data.synth.shared_weight");
  d.synth.contrast_spread = r.real("data.synth.contrast_spread");
  d.synth.distractors = static_cast<int>(r.count("data.synth.distractors"));

  const auto arch = r.str("model.arch");
  if (arch == "desk") c.model = ModelConfig::desk(d.classes);
  else if (arch == "full") c.model = ModelConfig::full(d.classes);
  else throw ConfigError("model.arch", "must be desk or full");
  const auto taps = r.strings("model.taps");
  if (!taps.empty()) c.model.tap_points = taps;
  c.model.leaky_alpha = r.real("model.leaky_alpha");
  c.model.bn_eps = r.real("model.bn_eps");
  checked("model", [&] { c.model.validate(); });

  auto& t = c.train;
  t.epochs = static_cast<int>(r.count("train.epochs", 1));
  t.batch_size = r.count("train.batch_size", 2);
  t.base_learning_rate = r.real("train.learning_rate");
  t.adam.beta1 = r.real("train.beta1");
  t.adam.beta2 = r.real("train.beta2");
  t.adam.eps = r.real("train.adam_eps");
  t.ramp_up_epochs = static_cast<int>(r.count("train.ramp_up_epochs"));
  t.ramp_down_epochs = static_cast<int>(r.count("train.ramp_down_epochs"));
  t.os_taps = r.strings("train.os_taps");
  t.aux_tap = r.str("train.aux_tap");
  t.loss.lambda = r.real("loss.lambda");
  t.loss.lambda1 = r.real("loss.lambda1");
  t.loss.lambda2 = r.real("loss.lambda2");
  checked("loss.aux", [&] { t.loss.aux = parse_aux_kind(r.str("loss.aux")); });
  t.loss.margin_euclid = r.real("loss.margin_euclid");
  t.loss.margin_angle = r.real("loss.margin_angle");
  t.loss.sphere_radius = r.real("loss.sphere_radius");
  t.loss.normalize_latent = r.boolean("loss.normalize_latent");
  t.loss.os_blocks = r.count("loss.os_blocks", 1);
  checked("loss", [&] { t.loss.validate(); });
  t.perturb.translate_max_px = static_cast<int>(r.count("perturb.translate_px"));
  t.perturb.flip_horizontal = r.boolean("perturb.flip");
  t.perturb.input_noise_std = r.real("perturb.noise_std");
  t.perturb.dropout_rate = r.real("perturb.dropout");
  checked("perturb", [&] { t.perturb.validate(); });
  checked("train", [&] { t.validate(c.model); });
  if (t.batch_size > d.train_per_class * static_cast<std::size_t>(d.classes))
    throw ConfigError("train.batch_size", "exceeds the training set size");

  auto& a = c.analysis;
  a.layer = r.str("analysis.layer");
  if (!a.layer.empty()) {
    const auto names = c.model.conv_names();
    if (std::find(names.begin(), names.end(), a.layer) == names.end())
      throw ConfigError("analysis.layer", "'" + a.layer + "' is not a convolution of the model");
  }
  a.correlation_images = r.count("analysis.correlation_images", 1);
  a.correlation_bins = r.count("analysis.correlation_bins", 1);
  const auto mode = r.str("analysis.correlation_mode");
  if (mode == "per-image") a.correlation_mode = CorrelationMode::PerImage;
  else if (mode == "pooled") a.correlation_mode = CorrelationMode::Pooled;
  else throw ConfigError("analysis.correlation_mode", "must be per-image or pooled");
  a.calibration_bins = r.count("analysis.calibration_bins", 1);
  a.prune_rates = r.reals("analysis.prune_rates");
  for (double rate : a.prune_rates)
    if (!(rate >= 0 && rate < 100)) throw ConfigError("analysis.prune_rates", "rates must be in [0, 100)");
  a.checkpoint = r.str("analysis.checkpoint");
  a.predictions = r.str("analysis.predictions");
  a.gradcam_image = r.count("analysis.gradcam_image");
  a.gradcam_class = static_cast<int>(r.integer("analysis.gradcam_class"));
  if (a.gradcam_class < -1 || a.gradcam_class >= d.classes)
    throw ConfigError("analysis.gradcam_class", "must be -1 or a class index below " + std::to_string(d.classes));
  a.gradcam_prune_rate = r.real("analysis.gradcam_prune_rate");
  if (!(a.gradcam_prune_rate >= 0 && a.gradcam_prune_rate < 100))
    throw ConfigError("analysis.gradcam_prune_rate", "must be in [0, 100)");

  c.resolved_json = j.dump(2) + "\n";
  return c;
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(), [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
  return s;
}

}  // namespace

std::string RunConfig::analysis_layer() const {
  return analysis.layer.empty() ? model.conv_names().back() : analysis.layer;
}

std::string RunConfig::checkpoint_path() const {
  return analysis.checkpoint.empty() ? out_dir + "/model.ckpt" : analysis.checkpoint;
}

std::vector<std::string> preset_names() { return {"desk-synth", "desk-cifar4", "paper-cifar10"}; }

RunConfig resolve_config(const std::string& json_text, const std::map<std::string, std::string>& env,
                         const Overrides& overrides) {
  json user = json::object();
  if (!json_text.empty()) {
    try {
      user = json::parse(json_text);
    } catch (const json::parse_error& e) {
      throw ConfigError("", std::string("config is not valid JSON: ") + e.what());
    }
    if (!user.is_object()) throw ConfigError("", "config must be a JSON object");
  }

  // Environment entries as path -> value.
  std::vector<std::pair<std::vector<std::string>, json>> env_entries;
  std::optional<std::string> env_preset;
  for (const auto& [name, raw] : env) {
    if (name.rfind(kEnvPrefix, 0) != 0) continue;
    std::vector<std::string> path;
    std::string rest = name.substr(std::string(kEnvPrefix).size());
    for (std::size_t pos; (pos = rest.find("__")) != std::string::npos; rest = rest.substr(pos + 2))
      path.push_back(lower(rest.substr(0, pos)));
    path.push_back(lower(rest));
    json value = json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;
    if (path.size() == 1 && path[0] == "preset") env_preset = value.is_string() ? value.get<std::string>() : raw;
    env_entries.emplace_back(std::move(path), std::move(value));
  }

  std::string preset = "desk-synth";
  if (user.contains("preset")) {
    if (!user["preset"].is_string()) throw ConfigError("preset", "expected a string");
    preset = user["preset"].get<std::string>();
  }
  if (env_preset) preset = *env_preset;
  if (overrides.preset) preset = *overrides.preset;

  json resolved = preset_json(preset);
  check_keys(user, resolved, "");
  merge(resolved, user);
  for (const auto& [path, value] : env_entries) {
    json* node = &resolved;
    std::string dotted;
    for (std::size_t i = 0; i < path.size(); ++i) {
      dotted += (i ? "." : "") + path[i];
      if (!node->is_object() || !node->contains(path[i]))
        throw ConfigError(dotted, "unknown key (from environment variable)");
      node = &(*node)[path[i]];
    }
    if (node->is_object()) throw ConfigError(dotted, "cannot replace a section from the environment");
    *node = value;
  }
  resolved["preset"] = preset;
  if (overrides.seed) resolved["seed"] = *overrides.seed;
  if (overrides.out_dir) resolved["out_dir"] = *overrides.out_dir;
  if (overrides.threads) resolved["threads"] = *overrides.threads;
  if (overrides.predictions) resolved["analysis"]["predictions"] = *overrides.predictions;

  try {
    return typed(resolved);
  } catch (const json::exception& e) {
    throw ConfigError("", e.what());
  }
}

std::map<std::string, std::string> osreg_environment() {
  std::map<std::string, std::string> env;
  for (char** e = environ; e && *e; ++e) {
    std::string entry(*e);
    const auto eq = entry.find('=');
    if (eq == std::string::npos) continue;
    auto name = entry.substr(0, eq);
    if (name.rfind(kEnvPrefix, 0) == 0) env[name] = entry.substr(eq + 1);
  }
  return env;
}

RunConfig load_config(const std::string& path, const Overrides& overrides) {
  std::string text;
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw ConfigError("--config", "cannot read '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    text = ss.str();
  }
  return resolve_config(text, osreg_environment(), overrides);
}

}  // namespace osreg::cli
