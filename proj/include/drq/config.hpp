#pragma once

#include <cstdint>
#include <filesystem>
#include <initializer_list>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "drq/dataset.hpp"
#include "drq/error.hpp"
#include "drq/layers.hpp"
#include "drq/mixedprec.hpp"
#include "drq/multiprec.hpp"
#include "drq/search.hpp"
#include "drq/sensitivity.hpp"
#include "drq/training.hpp"

namespace drq {

enum class ExperimentKind { multiprec, mixedprec, search, sensitivity, eval };

inline const char* to_string(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::multiprec: return "multiprec";
    case ExperimentKind::mixedprec: return "mixedprec";
    case ExperimentKind::search: return "search";
    case ExperimentKind::sensitivity: return "sensitivity";
    case ExperimentKind::eval: return "eval";
  }
  return "?";
}

// Hidden widths of an MLP, or a small conv stack in front of one.
struct ModelSpec {
  std::vector<std::size_t> hidden{64, 64, 64};
  std::vector<std::size_t> conv_channels;  // empty: plain MLP
  std::size_t kernel = 3;
  bool normalized = true;
};

struct SearchConfig {
  std::vector<double> omegas{3.0, 4.0, 5.0};
  Sense sense = Sense::maximize;
};

struct RunConfig {
  ExperimentKind experiment = ExperimentKind::multiprec;
  DatasetSpec dataset = BlobsSpec{};
  ModelSpec model;
  FloatTrainConfig float_train;
  TrainConfig train;
  SuperNetConfig mixed;
  SensitivityOptions sensitivity;
  SearchConfig search;
  std::uint64_t seed = 0;
  std::string output_dir = "out";
};

namespace detail {

using json = nlohmann::json;

inline void allow_keys(const json& j, const std::string& where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    bool known = false;
    for (const char* a : keys) known = known || k == a;
    if (!known) throw ConfigError(where + ": unknown key '" + k + "'");
  }
}

template <typename V>
void read(const json& j, const char* key, V& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<V>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type (" + j.at(key).dump() + ")");
  }
}

inline void positive(double v, const std::string& what) {
  if (!(v > 0.0)) throw ConfigError(what + " must be > 0");
}

inline BitWidthSet read_bits(const json& j, const char* key, const BitWidthSet& fallback, const std::string& where) {
  if (!j.contains(key)) return fallback;
  std::vector<int> bits;
  read(j, key, bits, where);
  return BitWidthSet::from_unordered(std::move(bits));
}

inline DatasetSpec parse_dataset(const json& j) {
  std::string kind = "blobs";
  read(j, "kind", kind, "dataset");
  if (kind == "blobs") {
    allow_keys(j, "dataset", {"kind", "classes", "dims", "train_size", "eval_size", "noise", "separation", "seed"});
    BlobsSpec s;
    read(j, "classes", s.classes, "dataset");
    read(j, "dims", s.dims, "dataset");
    read(j, "train_size", s.train_size, "dataset");
    read(j, "eval_size", s.eval_size, "dataset");
    read(j, "noise", s.noise, "dataset");
    read(j, "separation", s.separation, "dataset");
    read(j, "seed", s.seed, "dataset");
    if (s.noise < 0.0) throw ConfigError("dataset.noise must be >= 0");
    return s;
  }
  if (kind == "moons") {
    allow_keys(j, "dataset", {"kind", "train_size", "eval_size", "noise", "seed"});
    MoonsSpec s;
    read(j, "train_size", s.train_size, "dataset");
    read(j, "eval_size", s.eval_size, "dataset");
    read(j, "noise", s.noise, "dataset");
    read(j, "seed", s.seed, "dataset");
    if (s.noise < 0.0) throw ConfigError("dataset.noise must be >= 0");
    return s;
  }
  if (kind == "idx") {
    allow_keys(j, "dataset", {"kind", "train_images", "train_labels", "eval_images", "eval_labels"});
    IdxSpec s;
    read(j, "train_images", s.train_images, "dataset");
    read(j, "train_labels", s.train_labels, "dataset");
    read(j, "eval_images", s.eval_images, "dataset");
    read(j, "eval_labels", s.eval_labels, "dataset");
    if (s.train_images.empty() || s.train_labels.empty() || s.eval_images.empty() || s.eval_labels.empty()) {
      throw ConfigError("dataset: idx needs train_images, train_labels, eval_images and eval_labels");
    }
    return s;
  }
  throw ConfigError("dataset.kind must be blobs, moons or idx (got '" + kind + "')");
}

inline TrainMode parse_mode(const std::string& s) {
  if (s == "alrs") return TrainMode::alrs;
  if (s == "conventional") return TrainMode::conventional;
  throw ConfigError("train.mode must be alrs or conventional (got '" + s + "')");
}

inline Sense parse_sense(const std::string& s) {
  if (s == "maximize") return Sense::maximize;
  if (s == "minimize") return Sense::minimize;
  throw ConfigError("search.sense must be maximize or minimize (got '" + s + "')");
}

inline ExperimentKind parse_experiment(const std::string& s) {
  for (auto k : {ExperimentKind::multiprec, ExperimentKind::mixedprec, ExperimentKind::search,
                 ExperimentKind::sensitivity, ExperimentKind::eval}) {
    if (s == to_string(k)) return k;
  }
  throw ConfigError("experiment must be multiprec, mixedprec, search, sensitivity or eval (got '" + s + "')");
}

}  // namespace detail

inline TrainMode parse_train_mode(const std::string& s) { return detail::parse_mode(s); }
inline Sense parse_sense(const std::string& s) { return detail::parse_sense(s); }

// Validates the whole document before anything runs.
inline RunConfig parse_run_config(const nlohmann::json& j) {
  using detail::read;
  detail::allow_keys(j, "config",
                     {"experiment", "dataset", "model", "float_train", "train", "mixed", "sensitivity", "search",
                      "seed", "output_dir"});
  RunConfig c;
  std::string experiment = "multiprec";
  read(j, "experiment", experiment, "config");
  c.experiment = detail::parse_experiment(experiment);
  read(j, "seed", c.seed, "config");
  read(j, "output_dir", c.output_dir, "config");
  if (c.output_dir.empty()) throw ConfigError("config.output_dir must not be empty");

  if (j.contains("dataset")) c.dataset = detail::parse_dataset(j["dataset"]);

  if (j.contains("model")) {
    const auto& m = j["model"];
    detail::allow_keys(m, "model", {"hidden", "conv_channels", "kernel", "normalized"});
    read(m, "hidden", c.model.hidden, "model");
    read(m, "conv_channels", c.model.conv_channels, "model");
    read(m, "kernel", c.model.kernel, "model");
    read(m, "normalized", c.model.normalized, "model");
  }
  for (auto w : c.model.hidden)
    if (w == 0) throw ConfigError("model.hidden widths must be positive");
  for (auto w : c.model.conv_channels)
    if (w == 0) throw ConfigError("model.conv_channels must be positive");

  c.float_train.seed = c.seed;
  if (j.contains("float_train")) {
    const auto& f = j["float_train"];
    detail::allow_keys(f, "float_train", {"epochs", "batch_size", "base_lr", "weight_decay"});
    read(f, "epochs", c.float_train.epochs, "float_train");
    read(f, "batch_size", c.float_train.batch_size, "float_train");
    read(f, "base_lr", c.float_train.base_lr, "float_train");
    read(f, "weight_decay", c.float_train.weight_decay, "float_train");
  }
  if (c.float_train.epochs < 0) throw ConfigError("float_train.epochs must be >= 0");
  detail::positive(c.float_train.base_lr, "float_train.base_lr");

  c.train.seed = c.seed;
  if (j.contains("train")) {
    const auto& t = j["train"];
    detail::allow_keys(t, "train",
                       {"bit_set", "epochs", "batch_size", "base_lr", "weight_decay", "mode", "alrs_floor",
                        "alrs_scaling", "descending_order", "lsq_gradient_scaling", "shared_weight_scale"});
    c.train.bit_set = detail::read_bits(t, "bit_set", c.train.bit_set, "train");
    read(t, "epochs", c.train.epochs, "train");
    read(t, "batch_size", c.train.batch_size, "train");
    read(t, "base_lr", c.train.base_lr, "train");
    read(t, "weight_decay", c.train.weight_decay, "train");
    std::string mode = to_string(c.train.mode);
    read(t, "mode", mode, "train");
    c.train.mode = detail::parse_mode(mode);
    read(t, "alrs_floor", c.train.alrs_floor, "train");
    read(t, "alrs_scaling", c.train.alrs_scaling, "train");
    read(t, "descending_order", c.train.descending_order, "train");
    read(t, "lsq_gradient_scaling", c.train.lsq_gradient_scaling, "train");
    read(t, "shared_weight_scale", c.train.shared_weight_scale, "train");
  }
  if (c.train.epochs <= 0) throw ConfigError("train.epochs must be > 0");
  if (c.train.batch_size < 2) throw ConfigError("train.batch_size must be >= 2");
  detail::positive(c.train.base_lr, "train.base_lr");
  if (c.train.alrs_floor < 0.0) throw ConfigError("train.alrs_floor must be >= 0");

  c.mixed.seed = c.seed;
  c.mixed.bit_set = c.train.bit_set;
  if (j.contains("mixed")) {
    const auto& m = j["mixed"];
    detail::allow_keys(m, "mixed",
                       {"epochs", "batch_size", "base_lr", "weight_decay", "sigma_max", "hasb", "alrs", "alrs_floor",
                        "lsq_gradient_scaling"});
    read(m, "epochs", c.mixed.epochs, "mixed");
    read(m, "batch_size", c.mixed.batch_size, "mixed");
    read(m, "base_lr", c.mixed.base_lr, "mixed");
    read(m, "weight_decay", c.mixed.weight_decay, "mixed");
    read(m, "sigma_max", c.mixed.sigma_max, "mixed");
    read(m, "hasb", c.mixed.hasb, "mixed");
    read(m, "alrs", c.mixed.alrs, "mixed");
    read(m, "alrs_floor", c.mixed.alrs_floor, "mixed");
    read(m, "lsq_gradient_scaling", c.mixed.lsq_gradient_scaling, "mixed");
  }
  if (c.mixed.epochs <= 0) throw ConfigError("mixed.epochs must be > 0");
  if (c.mixed.batch_size < 2) throw ConfigError("mixed.batch_size must be >= 2");
  detail::positive(c.mixed.base_lr, "mixed.base_lr");
  if (!(c.mixed.sigma_max > 0.0 && c.mixed.sigma_max <= 1.0)) throw ConfigError("mixed.sigma_max must be in (0, 1]");

  c.sensitivity.seed = c.seed;
  if (j.contains("sensitivity")) {
    const auto& s = j["sensitivity"];
    detail::allow_keys(s, "sensitivity", {"probes", "samples", "eps_scale"});
    read(s, "probes", c.sensitivity.probes, "sensitivity");
    read(s, "samples", c.sensitivity.samples, "sensitivity");
    read(s, "eps_scale", c.sensitivity.eps_scale, "sensitivity");
  }
  if (c.sensitivity.probes < 1) throw ConfigError("sensitivity.probes must be >= 1");
  if (c.sensitivity.samples < 1) throw ConfigError("sensitivity.samples must be >= 1");
  detail::positive(c.sensitivity.eps_scale, "sensitivity.eps_scale");

  if (j.contains("search")) {
    const auto& s = j["search"];
    detail::allow_keys(s, "search", {"omegas", "sense"});
    read(s, "omegas", c.search.omegas, "search");
    std::string sense = to_string(c.search.sense);
    read(s, "sense", sense, "search");
    c.search.sense = detail::parse_sense(sense);
  }
  return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_run_config(j);
}

inline nlohmann::ordered_json to_json(const RunConfig& c) {
  nlohmann::ordered_json j;
  j["experiment"] = to_string(c.experiment);
  nlohmann::ordered_json d;
  std::visit(
      [&](const auto& s) {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, BlobsSpec>) {
          d = {{"kind", "blobs"},          {"classes", s.classes},     {"dims", s.dims},
               {"train_size", s.train_size}, {"eval_size", s.eval_size}, {"noise", s.noise},
               {"separation", s.separation}, {"seed", s.seed}};
        } else if constexpr (std::is_same_v<S, MoonsSpec>) {
          d = {{"kind", "moons"},
               {"train_size", s.train_size},
               {"eval_size", s.eval_size},
               {"noise", s.noise},
               {"seed", s.seed}};
        } else {
          d = {{"kind", "idx"},
               {"train_images", s.train_images},
               {"train_labels", s.train_labels},
               {"eval_images", s.eval_images},
               {"eval_labels", s.eval_labels}};
        }
      },
      c.dataset);
  j["dataset"] = d;
  j["model"] = {{"hidden", c.model.hidden},
                {"conv_channels", c.model.conv_channels},
                {"kernel", c.model.kernel},
                {"normalized", c.model.normalized}};
  j["float_train"] = {{"epochs", c.float_train.epochs},
                      {"batch_size", c.float_train.batch_size},
                      {"base_lr", c.float_train.base_lr},
                      {"weight_decay", c.float_train.weight_decay}};
  j["train"] = {{"bit_set", c.train.bit_set.bits()},
                {"epochs", c.train.epochs},
                {"batch_size", c.train.batch_size},
                {"base_lr", c.train.base_lr},
                {"weight_decay", c.train.weight_decay},
                {"mode", to_string(c.train.mode)},
                {"alrs_floor", c.train.alrs_floor},
                {"alrs_scaling", c.train.alrs_scaling},
                {"descending_order", c.train.descending_order},
                {"lsq_gradient_scaling", c.train.lsq_gradient_scaling},
                {"shared_weight_scale", c.train.shared_weight_scale}};
  j["mixed"] = {{"epochs", c.mixed.epochs},
                {"batch_size", c.mixed.batch_size},
                {"base_lr", c.mixed.base_lr},
                {"weight_decay", c.mixed.weight_decay},
                {"sigma_max", c.mixed.sigma_max},
                {"hasb", c.mixed.hasb},
                {"alrs", c.mixed.alrs},
                {"alrs_floor", c.mixed.alrs_floor},
                {"lsq_gradient_scaling", c.mixed.lsq_gradient_scaling}};
  j["sensitivity"] = {{"probes", c.sensitivity.probes},
                      {"samples", c.sensitivity.samples},
                      {"eps_scale", c.sensitivity.eps_scale}};
  j["search"] = {{"omegas", c.search.omegas}, {"sense", to_string(c.search.sense)}};
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  return j;
}

// Float first and last layers, quantized hidden layers, ReLU after each hidden
// layer. With conv channels, a float conv stem is followed by quantized convs.
inline std::vector<LayerSpec> make_model_specs(const ModelSpec& m, const Shape& input, std::size_t classes) {
  std::vector<LayerSpec> specs;
  std::size_t features = shape_size(input);
  if (!m.conv_channels.empty()) {
    if (input.size() != 3) throw ConfigError("conv model needs [channels, height, width] input samples");
    std::size_t c = input[0];
    for (std::size_t i = 0; i < m.conv_channels.size(); ++i) {
      Conv2dGeometry g{c, m.conv_channels[i], input[1], input[2], m.kernel, m.kernel / 2};
      specs.push_back(LayerSpec::conv2d(g, i > 0, m.normalized));
      features = specs.back().fan_out;
      specs.push_back(LayerSpec::relu(features));
      c = m.conv_channels[i];
    }
    specs.push_back(LayerSpec::flatten(features));
  }
  for (std::size_t i = 0; i < m.hidden.size(); ++i) {
    const bool quantized = !specs.empty() || i > 0;
    specs.push_back(LayerSpec::dense(features, m.hidden[i], quantized, m.normalized));
    features = m.hidden[i];
    specs.push_back(LayerSpec::relu(features));
  }
  specs.push_back(LayerSpec::dense(features, classes, false, false));
  return specs;
}

}  // namespace drq
