#pragma once

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "drq/checkpoint.hpp"
#include "drq/error.hpp"
#include "drq/multiprec.hpp"
#include "drq/search.hpp"
#include "drq/sensitivity.hpp"

namespace drq {

// Shortest decimal that round-trips, so reports are byte-stable.
inline std::string format_number(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return {buf, r.ptr};
}

inline std::string join_bits(std::span<const int> bits, char sep = ' ') {
  std::string s;
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (i) s += sep;
    s += std::to_string(bits[i]);
  }
  return s;
}

inline std::vector<int> parse_bits(const std::string& text) {
  std::vector<int> out;
  std::string token;
  auto flush = [&] {
    if (token.empty()) return;
    int v = 0;
    const auto r = std::from_chars(token.data(), token.data() + token.size(), v);
    if (r.ec != std::errc{} || r.ptr != token.data() + token.size()) {
      throw ConfigError("not a bit-width: '" + token + "'");
    }
    out.push_back(v);
    token.clear();
  };
  for (char c : text) {
    if (c == ',' || c == ' ' || c == ';') flush();
    else token += c;
  }
  flush();
  if (out.empty()) throw ConfigError("empty bit-width list");
  return out;
}

inline std::string metrics_csv(std::span<const EpochMetrics> rows) {
  std::string s = "epoch,precision,loss,accuracy,lambda_b\n";
  for (const auto& m : rows) {
    s += std::to_string(m.epoch) + ',' + std::to_string(m.precision) + ',' + format_number(m.loss) + ',' +
         format_number(m.accuracy) + ',' + format_number(m.lambda_b) + '\n';
  }
  return s;
}

inline std::string scale_grads_csv(std::span<const ScaleGradRecord> rows) {
  std::string s = "step,layer,bit,max_abs\n";
  for (const auto& r : rows) {
    s += std::to_string(r.step) + ',' + r.layer + ',' + std::to_string(r.bits) + ',' + format_number(r.max_abs) +
         '\n';
  }
  return s;
}

inline std::string pareto_csv(std::span<const SubNetAssignment> rows) {
  std::string s = "avg_bits,accuracy,objective,bits\n";
  for (const auto& a : rows) {
    s += format_number(a.avg_bits()) + ',' + (a.accuracy ? format_number(*a.accuracy) : std::string{}) + ',' +
         format_number(a.objective) + ',' + join_bits(a.bits) + '\n';
  }
  return s;
}

// layer, bit, count of realized bit-widths during SuperNet training.
inline std::string histogram_csv(std::span<const std::string> layers,
                                 std::span<const std::map<int, std::int64_t>> histogram) {
  std::string s = "layer,bit,count\n";
  for (std::size_t l = 0; l < histogram.size(); ++l)
    for (const auto& [b, n] : histogram[l]) s += layers[l] + ',' + std::to_string(b) + ',' + std::to_string(n) + '\n';
  return s;
}

inline nlohmann::ordered_json to_json(const SensitivityProfile& p) {
  nlohmann::ordered_json j;
  j["layers"] = nlohmann::ordered_json::array();
  for (const auto& l : p.layers) j["layers"].push_back({{"name", l.name}, {"trace", l.trace}, {"params", l.params}});
  j["mean_trace"] = p.mean_trace;
  j["probes"] = p.probes;
  j["seed"] = p.seed;
  return j;
}

inline SensitivityProfile profile_from_json(const nlohmann::json& j) {
  try {
    SensitivityProfile p;
    for (const auto& l : j.at("layers")) {
      LayerTrace t{l.at("name").get<std::string>(), l.at("trace").get<double>(), l.at("params").get<std::size_t>()};
      if (!(t.trace >= 0.0) || t.params == 0) throw ConfigError("profile layer '" + t.name + "' has invalid values");
      p.layers.push_back(std::move(t));
    }
    p.probes = j.at("probes").get<int>();
    p.seed = j.at("seed").get<std::uint64_t>();
    p.recompute_mean();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed sensitivity profile: ") + e.what());
  }
}

inline nlohmann::ordered_json to_json(const SubNetAssignment& a) {
  nlohmann::ordered_json j;
  j["bits"] = a.bits;
  j["avg_bits"] = a.avg_bits();
  j["objective"] = a.objective;
  j["accuracy"] = a.accuracy ? nlohmann::ordered_json(*a.accuracy) : nlohmann::ordered_json(nullptr);
  return j;
}

inline SubNetAssignment assignment_from_json(const nlohmann::json& j) {
  try {
    SubNetAssignment a;
    a.bits = j.at("bits").get<std::vector<int>>();
    a.objective = j.value("objective", 0.0);
    if (j.contains("accuracy") && !j["accuracy"].is_null()) a.accuracy = j["accuracy"].get<double>();
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed assignment: ") + e.what());
  }
}

inline std::string dump(const nlohmann::ordered_json& j) { return j.dump(2) + "\n"; }

inline nlohmann::json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// Summary of a checkpoint without materialising activations.
inline nlohmann::ordered_json describe(const Network<float>& net, std::size_t file_bytes) {
  nlohmann::ordered_json j;
  j["mode"] = storage_mode(net) == StorageMode::shared ? "shared" : "unshared";
  j["bits"] = net.bit_set() ? net.bit_set()->bits() : std::vector<int>{};
  j["input_shape"] = net.input_shape();
  j["bytes"] = file_bytes;
  j["layers"] = nlohmann::ordered_json::array();
  for (const auto& l : net.layers()) {
    nlohmann::ordered_json e;
    e["name"] = l.name;
    e["kind"] = to_string(l.spec.kind);
    e["fan_in"] = l.spec.fan_in;
    e["fan_out"] = l.spec.fan_out;
    e["quantized"] = l.spec.quantized;
    if (l.spec.trainable()) e["params"] = l.weight.size();
    if (l.spec.quantized && net.bit_set()) {
      e["weight_scale"] = l.quant.weight_scale;
      nlohmann::ordered_json act;
      for (const auto& [b, a] : l.quant.act) act[std::to_string(b)] = a.scale;
      e["act_scales"] = act;
    }
    if (!l.norms.empty()) {
      std::vector<std::string> keys;
      for (const auto& [k, s] : l.norms) keys.push_back(to_string(k));
      e["norm_keys"] = keys;
    }
    j["layers"].push_back(e);
  }
  return j;
}

}  // namespace drq
