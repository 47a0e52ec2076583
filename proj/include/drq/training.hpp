#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "drq/dataset.hpp"
#include "drq/error.hpp"
#include "drq/network.hpp"
#include "drq/optim.hpp"
#include "drq/random.hpp"

namespace drq {

inline constexpr double kMinScale = 1e-8;

// Shuffled mini-batches for one epoch. A trailing batch with fewer than two
// samples is dropped because batch statistics need at least two.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                           std::uint64_t seed, int epoch) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = Rng::derive(seed, 0x5eed0000ULL + static_cast<std::uint64_t>(epoch));
  rng.shuffle(order.begin(), order.end());
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n; i += batch_size) {
    const std::size_t end = std::min(n, i + batch_size);
    if (end - i < 2) break;
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return out;
}

template <typename T>
Tensor<T> batch_features(const Dataset& ds, std::span<const std::size_t> rows) {
  auto x = slice_rows(ds.features, rows);
  if constexpr (std::is_same_v<T, float>) {
    return x;
  } else {
    return x.template cast<T>();
  }
}

inline std::vector<int> batch_labels(const Dataset& ds, std::span<const std::size_t> rows) {
  std::vector<int> out;
  out.reserve(rows.size());
  for (auto r : rows) out.push_back(ds.labels[r]);
  return out;
}

// Eval-mode accuracy; deterministic and independent of the chunk size.
template <typename T>
double accuracy(Network<T>& net, const Dataset& ds, const QuantContext* ctx, std::size_t chunk = 512) {
  if (ds.size() == 0) throw ContractError("accuracy on an empty dataset");
  std::size_t correct = 0;
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < ds.size(); i += chunk) {
    rows.clear();
    for (std::size_t j = i; j < std::min(ds.size(), i + chunk); ++j) rows.push_back(j);
    auto r = net.forward(batch_features<T>(ds, rows), ctx, Mode::eval);
    const auto pred = argmax_rows(r.logits);
    for (std::size_t j = 0; j < rows.size(); ++j) correct += pred[j] == ds.labels[rows[j]];
  }
  return static_cast<double>(correct) / static_cast<double>(ds.size());
}

// LSQ gradient scaling of the quantization-scale gradients:
// 1 / sqrt(numel * Q_p), with numel the weight count (weight scale) or the
// per-sample input features (activation scale), at the precision used.
template <typename T>
void apply_lsq_gradient_scaling(Gradients<T>& g, const Network<T>& net, const QuantContext& ctx) {
  const auto q = net.quantized_layers();
  for (std::size_t i = 0; i < g.layout.size(); ++i) {
    const auto& info = g.layout[i];
    if (info.group != ParamGroup::scales || !g.touched[i]) continue;
    const auto pos = std::find(q.begin(), q.end(), info.layer) - q.begin();
    const int b = ctx.bits.at(static_cast<std::size_t>(pos));
    const auto& layer = net.layers()[info.layer];
    double factor;
    if (info.role == ParamRole::weight_scale) {
      factor = 1.0 / std::sqrt(static_cast<double>(layer.weight.size()) * signed_range(b).upper);
    } else {
      factor = 1.0 / std::sqrt(static_cast<double>(layer.spec.fan_in) * unsigned_range(b).upper);
    }
    for (auto& v : g.values[i]) v = static_cast<T>(v * factor);
  }
}

template <typename T>
void clamp_scales(Network<T>& net) {
  for (const auto& info : net.param_layout()) {
    if (info.group != ParamGroup::scales) continue;
    for (auto& s : net.param(info)) s = std::max(s, static_cast<T>(kMinScale));
  }
}

// Per quantized layer: max |g| over the layer's scale gradients touched in
// this pass (the learned weight scale and the activation scale at `bits`).
template <typename T>
std::vector<double> layer_scale_grad_max_abs(const Gradients<T>& g, const Network<T>& net) {
  const auto q = net.quantized_layers();
  std::vector<double> out(q.size(), 0.0);
  for (std::size_t i = 0; i < g.layout.size(); ++i) {
    const auto& info = g.layout[i];
    if (info.group != ParamGroup::scales || !g.touched[i]) continue;
    const auto pos = static_cast<std::size_t>(std::find(q.begin(), q.end(), info.layer) - q.begin());
    out[pos] = std::max(out[pos], static_cast<double>(max_abs<T>(g.values[i])));
  }
  return out;
}

struct FloatTrainConfig {
  int epochs = 20;
  std::size_t batch_size = 64;
  double base_lr = 1e-2;
  double weight_decay = 5e-5;
  std::uint64_t seed = 0;
};

// Plain floating-point training used to produce the pretrained seed model.
// Returns the mean training loss of each epoch.
template <typename T>
std::vector<double> train_float(Network<T>& net, const Dataset& train, const FloatTrainConfig& cfg) {
  Adam opt(AdamConfig{0.9, 0.999, 1e-8, cfg.weight_decay});
  std::vector<double> losses;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = cosine_lr(cfg.base_lr, epoch, cfg.epochs);
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& rows : epoch_batches(train.size(), cfg.batch_size, cfg.seed, epoch)) {
      const auto labels = batch_labels(train, rows);
      auto r = net.forward(batch_features<T>(train, rows), nullptr, Mode::train);
      const auto loss = softmax_cross_entropy(r.logits, labels);
      if (!std::isfinite(loss.loss)) {
        throw NumericalError("float training diverged in epoch " + std::to_string(epoch));
      }
      auto g = net.backward_from(r.cache, loss.dlogits);
      opt.step(net, g, ParamGroup::weights, lr);
      total += static_cast<double>(loss.loss);
      ++count;
    }
    losses.push_back(count ? total / static_cast<double>(count) : 0.0);
  }
  return losses;
}

}  // namespace drq
