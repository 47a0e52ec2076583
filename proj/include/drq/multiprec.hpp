#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "drq/dataset.hpp"
#include "drq/error.hpp"
#include "drq/network.hpp"
#include "drq/optim.hpp"
#include "drq/quantizer.hpp"
#include "drq/training.hpp"

namespace drq {

enum class TrainMode { conventional, alrs };

inline const char* to_string(TrainMode m) { return m == TrainMode::alrs ? "alrs" : "conventional"; }

struct TrainConfig {
  BitWidthSet bit_set{std::vector<int>{8, 6, 4, 2}};
  int epochs = 30;
  std::size_t batch_size = 64;
  double base_lr = 1e-3;
  double weight_decay = 5e-5;
  TrainMode mode = TrainMode::alrs;
  double alrs_floor = 0.0;
  bool alrs_scaling = true;       // false: per-precision steps with lambda_b = lambda
  bool descending_order = true;   // bit loop order
  bool lsq_gradient_scaling = true;
  bool shared_weight_scale = true;
  std::uint64_t seed = 0;

  // Quantization scales are never weight-decayed.
  static constexpr double scale_weight_decay = 0.0;

  std::vector<int> bit_order() const {
    return descending_order ? bit_set.bits() : bit_set.ascending();
  }
};

// eta_b = 10^(-D/2) for even D, 5 * 10^(-(D+1)/2) for odd D, with D = h - b.
inline double alrs_eta(int highest_bits, int bits) {
  const int delta = highest_bits - bits;
  if (delta < 0) throw ContractError("alrs_eta: bit-width above the highest precision");
  if (delta % 2 == 0) return std::pow(10.0, -delta / 2.0);
  return 5.0 * std::pow(10.0, -(delta + 1) / 2.0);
}

struct AlrsRate {
  double value = 0.0;      // after flooring
  double unfloored = 0.0;
  double mean_stat = 0.0;  // (1/L) sum_i min(max_abs(clip_grad(grad_i, 1)), 1)
  bool floored = false;
};

// lambda_b = eta_b * (lambda - (1/L) sum_i min(max_abs(clip_grad(grad_i, 1)), 1)),
// floored at `floor`.
template <typename T>
AlrsRate alrs_lr(int bits, double lambda, std::span<const std::vector<T>> layer_scale_grads, int highest_bits,
                 double floor = 0.0) {
  AlrsRate r;
  double sum = 0.0;
  for (const auto& g : layer_scale_grads) {
    const auto clipped = clip_grad<T>(g, T{1});
    sum += std::min(static_cast<double>(max_abs<T>(clipped)), 1.0);
  }
  const std::size_t layers = layer_scale_grads.size();
  r.mean_stat = layers ? sum / static_cast<double>(layers) : 0.0;
  r.unfloored = alrs_eta(highest_bits, bits) * (lambda - r.mean_stat);
  r.floored = r.unfloored < floor;
  r.value = std::max(r.unfloored, floor);
  return r;
}

struct EpochMetrics {
  int epoch = 0;
  int precision = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  double lambda_b = 0.0;
};

struct ScaleGradRecord {
  std::int64_t step = 0;
  std::string layer;
  int bits = 0;
  double max_abs = 0.0;
};

struct TrainLog {
  std::vector<EpochMetrics> metrics;
  std::vector<ScaleGradRecord> scale_grads;
  std::int64_t alrs_floor_hits = 0;
};

// What one training step did, per precision.
struct StepReport {
  std::map<int, double> loss;
  std::map<int, double> scale_lr;
  std::map<int, double> act_scale_update;  // mean |delta s_x^b| over quantized layers
};

template <typename T>
class MultiPrecisionTrainer {
 public:
  // `net` must already carry quantization state for cfg.bit_set.
  MultiPrecisionTrainer(Network<T>& net, TrainConfig cfg)
      : net_(net),
        cfg_(std::move(cfg)),
        weight_opt_(AdamConfig{0.9, 0.999, 1e-8, cfg_.weight_decay}),
        scale_opt_(AdamConfig{0.9, 0.999, 1e-8, TrainConfig::scale_weight_decay}) {
    if (!net_.bit_set() || !(*net_.bit_set() == cfg_.bit_set)) {
      throw ContractError("network quantization state does not match the training bit set");
    }
  }

  const TrainConfig& config() const noexcept { return cfg_; }
  const Adam& scale_optimizer() const noexcept { return scale_opt_; }
  const Adam& weight_optimizer() const noexcept { return weight_opt_; }
  std::int64_t steps() const noexcept { return step_; }

  StepReport step(const Tensor<T>& x, std::span<const int> y, double lr) {
    return cfg_.mode == TrainMode::alrs ? step_alrs(x, y, lr) : step_conventional(x, y, lr);
  }

  // Accumulate the gradients of every precision, then one update.
  StepReport step_conventional(const Tensor<T>& x, std::span<const int> y, double lr) {
    StepReport rep;
    const auto before = act_scales();
    Gradients<T> total(net_.param_layout());
    for (int b : cfg_.bit_order()) {
      auto g = precision_gradients(x, y, b, rep);
      record_scale_grads(g, b);
      rep.scale_lr[b] = lr;
      total.accumulate(g);
    }
    weight_opt_.step(net_, total, ParamGroup::weights, lr);
    scale_opt_.step(net_, total, ParamGroup::scales, lr);
    clamp_scales(net_);
    finish(rep, before);
    return rep;
  }

  // Per precision: gradients, ALRS rate, then immediate update of weights
  // (lambda) and scales (lambda_b).
  StepReport step_alrs(const Tensor<T>& x, std::span<const int> y, double lr) {
    StepReport rep;
    const auto before = act_scales();
    for (int b : cfg_.bit_order()) {
      auto g = precision_gradients(x, y, b, rep);
      const auto stats = record_scale_grads(g, b);
      double scale_lr = lr;
      if (cfg_.alrs_scaling) {
        const auto rate = alrs_lr<T>(b, lr, layer_grads(g), cfg_.bit_set.highest(), cfg_.alrs_floor);
        scale_lr = rate.value;
        floor_hits_ += rate.floored;
      }
      (void)stats;
      rep.scale_lr[b] = scale_lr;
      weight_opt_.step(net_, g, ParamGroup::weights, lr);
      scale_opt_.step(net_, g, ParamGroup::scales, scale_lr);
      clamp_scales(net_);
    }
    finish(rep, before);
    return rep;
  }

  TrainLog fit(const Dataset& train, const Dataset& eval) {
    TrainLog log;
    for (int epoch = 0; epoch < cfg_.epochs; ++epoch) {
      const double lr = cosine_lr(cfg_.base_lr, epoch, cfg_.epochs);
      std::map<int, double> loss_sum;
      std::map<int, double> last_lr;
      std::size_t batches = 0;
      for (const auto& rows : epoch_batches(train.size(), cfg_.batch_size, cfg_.seed, epoch)) {
        const auto labels = batch_labels(train, rows);
        const auto rep = step(batch_features<T>(train, rows), labels, lr);
        for (auto [b, l] : rep.loss) loss_sum[b] += l;
        last_lr = rep.scale_lr;
        ++batches;
      }
      for (int b : cfg_.bit_order()) {
        EpochMetrics m;
        m.epoch = epoch;
        m.precision = b;
        m.loss = batches ? loss_sum[b] / static_cast<double>(batches) : 0.0;
        m.accuracy = evaluate(net_, b, eval);
        m.lambda_b = last_lr.count(b) ? last_lr[b] : lr;
        log.metrics.push_back(m);
      }
    }
    log.scale_grads = std::move(records_);
    records_.clear();
    log.alrs_floor_hits = floor_hits_;
    return log;
  }

 private:
  Gradients<T> precision_gradients(const Tensor<T>& x, std::span<const int> y, int b, StepReport& rep) {
    const auto ctx = QuantContext::uniform(b, net_.quantized_layers().size());
    auto r = net_.forward(x, &ctx, Mode::train);
    const auto loss = softmax_cross_entropy(r.logits, y);
    if (!std::isfinite(loss.loss)) {
      throw NumericalError("training diverged: loss is " + std::to_string(static_cast<double>(loss.loss)) +
                           " at step " + std::to_string(step_) + ", " + std::to_string(b) + "-bit pass");
    }
    rep.loss[b] = static_cast<double>(loss.loss);
    auto g = net_.backward_from(r.cache, loss.dlogits);
    if (cfg_.lsq_gradient_scaling) apply_lsq_gradient_scaling(g, net_, ctx);
    return g;
  }

  std::vector<std::vector<T>> layer_grads(const Gradients<T>& g) const {
    const auto q = net_.quantized_layers();
    std::vector<std::vector<T>> out(q.size());
    for (std::size_t i = 0; i < g.layout.size(); ++i) {
      const auto& info = g.layout[i];
      if (info.group != ParamGroup::scales || !g.touched[i]) continue;
      const auto pos = static_cast<std::size_t>(std::find(q.begin(), q.end(), info.layer) - q.begin());
      out[pos].insert(out[pos].end(), g.values[i].begin(), g.values[i].end());
    }
    return out;
  }

  std::vector<double> record_scale_grads(const Gradients<T>& g, int b) {
    const auto stats = layer_scale_grad_max_abs(g, net_);
    const auto q = net_.quantized_layers();
    for (std::size_t i = 0; i < q.size(); ++i) {
      records_.push_back({step_, net_.layers()[q[i]].name, b, stats[i]});
    }
    return stats;
  }

  std::map<int, std::vector<T>> act_scales() const {
    std::map<int, std::vector<T>> out;
    for (auto i : net_.quantized_layers())
      for (const auto& [b, a] : net_.layers()[i].quant.act) out[b].push_back(a.scale);
    return out;
  }

  void finish(StepReport& rep, const std::map<int, std::vector<T>>& before) {
    const auto after = act_scales();
    for (const auto& [b, v] : before) {
      double sum = 0.0;
      for (std::size_t i = 0; i < v.size(); ++i) sum += std::abs(static_cast<double>(after.at(b)[i] - v[i]));
      rep.act_scale_update[b] = v.empty() ? 0.0 : sum / static_cast<double>(v.size());
    }
    ++step_;
  }

  Network<T>& net_;
  TrainConfig cfg_;
  Adam weight_opt_;
  Adam scale_opt_;
  std::vector<ScaleGradRecord> records_;
  std::int64_t step_ = 0;
  std::int64_t floor_hits_ = 0;
};

// Eval-mode accuracy with every quantized layer at `bits`.
template <typename T>
double evaluate(Network<T>& net, int bits, const Dataset& ds) {
  if (!net.bit_set() || !net.bit_set()->contains(bits)) {
    throw ContractError("evaluate: " + std::to_string(bits) + "-bit is not a trained precision");
  }
  const auto ctx = QuantContext::uniform(bits, net.quantized_layers().size());
  return accuracy(net, ds, &ctx);
}

}  // namespace drq
