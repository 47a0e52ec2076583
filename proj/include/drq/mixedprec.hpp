#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "drq/dataset.hpp"
#include "drq/error.hpp"
#include "drq/multiprec.hpp"
#include "drq/network.hpp"
#include "drq/optim.hpp"
#include "drq/random.hpp"
#include "drq/sensitivity.hpp"
#include "drq/training.hpp"

namespace drq {

// Selection probabilities over `candidates` in the given order: uniform for
// insensitive layers, proportional to the bit-width for sensitive ones.
inline std::vector<double> roulette_probabilities(std::span<const int> candidates, Sensitivity s) {
  if (candidates.empty()) throw ContractError("roulette: empty candidate set");
  std::vector<double> p(candidates.size());
  if (s == Sensitivity::insensitive) {
    std::fill(p.begin(), p.end(), 1.0 / static_cast<double>(candidates.size()));
  } else {
    double total = 0.0;
    for (int b : candidates) {
      if (b <= 0) throw ContractError("roulette: bit-widths must be positive");
      total += b;
    }
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = candidates[i] / total;
  }
  return p;
}

// Walks the cumulative probabilities until they reach r in (0, 1].
inline int roulette_select(std::span<const int> candidates, Sensitivity s, double r) {
  if (!(r > 0.0 && r <= 1.0)) throw ContractError("roulette: draw must lie in (0, 1]");
  const auto p = roulette_probabilities(candidates, s);
  double cumulative = 0.0;
  std::size_t i = 0;
  while (cumulative < r && i < p.size()) cumulative += p[i++];
  return candidates[i - 1];
}

inline int roulette_select(std::span<const int> candidates, double layer_trace, double mean_trace, double r) {
  return roulette_select(candidates, layer_trace < mean_trace ? Sensitivity::insensitive : Sensitivity::sensitive, r);
}

// sigma = sigma_max * (epoch + 1) / total_epochs
inline double sigma_schedule(double sigma_max, int epoch, int total_epochs) {
  if (total_epochs <= 0 || epoch < 0 || epoch >= total_epochs) {
    throw ContractError("sigma_schedule: epoch outside [0, total_epochs)");
  }
  return sigma_max * static_cast<double>(epoch + 1) / static_cast<double>(total_epochs);
}

// Fills the transitional statistics table of every normalized layer with all
// n^2 (producer, consumer) entries, seeding missing edges from the consumer's
// diagonal entry.
template <typename T>
void init_transitional_stats(Network<T>& net) {
  const auto& set = net.bit_set();
  if (!set) throw ContractError("transitional statistics need a quantized network");
  for (std::size_t i = 0; i < net.layers().size(); ++i) {
    if (!net.layers()[i].spec.normalized) continue;
    auto& norms = net.mutable_layer(i).norms;
    for (int c : *set) {
      auto diag = norms.find({c, c});
      if (diag == norms.end()) {
        throw ContractError(net.layers()[i].name + ": missing " + std::to_string(c) + "-bit statistics");
      }
      const auto seed_stats = diag->second;
      for (int p : *set) norms.try_emplace({p, c}, seed_stats);
    }
  }
}

struct SuperNetConfig {
  BitWidthSet bit_set{std::vector<int>{8, 6, 4, 2}};
  int epochs = 30;
  std::size_t batch_size = 64;
  double base_lr = 5e-4;
  double weight_decay = 5e-5;
  double sigma_max = 1.0;
  bool hasb = true;           // false: every layer draws uniformly
  bool alrs = false;
  double alrs_floor = 0.0;
  bool lsq_gradient_scaling = true;
  bool record_trajectory = false;
  std::uint64_t seed = 0;
};

// One-shot mixed-precision SuperNet training with Hessian-aware stochastic
// bit-switching.
template <typename T>
class SuperNetTrainer {
 public:
  SuperNetTrainer(Network<T>& net, SuperNetConfig cfg, std::vector<Sensitivity> classes)
      : net_(net),
        cfg_(std::move(cfg)),
        classes_(std::move(classes)),
        candidates_(cfg_.bit_set.ascending()),
        weight_opt_(AdamConfig{0.9, 0.999, 1e-8, cfg_.weight_decay}),
        scale_opt_(AdamConfig{0.9, 0.999, 1e-8, 0.0}),
        rng_(Rng::derive(cfg_.seed, 0xb175)) {
    if (!net_.bit_set() || !(*net_.bit_set() == cfg_.bit_set)) {
      throw ContractError("supernet: network quantization state does not match the bit set");
    }
    if (classes_.size() != net_.quantized_layers().size()) {
      throw ContractError("supernet: need one sensitivity class per quantized layer");
    }
    if (!cfg_.hasb) std::fill(classes_.begin(), classes_.end(), Sensitivity::insensitive);
    init_transitional_stats(net_);
  }

  const std::vector<Sensitivity>& classes() const noexcept { return classes_; }

  // Per quantized layer: how often each bit-width was realized.
  const std::vector<std::map<int, std::int64_t>>& histogram() const noexcept { return histogram_; }
  const std::vector<std::vector<int>>& trajectory() const noexcept { return trajectory_; }

  // Per-layer bits for one pass at base precision b.
  std::vector<int> draw_assignment(int b, double sigma) {
    std::vector<int> bits(classes_.size(), b);
    for (std::size_t l = 0; l < bits.size(); ++l) {
      if (rng_.uniform() < sigma) bits[l] = roulette_select(candidates_, classes_[l], rng_.uniform_open_closed());
    }
    return bits;
  }

  StepReport step(const Tensor<T>& x, std::span<const int> y, int epoch, double lr) {
    StepReport rep;
    const double sigma = sigma_schedule(cfg_.sigma_max, epoch, cfg_.epochs);
    if (histogram_.empty()) histogram_.resize(classes_.size());
    for (int b : cfg_.bit_set) {
      QuantContext ctx{draw_assignment(b, sigma)};
      for (std::size_t l = 0; l < ctx.bits.size(); ++l) ++histogram_[l][ctx.bits[l]];
      if (cfg_.record_trajectory) trajectory_.push_back(ctx.bits);
      auto r = net_.forward(x, &ctx, Mode::train);
      const auto loss = softmax_cross_entropy(r.logits, y);
      if (!std::isfinite(loss.loss)) {
        throw NumericalError("supernet training diverged at epoch " + std::to_string(epoch) + ", " +
                             std::to_string(b) + "-bit pass");
      }
      rep.loss[b] = static_cast<double>(loss.loss);
      auto g = net_.backward_from(r.cache, loss.dlogits);
      if (cfg_.lsq_gradient_scaling) apply_lsq_gradient_scaling(g, net_, ctx);
      double scale_lr = lr;
      if (cfg_.alrs) {
        std::vector<std::vector<T>> per_layer;
        for (double m : layer_scale_grad_max_abs(g, net_)) per_layer.push_back({static_cast<T>(m)});
        scale_lr = alrs_lr<T>(b, lr, per_layer, cfg_.bit_set.highest(), cfg_.alrs_floor).value;
      }
      rep.scale_lr[b] = scale_lr;
      weight_opt_.step(net_, g, ParamGroup::weights, lr);
      scale_opt_.step(net_, g, ParamGroup::scales, scale_lr);
      clamp_scales(net_);
    }
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
        const auto rep = step(batch_features<T>(train, rows), labels, epoch, lr);
        for (auto [b, l] : rep.loss) loss_sum[b] += l;
        last_lr = rep.scale_lr;
        ++batches;
      }
      for (int b : cfg_.bit_set) {
        const auto ctx = QuantContext::uniform(b, classes_.size());
        log.metrics.push_back({epoch, b, batches ? loss_sum[b] / static_cast<double>(batches) : 0.0,
                               accuracy(net_, eval, &ctx), last_lr.count(b) ? last_lr[b] : lr});
      }
    }
    return log;
  }

 private:
  Network<T>& net_;
  SuperNetConfig cfg_;
  std::vector<Sensitivity> classes_;
  std::vector<int> candidates_;
  Adam weight_opt_;
  Adam scale_opt_;
  Rng rng_;
  std::vector<std::map<int, std::int64_t>> histogram_;
  std::vector<std::vector<int>> trajectory_;
};

// Eval-mode accuracy of one SubNet, reading the transitional statistics of
// the edges the assignment realizes.
template <typename T>
double evaluate_subnet(Network<T>& net, std::span<const int> bits, const Dataset& ds) {
  if (!net.bit_set()) throw ContractError("evaluate_subnet: network is not quantized");
  if (bits.size() != net.quantized_layers().size()) {
    throw ContractError("evaluate_subnet: assignment length " + std::to_string(bits.size()) + " != " +
                        std::to_string(net.quantized_layers().size()) + " quantized layers");
  }
  for (int b : bits) {
    if (!net.bit_set()->contains(b)) {
      throw ContractError("evaluate_subnet: " + std::to_string(b) + "-bit is not a candidate bit-width");
    }
  }
  QuantContext ctx{std::vector<int>(bits.begin(), bits.end())};
  return accuracy(net, ds, &ctx);
}

}  // namespace drq
