#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "drq/error.hpp"
#include "drq/network.hpp"

namespace drq {

// lr = base_lr * 0.5 * (1 + cos(pi * epoch / total_epochs)), no warm-up.
inline double cosine_lr(double base_lr, int epoch, int total_epochs) {
  if (total_epochs <= 0 || epoch < 0 || epoch >= total_epochs) {
    throw ContractError("cosine_lr: epoch " + std::to_string(epoch) + " outside [0, " +
                        std::to_string(total_epochs) + ")");
  }
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * epoch / total_epochs));
}

// Element-wise clamp to [-limit, limit].
template <typename T>
std::vector<T> clip_grad(std::span<const T> g, T limit) {
  if (!(limit > T{0})) throw ContractError("clip_grad: limit must be positive");
  std::vector<T> out(g.size());
  std::transform(g.begin(), g.end(), out.begin(), [limit](T v) { return std::clamp(v, -limit, limit); });
  return out;
}

template <typename T>
T max_abs(std::span<const T> g) {
  T m{0};
  for (auto v : g) m = std::max(m, std::abs(v));
  return m;
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled (AdamW)
};

// Adam with decoupled weight decay. Moments are keyed by parameter name, and
// parameters without a gradient in a step are left untouched.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  const AdamConfig& config() const noexcept { return config_; }

  template <typename T>
  void step(const std::string& name, std::span<T> param, std::span<const T> grad, double lr) {
    if (param.size() != grad.size()) throw DimensionError("adam: " + name + " gradient size mismatch");
    for (auto g : grad) {
      if (!std::isfinite(g)) throw NumericalError("adam: non-finite gradient for parameter " + name);
    }
    auto& slot = slots_[name];
    if (slot.m.size() != param.size()) {
      slot.m.assign(param.size(), 0.0);
      slot.v.assign(param.size(), 0.0);
      slot.steps = 0;
    }
    ++slot.steps;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(slot.steps));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(slot.steps));
    const double decay = 1.0 - lr * config_.weight_decay;
    for (std::size_t i = 0; i < param.size(); ++i) {
      const double g = static_cast<double>(grad[i]);
      slot.m[i] = config_.beta1 * slot.m[i] + (1.0 - config_.beta1) * g;
      slot.v[i] = config_.beta2 * slot.v[i] + (1.0 - config_.beta2) * g * g;
      const double m_hat = slot.m[i] / bc1;
      const double v_hat = slot.v[i] / bc2;
      const double p = static_cast<double>(param[i]) * decay - lr * m_hat / (std::sqrt(v_hat) + config_.eps);
      param[i] = static_cast<T>(p);
    }
  }

  // Steps every touched parameter of `group`.
  template <typename T>
  void step(Network<T>& net, const Gradients<T>& grads, ParamGroup group, double lr) {
    for (std::size_t i = 0; i < grads.layout.size(); ++i) {
      const auto& info = grads.layout[i];
      if (info.group != group || !grads.touched[i]) continue;
      step<T>(info.name, net.param(info), std::span<const T>(grads.values[i]), lr);
    }
  }

 private:
  struct Slot {
    std::vector<double> m;
    std::vector<double> v;
    std::int64_t steps = 0;
  };

  AdamConfig config_;
  std::map<std::string, Slot> slots_;
};

}  // namespace drq
