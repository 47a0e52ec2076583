#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "drq/dataset.hpp"
#include "drq/error.hpp"
#include "drq/network.hpp"
#include "drq/random.hpp"
#include "drq/training.hpp"

namespace drq {

enum class Sensitivity { insensitive, sensitive };

struct LayerTrace {
  std::string name;
  double trace = 0.0;
  std::size_t params = 0;
};

struct SensitivityProfile {
  std::vector<LayerTrace> layers;  // quantized layers, network order
  double mean_trace = 0.0;
  int probes = 0;
  std::uint64_t seed = 0;

  std::vector<double> traces() const {
    std::vector<double> t;
    for (const auto& l : layers) t.push_back(l.trace);
    return t;
  }

  void recompute_mean() {
    double s = 0.0;
    for (const auto& l : layers) s += l.trace;
    mean_trace = layers.empty() ? 0.0 : s / static_cast<double>(layers.size());
  }
};

// sensitive <=> t_l >= t_m; ties fall to the sensitive branch.
inline std::vector<Sensitivity> classify_layers(const SensitivityProfile& profile) {
  std::vector<Sensitivity> out;
  for (const auto& l : profile.layers) {
    out.push_back(l.trace < profile.mean_trace ? Sensitivity::insensitive : Sensitivity::sensitive);
  }
  return out;
}

using GradientFn = std::function<std::vector<double>(std::span<const double>)>;

struct HutchinsonOptions {
  int probes = 128;
  std::uint64_t seed = 0;
  std::uint64_t stream = 0;   // distinguishes layers sharing a seed
  double eps_scale = 1e-6;    // eps = eps_scale * (1 + |theta|_inf)
};

namespace detail {

inline std::vector<double> central_hvp(const GradientFn& grad, std::span<const double> theta,
                                       std::span<const double> v, double eps) {
  std::vector<double> plus(theta.begin(), theta.end()), minus(theta.begin(), theta.end());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    plus[i] += eps * v[i];
    minus[i] -= eps * v[i];
  }
  const auto gp = grad(plus);
  const auto gm = grad(minus);
  std::vector<double> hv(theta.size());
  for (std::size_t i = 0; i < hv.size(); ++i) hv[i] = (gp[i] - gm[i]) / (2.0 * eps);
  return hv;
}

}  // namespace detail

// Hutchinson estimate of tr(H) with Rademacher probes; Hv by central
// differences of the gradient. A non-finite product retries once with a
// ten-times smaller step before failing.
inline double hutchinson_trace(const GradientFn& grad, std::span<const double> theta, const HutchinsonOptions& opt) {
  if (opt.probes < 1) throw ConfigError("hutchinson: probes must be >= 1");
  double theta_inf = 0.0;
  for (double t : theta) theta_inf = std::max(theta_inf, std::abs(t));
  const double base_eps = opt.eps_scale * (1.0 + theta_inf);
  double sum = 0.0;
  std::vector<double> v(theta.size());
  for (int k = 0; k < opt.probes; ++k) {
    Rng rng = Rng::derive(opt.seed, (opt.stream << 32) + static_cast<std::uint64_t>(k));
    for (auto& x : v) x = rng.rademacher();
    double eps = base_eps;
    double quad = 0.0;
    for (int attempt = 0;; ++attempt) {
      const auto hv = detail::central_hvp(grad, theta, v, eps);
      quad = 0.0;
      for (std::size_t i = 0; i < v.size(); ++i) quad += v[i] * hv[i];
      if (std::isfinite(quad)) break;
      if (attempt == 1) throw NumericalError("hutchinson: non-finite Hessian-vector product");
      eps /= 10.0;
    }
    sum += quad;
  }
  return sum / opt.probes;
}

struct SensitivityOptions {
  int probes = 128;
  std::size_t samples = 1000;  // data points the loss is averaged over
  std::uint64_t seed = 0;
  double eps_scale = 1e-6;
};

// Loss gradient w.r.t. one layer's weights with everything else fixed, on the
// eval-mode float path (no running-statistic updates).
template <typename T>
GradientFn layer_weight_gradient(Network<T>& net, std::size_t layer, const Tensor<T>& x, std::vector<int> labels) {
  return [&net, layer, x, labels = std::move(labels)](std::span<const double> theta) {
    auto& w = net.mutable_layer(layer).weight;
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(theta[i]);
    auto r = net.forward(x, nullptr, Mode::eval);
    auto g = net.backward(r.cache, labels);
    const auto idx = g.index_of(layer, ParamRole::weight);
    return std::vector<double>(g.values[*idx].begin(), g.values[*idx].end());
  };
}

// Per quantized layer Hessian trace of the float model. The estimate runs on
// a double-precision copy so that the finite differences stay accurate.
template <typename T>
SensitivityProfile profile_sensitivity(const Network<T>& model, const Dataset& data, const SensitivityOptions& opt) {
  auto net = model.template cast<double>();
  const std::size_t n = std::min(opt.samples, data.size());
  if (n == 0) throw ContractError("sensitivity: empty data sample");
  std::vector<std::size_t> rows(n);
  for (std::size_t i = 0; i < n; ++i) rows[i] = i;
  const auto x = batch_features<double>(data, rows);
  const auto labels = batch_labels(data, rows);
  SensitivityProfile profile;
  profile.probes = opt.probes;
  profile.seed = opt.seed;
  for (auto li : net.quantized_layers()) {
    const auto original = net.layers()[li].weight;
    std::vector<double> theta(original.begin(), original.end());
    HutchinsonOptions h{opt.probes, opt.seed, static_cast<std::uint64_t>(li), opt.eps_scale};
    const double t = hutchinson_trace(layer_weight_gradient(net, li, x, labels), theta, h);
    net.mutable_layer(li).weight = original;
    profile.layers.push_back({net.layers()[li].name, t, original.size()});
  }
  profile.recompute_mean();
  return profile;
}

}  // namespace drq
