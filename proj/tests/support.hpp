#pragma once

#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "drq/drq.hpp"

namespace drq::test {

// dense(+bn) -> relu blocks, float first and last layers.
inline std::vector<LayerSpec> mlp(std::size_t in, std::vector<std::size_t> hidden, std::size_t out,
                                  bool normalized = true) {
  ModelSpec m;
  m.hidden = std::move(hidden);
  m.normalized = normalized;
  return make_model_specs(m, {in}, out);
}

inline Tensor<double> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor<double> t(std::move(shape));
  for (auto& v : t) v = rng.uniform(lo, hi);
  return t;
}

inline std::vector<int> random_labels(std::size_t n, std::size_t classes, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(rng.below(classes));
  return y;
}

inline std::vector<std::size_t> iota_rows(std::size_t n) {
  std::vector<std::size_t> r(n);
  std::iota(r.begin(), r.end(), std::size_t{0});
  return r;
}

// Central difference of a scalar loss w.r.t. every parameter in `p`.
inline std::vector<double> fd_gradient(std::span<double> p, const std::function<double()>& loss, double eps = 1e-5) {
  std::vector<double> g(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double keep = p[i];
    p[i] = keep + eps;
    const double up = loss();
    p[i] = keep - eps;
    const double down = loss();
    p[i] = keep;
    g[i] = (up - down) / (2 * eps);
  }
  return g;
}

inline double rel_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Trained float model and its data, shared by the heavier suites.
struct Trained {
  DataSplits data;
  Network<float> net;
};

inline Trained trained_mlp(std::uint64_t seed, std::vector<std::size_t> hidden = {32, 32, 32}, double noise = 1.0,
                           int epochs = 10) {
  BlobsSpec spec;
  spec.noise = noise;
  spec.seed = seed;
  spec.train_size = 1000;
  spec.eval_size = 500;
  Trained t{make_blobs(spec), Network<float>::build({spec.dims}, mlp(spec.dims, std::move(hidden), spec.classes), seed)};
  train_float(t.net, t.data.train, FloatTrainConfig{epochs, 64, 1e-2, 5e-5, seed});
  return t;
}

inline void quantize(Network<float>& net, const Dataset& train, const BitWidthSet& set = BitWidthSet({8, 6, 4, 2}),
                     bool shared = true) {
  net.enable_quantization(set, shared, batch_features<float>(train, iota_rows(std::min<std::size_t>(256, train.size()))));
}

}  // namespace drq::test
