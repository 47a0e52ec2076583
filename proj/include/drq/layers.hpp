#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "drq/error.hpp"
#include "drq/tensor.hpp"

namespace drq {

enum class LayerKind : std::uint8_t { dense = 0, conv2d = 1, relu = 2, flatten = 3 };

inline const char* to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::dense: return "dense";
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::relu: return "relu";
    case LayerKind::flatten: return "flatten";
  }
  return "?";
}

// Stride-1 convolution over square kernels with symmetric zero padding.
struct Conv2dGeometry {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t kernel = 0;
  std::size_t padding = 0;

  std::size_t out_height() const { return height + 2 * padding - kernel + 1; }
  std::size_t out_width() const { return width + 2 * padding - kernel + 1; }

  friend bool operator==(const Conv2dGeometry&, const Conv2dGeometry&) = default;
};

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  std::size_t fan_in = 0;   // per-sample input features
  std::size_t fan_out = 0;  // per-sample output features
  bool quantized = false;
  bool normalized = false;  // batch-norm on the output (replaces the bias)
  Conv2dGeometry conv{};

  bool trainable() const { return kind == LayerKind::dense || kind == LayerKind::conv2d; }

  static LayerSpec dense(std::size_t in, std::size_t out, bool quantized, bool normalized) {
    return {LayerKind::dense, in, out, quantized, normalized, {}};
  }

  static LayerSpec conv2d(Conv2dGeometry g, bool quantized, bool normalized) {
    if (g.kernel == 0 || g.kernel > g.height + 2 * g.padding || g.kernel > g.width + 2 * g.padding) {
      throw ConfigError("conv2d kernel does not fit its input");
    }
    return {LayerKind::conv2d,
            g.in_channels * g.height * g.width,
            g.out_channels * g.out_height() * g.out_width(),
            quantized,
            normalized,
            g};
  }

  static LayerSpec relu(std::size_t features) { return {LayerKind::relu, features, features, false, false, {}}; }
  static LayerSpec flatten(std::size_t features) {
    return {LayerKind::flatten, features, features, false, false, {}};
  }

  // Channels normalized by batch-norm and the spatial extent of each channel.
  std::size_t norm_channels() const { return kind == LayerKind::conv2d ? conv.out_channels : fan_out; }
  std::size_t norm_inner() const {
    return kind == LayerKind::conv2d ? conv.out_height() * conv.out_width() : 1;
  }

  Shape weight_shape() const {
    if (kind == LayerKind::conv2d) return {conv.out_channels, conv.in_channels, conv.kernel, conv.kernel};
    return {fan_out, fan_in};
  }

  // Per-sample output shape.
  Shape output_shape() const {
    if (kind == LayerKind::conv2d) return {conv.out_channels, conv.out_height(), conv.out_width()};
    return {fan_out};
  }

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

// Running statistics of one batch-norm instance.
template <typename T>
struct NormStats {
  std::vector<T> mean;
  std::vector<T> variance;
  T momentum = T{0.1};

  friend bool operator==(const NormStats&, const NormStats&) = default;
};

// (producer bit, consumer bit). Float passes use kFloatBits on both sides.
using NormKey = std::pair<int, int>;
inline constexpr int kFloatBits = 32;

inline std::string to_string(const NormKey& key) {
  return "(" + std::to_string(key.first) + "," + std::to_string(key.second) + ")";
}

namespace kernels {

// y[b, o] = sum_i x[b, i] * w[o, i] + bias[o]
template <typename T>
Tensor<T> dense_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias) {
  const std::size_t batch = x.dim(0);
  const std::size_t in = w.dim(1);
  const std::size_t out = w.dim(0);
  if (x.size() != batch * in) {
    throw DimensionError("dense input " + shape_string(x.shape()) + " vs weight " + shape_string(w.shape()));
  }
  Tensor<T> y({batch, out});
  for (std::size_t b = 0; b < batch; ++b) {
    const T* xr = x.data() + b * in;
    for (std::size_t o = 0; o < out; ++o) {
      const T* wr = w.data() + o * in;
      T acc = bias ? (*bias)[o] : T{0};
      for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
      y[b * out + o] = acc;
    }
  }
  return y;
}

template <typename T>
struct DenseGrads {
  Tensor<T> dx;
  Tensor<T> dw;
  Tensor<T> dbias;
};

template <typename T>
DenseGrads<T> dense_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy, bool with_bias) {
  const std::size_t batch = x.dim(0);
  const std::size_t in = w.dim(1);
  const std::size_t out = w.dim(0);
  DenseGrads<T> g{Tensor<T>(x.shape()), Tensor<T>(w.shape()), with_bias ? Tensor<T>({out}) : Tensor<T>()};
  for (std::size_t b = 0; b < batch; ++b) {
    const T* xr = x.data() + b * in;
    const T* dyr = dy.data() + b * out;
    T* dxr = g.dx.data() + b * in;
    for (std::size_t o = 0; o < out; ++o) {
      const T d = dyr[o];
      if (with_bias) g.dbias[o] += d;
      if (d == T{0}) continue;
      const T* wr = w.data() + o * in;
      T* dwr = g.dw.data() + o * in;
      for (std::size_t i = 0; i < in; ++i) {
        dwr[i] += d * xr[i];
        dxr[i] += d * wr[i];
      }
    }
  }
  return g;
}

template <typename T>
Tensor<T> conv2d_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* bias,
                         const Conv2dGeometry& g) {
  const std::size_t batch = x.dim(0);
  if (x.size() != batch * g.in_channels * g.height * g.width) {
    throw DimensionError("conv2d input " + shape_string(x.shape()) + " does not match geometry");
  }
  const std::size_t oh = g.out_height(), ow = g.out_width(), k = g.kernel;
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  Tensor<T> y({batch, g.out_channels, oh, ow});
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      for (std::size_t r = 0; r < oh; ++r) {
        for (std::size_t c = 0; c < ow; ++c) {
          T acc = bias ? (*bias)[o] : T{0};
          for (std::size_t ic = 0; ic < g.in_channels; ++ic) {
            for (std::size_t kr = 0; kr < k; ++kr) {
              const auto ir = static_cast<std::ptrdiff_t>(r + kr) - pad;
              if (ir < 0 || ir >= static_cast<std::ptrdiff_t>(g.height)) continue;
              for (std::size_t kc = 0; kc < k; ++kc) {
                const auto icol = static_cast<std::ptrdiff_t>(c + kc) - pad;
                if (icol < 0 || icol >= static_cast<std::ptrdiff_t>(g.width)) continue;
                acc += x[((b * g.in_channels + ic) * g.height + ir) * g.width + icol] *
                       w[((o * g.in_channels + ic) * k + kr) * k + kc];
              }
            }
          }
          y[((b * g.out_channels + o) * oh + r) * ow + c] = acc;
        }
      }
    }
  }
  return y;
}

template <typename T>
DenseGrads<T> conv2d_backward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& dy,
                              const Conv2dGeometry& g, bool with_bias) {
  const std::size_t batch = x.dim(0);
  const std::size_t oh = g.out_height(), ow = g.out_width(), k = g.kernel;
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  DenseGrads<T> out{Tensor<T>(x.shape()), Tensor<T>(w.shape()),
                    with_bias ? Tensor<T>({g.out_channels}) : Tensor<T>()};
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t o = 0; o < g.out_channels; ++o) {
      for (std::size_t r = 0; r < oh; ++r) {
        for (std::size_t c = 0; c < ow; ++c) {
          const T d = dy[((b * g.out_channels + o) * oh + r) * ow + c];
          if (with_bias) out.dbias[o] += d;
          if (d == T{0}) continue;
          for (std::size_t ic = 0; ic < g.in_channels; ++ic) {
            for (std::size_t kr = 0; kr < k; ++kr) {
              const auto ir = static_cast<std::ptrdiff_t>(r + kr) - pad;
              if (ir < 0 || ir >= static_cast<std::ptrdiff_t>(g.height)) continue;
              for (std::size_t kc = 0; kc < k; ++kc) {
                const auto icol = static_cast<std::ptrdiff_t>(c + kc) - pad;
                if (icol < 0 || icol >= static_cast<std::ptrdiff_t>(g.width)) continue;
                const std::size_t xi = ((b * g.in_channels + ic) * g.height + ir) * g.width + icol;
                const std::size_t wi = ((o * g.in_channels + ic) * k + kr) * k + kc;
                out.dw[wi] += d * x[xi];
                out.dx[xi] += d * w[wi];
              }
            }
          }
        }
      }
    }
  }
  return out;
}

// Batch-norm over a tensor laid out as [outer, channels, inner].
template <typename T>
struct NormForward {
  Tensor<T> output;
  Tensor<T> normalized;  // x_hat
  std::vector<T> inv_std;
  std::vector<T> batch_mean;
  std::vector<T> batch_variance;
};

template <typename T>
NormForward<T> batchnorm_forward(const Tensor<T>& x, std::size_t channels, std::size_t inner,
                                 std::span<const T> gamma, std::span<const T> beta,
                                 const NormStats<T>* running, T eps) {
  const std::size_t outer = x.size() / (channels * inner);
  if (outer * channels * inner != x.size() || gamma.size() != channels) {
    throw DimensionError("batch-norm feature dimension mismatch for input " + shape_string(x.shape()));
  }
  NormForward<T> f{Tensor<T>(x.shape()), Tensor<T>(x.shape()), std::vector<T>(channels),
                   std::vector<T>(channels), std::vector<T>(channels)};
  const T count = static_cast<T>(outer * inner);
  for (std::size_t c = 0; c < channels; ++c) {
    T mean{0}, var{0};
    if (running) {
      mean = running->mean[c];
      var = running->variance[c];
    } else {
      for (std::size_t n = 0; n < outer; ++n)
        for (std::size_t i = 0; i < inner; ++i) mean += x[(n * channels + c) * inner + i];
      mean /= count;
      for (std::size_t n = 0; n < outer; ++n) {
        for (std::size_t i = 0; i < inner; ++i) {
          const T d = x[(n * channels + c) * inner + i] - mean;
          var += d * d;
        }
      }
      var /= count;
    }
    f.batch_mean[c] = mean;
    f.batch_variance[c] = var;
    f.inv_std[c] = T{1} / std::sqrt(var + eps);
    for (std::size_t n = 0; n < outer; ++n) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t idx = (n * channels + c) * inner + i;
        const T xh = (x[idx] - mean) * f.inv_std[c];
        f.normalized[idx] = xh;
        f.output[idx] = gamma[c] * xh + beta[c];
      }
    }
  }
  return f;
}

template <typename T>
struct NormGrads {
  Tensor<T> dx;
  std::vector<T> dgamma;
  std::vector<T> dbeta;
};

// `batch_stats` selects the training-mode derivative (statistics depend on x).
template <typename T>
NormGrads<T> batchnorm_backward(const NormForward<T>& f, const Tensor<T>& dy, std::size_t channels,
                                std::size_t inner, std::span<const T> gamma, bool batch_stats) {
  const std::size_t outer = dy.size() / (channels * inner);
  NormGrads<T> g{Tensor<T>(dy.shape()), std::vector<T>(channels), std::vector<T>(channels)};
  const T count = static_cast<T>(outer * inner);
  for (std::size_t c = 0; c < channels; ++c) {
    T sum_dxh{0}, sum_dxh_xh{0};
    for (std::size_t n = 0; n < outer; ++n) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t idx = (n * channels + c) * inner + i;
        g.dbeta[c] += dy[idx];
        g.dgamma[c] += dy[idx] * f.normalized[idx];
        const T dxh = dy[idx] * gamma[c];
        sum_dxh += dxh;
        sum_dxh_xh += dxh * f.normalized[idx];
      }
    }
    for (std::size_t n = 0; n < outer; ++n) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t idx = (n * channels + c) * inner + i;
        const T dxh = dy[idx] * gamma[c];
        if (batch_stats) {
          g.dx[idx] = f.inv_std[c] / count * (count * dxh - sum_dxh - f.normalized[idx] * sum_dxh_xh);
        } else {
          g.dx[idx] = dxh * f.inv_std[c];
        }
      }
    }
  }
  return g;
}

template <typename T>
void update_running_stats(NormStats<T>& stats, std::span<const T> mean, std::span<const T> variance) {
  const T m = stats.momentum;
  for (std::size_t c = 0; c < mean.size(); ++c) {
    stats.mean[c] = (T{1} - m) * stats.mean[c] + m * mean[c];
    stats.variance[c] = (T{1} - m) * stats.variance[c] + m * variance[c];
  }
}

template <typename T>
Tensor<T> relu_forward(const Tensor<T>& x) {
  Tensor<T> y(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] > T{0} ? x[i] : T{0};
  return y;
}

template <typename T>
Tensor<T> relu_backward(const Tensor<T>& x, const Tensor<T>& dy) {
  Tensor<T> dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) dx[i] = x[i] > T{0} ? dy[i] : T{0};
  return dx;
}

}  // namespace kernels

template <typename T>
struct LossResult {
  T loss{0};
  Tensor<T> dlogits;
};

// Mean softmax cross-entropy over the batch and its gradient w.r.t. logits.
template <typename T>
LossResult<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  const std::size_t batch = logits.dim(0);
  const std::size_t classes = logits.size() / batch;
  if (labels.size() != batch) throw DimensionError("label count does not match batch size");
  LossResult<T> r{T{0}, Tensor<T>(logits.shape())};
  for (std::size_t b = 0; b < batch; ++b) {
    const auto label = labels[b];
    if (label < 0 || static_cast<std::size_t>(label) >= classes) {
      throw ContractError("label " + std::to_string(label) + " out of range");
    }
    const T* row = logits.data() + b * classes;
    const T top = *std::max_element(row, row + classes);
    T denom{0};
    for (std::size_t c = 0; c < classes; ++c) denom += std::exp(row[c] - top);
    const T log_denom = std::log(denom);
    r.loss += log_denom - (row[label] - top);
    for (std::size_t c = 0; c < classes; ++c) {
      const T p = std::exp(row[c] - top - log_denom);
      r.dlogits[b * classes + c] = (p - (static_cast<std::size_t>(label) == c ? T{1} : T{0})) / static_cast<T>(batch);
    }
  }
  r.loss /= static_cast<T>(batch);
  return r;
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  const std::size_t batch = logits.dim(0);
  const std::size_t classes = logits.size() / batch;
  std::vector<int> out(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = logits.data() + b * classes;
    out[b] = static_cast<int>(std::max_element(row, row + classes) - row);
  }
  return out;
}

}  // namespace drq
