#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "drq/error.hpp"
#include "drq/layers.hpp"
#include "drq/quantizer.hpp"
#include "drq/random.hpp"
#include "drq/tensor.hpp"

namespace drq {

template <typename T>
struct Layer {
  std::string name;
  LayerSpec spec;
  Tensor<T> weight;
  Tensor<T> bias;   // present only when the layer is not normalized
  Tensor<T> gamma;  // batch-norm affine, present when normalized
  Tensor<T> beta;
  std::map<NormKey, NormStats<T>> norms;
  QuantParams<T> quant;

  template <typename U>
  Layer<U> cast() const {
    Layer<U> out;
    out.name = name;
    out.spec = spec;
    if (!weight.empty()) out.weight = weight.template cast<U>();
    if (!bias.empty()) out.bias = bias.template cast<U>();
    if (!gamma.empty()) out.gamma = gamma.template cast<U>();
    if (!beta.empty()) out.beta = beta.template cast<U>();
    for (const auto& [key, s] : norms) {
      out.norms[key] = NormStats<U>{std::vector<U>(s.mean.begin(), s.mean.end()),
                                    std::vector<U>(s.variance.begin(), s.variance.end()),
                                    static_cast<U>(s.momentum)};
    }
    out.quant.highest_bits = quant.highest_bits;
    out.quant.weight_scale = static_cast<U>(quant.weight_scale);
    out.quant.weight_zero_point = quant.weight_zero_point;
    out.quant.shared_weight_scale = quant.shared_weight_scale;
    for (const auto& [b, a] : quant.act) out.quant.act[b] = ActQuant<U>{static_cast<U>(a.scale), a.zero_point};
    for (const auto& [b, s] : quant.unshared_weight_scales) out.quant.unshared_weight_scales[b] = static_cast<U>(s);
    return out;
  }

  friend bool operator==(const Layer&, const Layer&) = default;
};

// Bit-width of every quantized layer, in network order. Absent context means
// the plain floating-point forward.
struct QuantContext {
  std::vector<int> bits;

  static QuantContext uniform(int b, std::size_t quantized_layers) {
    return {std::vector<int>(quantized_layers, b)};
  }
};

enum class Mode { train, eval };

enum class ParamGroup : std::uint8_t { weights, scales };
enum class ParamRole : std::uint8_t { weight, bias, gamma, beta, weight_scale, act_scale };

struct ParamInfo {
  std::string name;
  ParamGroup group;
  ParamRole role;
  std::size_t layer;
  int bits;  // 0 for non-scale parameters
  std::size_t size;
};

template <typename T>
struct LayerCache {
  Tensor<T> input;
  Tensor<T> effective_input;
  Tensor<T> effective_weight;
  std::optional<FakeQuant<T>> act_fq;
  std::optional<FakeQuant<T>> weight_fq;
  std::optional<kernels::NormForward<T>> norm;
  int bits = 0;
};

template <typename T>
struct ForwardCache {
  std::uint64_t generation = 0;
  Mode mode = Mode::eval;
  std::vector<LayerCache<T>> layers;
  std::vector<std::pair<std::size_t, NormKey>> norm_keys;  // (layer, key) consulted
  Tensor<T> logits;
};

template <typename T>
struct ForwardResult {
  Tensor<T> logits;
  ForwardCache<T> cache;
};

template <typename T>
struct Gradients {
  std::vector<ParamInfo> layout;
  std::vector<std::vector<T>> values;
  std::vector<bool> touched;

  explicit Gradients(std::vector<ParamInfo> l = {}) : layout(std::move(l)) {
    values.reserve(layout.size());
    for (const auto& p : layout) values.emplace_back(p.size, T{0});
    touched.assign(layout.size(), false);
  }

  std::optional<std::size_t> index_of(std::size_t layer, ParamRole role, int bits = 0) const {
    for (std::size_t i = 0; i < layout.size(); ++i) {
      const auto& p = layout[i];
      if (p.layer == layer && p.role == role && p.bits == bits) return i;
    }
    return std::nullopt;
  }

  std::optional<std::size_t> index_of(const std::string& name) const {
    for (std::size_t i = 0; i < layout.size(); ++i)
      if (layout[i].name == name) return i;
    return std::nullopt;
  }

  void accumulate(const Gradients& other) {
    if (other.layout.size() != layout.size()) throw ContractError("gradient layouts differ");
    for (std::size_t i = 0; i < values.size(); ++i) {
      if (!other.touched[i]) continue;
      for (std::size_t j = 0; j < values[i].size(); ++j) values[i][j] += other.values[i][j];
      touched[i] = true;
    }
  }

  bool all_finite() const {
    for (const auto& v : values)
      for (auto x : v)
        if (!std::isfinite(x)) return false;
    return true;
  }
};

template <typename T>
class Network {
 public:
  Network() = default;

  Network(Shape input_shape, std::vector<Layer<T>> layers, T norm_eps = T{1e-5})
      : input_shape_(std::move(input_shape)), layers_(std::move(layers)), norm_eps_(norm_eps) {
    validate();
  }

  // Kaiming-uniform weights, zero biases, unit batch-norm affine and float
  // running statistics initialised to (0, 1).
  static Network build(Shape input_shape, const std::vector<LayerSpec>& specs, std::uint64_t seed,
                       T norm_momentum = T{0.1}) {
    Rng rng(seed);
    std::vector<Layer<T>> layers;
    std::size_t trainable = 0;
    for (std::size_t i = 0; i < specs.size(); ++i) {
      Layer<T> l;
      l.spec = specs[i];
      l.name = std::string(to_string(l.spec.kind)) + std::to_string(i);
      if (l.spec.trainable()) {
        ++trainable;
        const std::size_t fan_in = l.spec.kind == LayerKind::conv2d
                                       ? l.spec.conv.in_channels * l.spec.conv.kernel * l.spec.conv.kernel
                                       : l.spec.fan_in;
        const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
        l.weight = Tensor<T>(l.spec.weight_shape());
        for (auto& w : l.weight) w = static_cast<T>(rng.uniform(-bound, bound));
        const std::size_t channels = l.spec.norm_channels();
        if (l.spec.normalized) {
          l.gamma = Tensor<T>({channels}, T{1});
          l.beta = Tensor<T>({channels}, T{0});
          l.norms[{kFloatBits, kFloatBits}] =
              NormStats<T>{std::vector<T>(channels, T{0}), std::vector<T>(channels, T{1}), norm_momentum};
        } else {
          l.bias = Tensor<T>({channels}, T{0});
        }
      }
      layers.push_back(std::move(l));
    }
    if (trainable == 0) throw ConfigError("network needs at least one trainable layer");
    return Network(std::move(input_shape), std::move(layers));
  }

  const std::vector<Layer<T>>& layers() const noexcept { return layers_; }

  // Mutable access invalidates outstanding forward caches.
  Layer<T>& mutable_layer(std::size_t i) {
    ++generation_;
    return layers_.at(i);
  }

  const Shape& input_shape() const noexcept { return input_shape_; }
  std::size_t input_features() const { return shape_size(input_shape_); }
  std::size_t classes() const { return layers_.back().spec.fan_out; }
  T norm_eps() const noexcept { return norm_eps_; }
  std::uint64_t generation() const noexcept { return generation_; }

  std::vector<std::size_t> quantized_layers() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      if (layers_[i].spec.quantized) out.push_back(i);
    return out;
  }

  const std::optional<BitWidthSet>& bit_set() const noexcept { return bit_set_; }
  bool shared_weight_scale() const noexcept { return shared_; }

  // Restores quantization metadata without re-initialising scales (loading).
  void set_quantization(BitWidthSet set, bool shared) {
    bit_set_ = std::move(set);
    shared_ = shared;
  }

  // Initialises weight and activation scales from the current float weights
  // and one calibration batch, and seeds per-precision running statistics from
  // the float statistics.
  void enable_quantization(const BitWidthSet& set, bool shared, const Tensor<T>& calibration) {
    bit_set_ = set;
    shared_ = shared;
    const int h = set.highest();
    auto maxima = input_maxima(calibration);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      auto& l = layers_[i];
      if (!l.spec.normalized && !l.spec.quantized) continue;
      if (l.spec.quantized) {
        auto& q = l.quant;
        q.highest_bits = h;
        q.weight_zero_point = 0;
        q.shared_weight_scale = shared;
        q.weight_scale = shared ? initial_shared_weight_scale<T>(l.weight.values(), h, set.lowest())
                                : initial_weight_scale<T>(l.weight.values(), h);
        q.act.clear();
        q.unshared_weight_scales.clear();
        for (int b : set) {
          q.act[b] = ActQuant<T>{initial_activation_scale<T>(maxima[i], b), 0};
          if (!shared) q.unshared_weight_scales[b] = initial_weight_scale<T>(l.weight.values(), b);
        }
      }
      if (l.spec.normalized) {
        auto it = l.norms.find({kFloatBits, kFloatBits});
        if (it != l.norms.end()) {
          for (int b : set) l.norms[{b, b}] = it->second;
        }
      }
    }
    ++generation_;
  }

  // Normalization key of every layer under a quantization context: the
  // producer is the bit-width of the nearest preceding quantized layer, and
  // the first quantized layer (and any float layer before it) uses (b, b).
  std::vector<NormKey> norm_keys(const QuantContext* ctx) const {
    std::vector<NormKey> keys(layers_.size(), {kFloatBits, kFloatBits});
    if (!ctx) return keys;
    const auto q = quantized_layers();
    if (ctx->bits.size() != q.size()) {
      throw ContractError("quantization context has " + std::to_string(ctx->bits.size()) +
                          " bit-widths for " + std::to_string(q.size()) + " quantized layers");
    }
    if (q.empty()) return keys;
    std::optional<int> producer;
    std::size_t qi = 0;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (layers_[i].spec.quantized) {
        const int own = ctx->bits[qi++];
        keys[i] = {producer.value_or(own), own};
        producer = own;
      } else {
        const int pb = producer.value_or(ctx->bits.front());
        keys[i] = {pb, pb};
      }
    }
    return keys;
  }

  ForwardResult<T> forward(const Tensor<T>& x, const QuantContext* ctx, Mode mode,
                           bool update_running_stats = true) {
    if (x.rank() == 0 || x.size() != x.dim(0) * input_features()) {
      throw DimensionError("input " + shape_string(x.shape()) + " does not match network input " +
                           shape_string(input_shape_));
    }
    if (ctx && !bit_set_) throw ContractError("quantized forward on a network without quantization state");
    const std::size_t batch = x.dim(0);
    const auto keys = norm_keys(ctx);
    ForwardResult<T> r;
    r.cache.generation = generation_;
    r.cache.mode = mode;
    r.cache.layers.resize(layers_.size());
    std::size_t qi = 0;
    Tensor<T> h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      auto& l = layers_[i];
      auto& lc = r.cache.layers[i];
      switch (l.spec.kind) {
        case LayerKind::relu:
          lc.input = h;
          h = kernels::relu_forward(h);
          break;
        case LayerKind::flatten:
          lc.input = h;
          h = h.reshaped({batch, l.spec.fan_out});
          break;
        case LayerKind::dense:
        case LayerKind::conv2d: {
          lc.input = h;
          Tensor<T> in = l.spec.kind == LayerKind::dense ? h.reshaped({batch, l.spec.fan_in}) : h;
          if (in.size() != batch * l.spec.fan_in) {
            throw DimensionError(l.name + ": input " + shape_string(h.shape()) + " expected " +
                                 std::to_string(l.spec.fan_in) + " features");
          }
          if (l.spec.kind == LayerKind::conv2d) {
            const auto& g = l.spec.conv;
            in = in.reshaped({batch, g.in_channels, g.height, g.width});
          }
          Tensor<T> w = l.weight;
          if (l.spec.quantized && ctx) {
            const int b = ctx->bits[qi++];
            if (!bit_set_->contains(b)) {
              throw ContractError(l.name + ": bit-width " + std::to_string(b) + " not in candidate set");
            }
            auto act_it = l.quant.act.find(b);
            if (act_it == l.quant.act.end()) {
              throw ContractError(l.name + ": no activation scale for " + std::to_string(b) + "-bit");
            }
            lc.bits = b;
            lc.act_fq = fake_quantize_activation(in, act_it->second, b);
            lc.weight_fq = fake_quantize_weight(l.weight, l.quant, b);
            in = lc.act_fq->dequantized;
            w = lc.weight_fq->dequantized;
          }
          const Tensor<T>* bias = l.bias.empty() ? nullptr : &l.bias;
          Tensor<T> out = l.spec.kind == LayerKind::dense ? kernels::dense_forward(in, w, bias)
                                                          : kernels::conv2d_forward(in, w, bias, l.spec.conv);
          lc.effective_input = std::move(in);
          lc.effective_weight = std::move(w);
          if (l.spec.normalized) {
            const auto key = keys[i];
            r.cache.norm_keys.emplace_back(i, key);
            const std::size_t channels = l.spec.norm_channels();
            const std::size_t inner = l.spec.norm_inner();
            if (mode == Mode::train) {
              auto f = kernels::batchnorm_forward<T>(out, channels, inner, l.gamma.values(), l.beta.values(),
                                                     nullptr, norm_eps_);
              if (update_running_stats) {
                auto it = l.norms.find(key);
                if (it == l.norms.end()) {
                  l.norms[key] = NormStats<T>{f.batch_mean, f.batch_variance, default_momentum(l)};
                } else {
                  kernels::update_running_stats<T>(it->second, f.batch_mean, f.batch_variance);
                }
              }
              out = f.output;
              lc.norm = std::move(f);
            } else {
              auto it = l.norms.find(key);
              if (it == l.norms.end()) {
                throw ContractError(l.name + ": no normalization statistics for key " + to_string(key));
              }
              auto f = kernels::batchnorm_forward<T>(out, channels, inner, l.gamma.values(), l.beta.values(),
                                                     &it->second, norm_eps_);
              out = f.output;
              lc.norm = std::move(f);
            }
          }
          h = std::move(out);
          break;
        }
      }
    }
    r.logits = h.reshaped({batch, classes()});
    r.cache.logits = r.logits;
    return r;
  }

  // Softmax cross-entropy gradients for the cached forward pass.
  Gradients<T> backward(const ForwardCache<T>& cache, std::span<const int> labels) const {
    throw_if_stale(cache);
    return backward_from(cache, softmax_cross_entropy(cache.logits, labels).dlogits);
  }

  // Backward pass from a given gradient of the logits.
  Gradients<T> backward_from(const ForwardCache<T>& cache, const Tensor<T>& dlogits) const {
    throw_if_stale(cache);
    Gradients<T> g(param_layout());
    Tensor<T> dh = dlogits;
    for (std::size_t ii = layers_.size(); ii-- > 0;) {
      const auto& l = layers_[ii];
      const auto& lc = cache.layers[ii];
      switch (l.spec.kind) {
        case LayerKind::relu:
          dh = kernels::relu_backward(lc.input, dh.reshaped(lc.input.shape()));
          break;
        case LayerKind::flatten:
          dh = dh.reshaped(lc.input.shape());
          break;
        case LayerKind::dense:
        case LayerKind::conv2d: {
          const std::size_t batch = lc.input.dim(0);
          Tensor<T> dout = l.spec.kind == LayerKind::dense ? dh.reshaped({batch, l.spec.fan_out})
                                                           : dh.reshaped({batch, l.spec.conv.out_channels,
                                                                          l.spec.conv.out_height(),
                                                                          l.spec.conv.out_width()});
          if (l.spec.normalized) {
            auto ng = kernels::batchnorm_backward<T>(*lc.norm, dout, l.spec.norm_channels(), l.spec.norm_inner(),
                                                     l.gamma.values(), cache.mode == Mode::train);
            store(g, ii, ParamRole::gamma, 0, ng.dgamma);
            store(g, ii, ParamRole::beta, 0, ng.dbeta);
            dout = std::move(ng.dx);
          }
          const bool with_bias = !l.bias.empty();
          auto dg = l.spec.kind == LayerKind::dense
                        ? kernels::dense_backward(lc.effective_input, lc.effective_weight, dout, with_bias)
                        : kernels::conv2d_backward(lc.effective_input, lc.effective_weight, dout, l.spec.conv,
                                                   with_bias);
          if (with_bias) store(g, ii, ParamRole::bias, 0, dg.dbias.values());
          Tensor<T> dx = std::move(dg.dx);
          if (lc.weight_fq) {
            auto [dw, ds_w] = fake_quant_backward(*lc.weight_fq, dg.dw);
            store(g, ii, ParamRole::weight, 0, dw.values());
            const T ds_w_arr[1] = {ds_w};
            store(g, ii, ParamRole::weight_scale, shared_ ? l.quant.highest_bits : lc.bits, ds_w_arr);
            auto [dxi, ds_a] = fake_quant_backward(*lc.act_fq, dx);
            const T ds_a_arr[1] = {ds_a};
            store(g, ii, ParamRole::act_scale, lc.bits, ds_a_arr);
            dx = std::move(dxi);
          } else {
            store(g, ii, ParamRole::weight, 0, dg.dw.values());
          }
          dh = dx.reshaped(lc.input.shape());
          break;
        }
      }
    }
    return g;
  }

  // Stable parameter order: per layer weight, bias, gamma, beta, then the
  // quantization scales (weight scale(s), activation scale per bit).
  std::vector<ParamInfo> param_layout() const {
    std::vector<ParamInfo> out;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      if (!l.spec.trainable()) continue;
      out.push_back({l.name + ".weight", ParamGroup::weights, ParamRole::weight, i, 0, l.weight.size()});
      if (!l.bias.empty()) out.push_back({l.name + ".bias", ParamGroup::weights, ParamRole::bias, i, 0, l.bias.size()});
      if (!l.gamma.empty()) {
        out.push_back({l.name + ".gamma", ParamGroup::weights, ParamRole::gamma, i, 0, l.gamma.size()});
        out.push_back({l.name + ".beta", ParamGroup::weights, ParamRole::beta, i, 0, l.beta.size()});
      }
      if (l.spec.quantized && bit_set_) {
        if (shared_) {
          out.push_back({l.name + ".weight_scale", ParamGroup::scales, ParamRole::weight_scale, i,
                         l.quant.highest_bits, 1});
        } else {
          for (int b : *bit_set_) {
            out.push_back({l.name + ".weight_scale@" + std::to_string(b), ParamGroup::scales,
                           ParamRole::weight_scale, i, b, 1});
          }
        }
        for (int b : *bit_set_) {
          out.push_back({l.name + ".act_scale@" + std::to_string(b), ParamGroup::scales, ParamRole::act_scale, i,
                         b, 1});
        }
      }
    }
    return out;
  }

  std::span<T> param(const ParamInfo& p) {
    ++generation_;
    auto& l = layers_.at(p.layer);
    switch (p.role) {
      case ParamRole::weight: return l.weight.values();
      case ParamRole::bias: return l.bias.values();
      case ParamRole::gamma: return l.gamma.values();
      case ParamRole::beta: return l.beta.values();
      case ParamRole::weight_scale:
        if (shared_) return {&l.quant.weight_scale, 1};
        return {&l.quant.unshared_weight_scales.at(p.bits), 1};
      case ParamRole::act_scale: return {&l.quant.act.at(p.bits).scale, 1};
    }
    throw ContractError("unknown parameter role");
  }

  std::span<const T> param(const ParamInfo& p) const { return const_cast<Network*>(this)->param_const(p); }

  template <typename U>
  Network<U> cast() const {
    std::vector<Layer<U>> layers;
    for (const auto& l : layers_) layers.push_back(l.template cast<U>());
    Network<U> out(input_shape_, std::move(layers), static_cast<U>(norm_eps_));
    if (bit_set_) out.set_quantization(*bit_set_, shared_);
    return out;
  }

  friend bool operator==(const Network& a, const Network& b) {
    return a.input_shape_ == b.input_shape_ && a.layers_ == b.layers_ && a.norm_eps_ == b.norm_eps_ &&
           a.bit_set_ == b.bit_set_ && (!a.bit_set_ || a.shared_ == b.shared_);
  }

 private:
  std::span<const T> param_const(const ParamInfo& p) {
    const auto saved = generation_;
    auto s = param(p);
    generation_ = saved;
    return s;
  }

  void throw_if_stale(const ForwardCache<T>& cache) const {
    if (cache.layers.size() != layers_.size() || cache.generation != generation_) {
      throw ContractError("forward cache is stale: parameters changed since the forward pass");
    }
  }

  static T default_momentum(const Layer<T>& l) {
    auto it = l.norms.find({kFloatBits, kFloatBits});
    return it != l.norms.end() ? it->second.momentum : T{0.1};
  }

  void store(Gradients<T>& g, std::size_t layer, ParamRole role, int bits, std::span<const T> values) const {
    auto idx = g.index_of(layer, role, bits);
    if (!idx) throw ContractError("gradient slot missing for " + layers_[layer].name);
    auto& dst = g.values[*idx];
    for (std::size_t i = 0; i < values.size(); ++i) dst[i] += values[i];
    g.touched[*idx] = true;
  }

  // Max of each quantized layer's input on a float forward of `x`.
  std::vector<T> input_maxima(const Tensor<T>& x) {
    const bool have_float_stats = std::all_of(layers_.begin(), layers_.end(), [](const Layer<T>& l) {
      return !l.spec.normalized || l.norms.count({kFloatBits, kFloatBits});
    });
    auto r = forward(x, nullptr, have_float_stats ? Mode::eval : Mode::train, false);
    std::vector<T> maxima(layers_.size(), T{0});
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (!layers_[i].spec.quantized) continue;
      const auto& in = r.cache.layers[i].input;
      maxima[i] = *std::max_element(in.begin(), in.end());
    }
    return maxima;
  }

  void validate() const {
    if (layers_.empty()) throw ConfigError("network has no layers");
    std::vector<std::size_t> trainable;
    std::size_t features = input_features();
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& s = layers_[i].spec;
      if (s.fan_in != features) {
        throw DimensionError(layers_[i].name + ": fan_in " + std::to_string(s.fan_in) + " but receives " +
                             std::to_string(features));
      }
      features = s.fan_out;
      if (s.trainable()) trainable.push_back(i);
      if (s.quantized) {
        if (!s.trainable()) throw ConfigError("only dense/conv2d layers can be quantized");
        std::size_t j = i;
        while (j > 0 && layers_[j - 1].spec.kind == LayerKind::flatten) --j;
        if (j == 0 || layers_[j - 1].spec.kind != LayerKind::relu) {
          throw ConfigError(layers_[i].name + ": quantized layers must consume a ReLU output");
        }
      }
    }
    if (trainable.empty()) throw ConfigError("network has no trainable layer");
    if (layers_[trainable.front()].spec.quantized || layers_[trainable.back()].spec.quantized) {
      throw ConfigError("first and last trainable layers must stay at full precision");
    }
    if (trainable.back() != layers_.size() - 1) throw ConfigError("network must end with a trainable layer");
  }

  Shape input_shape_;
  std::vector<Layer<T>> layers_;
  T norm_eps_ = T{1e-5};
  std::optional<BitWidthSet> bit_set_;
  bool shared_ = true;
  std::uint64_t generation_ = 0;
};

}  // namespace drq
