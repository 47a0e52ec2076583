#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "drq/error.hpp"
#include "drq/tensor.hpp"

namespace drq {

inline constexpr int kMinBits = 2;
inline constexpr int kMaxBits = 8;

// Candidate bit-widths, strictly decreasing; the first entry is the highest
// precision h that the shared integer model is stored at.
class BitWidthSet {
 public:
  BitWidthSet() = default;

  explicit BitWidthSet(std::vector<int> bits) : bits_(std::move(bits)) {
    if (bits_.empty()) throw ConfigError("bit-width set must not be empty");
    for (std::size_t i = 0; i < bits_.size(); ++i) {
      if (bits_[i] < kMinBits || bits_[i] > kMaxBits) {
        throw ConfigError("bit-width " + std::to_string(bits_[i]) + " outside [2, 8]");
      }
      if (i > 0 && bits_[i] >= bits_[i - 1]) {
        throw ConfigError("bit-width set must be strictly decreasing");
      }
    }
  }

  // Accepts any order; sorts descending and rejects duplicates.
  static BitWidthSet from_unordered(std::vector<int> bits) {
    std::sort(bits.begin(), bits.end(), std::greater<>());
    return BitWidthSet(std::move(bits));
  }

  int highest() const { return bits_.front(); }
  int lowest() const { return bits_.back(); }
  std::size_t size() const noexcept { return bits_.size(); }
  const std::vector<int>& bits() const noexcept { return bits_; }
  std::vector<int> ascending() const { return {bits_.rbegin(), bits_.rend()}; }
  bool contains(int b) const { return std::find(bits_.begin(), bits_.end(), b) != bits_.end(); }
  auto begin() const { return bits_.begin(); }
  auto end() const { return bits_.end(); }

  friend bool operator==(const BitWidthSet&, const BitWidthSet&) = default;

 private:
  std::vector<int> bits_;
};

struct IntRange {
  std::int32_t lower;
  std::int32_t upper;
};

constexpr IntRange signed_range(int bits) {
  return {-(std::int32_t{1} << (bits - 1)), (std::int32_t{1} << (bits - 1)) - 1};
}

constexpr IntRange unsigned_range(int bits) { return {0, (std::int32_t{1} << bits) - 1}; }

// Round half away from zero, used for both rounding stages.
template <typename T>
T round_half_away(T x) {
  return std::round(x);
}

inline std::int32_t clamp_code(std::int64_t v, IntRange r) {
  return static_cast<std::int32_t>(std::clamp<std::int64_t>(v, r.lower, r.upper));
}

// Integer rounding division by 2^shift, ties away from zero.
constexpr std::int32_t shift_round(std::int32_t x, int shift) {
  if (shift == 0) return x;
  const std::int32_t offset = std::int32_t{1} << (shift - 1);
  return x >= 0 ? (x + offset) >> shift : -((-x + offset) >> shift);
}

struct QuantizedTensor {
  Shape shape;
  std::vector<std::int32_t> values;
  int bits = 8;
  bool is_signed = true;

  IntRange range() const { return is_signed ? signed_range(bits) : unsigned_range(bits); }

  bool in_range() const {
    const auto r = range();
    return std::all_of(values.begin(), values.end(),
                       [r](std::int32_t v) { return v >= r.lower && v <= r.upper; });
  }

  friend bool operator==(const QuantizedTensor&, const QuantizedTensor&) = default;
};

template <typename T>
struct ActQuant {
  T scale = T{1};
  std::int32_t zero_point = 0;

  friend bool operator==(const ActQuant&, const ActQuant&) = default;
};

// Per-layer quantization state. In shared mode all precisions derive their
// weights from the h-bit integers through `weight_scale`; in unshared mode each
// precision owns an entry in `unshared_weight_scales`.
template <typename T>
struct QuantParams {
  int highest_bits = 8;
  T weight_scale = T{1};
  std::int32_t weight_zero_point = 0;
  std::map<int, ActQuant<T>> act;
  bool shared_weight_scale = true;
  std::map<int, T> unshared_weight_scales;

  friend bool operator==(const QuantParams&, const QuantParams&) = default;
};

namespace detail {

template <typename T>
void require_positive_scale(T s, const char* what) {
  if (!(s > T{0}) || !std::isfinite(s)) {
    throw ContractError(std::string(what) + " scale must be positive and finite");
  }
}

inline void require_bits(int b) {
  if (b < 1 || b > 16) throw ContractError("bit-width " + std::to_string(b) + " out of range");
}

}  // namespace detail

// W~h = clip(round((W - z_h) / s_h), -2^(h-1), 2^(h-1) - 1)
template <typename T>
QuantizedTensor quantize_weight_high(const Tensor<T>& w, const QuantParams<T>& qp) {
  detail::require_positive_scale(qp.weight_scale, "weight");
  detail::require_bits(qp.highest_bits);
  const auto range = signed_range(qp.highest_bits);
  QuantizedTensor out{w.shape(), std::vector<std::int32_t>(w.size()), qp.highest_bits, true};
  const T z = static_cast<T>(qp.weight_zero_point);
  for (std::size_t i = 0; i < w.size(); ++i) {
    const T v = round_half_away((w[i] - z) / qp.weight_scale);
    out.values[i] = clamp_code(static_cast<std::int64_t>(v), range);
  }
  return out;
}

// W~l = clip(round(W~h / 2^(h-l)), -2^(l-1), 2^(l-1) - 1), integer shifts only.
inline QuantizedTensor double_round_low(const QuantizedTensor& high, int low_bits) {
  if (!high.is_signed) throw ContractError("double rounding applies to signed weight codes");
  if (low_bits > high.bits) {
    throw ContractError("target bit-width " + std::to_string(low_bits) + " exceeds stored " +
                        std::to_string(high.bits));
  }
  detail::require_bits(low_bits);
  const int delta = high.bits - low_bits;
  const auto range = signed_range(low_bits);
  QuantizedTensor out{high.shape, std::vector<std::int32_t>(high.values.size()), low_bits, true};
  for (std::size_t i = 0; i < high.values.size(); ++i) {
    out.values[i] = clamp_code(shift_round(high.values[i], delta), range);
  }
  return out;
}

// Effective step of an l-bit code derived from the h-bit scale: s_h * 2^(h-l).
template <typename T>
T low_bit_step(T weight_scale, int highest_bits, int low_bits) {
  return weight_scale * static_cast<T>(std::int64_t{1} << (highest_bits - low_bits));
}

// W^l = W~l * s_h * 2^(h-l) + z_h
template <typename T>
Tensor<T> dequantize_low(const QuantizedTensor& low, const QuantParams<T>& qp) {
  if (low.bits > qp.highest_bits) throw ContractError("code bit-width exceeds stored bit-width");
  const T step = low_bit_step(qp.weight_scale, qp.highest_bits, low.bits);
  const T z = static_cast<T>(qp.weight_zero_point);
  std::vector<T> out(low.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(low.values[i]) * step + z;
  return Tensor<T>(low.shape, std::move(out));
}

// General uniform quantizer: W~ = clip(round(W / s) + z, -2^(b-1), 2^(b-1) - 1).
template <typename T>
QuantizedTensor quantize_uniform(const Tensor<T>& w, int bits, T scale, std::int32_t zero_point) {
  detail::require_positive_scale(scale, "weight");
  detail::require_bits(bits);
  const auto range = signed_range(bits);
  QuantizedTensor out{w.shape(), std::vector<std::int32_t>(w.size()), bits, true};
  for (std::size_t i = 0; i < w.size(); ++i) {
    const auto q = static_cast<std::int64_t>(round_half_away(w[i] / scale)) + zero_point;
    out.values[i] = clamp_code(q, range);
  }
  return out;
}

// W^ = (W~ - z) * s
template <typename T>
Tensor<T> dequantize_uniform(const QuantizedTensor& q, T scale, std::int32_t zero_point) {
  std::vector<T> out(q.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<T>(q.values[i] - zero_point) * scale;
  }
  return Tensor<T>(q.shape, std::move(out));
}

template <typename T>
struct ActivationQuantResult {
  QuantizedTensor codes;
  Tensor<T> dequantized;
};

// X~b = clip(round((X - z_b) / s_b), 0, 2^b - 1), X^b = X~b * s_b + z_b
template <typename T>
ActivationQuantResult<T> quantize_activation(const Tensor<T>& x, int bits, T scale,
                                             std::int32_t zero_point) {
  detail::require_positive_scale(scale, "activation");
  detail::require_bits(bits);
  const auto range = unsigned_range(bits);
  const T z = static_cast<T>(zero_point);
  ActivationQuantResult<T> out{{x.shape(), std::vector<std::int32_t>(x.size()), bits, false},
                               Tensor<T>(x.shape())};
  for (std::size_t i = 0; i < x.size(); ++i) {
    const auto q = clamp_code(static_cast<std::int64_t>(round_half_away((x[i] - z) / scale)), range);
    out.codes.values[i] = q;
    out.dequantized[i] = static_cast<T>(q) * scale + z;
  }
  return out;
}

// Per-element STE derivative of the dequantized value w.r.t. its scale, given
// the normalized input v = (Y - z) / s and the integer code it produced:
// code - v inside (n, p), the saturated bound otherwise.
template <typename T>
T ste_scale_factor(T v, std::int32_t code, IntRange bounds) {
  if (v > static_cast<T>(bounds.lower) && v < static_cast<T>(bounds.upper)) {
    return static_cast<T>(code) - v;
  }
  return v <= static_cast<T>(bounds.lower) ? static_cast<T>(bounds.lower)
                                           : static_cast<T>(bounds.upper);
}

template <typename T>
bool ste_inside(T v, IntRange bounds) {
  return v > static_cast<T>(bounds.lower) && v < static_cast<T>(bounds.upper);
}

// Sum over elements of upstream * d(Y^)/ds with round treated as identity.
template <typename T>
T ste_scale_grad(std::span<const T> y, T scale, T zero_point, IntRange bounds,
                 std::span<const T> upstream) {
  if (y.size() != upstream.size()) throw DimensionError("ste_scale_grad: size mismatch");
  T total{0};
  for (std::size_t i = 0; i < y.size(); ++i) {
    const T v = (y[i] - zero_point) / scale;
    const auto code = static_cast<std::int32_t>(round_half_away(v));
    total += upstream[i] * ste_scale_factor(v, code, bounds);
  }
  return total;
}

// Sum over elements of upstream * d(Y^)/dz: 0 inside (n, p), 1 otherwise.
template <typename T>
T ste_zeropoint_grad(std::span<const T> y, T scale, T zero_point, IntRange bounds,
                     std::span<const T> upstream) {
  if (y.size() != upstream.size()) throw DimensionError("ste_zeropoint_grad: size mismatch");
  T total{0};
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (!ste_inside((y[i] - zero_point) / scale, bounds)) total += upstream[i];
  }
  return total;
}

template <typename T>
Tensor<T> ste_weight_grad_passthrough(const Tensor<T>& upstream, const std::vector<bool>& inside) {
  if (inside.size() != upstream.size()) throw DimensionError("clip mask does not match gradient");
  Tensor<T> out(upstream.shape());
  for (std::size_t i = 0; i < upstream.size(); ++i) out[i] = inside[i] ? upstream[i] : T{0};
  return out;
}

// LSQ-style initial step: 2 * mean|W| / sqrt(2^(b-1) - 1).
template <typename T>
T initial_weight_scale(std::span<const T> w, int bits) {
  T mean_abs{0};
  for (auto v : w) mean_abs += std::abs(v);
  mean_abs /= static_cast<T>(std::max<std::size_t>(w.size(), 1));
  const T s = T{2} * mean_abs / std::sqrt(static_cast<T>(signed_range(bits).upper));
  return s > T{0} ? s : T{1e-3};
}

// Shared h-bit step chosen so the derived lowest-precision step 2^(h-l) * s_h
// equals the LSQ step at l bits.
template <typename T>
T initial_shared_weight_scale(std::span<const T> w, int highest, int lowest) {
  return initial_weight_scale<T>(w, lowest) / static_cast<T>(std::int64_t{1} << (highest - lowest));
}

template <typename T>
T initial_activation_scale(T max_value, int bits) {
  const T s = max_value / static_cast<T>(unsigned_range(bits).upper);
  return s > T{0} ? s : T{1e-3};
}

// Everything the backward pass needs from one fake-quantization.
template <typename T>
struct FakeQuant {
  Tensor<T> dequantized;
  std::vector<T> normalized;           // v = (Y - z) / step
  std::vector<std::int32_t> codes;     // integer level actually used
  IntRange bounds{0, 0};
  T chain{1};                          // d(step)/d(learned scale)
};

// Weight fake-quantization at precision `bits` for either storage mode.
template <typename T>
FakeQuant<T> fake_quantize_weight(const Tensor<T>& w, const QuantParams<T>& qp, int bits) {
  FakeQuant<T> fq;
  if (qp.shared_weight_scale) {
    const auto high = quantize_weight_high(w, qp);
    const auto low = double_round_low(high, bits);
    fq.dequantized = dequantize_low(low, qp);
    const T step = low_bit_step(qp.weight_scale, qp.highest_bits, bits);
    fq.normalized.resize(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) {
      fq.normalized[i] = (w[i] - static_cast<T>(qp.weight_zero_point)) / step;
    }
    fq.codes = low.values;
    fq.bounds = signed_range(bits);
    fq.chain = static_cast<T>(std::int64_t{1} << (qp.highest_bits - bits));
  } else {
    auto it = qp.unshared_weight_scales.find(bits);
    if (it == qp.unshared_weight_scales.end()) {
      throw ContractError("no unshared weight scale for " + std::to_string(bits) + "-bit");
    }
    const T s = it->second;
    const auto q = quantize_uniform(w, bits, s, 0);
    fq.dequantized = dequantize_uniform(q, s, 0);
    fq.normalized.resize(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) fq.normalized[i] = w[i] / s;
    fq.codes = q.values;
    fq.bounds = signed_range(bits);
    fq.chain = T{1};
  }
  return fq;
}

template <typename T>
FakeQuant<T> fake_quantize_activation(const Tensor<T>& x, const ActQuant<T>& aq, int bits) {
  auto r = quantize_activation(x, bits, aq.scale, aq.zero_point);
  FakeQuant<T> fq;
  fq.dequantized = std::move(r.dequantized);
  fq.normalized.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    fq.normalized[i] = (x[i] - static_cast<T>(aq.zero_point)) / aq.scale;
  }
  fq.codes = std::move(r.codes.values);
  fq.bounds = unsigned_range(bits);
  return fq;
}

// Backward through a fake-quantization: input gradient (pass-through inside
// the clip range) and the gradient of the learned scale.
template <typename T>
std::pair<Tensor<T>, T> fake_quant_backward(const FakeQuant<T>& fq, const Tensor<T>& upstream) {
  Tensor<T> dx(upstream.shape());
  T ds{0};
  for (std::size_t i = 0; i < upstream.size(); ++i) {
    const T v = fq.normalized[i];
    if (ste_inside(v, fq.bounds)) dx[i] = upstream[i];
    ds += upstream[i] * ste_scale_factor(v, fq.codes[i], fq.bounds);
  }
  return {std::move(dx), ds * fq.chain};
}

}  // namespace drq
