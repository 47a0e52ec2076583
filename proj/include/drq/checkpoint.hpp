#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

#include "drq/error.hpp"
#include "drq/network.hpp"
#include "drq/quantizer.hpp"

// Binary checkpoint, all integers little-endian:
//
//   "DRQ1" | u8 mode (0 shared, 1 unshared) | u8 h | u8 n, n x u8 bits
//   f32 norm eps | u32 input rank, rank x u32 dims | u32 layer count
//   per layer:
//     u32 name length, name | u8 kind, u8 quantized, u8 normalized
//     u32 fan_in, u32 fan_out | conv2d only: 6 x u32 geometry
//     trainable only:
//       u32 weight rank, rank x u32 dims
//       weights: i8 h-bit codes (quantized layer, shared mode) else f32
//       quantized only: f32 s_h, i32 z_h,
//         u8 count x (u8 bit, f32 scale) unshared weight scales,
//         u8 count x (u8 bit, f32 s_b, i32 z_b) activation scales
//       u32 count x f32 bias | u32 count x f32 gamma | u32 count x f32 beta
//       u32 entries x (u8 producer, u8 consumer, f32 momentum, u32 dim,
//                      dim x f32 mean, dim x f32 variance)
//
// A float model (no quantization state) is written with mode 1 and n = 0.

namespace drq {

inline constexpr std::array<char, 4> kCheckpointMagic{'D', 'R', 'Q', '1'};

enum class StorageMode : std::uint8_t { shared = 0, unshared = 1 };

namespace detail {

static_assert(std::endian::native == std::endian::little, "checkpoint codec assumes a little-endian host");

class ByteWriter {
 public:
  void u8(std::uint8_t v) { bytes_.push_back(v); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void i32(std::int32_t v) { raw(&v, 4); }
  void f32(float v) { raw(&v, 4); }
  void i8(std::int8_t v) { bytes_.push_back(static_cast<std::uint8_t>(v)); }
  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }
  void floats(std::span<const float> v) {
    u32(static_cast<std::uint32_t>(v.size()));
    for (float f : v) f32(f);
  }
  std::vector<std::uint8_t> take() { return std::move(bytes_); }

 private:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint8_t u8() { return take(1)[0]; }
  std::uint32_t u32() { return pod<std::uint32_t>(); }
  std::int32_t i32() { return pod<std::int32_t>(); }
  float f32() { return pod<float>(); }
  std::int8_t i8() { return static_cast<std::int8_t>(take(1)[0]); }
  std::string str() {
    const auto n = u32();
    const auto* p = take(n);
    return {reinterpret_cast<const char*>(p), n};
  }
  std::vector<float> floats() {
    std::vector<float> v(count(4));
    for (auto& f : v) f = f32();
    return v;
  }
  // A u32 element count whose elements need at least `unit` bytes each.
  std::size_t count(std::size_t unit) {
    const std::size_t n = u32();
    check(n * unit);
    return n;
  }
  // Dimensions of a tensor whose elements need `unit` bytes each.
  Shape shape(std::size_t unit) {
    Shape s(count(4));
    std::size_t total = unit;
    for (auto& d : s) {
      d = u32();
      if (d == 0) throw FormatError("checkpoint: zero-length dimension at offset " + std::to_string(offset_));
      if (total > (bytes_.size() - offset_) / d) check(bytes_.size());
      total *= d;
    }
    check(total);
    return s;
  }
  std::size_t offset() const noexcept { return offset_; }
  bool done() const noexcept { return offset_ == bytes_.size(); }

 private:
  template <typename P>
  P pod() {
    P v;
    std::memcpy(&v, take(sizeof(P)), sizeof(P));
    return v;
  }
  void check(std::size_t n) const {
    if (offset_ + n > bytes_.size()) {
      throw FormatError("checkpoint truncated at offset " + std::to_string(offset_) + " (need " +
                        std::to_string(n) + " more bytes, file has " + std::to_string(bytes_.size()) + ")");
    }
  }
  const std::uint8_t* take(std::size_t n) {
    check(n);
    const auto* p = bytes_.data() + offset_;
    offset_ += n;
    return p;
  }

  std::span<const std::uint8_t> bytes_;
  std::size_t offset_ = 0;
};

inline Tensor<float> tensor_or_empty(Shape shape, std::vector<float> values) {
  if (values.empty()) return {};
  return Tensor<float>(std::move(shape), std::move(values));
}

}  // namespace detail

inline StorageMode storage_mode(const Network<float>& net) {
  return net.bit_set() && net.shared_weight_scale() ? StorageMode::shared : StorageMode::unshared;
}

inline std::vector<std::uint8_t> encode_checkpoint(const Network<float>& net) {
  detail::ByteWriter w;
  for (char c : kCheckpointMagic) w.u8(static_cast<std::uint8_t>(c));
  const auto mode = storage_mode(net);
  w.u8(static_cast<std::uint8_t>(mode));
  const auto& set = net.bit_set();
  w.u8(static_cast<std::uint8_t>(set ? set->highest() : 0));
  w.u8(static_cast<std::uint8_t>(set ? set->size() : 0));
  if (set)
    for (int b : *set) w.u8(static_cast<std::uint8_t>(b));
  w.f32(net.norm_eps());
  w.u32(static_cast<std::uint32_t>(net.input_shape().size()));
  for (auto d : net.input_shape()) w.u32(static_cast<std::uint32_t>(d));
  w.u32(static_cast<std::uint32_t>(net.layers().size()));
  for (const auto& l : net.layers()) {
    w.str(l.name);
    w.u8(static_cast<std::uint8_t>(l.spec.kind));
    w.u8(l.spec.quantized);
    w.u8(l.spec.normalized);
    w.u32(static_cast<std::uint32_t>(l.spec.fan_in));
    w.u32(static_cast<std::uint32_t>(l.spec.fan_out));
    if (l.spec.kind == LayerKind::conv2d) {
      const auto& g = l.spec.conv;
      for (auto v : {g.in_channels, g.out_channels, g.height, g.width, g.kernel, g.padding}) {
        w.u32(static_cast<std::uint32_t>(v));
      }
    }
    if (!l.spec.trainable()) continue;
    w.u32(static_cast<std::uint32_t>(l.weight.rank()));
    for (auto d : l.weight.shape()) w.u32(static_cast<std::uint32_t>(d));
    const bool as_codes = l.spec.quantized && mode == StorageMode::shared;
    if (as_codes) {
      for (auto code : quantize_weight_high(l.weight, l.quant).values) w.i8(static_cast<std::int8_t>(code));
    } else {
      for (float v : l.weight) w.f32(v);
    }
    if (l.spec.quantized && set) {
      w.f32(l.quant.weight_scale);
      w.i32(l.quant.weight_zero_point);
      w.u8(static_cast<std::uint8_t>(l.quant.unshared_weight_scales.size()));
      for (const auto& [b, s] : l.quant.unshared_weight_scales) {
        w.u8(static_cast<std::uint8_t>(b));
        w.f32(s);
      }
      w.u8(static_cast<std::uint8_t>(l.quant.act.size()));
      for (const auto& [b, a] : l.quant.act) {
        w.u8(static_cast<std::uint8_t>(b));
        w.f32(a.scale);
        w.i32(a.zero_point);
      }
    }
    w.floats(l.bias.values());
    w.floats(l.gamma.values());
    w.floats(l.beta.values());
    w.u32(static_cast<std::uint32_t>(l.norms.size()));
    for (const auto& [key, s] : l.norms) {
      w.u8(static_cast<std::uint8_t>(key.first));
      w.u8(static_cast<std::uint8_t>(key.second));
      w.f32(s.momentum);
      w.u32(static_cast<std::uint32_t>(s.mean.size()));
      for (float v : s.mean) w.f32(v);
      for (float v : s.variance) w.f32(v);
    }
  }
  return w.take();
}

// Shared-mode quantized weights come back as W~h * s_h, which re-quantizes to
// exactly the stored codes.
inline Network<float> decode_checkpoint(std::span<const std::uint8_t> bytes) {
  detail::ByteReader r(bytes);
  std::array<char, 4> magic{};
  for (auto& c : magic) c = static_cast<char>(r.u8());
  if (magic != kCheckpointMagic) throw FormatError("not a checkpoint: bad magic/version");
  const auto mode_byte = r.u8();
  if (mode_byte > 1) throw FormatError("checkpoint: unknown storage mode " + std::to_string(mode_byte));
  const auto mode = static_cast<StorageMode>(mode_byte);
  const int h = r.u8();
  std::vector<int> bits(r.u8());
  for (auto& b : bits) b = r.u8();
  std::optional<BitWidthSet> set;
  try {
    if (!bits.empty()) set = BitWidthSet(bits);
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint: ") + e.what());
  }
  if (set && set->highest() != h) throw FormatError("checkpoint: highest bit-width disagrees with bit set");
  if (!set && mode == StorageMode::shared) throw FormatError("checkpoint: shared mode without a bit set");
  const float eps = r.f32();
  Shape input = r.shape(0);
  std::vector<Layer<float>> layers(r.count(15));
  for (auto& l : layers) {
    l.name = r.str();
    const auto kind = r.u8();
    if (kind > 3) throw FormatError("checkpoint: unknown layer kind at offset " + std::to_string(r.offset()));
    l.spec.kind = static_cast<LayerKind>(kind);
    l.spec.quantized = r.u8() != 0;
    l.spec.normalized = r.u8() != 0;
    l.spec.fan_in = r.u32();
    l.spec.fan_out = r.u32();
    if (l.spec.kind == LayerKind::conv2d) {
      auto& g = l.spec.conv;
      for (auto* v : {&g.in_channels, &g.out_channels, &g.height, &g.width, &g.kernel, &g.padding}) *v = r.u32();
    }
    if (!l.spec.trainable()) continue;
    const bool as_codes = l.spec.quantized && mode == StorageMode::shared;
    const Shape wshape = r.shape(as_codes ? 1 : 4);
    const std::size_t count = shape_size(wshape);
    std::vector<float> wvals(count);
    std::vector<std::int32_t> codes;
    if (as_codes) {
      codes.resize(count);
      for (auto& c : codes) c = r.i8();
    } else {
      for (auto& v : wvals) v = r.f32();
    }
    if (l.spec.quantized && set) {
      l.quant.highest_bits = h;
      l.quant.shared_weight_scale = mode == StorageMode::shared;
      l.quant.weight_scale = r.f32();
      l.quant.weight_zero_point = r.i32();
      for (int n = r.u8(); n > 0; --n) {
        const int b = r.u8();
        l.quant.unshared_weight_scales[b] = r.f32();
      }
      for (int n = r.u8(); n > 0; --n) {
        const int b = r.u8();
        ActQuant<float> a;
        a.scale = r.f32();
        a.zero_point = r.i32();
        l.quant.act[b] = a;
      }
    }
    if (as_codes) {
      const auto range = signed_range(h);
      for (std::size_t i = 0; i < count; ++i) {
        if (codes[i] < range.lower || codes[i] > range.upper) {
          throw FormatError("checkpoint: weight code outside the " + std::to_string(h) + "-bit range");
        }
        wvals[i] = static_cast<float>(codes[i]) * l.quant.weight_scale +
                   static_cast<float>(l.quant.weight_zero_point);
      }
    }
    l.weight = Tensor<float>(wshape, std::move(wvals));
    const std::size_t channels = l.spec.norm_channels();
    l.bias = detail::tensor_or_empty({channels}, r.floats());
    l.gamma = detail::tensor_or_empty({channels}, r.floats());
    l.beta = detail::tensor_or_empty({channels}, r.floats());
    for (auto n = r.u32(); n > 0; --n) {
      NormKey key;
      key.first = r.u8();
      key.second = r.u8();
      NormStats<float> s;
      s.momentum = r.f32();
      const auto dim = r.count(8);
      s.mean.resize(dim);
      s.variance.resize(dim);
      for (auto& v : s.mean) v = r.f32();
      for (auto& v : s.variance) v = r.f32();
      l.norms[key] = std::move(s);
    }
  }
  if (!r.done()) throw FormatError("checkpoint: trailing bytes at offset " + std::to_string(r.offset()));
  try {
    Network<float> net(std::move(input), std::move(layers), eps);
    if (set) net.set_quantization(*set, mode == StorageMode::shared);
    return net;
  } catch (const DimensionError& e) {
    throw FormatError(std::string("checkpoint: inconsistent topology: ") + e.what());
  }
}

// The network exactly as a shared-mode checkpoint represents it: quantized
// weights snapped to W~h * s_h.
inline Network<float> to_stored_form(const Network<float>& net) {
  auto out = net;
  if (storage_mode(net) != StorageMode::shared) return out;
  for (auto i : net.quantized_layers()) {
    auto& l = out.mutable_layer(i);
    const auto codes = quantize_weight_high(l.weight, l.quant);
    for (std::size_t k = 0; k < codes.values.size(); ++k) {
      l.weight[k] = static_cast<float>(codes.values[k]) * l.quant.weight_scale +
                    static_cast<float>(l.quant.weight_zero_point);
    }
  }
  return out;
}

// Writes via a temporary file and rename so readers never see a partial file.
inline void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ConfigError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ConfigError("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline void write_file_atomic(const std::filesystem::path& path, std::string_view text) {
  write_file_atomic(path, std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

inline void store_checkpoint(const Network<float>& net, const std::filesystem::path& path) {
  write_file_atomic(path, encode_checkpoint(net));
}

inline Network<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path.string());
  std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes);
}

}  // namespace drq
