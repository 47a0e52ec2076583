#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numbers>
#include <string>
#include <variant>
#include <vector>

#include "drq/error.hpp"
#include "drq/random.hpp"
#include "drq/tensor.hpp"

namespace drq {

struct Dataset {
  DenseTensor features;  // [N, ...sample shape]
  std::vector<int> labels;
  std::size_t classes = 0;

  std::size_t size() const { return labels.size(); }
  Shape sample_shape() const { return {features.shape().begin() + 1, features.shape().end()}; }
  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct DataSplits {
  Dataset train;
  Dataset eval;
};

// Isotropic Gaussian clusters. Centers ~ N(0, separation^2 I), samples add
// N(0, noise^2 I). Classes are balanced and interleaved before shuffling.
struct BlobsSpec {
  std::size_t classes = 4;
  std::size_t dims = 16;
  std::size_t train_size = 2000;
  std::size_t eval_size = 1000;
  double noise = 1.0;
  double separation = 1.0;
  std::uint64_t seed = 0;
};

struct MoonsSpec {
  std::size_t train_size = 1000;
  std::size_t eval_size = 500;
  double noise = 0.1;
  std::uint64_t seed = 0;
};

struct IdxSpec {
  std::string train_images;
  std::string train_labels;
  std::string eval_images;
  std::string eval_labels;
};

using DatasetSpec = std::variant<BlobsSpec, MoonsSpec, IdxSpec>;

namespace detail {

inline Dataset blob_split(const std::vector<std::vector<double>>& centers, std::size_t n, double noise, Rng& rng) {
  const std::size_t k = centers.size();
  const std::size_t d = centers.front().size();
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) labels[i] = static_cast<int>(i % k);
  rng.shuffle(labels.begin(), labels.end());
  DenseTensor x({n, d});
  for (std::size_t i = 0; i < n; ++i) {
    const auto& c = centers[static_cast<std::size_t>(labels[i])];
    for (std::size_t j = 0; j < d; ++j) x[i * d + j] = static_cast<float>(c[j] + noise * rng.normal());
  }
  return {std::move(x), std::move(labels), k};
}

inline Dataset moons_split(std::size_t n, double noise, Rng& rng) {
  DenseTensor x({n, 2});
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    const int cls = static_cast<int>(i % 2);
    const double t = std::numbers::pi * rng.uniform();
    double a, b;
    if (cls == 0) {
      a = std::cos(t);
      b = std::sin(t);
    } else {
      a = 1.0 - std::cos(t);
      b = 0.5 - std::sin(t);
    }
    x[2 * i] = static_cast<float>(a + noise * rng.normal());
    x[2 * i + 1] = static_cast<float>(b + noise * rng.normal());
    labels[i] = cls;
  }
  return {std::move(x), std::move(labels), 2};
}

}  // namespace detail

inline DataSplits make_blobs(const BlobsSpec& spec) {
  if (spec.classes < 2 || spec.dims == 0 || spec.train_size == 0 || spec.eval_size == 0) {
    throw ConfigError("gaussian-blobs needs >= 2 classes and non-empty splits");
  }
  Rng rng(spec.seed);
  std::vector<std::vector<double>> centers(spec.classes, std::vector<double>(spec.dims));
  for (auto& c : centers)
    for (auto& v : c) v = spec.separation * rng.normal();
  Rng train_rng = Rng::derive(spec.seed, 1);
  Rng eval_rng = Rng::derive(spec.seed, 2);
  return {detail::blob_split(centers, spec.train_size, spec.noise, train_rng),
          detail::blob_split(centers, spec.eval_size, spec.noise, eval_rng)};
}

inline DataSplits make_moons(const MoonsSpec& spec) {
  if (spec.train_size == 0 || spec.eval_size == 0) throw ConfigError("two-moons needs non-empty splits");
  Rng train_rng = Rng::derive(spec.seed, 1);
  Rng eval_rng = Rng::derive(spec.seed, 2);
  return {detail::moons_split(spec.train_size, spec.noise, train_rng),
          detail::moons_split(spec.eval_size, spec.noise, eval_rng)};
}

// IDX file: 2 zero bytes, type code, rank, then big-endian u32 dims and data.
struct IdxArray {
  std::uint8_t type_code = 0x08;
  Shape shape;
  std::vector<double> values;
};

inline IdxArray parse_idx(const std::vector<std::uint8_t>& bytes) {
  auto need = [&](std::size_t offset, std::size_t n) {
    if (offset + n > bytes.size()) {
      throw FormatError("idx: truncated at offset " + std::to_string(offset));
    }
  };
  need(0, 4);
  if (bytes[0] != 0 || bytes[1] != 0) throw FormatError("idx: bad magic number");
  IdxArray out;
  out.type_code = bytes[2];
  const std::size_t rank = bytes[3];
  std::size_t width = 0;
  switch (out.type_code) {
    case 0x08: case 0x09: width = 1; break;
    case 0x0B: width = 2; break;
    case 0x0C: case 0x0D: width = 4; break;
    case 0x0E: width = 8; break;
    default: throw FormatError("idx: unknown element type 0x" + std::to_string(out.type_code));
  }
  if (rank == 0) throw FormatError("idx: rank must be positive");
  std::size_t offset = 4;
  for (std::size_t i = 0; i < rank; ++i) {
    need(offset, 4);
    const std::uint32_t d = (std::uint32_t{bytes[offset]} << 24) | (std::uint32_t{bytes[offset + 1]} << 16) |
                            (std::uint32_t{bytes[offset + 2]} << 8) | std::uint32_t{bytes[offset + 3]};
    if (d == 0) throw FormatError("idx: zero-length dimension");
    out.shape.push_back(d);
    offset += 4;
  }
  const std::size_t count = shape_size(out.shape);
  need(offset, count * width);
  if (offset + count * width != bytes.size()) throw FormatError("idx: trailing bytes after data");
  out.values.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::uint8_t* p = bytes.data() + offset + i * width;
    std::uint64_t raw = 0;
    for (std::size_t k = 0; k < width; ++k) raw = (raw << 8) | p[k];
    switch (out.type_code) {
      case 0x08: out.values[i] = static_cast<double>(p[0]); break;
      case 0x09: out.values[i] = static_cast<double>(static_cast<std::int8_t>(p[0])); break;
      case 0x0B: out.values[i] = static_cast<double>(static_cast<std::int16_t>(raw)); break;
      case 0x0C: out.values[i] = static_cast<double>(static_cast<std::int32_t>(raw)); break;
      case 0x0D: {
        const auto bits = static_cast<std::uint32_t>(raw);
        float f;
        std::memcpy(&f, &bits, sizeof f);
        out.values[i] = f;
        break;
      }
      case 0x0E: {
        double f;
        std::memcpy(&f, &raw, sizeof f);
        out.values[i] = f;
        break;
      }
    }
  }
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Images are scaled by 1/255 when stored as unsigned bytes.
inline Dataset load_idx_pair(const std::string& images_path, const std::string& labels_path) {
  const auto images = parse_idx(read_file_bytes(images_path));
  const auto labels = parse_idx(read_file_bytes(labels_path));
  if (labels.shape.size() != 1 || labels.shape[0] != images.shape[0]) {
    throw FormatError("idx: label count does not match image count");
  }
  Dataset ds;
  const double scale = images.type_code == 0x08 ? 1.0 / 255.0 : 1.0;
  std::vector<float> values(images.values.size());
  for (std::size_t i = 0; i < values.size(); ++i) values[i] = static_cast<float>(images.values[i] * scale);
  Shape shape = images.shape;
  if (shape.size() == 3) shape.insert(shape.begin() + 1, 1);  // [N, 1, H, W]
  ds.features = DenseTensor(shape, std::move(values));
  int max_label = 0;
  for (double v : labels.values) {
    if (v < 0 || v != std::floor(v)) throw FormatError("idx: labels must be non-negative integers");
    ds.labels.push_back(static_cast<int>(v));
    max_label = std::max(max_label, ds.labels.back());
  }
  ds.classes = static_cast<std::size_t>(max_label) + 1;
  return ds;
}

inline DataSplits make_dataset(const DatasetSpec& spec) {
  if (auto* b = std::get_if<BlobsSpec>(&spec)) return make_blobs(*b);
  if (auto* m = std::get_if<MoonsSpec>(&spec)) return make_moons(*m);
  const auto& idx = std::get<IdxSpec>(spec);
  DataSplits s{load_idx_pair(idx.train_images, idx.train_labels), load_idx_pair(idx.eval_images, idx.eval_labels)};
  s.train.classes = s.eval.classes = std::max(s.train.classes, s.eval.classes);
  return s;
}

}  // namespace drq
