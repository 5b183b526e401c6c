// Copyright 2026 The GradShield Authors.
// SPDX-License-Identifier: Apache-2.0

// Dataset ingestion: MNIST IDX files, CIFAR-10 binary batches, and a
// procedural class-conditional generator for desk-scale runs.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "gradshield/binary_io.hpp"
#include "gradshield/error.hpp"
#include "gradshield/model.hpp"

namespace gradshield::harness {

struct MnistIdx {
  std::string images;
  std::string labels;
};

struct Cifar10Bin {
  std::vector<std::string> batches;
};

struct Synthetic {
  std::size_t classes = 10;
  InputShape shape{1, 8, 8};
  double separation = 5.0;  // class-mean amplitude in units of the noise std
  double noise = 0.1;
  std::uint64_t seed = 0;
  std::size_t size = 200;
};

struct DatasetSource {
  std::variant<MnistIdx, Cifar10Bin, Synthetic> kind = Synthetic{};
  std::optional<std::pair<std::size_t, std::size_t>> downsample;  // (height, width)
  bool grayscale = false;
  std::optional<std::size_t> limit;  // keep the first N examples
};

// ---------------------------------------------------------------------------
// MNIST IDX

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Decodes an IDX image/label pair already in memory. Pixels are scaled by 1/255.
inline Dataset decode_mnist_idx(std::span<const std::uint8_t> image_bytes, std::span<const std::uint8_t> label_bytes) {
  io::ByteReader img(image_bytes);
  if (const auto magic = img.u32_be("image magic"); magic != kIdxImageMagic)
    throw ParseError("image file: bad magic " + io::hex64(magic), 0);
  const std::uint32_t count = img.u32_be("image count");
  const std::size_t rows_offset = img.offset();
  const std::uint32_t rows = img.u32_be("row count");
  const std::uint32_t cols = img.u32_be("column count");
  if (rows == 0 || cols == 0) throw ParseError("image file: zero image dimension", rows_offset);
  const std::size_t pixels = static_cast<std::size_t>(rows) * cols;
  img.need(static_cast<std::size_t>(count) * pixels, "image payload");

  io::ByteReader lab(label_bytes);
  if (const auto magic = lab.u32_be("label magic"); magic != kIdxLabelMagic)
    throw ParseError("label file: bad magic " + io::hex64(magic), 0);
  const std::size_t count_offset = lab.offset();
  const std::uint32_t label_count = lab.u32_be("label count");
  if (label_count != count)
    throw ParseError("label file: " + std::to_string(label_count) + " labels for " + std::to_string(count) + " images",
                     count_offset);
  lab.need(count, "label payload");

  Dataset ds{{1, rows, cols}, 10, {}};
  ds.examples.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto raw = img.bytes(pixels, "image payload");
    Example ex{Vector(pixels), 0};
    for (std::size_t p = 0; p < pixels; ++p) ex.x[p] = static_cast<double>(raw[p]) / 255.0;
    const std::size_t label_offset = lab.offset();
    ex.y = lab.u8("label");
    if (ex.y > 9) throw ParseError("label file: label " + std::to_string(ex.y) + " out of range", label_offset);
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

inline Dataset load_mnist_idx(const std::string& image_path, const std::string& label_path) {
  return decode_mnist_idx(io::read_file(image_path), io::read_file(label_path));
}

// ---------------------------------------------------------------------------
// CIFAR-10 binary: records of 1 label byte followed by 3×32×32 channel-major pixels.

inline constexpr std::size_t kCifarRecord = 1 + 3 * 32 * 32;

inline Dataset decode_cifar10(std::span<const std::uint8_t> bytes, Dataset ds = {{3, 32, 32}, 10, {}}) {
  if (bytes.size() % kCifarRecord != 0)
    throw ParseError("cifar batch: size " + std::to_string(bytes.size()) + " is not a multiple of " +
                         std::to_string(kCifarRecord),
                     bytes.size() - bytes.size() % kCifarRecord);
  io::ByteReader r(bytes);
  while (!r.done()) {
    const std::size_t at = r.offset();
    Example ex{Vector(kCifarRecord - 1), r.u8("label")};
    if (ex.y > 9) throw ParseError("cifar batch: label " + std::to_string(ex.y) + " out of range", at);
    const auto raw = r.bytes(kCifarRecord - 1, "pixels");
    for (std::size_t p = 0; p < raw.size(); ++p) ex.x[p] = static_cast<double>(raw[p]) / 255.0;
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

inline Dataset load_cifar10(const std::vector<std::string>& paths) {
  Dataset ds{{3, 32, 32}, 10, {}};
  for (const auto& p : paths) ds = decode_cifar10(io::read_file(p), std::move(ds));
  return ds;
}

// ---------------------------------------------------------------------------
// Procedural data

namespace detail {

// Class c's template: an oriented grating plus a Gaussian bump, scaled to unit RMS.
inline Vector class_pattern(std::size_t c, std::size_t classes, const InputShape& s) {
  Vector p(s.size());
  const double angle = std::numbers::pi * static_cast<double>(c) / static_cast<double>(classes);
  const double freq = 1.0 + static_cast<double>(c % 3);
  const double cx = 0.25 + 0.5 * static_cast<double>((c * 7) % classes) / static_cast<double>(classes);
  const double cy = 0.25 + 0.5 * static_cast<double>((c * 3) % classes) / static_cast<double>(classes);
  double rms = 0.0;
  for (std::size_t ch = 0; ch < s.channels; ++ch)
    for (std::size_t i = 0; i < s.height; ++i)
      for (std::size_t j = 0; j < s.width; ++j) {
        const double u = (static_cast<double>(i) + 0.5) / static_cast<double>(s.height);
        const double v = (static_cast<double>(j) + 0.5) / static_cast<double>(s.width);
        const double t = std::cos(angle) * u + std::sin(angle) * v;
        const double bump = std::exp(-((u - cy) * (u - cy) + (v - cx) * (v - cx)) / 0.05);
        const double phase = static_cast<double>(ch) * 2.0 * std::numbers::pi / 3.0;
        const double val = std::sin(2.0 * std::numbers::pi * freq * t + phase) + 1.5 * bump - 0.5;
        p[(ch * s.height + i) * s.width + j] = val;
        rms += val * val;
      }
  rms = std::sqrt(rms / static_cast<double>(p.size()));
  for (double& v : p) v /= rms;
  return p;
}

}  // namespace detail

/// x = clamp(0.5 + separation·noise·pattern_y/2 + noise·ε), labels cycling through the classes.
inline Dataset generate_synthetic(const Synthetic& cfg) {
  require(cfg.classes >= 2, "synthetic: need at least two classes");
  require(cfg.size >= cfg.classes, "synthetic: size must be at least the class count");
  require(cfg.shape.size() > 0, "synthetic: empty image shape");
  require(cfg.noise >= 0.0 && cfg.separation >= 0.0, "synthetic: noise and separation must be >= 0");
  std::vector<Vector> patterns;
  for (std::size_t c = 0; c < cfg.classes; ++c) patterns.push_back(detail::class_pattern(c, cfg.classes, cfg.shape));
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Dataset ds{cfg.shape, cfg.classes, {}};
  ds.examples.reserve(cfg.size);
  for (std::size_t n = 0; n < cfg.size; ++n) {
    Example ex{Vector(cfg.shape.size()), n % cfg.classes};
    for (std::size_t p = 0; p < ex.x.size(); ++p) {
      const double mean = 0.5 + 0.5 * cfg.separation * cfg.noise * patterns[ex.y][p];
      ex.x[p] = std::clamp(mean + cfg.noise * gauss(rng), 0.0, 1.0);
    }
    ds.examples.push_back(std::move(ex));
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Transforms

/// Area-weighted resampling of every channel to height × width.
inline Dataset downsample(const Dataset& in, std::size_t height, std::size_t width) {
  require(height >= 1 && width >= 1, "downsample: target must be at least 1x1");
  const auto& s = in.shape;
  Dataset out{{s.channels, height, width}, in.classes, {}};
  const double sy = static_cast<double>(s.height) / static_cast<double>(height);
  const double sx = static_cast<double>(s.width) / static_cast<double>(width);
  for (const auto& ex : in.examples) {
    Example o{Vector(out.shape.size(), 0.0), ex.y};
    for (std::size_t c = 0; c < s.channels; ++c)
      for (std::size_t i = 0; i < height; ++i)
        for (std::size_t j = 0; j < width; ++j) {
          const double y0 = static_cast<double>(i) * sy, y1 = y0 + sy;
          const double x0 = static_cast<double>(j) * sx, x1 = x0 + sx;
          double acc = 0.0;
          for (auto r = static_cast<std::size_t>(y0); r < s.height && static_cast<double>(r) < y1; ++r) {
            const double wy = std::min(y1, static_cast<double>(r + 1)) - std::max(y0, static_cast<double>(r));
            for (auto q = static_cast<std::size_t>(x0); q < s.width && static_cast<double>(q) < x1; ++q) {
              const double wx = std::min(x1, static_cast<double>(q + 1)) - std::max(x0, static_cast<double>(q));
              acc += wy * wx * ex.x[(c * s.height + r) * s.width + q];
            }
          }
          o.x[(c * height + i) * width + j] = acc / (sy * sx);
        }
    out.examples.push_back(std::move(o));
  }
  return out;
}

/// Luma (0.299 R + 0.587 G + 0.114 B) for 3-channel data; 1-channel data is returned unchanged.
inline Dataset grayscale(const Dataset& in) {
  if (in.shape.channels == 1) return in;
  require(in.shape.channels == 3, "grayscale: expects 1 or 3 channels");
  const std::size_t plane = in.shape.height * in.shape.width;
  Dataset out{{1, in.shape.height, in.shape.width}, in.classes, {}};
  for (const auto& ex : in.examples) {
    Example o{Vector(plane), ex.y};
    for (std::size_t p = 0; p < plane; ++p)
      o.x[p] = 0.299 * ex.x[p] + 0.587 * ex.x[plane + p] + 0.114 * ex.x[2 * plane + p];
    out.examples.push_back(std::move(o));
  }
  return out;
}

inline Dataset load_dataset(const DatasetSource& src) {
  Dataset ds;
  if (const auto* m = std::get_if<MnistIdx>(&src.kind)) ds = load_mnist_idx(m->images, m->labels);
  else if (const auto* c = std::get_if<Cifar10Bin>(&src.kind)) ds = load_cifar10(c->batches);
  else ds = generate_synthetic(std::get<Synthetic>(src.kind));
  if (src.limit && *src.limit < ds.size()) ds.examples.resize(*src.limit);
  if (src.grayscale) ds = grayscale(ds);
  if (src.downsample) ds = downsample(ds, src.downsample->first, src.downsample->second);
  return ds;
}

}  // namespace gradshield::harness
