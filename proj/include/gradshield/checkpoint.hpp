// Copyright 2026 The GradShield Authors.
// SPDX-License-Identifier: Apache-2.0

// ParamSet checkpoint file:
//   "GSHD" | version u32 | layer count u32 |
//   per layer: weight rows u32, weight cols u32, bias length u32 |
//   all values as little-endian f64 in flatten order.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gradshield/binary_io.hpp"
#include "gradshield/model.hpp"

namespace gradshield {

inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void write_params(io::ByteWriter& w, const ParamSet& params) {
  w.tag("GSHD");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(params.layers.size()));
  for (const auto& l : params.layers) {
    w.u32(static_cast<std::uint32_t>(l.weight.rows()));
    w.u32(static_cast<std::uint32_t>(l.weight.cols()));
    w.u32(static_cast<std::uint32_t>(l.bias.size()));
  }
  w.f64s(flatten(params));
}

inline std::vector<std::uint8_t> encode_checkpoint(const ParamSet& params) {
  io::ByteWriter w;
  write_params(w, params);
  return w.take();
}

inline ParamSet read_params(io::ByteReader& r) {
  r.expect_tag("GSHD");
  const std::size_t at = r.offset();
  const std::uint32_t version = r.u32("version");
  if (version != kCheckpointVersion) throw ParseError("unsupported checkpoint version " + std::to_string(version), at);
  const std::uint32_t layers = r.u32("layer count");
  std::vector<TensorShape> shapes;
  for (std::uint32_t i = 0; i < layers; ++i) {
    const std::uint32_t rows = r.u32("weight rows");
    const std::uint32_t cols = r.u32("weight cols");
    const std::uint32_t bias = r.u32("bias length");
    shapes.push_back({rows, cols});
    shapes.push_back({bias, 1});
  }
  std::size_t d = 0;
  for (const auto& s : shapes) d += s.size();
  const auto values = r.f64s(d, "parameter values");
  return unflatten<ParamSet>(values, shapes);
}

inline ParamSet decode_checkpoint(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  ParamSet p = read_params(r);
  if (!r.done()) throw ParseError("trailing bytes after checkpoint", r.offset());
  return p;
}

inline void save_checkpoint(const std::string& path, const ParamSet& params) {
  io::write_file(path, encode_checkpoint(params));
}

inline ParamSet load_checkpoint(const std::string& path) { return decode_checkpoint(io::read_file(path)); }

}  // namespace gradshield
