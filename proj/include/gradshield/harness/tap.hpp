// Copyright 2026 The GradShield Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gradshield/binary_io.hpp"
#include "gradshield/checkpoint.hpp"
#include "gradshield/compressors.hpp"
#include "gradshield/distsim.hpp"

namespace gradshield::harness {

// Tap file layout (little-endian):
//   "GTAP" u32 version
//   u64 step, u64 worker
//   compressed gradient (compressors wire format)
//   u32 d, f64[d] true gradient
//   checkpoint block (model parameters at the tapped step)
//   "IMGS" u32 count, u32 channels, u32 height, u32 width, then per example: u32 label, f64 pixels
// The image block is ground truth for scoring; attacks read only the parts before it.

inline constexpr std::uint32_t kTapVersion = 1;

inline std::vector<std::uint8_t> encode_tap(const GradientTap& tap, const InputShape& shape) {
  io::ByteWriter w;
  w.tag("GTAP");
  w.u32(kTapVersion);
  w.u64(tap.step);
  w.u64(tap.worker);
  write_compressed(w, tap.payload);
  w.u32(static_cast<std::uint32_t>(tap.true_gradient.size()));
  w.f64s(tap.true_gradient);
  write_params(w, tap.params);
  w.tag("IMGS");
  w.u32(static_cast<std::uint32_t>(tap.batch.size()));
  w.u32(static_cast<std::uint32_t>(shape.channels));
  w.u32(static_cast<std::uint32_t>(shape.height));
  w.u32(static_cast<std::uint32_t>(shape.width));
  for (const auto& ex : tap.batch) {
    require(ex.x.size() == shape.size(), "encode_tap: example does not match the image shape");
    w.u32(static_cast<std::uint32_t>(ex.y));
    w.f64s(ex.x);
  }
  return w.take();
}

struct DecodedTap {
  GradientTap tap;
  InputShape shape;
};

inline DecodedTap decode_tap(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_tag("GTAP");
  const std::size_t version_at = r.offset();
  if (r.u32("version") != kTapVersion) throw ParseError("tap: unsupported version", version_at);
  DecodedTap out;
  out.tap.step = r.u64("step");
  out.tap.worker = r.u64("worker");
  out.tap.payload = read_compressed(r);
  const std::uint32_t d = r.u32("gradient length");
  if (d != out.tap.payload.dim()) throw ParseError("tap: true gradient length differs from payload", r.offset() - 4);
  out.tap.true_gradient = r.f64s(d, "true gradient");
  out.tap.observed = decompress_flat(out.tap.payload);
  out.tap.params = read_params(r);
  r.expect_tag("IMGS");
  const std::uint32_t count = r.u32("example count");
  out.shape.channels = r.u32("channels");
  out.shape.height = r.u32("height");
  out.shape.width = r.u32("width");
  for (std::uint32_t i = 0; i < count; ++i) {
    Example ex;
    ex.y = r.u32("label");
    ex.x = r.f64s(out.shape.size(), "pixels");
    out.tap.batch.push_back(std::move(ex));
  }
  if (!r.done()) throw ParseError("tap: trailing bytes", r.offset());
  return out;
}

inline void save_tap(const std::string& path, const GradientTap& tap, const InputShape& shape) {
  io::write_file(path, encode_tap(tap, shape));
}

inline DecodedTap load_tap(const std::string& path) { return decode_tap(io::read_file(path)); }

}  // namespace gradshield::harness
