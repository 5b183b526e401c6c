// Copyright 2026 The GradShield Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gradshield/binary_io.hpp"
#include "gradshield/error.hpp"
#include "gradshield/linalg.hpp"
#include "gradshield/model.hpp"

namespace gradshield {

struct Image {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  Vector pixels;  // channel-major, row-major within a channel

  static Image from(const InputShape& s, Vector px) {
    require(px.size() == s.size(), "Image: pixel count does not match shape");
    return Image{s.channels, s.height, s.width, std::move(px)};
  }
  double at(std::size_t c, std::size_t i, std::size_t j) const { return pixels[(c * height + i) * width + j]; }
};

/// Collects non-fatal warnings (clamped pixels, SSIM window fallback, ...).
struct Diagnostics {
  std::vector<std::string> warnings;
  void warn(std::string w) { warnings.push_back(std::move(w)); }
};

struct SsimParams {
  std::size_t window = 11;
  double sigma = 1.5;
  double k1 = 0.01;
  double k2 = 0.03;
  double dynamic_range = 1.0;
};

namespace detail {

inline std::vector<double> gaussian_window(std::size_t size, double sigma) {
  std::vector<double> g(size);
  const double centre = (static_cast<double>(size) - 1.0) / 2.0;
  double s = 0.0;
  for (std::size_t i = 0; i < size; ++i) {
    const double x = static_cast<double>(i) - centre;
    s += (g[i] = std::exp(-x * x / (2.0 * sigma * sigma)));
  }
  for (double& v : g) v /= s;
  return g;
}

inline double ssim_from_moments(double mu_a, double mu_b, double var_a, double var_b, double cov, double c1, double c2) {
  return ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
}

}  // namespace detail

/// Windowed SSIM: Gaussian window (11×11, σ=1.5 by default), K1=0.01, K2=0.03,
/// L=1, averaged over all valid window positions and then over channels.
/// Images smaller than the window fall back to a single global window.
/// Raw values are returned; SSIM can be negative.
inline double ssim(const Image& a, const Image& b, Diagnostics* diag = nullptr, const SsimParams& prm = {}) {
  if (a.channels != b.channels || a.height != b.height || a.width != b.width)
    throw ContractViolation("ssim: image dimensions differ");
  require(a.pixels.size() == a.channels * a.height * a.width && b.pixels.size() == a.pixels.size(),
          "ssim: pixel buffer size mismatch");
  require(all_finite(a.pixels) && all_finite(b.pixels), "ssim: non-finite pixel");

  auto clamp_copy = [&](const Image& im, const char* name) {
    Image out = im;
    bool clamped = false;
    for (double& p : out.pixels) {
      const double c = std::clamp(p, 0.0, 1.0);
      clamped |= (c != p);
      p = c;
    }
    if (clamped && diag) diag->warn(std::string("ssim: pixels of image ") + name + " clamped to [0,1]");
    return out;
  };
  const Image x = clamp_copy(a, "a");
  const Image y = clamp_copy(b, "b");

  const double c1 = (prm.k1 * prm.dynamic_range) * (prm.k1 * prm.dynamic_range);
  const double c2 = (prm.k2 * prm.dynamic_range) * (prm.k2 * prm.dynamic_range);
  const std::size_t W = prm.window;

  double total = 0.0;
  if (x.height < W || x.width < W) {
    if (diag) diag->warn("ssim: image smaller than window, using global statistics");
    const double n = static_cast<double>(x.height * x.width);
    for (std::size_t c = 0; c < x.channels; ++c) {
      double ma = 0, mb = 0;
      for (std::size_t i = 0; i < x.height; ++i)
        for (std::size_t j = 0; j < x.width; ++j) ma += x.at(c, i, j), mb += y.at(c, i, j);
      ma /= n, mb /= n;
      double va = 0, vb = 0, cv = 0;
      for (std::size_t i = 0; i < x.height; ++i)
        for (std::size_t j = 0; j < x.width; ++j) {
          const double da = x.at(c, i, j) - ma, db = y.at(c, i, j) - mb;
          va += da * da, vb += db * db, cv += da * db;
        }
      total += detail::ssim_from_moments(ma, mb, va / n, vb / n, cv / n, c1, c2);
    }
    return total / static_cast<double>(x.channels);
  }

  const auto g = detail::gaussian_window(W, prm.sigma);
  const std::size_t oh = x.height - W + 1, ow = x.width - W + 1;
  for (std::size_t c = 0; c < x.channels; ++c) {
    double channel_sum = 0.0;
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (std::size_t u = 0; u < W; ++u)
          for (std::size_t v = 0; v < W; ++v) {
            const double w = g[u] * g[v];
            const double pa = x.at(c, i + u, j + v), pb = y.at(c, i + u, j + v);
            ma += w * pa, mb += w * pb;
            saa += w * pa * pa, sbb += w * pb * pb, sab += w * pa * pb;
          }
        channel_sum += detail::ssim_from_moments(ma, mb, saa - ma * ma, sbb - mb * mb, sab - ma * mb, c1, c2);
      }
    total += channel_sum / static_cast<double>(oh * ow);
  }
  return total / static_cast<double>(x.channels);
}

struct SsimStats {
  double mean = 0.0;
  double std = 0.0;  // population
  double percentage = 0.0;
  std::size_t count = 0;
};

/// Mean, population std, and 100·mean/baseline_mean.
inline SsimStats ssim_stats(std::span<const double> values, double baseline_mean) {
  require(!values.empty(), "ssim_stats: no values");
  require(baseline_mean > 0.0, "ssim_stats: baseline mean must be positive");
  SsimStats s;
  s.count = values.size();
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  for (double v : values) s.std += (v - s.mean) * (v - s.mean);
  s.std = std::sqrt(s.std / static_cast<double>(values.size()));
  s.percentage = 100.0 * s.mean / baseline_mean;
  return s;
}

struct AlignmentReport {
  double cosine = 0.0;
  std::vector<double> frobenius_error;  // per tensor, flatten order
  double euclidean_error = 0.0;
  double discarded_energy = 0.0;        // 1 − (|ĝ|/|g|)²
};

/// Compares a true gradient with its observed (compressed-then-decompressed) version.
inline AlignmentReport gradient_alignment_report(std::span<const double> g, std::span<const double> g_hat,
                                                 std::span<const TensorShape> shapes = {}) {
  require(g.size() == g_hat.size(), "gradient_alignment_report: dimension mismatch");
  const double ng = norm(g);
  if (ng == 0.0) throw UndefinedSimilarity("gradient_alignment_report: true gradient is zero");
  AlignmentReport r;
  r.cosine = cosine_similarity(g, g_hat);
  const Vector diff = subtract(g, g_hat);
  r.euclidean_error = norm(diff);
  const double ratio = norm(g_hat) / ng;
  r.discarded_energy = 1.0 - ratio * ratio;
  std::size_t pos = 0;
  for (const auto& s : shapes) {
    require(pos + s.size() <= diff.size(), "gradient_alignment_report: shapes exceed dimension");
    r.frobenius_error.push_back(norm(std::span<const double>(diff).subspan(pos, s.size())));
    pos += s.size();
  }
  return r;
}

// ---------------------------------------------------------------------------
// Image files: binary PGM (1 channel) / PPM (3 channels), 8-bit.

inline std::vector<std::uint8_t> encode_netpbm(const Image& im) {
  require(im.channels == 1 || im.channels == 3, "netpbm: only 1- or 3-channel images");
  const std::string header = std::string(im.channels == 1 ? "P5" : "P6") + "\n" + std::to_string(im.width) + " " +
                             std::to_string(im.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  for (std::size_t i = 0; i < im.height; ++i)
    for (std::size_t j = 0; j < im.width; ++j)
      for (std::size_t c = 0; c < im.channels; ++c)
        out.push_back(static_cast<std::uint8_t>(std::lround(std::clamp(im.at(c, i, j), 0.0, 1.0) * 255.0)));
  return out;
}

inline void write_netpbm(const std::string& path, const Image& im) { io::write_file(path, encode_netpbm(im)); }

}  // namespace gradshield
